#include "pyrdet/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace pyrdet {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
std::atomic<bool> g_finite_checks{true};
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.st_ = std::make_shared<detail::Storage<T>>();
  t.st_->shape = std::move(shape);
  t.st_->value.assign(static_cast<std::size_t>(numel(t.st_->shape)), T(0));
  t.st_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.st_->value) v = value;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data) {
  if (numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("Tensor::from_data: " + shape_str(shape) + " needs " +
                                std::to_string(numel(shape)) + " values, got " +
                                std::to_string(data.size()));
  Tensor t;
  t.st_ = std::make_shared<detail::Storage<T>>();
  t.st_->shape = std::move(shape);
  t.st_->value = std::move(data);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_data({1}, {value});
}

template <typename T>
T Tensor<T>::item() const {
  if (!st_ || st_->value.size() != 1)
    throw std::invalid_argument("Tensor::item: tensor is not a scalar");
  T v = st_->value[0];
  if (!std::isfinite(static_cast<double>(v)))
    throw std::runtime_error("Tensor::item: non-finite value");
  return v;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw std::runtime_error("Tensor::grad: no gradient present");
  return st_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() {
  if (st_->grad.empty()) st_->grad.assign(st_->value.size(), T(0));
  return st_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t;
  t.st_ = std::make_shared<detail::Storage<T>>();
  t.st_->shape = st_->shape;
  t.st_->value = st_->value;
  return t;
}

template <typename T>
void Tensor<T>::check_finite(const char* what) const {
  for (const T& v : st_->value) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error(std::string(what) + ": non-finite value in output " +
                               shape_str(st_->shape));
  }
}

namespace {
template <typename T>
Tape<T>*& current_tape_slot() {
  static thread_local Tape<T>* current = nullptr;
  return current;
}
}  // namespace

template <typename T>
Tape<T>::Tape() {
  auto& slot = current_tape_slot<T>();
  if (slot != nullptr)
    throw std::logic_error("Tape: a tape is already recording on this thread");
  slot = this;
}

template <typename T>
Tape<T>::~Tape() {
  current_tape_slot<T>() = nullptr;
}

template <typename T>
Tape<T>* Tape<T>::current() {
  return current_tape_slot<T>();
}

template <typename T>
void Tape<T>::record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
                     std::function<void()> backward_fn) {
  output.st_->requires_grad = true;
  output.st_->node_id = static_cast<std::int64_t>(entries_.size());
  entries_.push_back(Entry{op, std::move(inputs), output, std::move(backward_fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (backward_done_)
    throw std::logic_error("Tape::backward: already called on this tape");
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("Tape::backward: loss must be a scalar");
  const std::int64_t id = loss.node_id();
  if (id < 0 || id >= static_cast<std::int64_t>(entries_.size()) ||
      !entries_[static_cast<std::size_t>(id)].output.same_storage(loss))
    throw std::invalid_argument("Tape::backward: loss was not recorded on this tape");
  loss.item();  // validates finiteness before propagating

  backward_done_ = true;
  nodes_visited_ = 0;
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] = T(1);
  for (std::size_t i = entries_.size(); i-- > 0;) {
    Entry& e = entries_[i];
    if (!e.output.has_grad()) continue;  // not reachable from the loss
    e.backward_fn();
    ++nodes_visited_;
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace pyrdet
