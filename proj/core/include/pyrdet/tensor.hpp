#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pyrdet {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  std::int64_t node_id = -1;  // index of the producing tape entry, -1 for leaves
};

}  // namespace detail

template <typename T>
class Tape;

// Dense N-d array handle with shared storage. Copies alias the same data;
// use clone() for a deep copy. Gradients accumulate into the storage when a
// recording tape replays backward.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data);
  static Tensor scalar(T value);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  std::int64_t dim(std::size_t i) const { return st_->shape[i]; }
  std::size_t ndim() const { return st_->shape.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(st_->value.size()); }

  std::span<const T> data() const { return st_->value; }
  // Mutable view of the values. Intended for leaves (parameter init, optimizer
  // steps); mutating an op output invalidates any recorded history through it.
  std::span<T> raw() { return st_->value; }

  // Value of a single-element tensor; rejects non-scalars and non-finite values.
  T item() const;

  bool requires_grad() const { return st_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    st_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return st_ && !st_->grad.empty(); }
  std::span<const T> grad() const;
  void zero_grad() { st_->grad.clear(); }
  // Lazily allocates a zero gradient buffer and returns it for accumulation.
  std::span<T> grad_buffer();

  std::int64_t node_id() const { return st_->node_id; }

  // Deep copy of the values only: result is a leaf with no grad and no history.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return st_ == other.st_; }

  // Throws if any value is NaN or Inf; `what` names the producing operation.
  void check_finite(const char* what) const;

 private:
  std::shared_ptr<detail::Storage<T>> st_;
  friend class Tape<T>;
};

// Reverse-mode tape. Constructing a Tape makes it the active recorder for the
// current thread; operators executed while it is active append entries when
// any input requires a gradient. Entries are in execution order, so replaying
// them in reverse visits every node after all of its consumers.
template <typename T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
  // gradients into every reachable tensor that requires them. `loss` must be
  // a scalar recorded on this tape; calling backward twice is an error.
  void backward(const Tensor<T>& loss);

  std::size_t num_entries() const { return entries_.size(); }
  bool backward_done() const { return backward_done_; }
  // Number of backward rules invoked by the last backward() call.
  std::size_t nodes_visited() const { return nodes_visited_; }

  // Used by operator implementations: registers a recorded operation. The
  // backward function reads output.grad() and accumulates into the inputs.
  void record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
              std::function<void()> backward_fn);

 private:
  struct Entry {
    const char* op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
  bool backward_done_ = false;
  std::size_t nodes_visited_ = 0;
};

// When enabled (the default), every operator validates that its output is
// finite. The training loop disables this in the hot path and re-checks the
// loss each step instead.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace pyrdet
