#include "pyrdet/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace pyrdet {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are defined little-endian");

constexpr const char* kMagic = "pyrdet-checkpoint 1";

template <typename T>
const char* dtype_name();
template <>
const char* dtype_name<float>() {
  return "float32";
}
template <>
const char* dtype_name<double>() {
  return "float64";
}

std::size_t dtype_bytes(const std::string& dtype) { return dtype == "float32" ? 4 : 8; }

[[noreturn]] void fail(const std::string& what) {
  throw std::runtime_error("checkpoint: " + what);
}

struct RawFile {
  std::string bytes;
  CheckpointInfo info;
  std::size_t payload_begin = 0;
};

RawFile read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '" + path + "'");
  RawFile raw;
  raw.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  bool have_magic = false;
  std::int64_t expect_arrays = -1;
  while (pos < raw.bytes.size()) {
    const std::size_t eol = raw.bytes.find('\n', pos);
    if (eol == std::string::npos) fail("unterminated manifest in '" + path + "'");
    const std::string line = raw.bytes.substr(pos, eol - pos);
    pos = eol + 1;
    if (!have_magic) {
      if (line != kMagic) fail("unrecognized magic in '" + path + "'");
      have_magic = true;
      continue;
    }
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string key, value;
      ls >> key;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      if (key.empty()) fail("malformed meta line in '" + path + "'");
      raw.info.meta.emplace_back(key, value);
    } else if (tag == "arrays") {
      ls >> expect_arrays;
      if (!ls || expect_arrays < 0) fail("malformed arrays line in '" + path + "'");
    } else if (tag == "array") {
      ArrayInfo a;
      std::size_t ndim = 0;
      ls >> a.name >> a.dtype >> ndim;
      if (!ls || (a.dtype != "float32" && a.dtype != "float64"))
        fail("malformed array line in '" + path + "'");
      a.shape.resize(ndim);
      for (auto& d : a.shape) ls >> d;
      if (!ls) fail("malformed array shape for '" + a.name + "'");
      raw.info.arrays.push_back(std::move(a));
    } else if (tag == "data") {
      if (expect_arrays != static_cast<std::int64_t>(raw.info.arrays.size()))
        fail("array count mismatch in '" + path + "'");
      std::size_t want = 0;
      for (const auto& a : raw.info.arrays)
        want += static_cast<std::size_t>(numel(a.shape)) * dtype_bytes(a.dtype);
      if (raw.bytes.size() - pos != want) fail("payload size mismatch in '" + path + "'");
      raw.payload_begin = pos;
      return raw;
    } else {
      fail("unknown manifest line '" + line + "' in '" + path + "'");
    }
  }
  fail("missing data section in '" + path + "'");
}

}  // namespace

std::string meta_value(const MetaList& meta, const std::string& key) {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  return {};
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamList<T>& params,
                     const MetaList& meta) {
  std::ostringstream head;
  head << kMagic << "\n";
  for (const auto& [k, v] : meta) {
    if (k.empty() || k.find(' ') != std::string::npos) fail("bad meta key '" + k + "'");
    head << "meta " << k << " " << v << "\n";
  }
  head << "arrays " << params.size() << "\n";
  for (const auto& p : params) {
    if (p.name.empty() || p.name.find(' ') != std::string::npos)
      fail("bad array name '" + p.name + "'");
    head << "array " << p.name << " " << dtype_name<T>() << " " << p.tensor.ndim();
    for (std::size_t i = 0; i < p.tensor.ndim(); ++i) head << " " << p.tensor.dim(i);
    head << "\n";
  }
  head << "data\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot open '" + path + "' for writing");
  const std::string h = head.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& p : params) {
    const auto values = p.tensor.data();
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  }
  if (!out) fail("write failed for '" + path + "'");
}

template <typename T>
MetaList load_checkpoint(const std::string& path, ParamList<T>& params) {
  RawFile raw = read_raw(path);

  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::size_t> offset(raw.info.arrays.size() + 1, raw.payload_begin);
  for (std::size_t i = 0; i < raw.info.arrays.size(); ++i) {
    const ArrayInfo& a = raw.info.arrays[i];
    if (!index.emplace(a.name, i).second)
      fail("duplicate array '" + a.name + "' in '" + path + "'");
    offset[i + 1] =
        offset[i] + static_cast<std::size_t>(numel(a.shape)) * dtype_bytes(a.dtype);
  }
  if (raw.info.arrays.size() != params.size())
    fail("'" + path + "' holds " + std::to_string(raw.info.arrays.size()) +
         " arrays, the model expects " + std::to_string(params.size()));

  for (auto& p : params) {
    const auto it = index.find(p.name);
    if (it == index.end()) fail("missing array '" + p.name + "' in '" + path + "'");
    const ArrayInfo& a = raw.info.arrays[it->second];
    if (a.dtype != dtype_name<T>())
      fail("dtype mismatch for '" + p.name + "' in '" + path + "'");
    if (a.shape != p.tensor.shape())
      fail("shape mismatch for '" + p.name + "' in '" + path + "'");
    auto dst = p.tensor.raw();
    std::memcpy(dst.data(), raw.bytes.data() + offset[it->second], dst.size_bytes());
  }
  return raw.info.meta;
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  return read_raw(path).info;
}

template void save_checkpoint<float>(const std::string&, const ParamList<float>&,
                                     const MetaList&);
template void save_checkpoint<double>(const std::string&, const ParamList<double>&,
                                      const MetaList&);
template MetaList load_checkpoint<float>(const std::string&, ParamList<float>&);
template MetaList load_checkpoint<double>(const std::string&, ParamList<double>&);

}  // namespace pyrdet
