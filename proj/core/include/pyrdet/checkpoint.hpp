#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pyrdet/nn.hpp"
#include "pyrdet/tensor.hpp"

namespace pyrdet {

// Ordered key/value pairs recorded in the checkpoint manifest (variant name,
// seed, best epoch, ...). Keys are single tokens; values run to end of line.
using MetaList = std::vector<std::pair<std::string, std::string>>;

std::string meta_value(const MetaList& meta, const std::string& key);

struct ArrayInfo {
  std::string name;
  std::string dtype;  // "float32" or "float64"
  Shape shape;
};

struct CheckpointInfo {
  MetaList meta;
  std::vector<ArrayInfo> arrays;
};

// Single-file container: a text manifest (version line, meta lines, one line
// per array with name/dtype/shape) terminated by "data", followed by the raw
// array payloads little-endian in manifest order. Round trips byte-exactly.
template <typename T>
void save_checkpoint(const std::string& path, const ParamList<T>& params,
                     const MetaList& meta);

// Copies payloads into `params`, matched by name. The file must contain
// exactly the same set of names with matching dtype and shape. Returns the
// manifest metadata.
template <typename T>
MetaList load_checkpoint(const std::string& path, ParamList<T>& params);

// Manifest only; payloads are not read.
CheckpointInfo read_checkpoint_info(const std::string& path);

}  // namespace pyrdet
