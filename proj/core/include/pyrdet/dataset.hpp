#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pyrdet/box.hpp"
#include "pyrdet/tensor.hpp"

namespace pyrdet {

// Streams of the counter RNG reserved for dataset generation.
inline constexpr std::uint64_t kNoiseStream = 0;
inline constexpr std::uint64_t kObjectStream = 1;

inline constexpr int kNumShapeClasses = 3;  // circle, square, triangle
inline constexpr const char* kShapeNames[kNumShapeClasses] = {"circle", "square",
                                                              "triangle"};

// Size buckets by ground-truth box pixel area: <=100, <=576, else.
inline constexpr int kNumBuckets = 3;
inline constexpr const char* kBucketNames[kNumBuckets] = {"small", "medium", "large"};
int bucket_for_area(int area_px);

struct SceneSpec {
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 4;
  double noise_amplitude = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GtObject {
  int class_id = 0;  // index into kShapeNames
  int bucket = 0;    // index into kBucketNames
  // Tight pixel bounds of the rendered shape; x1/y1 exclusive.
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  Box box(int image_size) const {
    const double s = image_size;
    return Box{x0 / s, y0 / s, x1 / s, y1 / s};
  }
};

struct Sample {
  Tensor<float> image;  // 1 x size x size, values in [0,1]
  std::vector<GtObject> objects;
  bool placement_truncated = false;  // an object was dropped after 100 rejections
};

// Pure function of (spec.seed, index): regeneration is bitwise identical.
Sample generate_sample(const SceneSpec& spec, std::int64_t index);

struct Dataset {
  SceneSpec spec;
  std::vector<Sample> train;  // indices [0, n_train)
  std::vector<Sample> val;    // indices [n_train, n_train + n_val)
};

Dataset generate_dataset(const SceneSpec& spec, int n_train = 2000, int n_val = 500);

// Horizontal flip of image and boxes (the only supported augmentation).
Sample hflip_sample(const Sample& sample);

// Directory layout: manifest.txt (version, counts, spec echo), images.bin
// (raw little-endian float32, train split then val), annotations.txt
// (line-oriented, integer pixel boxes). All three round-trip byte-exactly.
void save_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);

}  // namespace pyrdet
