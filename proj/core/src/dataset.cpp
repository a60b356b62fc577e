#include "pyrdet/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pyrdet/rng.hpp"

namespace pyrdet {

namespace {

namespace fs = std::filesystem;

constexpr int kBucketLo[kNumBuckets] = {4, 11, 25};
constexpr int kBucketHi[kNumBuckets] = {10, 24, 48};
constexpr int kMaxRejections = 100;

std::uint64_t sample_seed(std::uint64_t seed, std::int64_t index) {
  return CounterRng::mix(seed + (static_cast<std::uint64_t>(index) + 1) * CounterRng::kGamma);
}

struct PixelBox {
  int x0, y0, x1, y1;  // x1/y1 exclusive
};

int inter_area(const PixelBox& a, const PixelBox& b) {
  const int ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const int iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return ix > 0 && iy > 0 ? ix * iy : 0;
}

// Placement constraint: IoU < 0.3, kept in integers as 10*inter < 3*union.
bool overlap_ok(const PixelBox& cand, const std::vector<PixelBox>& placed) {
  const int ca = (cand.x1 - cand.x0) * (cand.y1 - cand.y0);
  for (const PixelBox& p : placed) {
    const int inter = inter_area(cand, p);
    const int uni = ca + (p.x1 - p.x0) * (p.y1 - p.y0) - inter;
    if (10 * inter >= 3 * uni) return false;
  }
  return true;
}

// Rasterizers fill a side-s shape whose tight pixel box is exactly s x s.
void draw_shape(std::vector<std::uint8_t>& mask, int size, int cls, const PixelBox& at) {
  const int s = at.x1 - at.x0;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      bool fill = true;
      if (cls == 0) {
        // Disk in doubled coordinates around the box center.
        const int dx = 2 * x - (s - 1), dy = 2 * y - (s - 1);
        fill = dx * dx + dy * dy <= (s - 1) * (s - 1) + 1;
      } else if (cls == 2) {
        fill = x + y >= s - 1;  // right wedge, hypotenuse up-left
      }
      if (fill) mask[static_cast<std::size_t>(at.y0 + y) * size + at.x0 + x] = 1;
    }
  }
}

PixelBox measure(const std::vector<std::uint8_t>& mask, int size) {
  PixelBox b{size, size, 0, 0};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (mask[static_cast<std::size_t>(y) * size + x]) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
  return b;
}

[[noreturn]] void io_fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

int bucket_for_area(int area_px) {
  if (area_px <= 100) return 0;
  if (area_px <= 576) return 1;
  return 2;
}

void SceneSpec::validate() const {
  if (image_size < 8) throw std::invalid_argument("SceneSpec: image_size must be >= 8");
  if (min_objects < 0 || max_objects < min_objects)
    throw std::invalid_argument("SceneSpec: need 0 <= min_objects <= max_objects");
  if (!(noise_amplitude >= 0.0) || noise_amplitude >= 1.0)
    throw std::invalid_argument("SceneSpec: noise_amplitude must be in [0,1)");
}

Sample generate_sample(const SceneSpec& spec, std::int64_t index) {
  spec.validate();
  if (index < 0) throw std::invalid_argument("generate_sample: negative index");
  const int size = spec.image_size;
  const std::uint64_t derived = sample_seed(spec.seed, index);
  CounterRng noise_rng(derived, kNoiseStream);
  CounterRng obj_rng(derived, kObjectStream);

  Sample sample;
  sample.image = Tensor<float>::zeros({1, size, size});
  float* img = sample.image.raw().data();
  // The noise floor varies per image (0.5x to 1.5x the configured amplitude),
  // so corruption level is a scene property rather than a dataset constant.
  const float amp = static_cast<float>(spec.noise_amplitude) *
                    (0.5f + noise_rng.next_float());
  for (int i = 0; i < size * size; ++i) img[i] = noise_rng.next_float() * amp;

  const int want = obj_rng.uniform_int(spec.min_objects, spec.max_objects);
  // Stratified bucket rotation, biggest placed first so crowding rejects the
  // large bucket no more often than the others.
  std::vector<int> buckets;
  for (int j = 0; j < want; ++j) buckets.push_back(static_cast<int>((index + j) % kNumBuckets));
  std::sort(buckets.rbegin(), buckets.rend());
  std::vector<PixelBox> placed;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(size) * size);
  for (int j = 0; j < want; ++j) {
    const int cls = obj_rng.uniform_int(0, kNumShapeClasses - 1);
    const int bucket = buckets[j];
    const int lo = kBucketLo[bucket];
    const int hi = std::min(kBucketHi[bucket], size);
    bool ok = false;
    PixelBox at{0, 0, 0, 0};
    if (lo <= hi) {
      for (int attempt = 0; attempt < kMaxRejections && !ok; ++attempt) {
        const int s = obj_rng.uniform_int(lo, hi);
        const int x0 = obj_rng.uniform_int(0, size - s);
        const int y0 = obj_rng.uniform_int(0, size - s);
        at = PixelBox{x0, y0, x0 + s, y0 + s};
        ok = overlap_ok(at, placed);
      }
    }
    if (!ok) {
      sample.placement_truncated = true;
      continue;
    }
    placed.push_back(at);
    const float intensity = 0.6f + 0.4f * obj_rng.next_float();
    std::fill(mask.begin(), mask.end(), std::uint8_t(0));
    draw_shape(mask, size, cls, at);
    const PixelBox tight = measure(mask, size);  // render-then-measure
    for (int i = 0; i < size * size; ++i)
      if (mask[i]) img[i] = std::max(img[i], intensity);
    GtObject gt;
    gt.class_id = cls;
    gt.x0 = tight.x0;
    gt.y0 = tight.y0;
    gt.x1 = tight.x1;
    gt.y1 = tight.y1;
    gt.bucket = bucket_for_area((tight.x1 - tight.x0) * (tight.y1 - tight.y0));
    sample.objects.push_back(gt);
  }
  return sample;
}

Dataset generate_dataset(const SceneSpec& spec, int n_train, int n_val) {
  spec.validate();
  if (n_train < 0 || n_val < 0)
    throw std::invalid_argument("generate_dataset: negative split size");
  Dataset out;
  out.spec = spec;
  out.train.reserve(n_train);
  out.val.reserve(n_val);
  for (int i = 0; i < n_train; ++i) out.train.push_back(generate_sample(spec, i));
  for (int i = 0; i < n_val; ++i)
    out.val.push_back(generate_sample(spec, static_cast<std::int64_t>(n_train) + i));
  return out;
}

Sample hflip_sample(const Sample& sample) {
  Sample out;
  out.placement_truncated = sample.placement_truncated;
  const int size = static_cast<int>(sample.image.dim(2));
  out.image = Tensor<float>::zeros(sample.image.shape());
  const float* src = sample.image.data().data();
  float* dst = out.image.raw().data();
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      dst[static_cast<std::size_t>(y) * size + x] =
          src[static_cast<std::size_t>(y) * size + (size - 1 - x)];
  for (GtObject gt : sample.objects) {
    const int x0 = gt.x0;
    gt.x0 = size - gt.x1;
    gt.x1 = size - x0;
    out.objects.push_back(gt);
  }
  return out;
}

namespace {

void write_annotations(std::ostream& out, const char* split,
                       const std::vector<Sample>& samples) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    out << "sample " << split << ' ' << i << ' ' << s.objects.size() << ' '
        << (s.placement_truncated ? 1 : 0) << '\n';
    for (const GtObject& g : s.objects)
      out << "object " << g.class_id << ' ' << g.bucket << ' ' << g.x0 << ' ' << g.y0
          << ' ' << g.x1 << ' ' << g.y1 << '\n';
  }
}

void write_images(std::ostream& out, const std::vector<Sample>& samples) {
  for (const Sample& s : samples) {
    const auto span = s.image.data();
    out.write(reinterpret_cast<const char*>(span.data()),
              static_cast<std::streamsize>(span.size() * sizeof(float)));
  }
}

std::vector<Sample> read_split(std::ifstream& images, std::ifstream& ann,
                               const char* split, int count, int size) {
  std::vector<Sample> samples;
  const std::size_t pixels = static_cast<std::size_t>(size) * size;
  std::string line;
  for (int i = 0; i < count; ++i) {
    Sample s;
    std::vector<float> buf(pixels);
    if (!images.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(pixels * sizeof(float))))
      io_fail("load_dataset: images.bin truncated");
    s.image = Tensor<float>::from_data({1, size, size}, std::move(buf));
    if (!std::getline(ann, line)) io_fail("load_dataset: annotations.txt truncated");
    std::istringstream header(line);
    std::string tag, got_split;
    std::size_t got_index, num_objects;
    int truncated;
    if (!(header >> tag >> got_split >> got_index >> num_objects >> truncated) ||
        tag != "sample" || got_split != split || got_index != static_cast<std::size_t>(i))
      io_fail("load_dataset: unexpected annotation header: " + line);
    s.placement_truncated = truncated != 0;
    for (std::size_t j = 0; j < num_objects; ++j) {
      if (!std::getline(ann, line)) io_fail("load_dataset: annotations.txt truncated");
      std::istringstream obj(line);
      GtObject g;
      if (!(obj >> tag >> g.class_id >> g.bucket >> g.x0 >> g.y0 >> g.x1 >> g.y1) ||
          tag != "object")
        io_fail("load_dataset: unexpected annotation line: " + line);
      s.objects.push_back(g);
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& dataset) {
  dataset.spec.validate();
  fs::create_directories(dir);
  {
    std::ofstream manifest(fs::path(dir) / "manifest.txt");
    if (!manifest) io_fail("save_dataset: cannot write manifest in " + dir);
    char amp[64];
    std::snprintf(amp, sizeof(amp), "%.17g", dataset.spec.noise_amplitude);
    manifest << "pyrdet-dataset 1\n"
             << "image_size " << dataset.spec.image_size << '\n'
             << "channels 1\n"
             << "classes " << kNumShapeClasses << '\n'
             << "n_train " << dataset.train.size() << '\n'
             << "n_val " << dataset.val.size() << '\n'
             << "seed " << dataset.spec.seed << '\n'
             << "min_objects " << dataset.spec.min_objects << '\n'
             << "max_objects " << dataset.spec.max_objects << '\n'
             << "noise_amplitude " << amp << '\n';
    if (!manifest) io_fail("save_dataset: manifest write failed");
  }
  {
    std::ofstream images(fs::path(dir) / "images.bin", std::ios::binary);
    if (!images) io_fail("save_dataset: cannot write images.bin in " + dir);
    write_images(images, dataset.train);
    write_images(images, dataset.val);
    if (!images) io_fail("save_dataset: images.bin write failed");
  }
  {
    std::ofstream ann(fs::path(dir) / "annotations.txt");
    if (!ann) io_fail("save_dataset: cannot write annotations.txt in " + dir);
    write_annotations(ann, "train", dataset.train);
    write_annotations(ann, "val", dataset.val);
    if (!ann) io_fail("save_dataset: annotations.txt write failed");
  }
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  if (!manifest) io_fail("load_dataset: missing manifest.txt in " + dir);
  std::string magic;
  int version = 0;
  if (!(manifest >> magic >> version) || magic != "pyrdet-dataset")
    io_fail("load_dataset: not a pyrdet dataset: " + dir);
  if (version != 1)
    io_fail("load_dataset: unsupported dataset version " + std::to_string(version));

  Dataset out;
  int channels = 0, classes = 0, n_train = -1, n_val = -1;
  std::string key;
  while (manifest >> key) {
    if (key == "image_size") manifest >> out.spec.image_size;
    else if (key == "channels") manifest >> channels;
    else if (key == "classes") manifest >> classes;
    else if (key == "n_train") manifest >> n_train;
    else if (key == "n_val") manifest >> n_val;
    else if (key == "seed") manifest >> out.spec.seed;
    else if (key == "min_objects") manifest >> out.spec.min_objects;
    else if (key == "max_objects") manifest >> out.spec.max_objects;
    else if (key == "noise_amplitude") manifest >> out.spec.noise_amplitude;
    else io_fail("load_dataset: unknown manifest key: " + key);
    if (!manifest) io_fail("load_dataset: malformed manifest value for " + key);
  }
  if (channels != 1 || classes != kNumShapeClasses || n_train < 0 || n_val < 0)
    io_fail("load_dataset: incomplete manifest in " + dir);
  out.spec.validate();

  const auto images_path = fs::path(dir) / "images.bin";
  const std::uintmax_t expect_bytes =
      static_cast<std::uintmax_t>(n_train + n_val) * out.spec.image_size *
      out.spec.image_size * sizeof(float);
  std::error_code ec;
  const std::uintmax_t actual = fs::file_size(images_path, ec);
  if (ec) io_fail("load_dataset: missing images.bin in " + dir);
  if (actual != expect_bytes)
    io_fail("load_dataset: images.bin holds " + std::to_string(actual) +
            " bytes, manifest expects " + std::to_string(expect_bytes));

  std::ifstream images(images_path, std::ios::binary);
  std::ifstream ann(fs::path(dir) / "annotations.txt");
  if (!images) io_fail("load_dataset: missing images.bin in " + dir);
  if (!ann) io_fail("load_dataset: missing annotations.txt in " + dir);
  out.train = read_split(images, ann, "train", n_train, out.spec.image_size);
  out.val = read_split(images, ann, "val", n_val, out.spec.image_size);
  return out;
}

}  // namespace pyrdet
