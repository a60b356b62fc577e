#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "pyrdet/dataset.hpp"

using namespace pyrdet;

namespace {

bool same_objects(const std::vector<GtObject>& a, const std::vector<GtObject>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].class_id != b[i].class_id || a[i].bucket != b[i].bucket ||
        a[i].x0 != b[i].x0 || a[i].y0 != b[i].y0 || a[i].x1 != b[i].x1 ||
        a[i].y1 != b[i].y1)
      return false;
  return true;
}

bool same_image(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), sizeof(float) * a.size()) == 0;
}

}  // namespace

TEST_SUITE_BEGIN("dataset");

TEST_CASE("regeneration is bitwise identical") {
  SceneSpec spec;
  spec.seed = 42;
  for (std::int64_t index : {0, 7, 123}) {
    auto a = generate_sample(spec, index);
    auto b = generate_sample(spec, index);
    CHECK(same_image(a.image, b.image));
    CHECK(same_objects(a.objects, b.objects));
    CHECK(a.placement_truncated == b.placement_truncated);
  }
  auto a = generate_sample(spec, 0);
  auto c = generate_sample(spec, 1);
  CHECK_FALSE(same_image(a.image, c.image));
  SceneSpec other = spec;
  other.seed = 43;
  CHECK_FALSE(same_image(a.image, generate_sample(other, 0).image));
}

TEST_CASE("boxes equal the drawn extent when noise is off") {
  SceneSpec spec;
  spec.seed = 5;
  spec.noise_amplitude = 0.0;
  spec.min_objects = spec.max_objects = 1;
  bool seen_class[kNumShapeClasses] = {false, false, false};
  for (std::int64_t index = 0; index < 40; ++index) {
    auto s = generate_sample(spec, index);
    if (s.objects.empty()) continue;
    REQUIRE(s.objects.size() == 1);
    const GtObject& g = s.objects[0];
    seen_class[g.class_id] = true;
    int x0 = spec.image_size, y0 = spec.image_size, x1 = 0, y1 = 0;
    const float* img = s.image.data().data();
    for (int y = 0; y < spec.image_size; ++y)
      for (int x = 0; x < spec.image_size; ++x)
        if (img[y * spec.image_size + x] > 0.0f) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x + 1);
          y1 = std::max(y1, y + 1);
        }
    CHECK(g.x0 == x0);
    CHECK(g.y0 == y0);
    CHECK(g.x1 == x1);
    CHECK(g.y1 == y1);
    // Tight box is exactly the sampled side on both axes.
    CHECK(g.x1 - g.x0 == g.y1 - g.y0);
  }
  CHECK(seen_class[0]);
  CHECK(seen_class[1]);
  CHECK(seen_class[2]);
}

TEST_CASE("objects stay inside, respect IoU < 0.3, and match the area rule") {
  SceneSpec spec;
  spec.seed = 9;
  for (std::int64_t index = 0; index < 200; ++index) {
    auto s = generate_sample(spec, index);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      const GtObject& g = s.objects[i];
      CHECK(g.x0 >= 0);
      CHECK(g.y0 >= 0);
      CHECK(g.x1 <= spec.image_size);
      CHECK(g.y1 <= spec.image_size);
      CHECK(g.x1 > g.x0);
      const int side = g.x1 - g.x0;
      CHECK(side >= 4);
      CHECK(side <= 48);
      CHECK(g.bucket == bucket_for_area((g.x1 - g.x0) * (g.y1 - g.y0)));
      for (std::size_t j = i + 1; j < s.objects.size(); ++j)
        CHECK(iou(g.box(spec.image_size), s.objects[j].box(spec.image_size)) < 0.3);
    }
  }
}

TEST_CASE("class and bucket distributions are healthy over 3000 samples") {
  SceneSpec spec;
  spec.seed = 2024;
  std::int64_t class_count[kNumShapeClasses] = {0, 0, 0};
  std::int64_t bucket_count[kNumBuckets] = {0, 0, 0};
  std::int64_t total = 0;
  for (std::int64_t index = 0; index < 3000; ++index) {
    auto s = generate_sample(spec, index);
    for (const GtObject& g : s.objects) {
      ++class_count[g.class_id];
      ++bucket_count[g.bucket];
      ++total;
    }
  }
  REQUIRE(total > 3000);
  for (int c = 0; c < kNumShapeClasses; ++c) {
    const double share = static_cast<double>(class_count[c]) / total;
    CHECK(share > 1.0 / 3 - 0.05);
    CHECK(share < 1.0 / 3 + 0.05);
  }
  for (int b = 0; b < kNumBuckets; ++b)
    CHECK(static_cast<double>(bucket_count[b]) / total >= 0.25);
}

TEST_CASE("placement failure drops the object and flags the sample") {
  SceneSpec spec;
  spec.image_size = 16;  // the large bucket cannot fit at all
  spec.seed = 3;
  spec.min_objects = spec.max_objects = 1;
  auto s = generate_sample(spec, 2);  // slot bucket (2 + 0) % 3 = large
  CHECK(s.placement_truncated);
  CHECK(s.objects.empty());
  auto ok = generate_sample(spec, 0);  // small slot fits fine
  CHECK_FALSE(ok.placement_truncated);
  CHECK(ok.objects.size() == 1);
}

TEST_CASE("dataset splits are disjoint index ranges") {
  SceneSpec spec;
  spec.seed = 11;
  auto ds = generate_dataset(spec, 6, 3);
  CHECK(ds.train.size() == 6);
  CHECK(ds.val.size() == 3);
  CHECK(same_image(ds.val[0].image, generate_sample(spec, 6).image));
  CHECK(same_image(ds.val[2].image, generate_sample(spec, 8).image));
  CHECK_FALSE(same_image(ds.val[0].image, ds.train[0].image));
}

TEST_CASE("horizontal flip mirrors image and boxes and is an involution") {
  SceneSpec spec;
  spec.seed = 21;
  auto s = generate_sample(spec, 4);
  auto f = hflip_sample(s);
  auto ff = hflip_sample(f);
  CHECK(same_image(s.image, ff.image));
  CHECK(same_objects(s.objects, ff.objects));
  REQUIRE(f.objects.size() == s.objects.size());
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    CHECK(f.objects[i].x0 == spec.image_size - s.objects[i].x1);
    CHECK(f.objects[i].x1 == spec.image_size - s.objects[i].x0);
    CHECK(f.objects[i].y0 == s.objects[i].y0);
    CHECK(f.objects[i].class_id == s.objects[i].class_id);
  }
}

TEST_CASE("save and load round trip bytes exactly") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "pyrdet_dataset_test";
  fs::remove_all(dir);
  SceneSpec spec;
  spec.seed = 77;
  spec.noise_amplitude = 0.125;
  auto ds = generate_dataset(spec, 5, 2);
  save_dataset(dir.string(), ds);
  auto back = load_dataset(dir.string());
  CHECK(back.spec.seed == spec.seed);
  CHECK(back.spec.noise_amplitude == spec.noise_amplitude);
  REQUIRE(back.train.size() == 5);
  REQUIRE(back.val.size() == 2);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(same_image(back.train[i].image, ds.train[i].image));
    CHECK(same_objects(back.train[i].objects, ds.train[i].objects));
  }
  CHECK(same_image(back.val[1].image, ds.val[1].image));

  // Saving the loaded dataset reproduces identical files.
  const auto dir2 = fs::temp_directory_path() / "pyrdet_dataset_test2";
  fs::remove_all(dir2);
  save_dataset(dir2.string(), back);
  for (const char* name : {"manifest.txt", "images.bin", "annotations.txt"}) {
    std::ifstream a(dir / name, std::ios::binary), b(dir2 / name, std::ios::binary);
    std::string abytes((std::istreambuf_iterator<char>(a)), {});
    std::string bbytes((std::istreambuf_iterator<char>(b)), {});
    CHECK(abytes == bbytes);
  }

  // Truncated images.bin is a clean error.
  fs::resize_file(dir / "images.bin", 100);
  CHECK_THROWS_AS(load_dataset(dir.string()), std::runtime_error);

  // Foreign magic is rejected.
  std::ofstream(dir2 / "manifest.txt") << "other-format 9\n";
  CHECK_THROWS_AS(load_dataset(dir2.string()), std::runtime_error);

  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("spec validation rejects bad fields") {
  SceneSpec spec;
  spec.image_size = 4;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SceneSpec{};
  spec.min_objects = 3;
  spec.max_objects = 2;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SceneSpec{};
  spec.noise_amplitude = 1.5;
  CHECK_THROWS_AS(generate_sample(spec, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_sample(SceneSpec{}, -1), std::invalid_argument);
}

TEST_SUITE_END();
