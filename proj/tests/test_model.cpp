#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "pyrdet/dataset.hpp"
#include "pyrdet/model.hpp"

using namespace pyrdet;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.scene.image_size = 32;
  cfg.scene.max_objects = 2;
  cfg.backbone.num_levels = 3;
  cfg.pyramid.d = 32;
  cfg.n_train = 8;
  cfg.n_val = 4;
  cfg.batch_size = 4;
  return cfg;
}

Tensor<float> sample_batch(const ExperimentConfig& cfg, int batch) {
  const int s = cfg.scene.image_size;
  Tensor<float> images = Tensor<float>::zeros({batch, 1, s, s});
  auto dst = images.raw();
  for (int bi = 0; bi < batch; ++bi) {
    const Sample sample = generate_sample(cfg.scene_spec(), bi);
    const auto src = sample.image.data();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::int64_t>(bi) * s * s);
  }
  return images;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(),
                     a.data().size_bytes()) == 0;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("forward emits flattened maps matching the anchor grid") {
  const ExperimentConfig cfg = tiny_config();
  const auto model = DetectorModel<float>::create(cfg);

  // 3 levels at 16/8/4 cells and 3 ratios per cell.
  const int expect = (16 * 16 + 8 * 8 + 4 * 4) * 3;
  CHECK(model.anchors().num_anchors() == expect);
  CHECK(model.anchors().level_offsets.back() == expect);

  const Tensor<float> images = sample_batch(cfg, 2);
  const auto [logits, boxes] = model.forward(images);
  CHECK(logits.shape() == Shape{2, expect, 4});
  CHECK(boxes.shape() == Shape{2, expect, 4});
}

TEST_CASE("same config and seed build bitwise-identical models") {
  const ExperimentConfig cfg = tiny_config();
  const auto a = DetectorModel<float>::create(cfg);
  const auto b = DetectorModel<float>::create(cfg);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(bitwise_equal(pa[i].tensor, pb[i].tensor));
  }
  const Tensor<float> images = sample_batch(cfg, 2);
  const auto fa = a.forward(images);
  const auto fb = b.forward(images);
  CHECK(bitwise_equal(fa.first, fb.first));
  CHECK(bitwise_equal(fa.second, fb.second));
}

TEST_CASE("parameter names are unique and shared heads appear exactly once") {
  const ExperimentConfig cfg = tiny_config();
  const auto model = DetectorModel<float>::create(cfg);
  const auto params = model.parameters();
  std::set<std::string> names;
  int head_entries = 0;
  for (const auto& p : params) {
    CHECK(names.insert(p.name).second);
    if (p.name.rfind("heads.", 0) == 0) ++head_entries;
  }
  CHECK(head_entries == 4);  // cls/box kernel+bias, one shared set

  ExperimentConfig per_level = cfg;
  per_level.shared_heads = false;
  const auto model2 = DetectorModel<float>::create(per_level);
  int head_entries2 = 0;
  for (const auto& p : model2.parameters())
    if (p.name.rfind("heads.", 0) == 0) ++head_entries2;
  CHECK(head_entries2 == 4 * cfg.backbone.num_levels);
}

TEST_CASE("checkpoint restores a model's behaviour bitwise") {
  const auto dir = fs::temp_directory_path() / "pyrdet_model_ckpt";
  fs::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();

  const ExperimentConfig cfg = tiny_config();
  const auto trained = DetectorModel<float>::create(cfg);
  save_checkpoint(path, trained.parameters(), trained.checkpoint_meta());

  ExperimentConfig other = cfg;
  other.seed = 99;  // different init, same architecture
  const auto restored = DetectorModel<float>::create(other);
  const Tensor<float> images = sample_batch(cfg, 2);
  CHECK_FALSE(bitwise_equal(restored.forward(images).first, trained.forward(images).first));

  auto params = restored.parameters();
  const MetaList meta = load_checkpoint(path, params);
  CHECK(meta_value(meta, "variant") == variant_name(cfg.variant));
  CHECK(meta_value(meta, "seed") == "0");
  CHECK(bitwise_equal(restored.forward(images).first, trained.forward(images).first));
  CHECK(bitwise_equal(restored.forward(images).second, trained.forward(images).second));

  // A different variant exposes a different parameter set.
  ExperimentConfig lateral = cfg;
  lateral.variant = PyramidVariant::kLateral;
  auto wrong = DetectorModel<float>::create(lateral).parameters();
  CHECK_THROWS_AS(load_checkpoint(path, wrong), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("detect returns one suppressed detection list per image") {
  const ExperimentConfig cfg = tiny_config();
  const auto model = DetectorModel<float>::create(cfg);
  const Tensor<float> images = sample_batch(cfg, 3);
  const auto dets = model.detect(images);
  REQUIRE(dets.size() == 3);
  for (const auto& image_dets : dets) {
    CHECK(static_cast<int>(image_dets.size()) <= cfg.top_k);
    for (const auto& d : image_dets) {
      CHECK(d.class_id >= 0);
      CHECK(d.class_id < kNumShapeClasses);
      CHECK(d.score >= cfg.score_thresh);
      CHECK(d.score <= 1.0);
      CHECK(box_valid(d.box));
    }
  }
}

TEST_SUITE_END();
