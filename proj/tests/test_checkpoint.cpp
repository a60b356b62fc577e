#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pyrdet/checkpoint.hpp"
#include "pyrdet/rng.hpp"

using namespace pyrdet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ParamList<float> toy_params(std::uint64_t seed) {
  CounterRng rng(seed, 99);
  ParamList<float> params;
  params.push_back({"backbone.stem.kernel", Tensor<float>::zeros({4, 1, 3, 3})});
  params.push_back({"heads.cls.bias", Tensor<float>::zeros({12})});
  params.push_back({"pyramid.level1.proj.kernel", Tensor<float>::zeros({8, 4, 1, 1})});
  for (auto& p : params)
    for (auto& v : p.tensor.raw()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return params;
}

}  // namespace

TEST_SUITE_BEGIN("checkpoint");

TEST_CASE("save/load round trip restores every value bitwise") {
  const auto dir = fs::temp_directory_path() / "pyrdet_ckpt_test";
  fs::create_directories(dir);
  const auto path = (dir / "model.ckpt").string();

  const ParamList<float> saved = toy_params(7);
  const MetaList meta = {{"variant", "global_local"}, {"seed", "7"}, {"epoch", "3"}};
  save_checkpoint(path, saved, meta);

  ParamList<float> loaded = toy_params(8);  // same shapes, different values
  const MetaList got = load_checkpoint(path, loaded);
  CHECK(got == meta);
  CHECK(meta_value(got, "variant") == "global_local");
  CHECK(meta_value(got, "missing") == "");
  for (std::size_t i = 0; i < saved.size(); ++i) {
    const auto a = saved[i].tensor.data();
    const auto b = loaded[i].tensor.data();
    REQUIRE(a.size() == b.size());
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }

  // Re-saving the loaded state reproduces the file byte for byte.
  const auto path2 = (dir / "model2.ckpt").string();
  save_checkpoint(path2, loaded, got);
  CHECK(slurp(path) == slurp(path2));
  fs::remove_all(dir);
}

TEST_CASE("manifest records name, dtype, and shape per array") {
  const auto dir = fs::temp_directory_path() / "pyrdet_ckpt_info";
  fs::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(path, toy_params(1), {{"variant", "identity"}});

  const CheckpointInfo info = read_checkpoint_info(path);
  REQUIRE(info.arrays.size() == 3);
  CHECK(info.arrays[0].name == "backbone.stem.kernel");
  CHECK(info.arrays[0].dtype == "float32");
  CHECK(info.arrays[0].shape == Shape{4, 1, 3, 3});
  CHECK(info.arrays[1].shape == Shape{12});
  CHECK(meta_value(info.meta, "variant") == "identity");
  fs::remove_all(dir);
}

TEST_CASE("loading rejects mismatched names, shapes, dtypes, and corrupt files") {
  const auto dir = fs::temp_directory_path() / "pyrdet_ckpt_bad";
  fs::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(path, toy_params(3), {});

  ParamList<float> renamed = toy_params(3);
  renamed[1].name = "heads.other.bias";
  CHECK_THROWS_AS(load_checkpoint(path, renamed), std::runtime_error);

  ParamList<float> reshaped = toy_params(3);
  reshaped[1].tensor = Tensor<float>::zeros({6});
  CHECK_THROWS_AS(load_checkpoint(path, reshaped), std::runtime_error);

  ParamList<double> retyped;
  for (const auto& p : toy_params(3)) {
    Tensor<double> t = Tensor<double>::zeros(p.tensor.shape());
    retyped.push_back({p.name, t});
  }
  CHECK_THROWS_AS(load_checkpoint(path, retyped), std::runtime_error);

  ParamList<float> fewer = toy_params(3);
  fewer.pop_back();
  CHECK_THROWS_AS(load_checkpoint(path, fewer), std::runtime_error);

  // Truncated payload and foreign magic both fail loudly.
  const std::string bytes = slurp(path);
  {
    std::ofstream out(dir / "short.ckpt", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 5);
  }
  ParamList<float> target = toy_params(3);
  CHECK_THROWS_AS(load_checkpoint((dir / "short.ckpt").string(), target),
                  std::runtime_error);
  {
    std::ofstream out(dir / "alien.ckpt", std::ios::binary);
    out << "not-a-checkpoint 1\ndata\n";
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "alien.ckpt").string(), target),
                  std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint((dir / "absent.ckpt").string(), target),
                  std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("float64 arrays round trip as well") {
  const auto dir = fs::temp_directory_path() / "pyrdet_ckpt_f64";
  fs::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();

  CounterRng rng(11, 0);
  ParamList<double> params;
  params.push_back({"w", Tensor<double>::zeros({5, 2})});
  for (auto& v : params[0].tensor.raw()) v = rng.uniform(-3.0, 3.0);
  save_checkpoint(path, params, {{"variant", "lateral"}});

  ParamList<double> loaded;
  loaded.push_back({"w", Tensor<double>::zeros({5, 2})});
  load_checkpoint(path, loaded);
  for (std::size_t j = 0; j < 10; ++j)
    CHECK(params[0].tensor.data()[j] == loaded[0].tensor.data()[j]);
  CHECK(read_checkpoint_info(path).arrays[0].dtype == "float64");
  fs::remove_all(dir);
}

TEST_SUITE_END();
