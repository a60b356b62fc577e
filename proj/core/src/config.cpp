#include "pyrdet/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace pyrdet {
namespace {

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("config: " + what);
}

// Shortest representation that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) fail("trailing characters in '" + key + "'");
    return v;
  } catch (const std::invalid_argument&) {
    fail("bad number for '" + key + "': '" + value + "'");
  } catch (const std::out_of_range&) {
    fail("out-of-range number for '" + key + "'");
  }
}

int parse_int(const std::string& key, const std::string& value) {
  int v = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
    fail("bad integer for '" + key + "': '" + value + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size())
    fail("bad integer for '" + key + "': '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "0") return false;
  if (value == "1") return true;
  fail("bad flag for '" + key + "' (use 0 or 1): '" + value + "'");
}

template <typename T, typename Fn>
std::array<T, 3> parse_triple(const std::string& key, const std::string& value, Fn one) {
  std::istringstream ss(value);
  std::array<T, 3> out{};
  std::string tok;
  for (auto& v : out) {
    if (!(ss >> tok)) fail("'" + key + "' needs three values");
    v = one(key, tok);
  }
  if (ss >> tok) fail("'" + key + "' needs exactly three values");
  return out;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

double ExperimentConfig::lr_for_epoch(int epoch) const {
  if (epoch < stage_epochs[0]) return stage_lr[0];
  if (epoch < stage_epochs[0] + stage_epochs[1]) return stage_lr[1];
  return stage_lr[2];
}

SceneSpec ExperimentConfig::scene_spec() const {
  SceneSpec s = scene;
  s.seed = seed;
  return s;
}

BackboneConfig ExperimentConfig::backbone_config() const {
  BackboneConfig b = backbone;
  b.input_size = scene.image_size;
  return b;
}

void ExperimentConfig::validate() const {
  scene_spec().validate();
  backbone_config().validate();
  if (backbone.in_channels != 1) fail("the synthetic dataset is grayscale (in_channels = 1)");
  if (n_train < 1 || n_val < 1) fail("dataset split sizes must be positive");
  if (pyramid.d < 1 || pyramid.r < 1) fail("pyramid width and reduction must be positive");
  if (pyramid.reference_level < 0 || pyramid.reference_level > backbone.num_levels)
    fail("reference_level out of range");
  if (!(anchor_s_min > 0.0) || !(anchor_s_max > anchor_s_min) || anchor_s_max > 1.0)
    fail("anchor scale range must satisfy 0 < s_min < s_max <= 1");
  if (!(match_iou > 0.0 && match_iou < 1.0)) fail("match_iou must be in (0,1)");
  if (negpos_ratio < 1) fail("negpos_ratio must be at least 1");
  if (!(score_thresh >= 0.0 && score_thresh < 1.0)) fail("score_thresh must be in [0,1)");
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) fail("nms_iou must be in (0,1)");
  if (top_k < 1) fail("top_k must be positive");
  for (const int e : stage_epochs)
    if (e < 0) fail("stage epochs must be non-negative");
  if (total_epochs() < 1) fail("schedule must contain at least one epoch");
  for (const double lr : stage_lr)
    if (!(lr > 0.0)) fail("learning rates must be positive");
  if (batch_size < 1) fail("batch_size must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0,1)");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (threads < 0) fail("threads must be non-negative");
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream out;
  out << "[dataset]\n";
  out << "image_size = " << scene.image_size << "\n";
  out << "min_objects = " << scene.min_objects << "\n";
  out << "max_objects = " << scene.max_objects << "\n";
  out << "noise_amplitude = " << fmt(scene.noise_amplitude) << "\n";
  out << "n_train = " << n_train << "\n";
  out << "n_val = " << n_val << "\n";
  out << "\n[backbone]\n";
  out << "num_levels = " << backbone.num_levels << "\n";
  out << "stem_channels = " << backbone.stem_channels << "\n";
  out << "in_channels = " << backbone.in_channels << "\n";
  out << "\n[pyramid]\n";
  out << "variant = " << variant_name(variant) << "\n";
  out << "width = " << pyramid.d << "\n";
  out << "reduction = " << pyramid.r << "\n";
  out << "scalar_lateral = " << (pyramid.scalar_lateral ? 1 : 0) << "\n";
  out << "reference_level = " << pyramid.reference_level << "\n";
  out << "\n[detector]\n";
  out << "shared_heads = " << (shared_heads ? 1 : 0) << "\n";
  out << "anchor_s_min = " << fmt(anchor_s_min) << "\n";
  out << "anchor_s_max = " << fmt(anchor_s_max) << "\n";
  out << "match_iou = " << fmt(match_iou) << "\n";
  out << "negpos_ratio = " << negpos_ratio << "\n";
  out << "score_thresh = " << fmt(score_thresh) << "\n";
  out << "nms_iou = " << fmt(nms_iou) << "\n";
  out << "top_k = " << top_k << "\n";
  out << "\n[train]\n";
  out << "stage_epochs = " << stage_epochs[0] << " " << stage_epochs[1] << " "
      << stage_epochs[2] << "\n";
  out << "stage_lr = " << fmt(stage_lr[0]) << " " << fmt(stage_lr[1]) << " "
      << fmt(stage_lr[2]) << "\n";
  out << "batch_size = " << batch_size << "\n";
  out << "momentum = " << fmt(momentum) << "\n";
  out << "weight_decay = " << fmt(weight_decay) << "\n";
  out << "hflip = " << (hflip ? 1 : 0) << "\n";
  out << "\n[run]\n";
  out << "seed = " << seed << "\n";
  out << "out = " << out_dir << "\n";
  out << "data = " << data_dir << "\n";
  out << "threads = " << threads << "\n";
  return out.str();
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section at line " + std::to_string(line_no));
      section = line.substr(1, line.size() - 2);
      if (section != "dataset" && section != "backbone" && section != "pyramid" &&
          section != "detector" && section != "train" && section != "run")
        fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value at line " + std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail("empty key at line " + std::to_string(line_no));

    const std::string qual = section + "." + key;
    if (qual == "dataset.image_size") {
      cfg.scene.image_size = parse_int(key, value);
    } else if (qual == "dataset.min_objects") {
      cfg.scene.min_objects = parse_int(key, value);
    } else if (qual == "dataset.max_objects") {
      cfg.scene.max_objects = parse_int(key, value);
    } else if (qual == "dataset.noise_amplitude") {
      cfg.scene.noise_amplitude = parse_double(key, value);
    } else if (qual == "dataset.n_train") {
      cfg.n_train = parse_int(key, value);
    } else if (qual == "dataset.n_val") {
      cfg.n_val = parse_int(key, value);
    } else if (qual == "backbone.num_levels") {
      cfg.backbone.num_levels = parse_int(key, value);
    } else if (qual == "backbone.stem_channels") {
      cfg.backbone.stem_channels = parse_int(key, value);
    } else if (qual == "backbone.in_channels") {
      cfg.backbone.in_channels = parse_int(key, value);
    } else if (qual == "pyramid.variant") {
      cfg.variant = parse_variant(value);
    } else if (qual == "pyramid.width") {
      cfg.pyramid.d = parse_int(key, value);
    } else if (qual == "pyramid.reduction") {
      cfg.pyramid.r = parse_int(key, value);
    } else if (qual == "pyramid.scalar_lateral") {
      cfg.pyramid.scalar_lateral = parse_bool(key, value);
    } else if (qual == "pyramid.reference_level") {
      cfg.pyramid.reference_level = parse_int(key, value);
    } else if (qual == "detector.shared_heads") {
      cfg.shared_heads = parse_bool(key, value);
    } else if (qual == "detector.anchor_s_min") {
      cfg.anchor_s_min = parse_double(key, value);
    } else if (qual == "detector.anchor_s_max") {
      cfg.anchor_s_max = parse_double(key, value);
    } else if (qual == "detector.match_iou") {
      cfg.match_iou = parse_double(key, value);
    } else if (qual == "detector.negpos_ratio") {
      cfg.negpos_ratio = parse_int(key, value);
    } else if (qual == "detector.score_thresh") {
      cfg.score_thresh = parse_double(key, value);
    } else if (qual == "detector.nms_iou") {
      cfg.nms_iou = parse_double(key, value);
    } else if (qual == "detector.top_k") {
      cfg.top_k = parse_int(key, value);
    } else if (qual == "train.stage_epochs") {
      cfg.stage_epochs = parse_triple<int>(key, value, parse_int);
    } else if (qual == "train.stage_lr") {
      cfg.stage_lr = parse_triple<double>(key, value, parse_double);
    } else if (qual == "train.batch_size") {
      cfg.batch_size = parse_int(key, value);
    } else if (qual == "train.momentum") {
      cfg.momentum = parse_double(key, value);
    } else if (qual == "train.weight_decay") {
      cfg.weight_decay = parse_double(key, value);
    } else if (qual == "train.hflip") {
      cfg.hflip = parse_bool(key, value);
    } else if (qual == "run.seed") {
      cfg.seed = parse_u64(key, value);
    } else if (qual == "run.out") {
      cfg.out_dir = value;
    } else if (qual == "run.data") {
      cfg.data_dir = value;
    } else if (qual == "run.threads") {
      cfg.threads = parse_int(key, value);
    } else {
      fail("unknown key '" + key + "' in section [" + section + "]");
    }
  }
  cfg.scene.seed = cfg.seed;
  cfg.backbone.input_size = cfg.scene.image_size;
  return cfg;
}

std::string ExperimentConfig::fingerprint() const {
  // Serialize with the non-result fields pinned so only numerics contribute.
  ExperimentConfig canon = *this;
  canon.out_dir = "-";
  canon.data_dir = "-";
  canon.threads = 0;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(canon.serialize())));
  return std::string(buf);
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ExperimentConfig::parse(ss.str());
}

void save_config(const std::string& path, const ExperimentConfig& config) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("config: cannot open '" + path + "' for writing");
  out << config.serialize();
  if (!out) throw std::runtime_error("config: write failed for '" + path + "'");
}

}  // namespace pyrdet
