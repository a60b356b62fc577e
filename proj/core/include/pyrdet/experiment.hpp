#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pyrdet/config.hpp"
#include "pyrdet/eval.hpp"
#include "pyrdet/pyramid.hpp"
#include "pyrdet/trainer.hpp"

namespace pyrdet {

// Artifact names inside an output (or dataset) directory. Every file except
// latency.txt is deterministic: rerunning a command with an identical config
// reproduces it byte for byte.
inline constexpr char kConfigEchoFile[] = "config.txt";
inline constexpr char kTrainLogFile[] = "train_log.txt";
inline constexpr char kCheckpointFile[] = "model.ckpt";
inline constexpr char kReportFile[] = "report.txt";
inline constexpr char kDetectionsFile[] = "detections.txt";
inline constexpr char kPrCurvesFile[] = "pr_curves.csv";
inline constexpr char kCompareFile[] = "compare.txt";
inline constexpr char kLatencyFile[] = "latency.txt";  // measured timings, machine-dependent

// Writes the dataset for cfg into cfg.data_dir plus a config echo. A directory
// that already holds a dataset generated from the same spec is rewritten in
// place (the bytes do not change); any other non-empty directory needs force.
void run_gen_data(const ExperimentConfig& cfg, bool force, std::ostream& log);

// Trains cfg.variant on the dataset at cfg.data_dir (which must match cfg's
// generation spec) and writes config echo, per-epoch log, and the best-val-mAP
// checkpoint into cfg.out_dir. Throws on divergence after saving artifacts.
TrainResult run_train(const ExperimentConfig& cfg, std::ostream& log);

// Loads cfg.out_dir's checkpoint (the variant recorded in it must match cfg),
// scores the validation split, and writes report/detections/PR-curve files.
EvalReport run_eval(const ExperimentConfig& cfg, std::ostream& log);

struct CompareRow {
  PyramidVariant variant = PyramidVariant::kIdentity;
  double median_map = 0.0;
  std::array<double, kNumBuckets> bucket_ap{};  // componentwise medians
  std::vector<double> seed_maps;                // per-seed val mAP, seed order
  double superposition = 0.0;  // max per-level residual over probe pairs
  double paper_map = 0.0;      // published VOC07 reference, NaN when absent
  LatencyStats latency;        // full-model batch-1 forward
};

struct CompareResult {
  std::vector<CompareRow> rows;  // in requested variant order
  std::vector<std::uint64_t> seeds;

  // Median-mAP differences behind the ablation gates; NaN when a side is
  // missing from the variant list.
  double margin_over_identity = 0.0;     // global_local - identity
  double margin_over_no_residual = 0.0;  // global_local - local_only_no_residual

  const CompareRow* find(PyramidVariant v) const;
};

// Table-1 row order: baseline, lateral, then the reconfiguration ablations.
std::span<const PyramidVariant> default_compare_variants();

// Trains each (variant, seed) cell under cfg.out_dir/<variant>/s<seed> with an
// identical budget, evaluates it, and writes the comparison table. Datasets
// are generated per seed next to cfg.data_dir when missing. A single-variant,
// single-seed call degenerates to run_train + run_eval with identical results.
CompareResult run_compare(const ExperimentConfig& cfg,
                          std::span<const PyramidVariant> variants,
                          std::span<const std::uint64_t> seeds, bool force,
                          std::ostream& log);

std::string format_compare(const CompareResult& result);

}  // namespace pyrdet
