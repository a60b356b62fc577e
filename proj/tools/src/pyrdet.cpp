#include <CLI11.hpp>
#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <omp.h>

#include "pyrdet/config.hpp"
#include "pyrdet/experiment.hpp"
#include "pyrdet/gradcheck.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

// Flag values shared by the run commands; -1 seed means "not given".
struct CliArgs {
  std::string config_path;
  std::string variant;
  std::vector<std::string> compare_variants;
  std::string out;
  std::int64_t seed = -1;
  int threads = 0;
  bool force = false;
};

std::vector<std::string> variant_names() {
  std::vector<std::string> names;
  for (pyrdet::PyramidVariant v : pyrdet::all_variants())
    names.push_back(pyrdet::variant_name(v));
  return names;
}

// Config file first, then flag overrides. `out_is_data_dir` routes --out to
// the dataset directory for gen-data.
pyrdet::ExperimentConfig make_config(const CliArgs& args, bool out_is_data_dir) {
  pyrdet::ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = pyrdet::load_config(args.config_path);
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  if (!args.variant.empty()) cfg.variant = pyrdet::parse_variant(args.variant);
  if (!args.out.empty()) (out_is_data_dir ? cfg.data_dir : cfg.out_dir) = args.out;
  cfg.threads = args.threads;
  cfg.validate();
  if (cfg.threads > 0) {
    omp_set_num_threads(cfg.threads);
    openblas_set_num_threads(cfg.threads);
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pyrdet: feature-pyramid detection testbed"};
  app.require_subcommand(1);
  CliArgs args;
  const auto names = variant_names();

  auto add_common = [&](CLI::App* cmd, bool with_variant) {
    cmd->add_option("--config", args.config_path, "config file (defaults when absent)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--seed", args.seed, "override the config's seed")
        ->check(CLI::NonNegativeNumber);
    if (with_variant)
      cmd->add_option("--variant", args.variant, "override the pyramid variant")
          ->check(CLI::IsMember(names));
    cmd->add_option("--threads", args.threads, "cap worker threads (0 = library default)")
        ->check(CLI::NonNegativeNumber);
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, false);
  gen->add_option("--out", args.out, "dataset directory (default from config)");
  gen->add_flag("--force", args.force, "overwrite a non-matching dataset directory");

  auto* train = app.add_subcommand("train", "train a detector");
  add_common(train, true);
  train->add_option("--out", args.out, "run output directory");

  auto* eval = app.add_subcommand("eval", "evaluate a trained checkpoint");
  add_common(eval, true);
  eval->add_option("--out", args.out, "run directory holding the checkpoint");

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference verification of every operator and variant");
  gradcheck->add_option("--seed", args.seed, "probe seed")
      ->check(CLI::NonNegativeNumber);

  auto* compare = app.add_subcommand(
      "compare", "train and evaluate pyramid variants side by side");
  add_common(compare, false);
  compare
      ->add_option("--variant", args.compare_variants,
                   "variants to compare (repeatable; default: the ablation table)")
      ->check(CLI::IsMember(names));
  compare->add_option("--out", args.out, "comparison output directory");
  compare->add_flag("--force", args.force, "regenerate non-matching datasets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) {
      pyrdet::run_gen_data(make_config(args, true), args.force, std::cout);
    } else if (train->parsed()) {
      pyrdet::run_train(make_config(args, false), std::cout);
    } else if (eval->parsed()) {
      pyrdet::run_eval(make_config(args, false), std::cout);
    } else if (gradcheck->parsed()) {
      const std::uint64_t seed = args.seed >= 0 ? static_cast<std::uint64_t>(args.seed) : 0;
      const auto report = pyrdet::run_gradcheck_suite(seed);
      std::cout << "gradcheck seed " << seed << "\n"
                << pyrdet::format_gradcheck(report);
      if (!report.all_pass()) return 3;
    } else if (compare->parsed()) {
      auto cfg = make_config(args, false);
      std::vector<pyrdet::PyramidVariant> variants;
      for (const std::string& name : args.compare_variants)
        variants.push_back(pyrdet::parse_variant(name));
      if (variants.empty()) {
        auto base = pyrdet::default_compare_variants();
        variants.assign(base.begin(), base.end());
      }
      const std::vector<std::uint64_t> seeds = {cfg.seed, cfg.seed + 1, cfg.seed + 2};
      pyrdet::run_compare(cfg, variants, seeds, args.force, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
