#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mpae/common.hpp"
#include "mpae/metrics.hpp"
#include "mpae/model.hpp"
#include "mpae/volume.hpp"

namespace mpae::harness {

// Named defaults: "desk" fits a laptop CPU budget, "paper" keeps the
// grid size, channel widths and epoch budget of the reference runs.
struct Profile {
  std::string name;
  model::ModelConfig model;
  model::TrainConfig train;
  int grid_extent = 32;
  int dataset_samples = 200;
  double mu = 2.0;
};

Profile profile(const std::string& name);

std::vector<RepSpec> default_representations();

struct ExperimentConfig {
  std::vector<std::string> datasets;  // manifest.json paths
  std::vector<RepSpec> representations = default_representations();
  model::ModelConfig model;
  model::TrainConfig train;
  std::uint64_t init_seed = 1;
  std::string out_dir = "out";
  bool identity_model = false;  // pass inputs through untouched instead of training

  void validate() const;
  std::string to_json() const;
  void merge_json(const std::string& text);  // overwrites only the keys present
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& file);
};

// Relative output directories resolve against $MPAE_OUT_ROOT when it is set.
std::filesystem::path resolve_out_dir(const ExperimentConfig& config);

struct GridSearchSpace {
  std::vector<model::LossKind> losses{model::LossKind::L1, model::LossKind::MSE};
  std::vector<double> lrs{1e-3, 1e-4, 1e-5};
  std::vector<double> weight_decays{1e-4, 1e-6};
  std::vector<model::Act> activations{model::Act::SiLU, model::Act::ReLU, model::Act::Tanh};

  std::size_t size() const {
    return losses.size() * lrs.size() * weight_decays.size() * activations.size();
  }
};

// One training + evaluation, the unit every experiment command is built from.
struct RunSpec {
  std::string name;  // relative directory under <out>/runs
  std::filesystem::path manifest_path;
  RepSpec rep;
  model::ModelConfig model;
  model::TrainConfig train;
  std::uint64_t init_seed = 1;
  double subset_fraction = 1.0;  // nested, seed-deterministic training subset
  volume::Split eval_split = volume::Split::Test;
  bool identity_model = false;

  std::string canonical_json() const;  // hashed for resumability
};

struct RunResult {
  std::string name;
  std::string config_hash;
  bool diverged = false;
  std::string divergence;
  std::vector<double> epoch_loss;
  metrics::EvalReport eval;
  bool from_cache = false;
};

std::string config_hash(const std::string& canonical_json);

// Deterministic prefix of a seeded shuffle of the split, so smaller fractions
// are always subsets of larger ones and independent of the training seed.
std::vector<std::size_t> subset_indices(const volume::DatasetManifest& manifest,
                                        volume::Split split, double fraction);

// Runs (or resumes) one spec. The run directory keeps config.json,
// result.json, loss.csv, eval.csv, droplets.csv and model.ckpt; a matching
// config hash in result.json short-circuits the whole run.
RunResult execute_run(const RunSpec& spec, const std::filesystem::path& out_root);

// Experiment drivers. Each returns a process exit code: 0 only if every
// requested run completed.
int cmd_repr_sweep(const ExperimentConfig& config);
int cmd_grid_search(const ExperimentConfig& config, const GridSearchSpace& space);
int cmd_uncertainty(const ExperimentConfig& config, int n_seeds = 5,
                    double subset_fraction = 0.5);
int cmd_trainsize_sweep(const ExperimentConfig& config,
                        const std::vector<double>& fractions = {1.0, 0.5, 0.25, 0.125, 0.0625});
int cmd_cross_eval(const ExperimentConfig& config);
int cmd_report(const std::filesystem::path& results_dir);

// Least-squares slope of log(error) against log(n).
double fit_power_law_exponent(const std::vector<double>& n, const std::vector<double>& error);

// Deterministic artifact builders, exposed for direct testing.
std::string vtk_structured_points(const PhaseMask& mask, const std::string& title);
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values);

struct ParallelCoordsRow {
  std::string loss;
  double lr = 0.0;
  double weight_decay = 0.0;
  std::string activation;
  double score = 0.0;
};

std::string svg_parallel_coordinates(const std::vector<ParallelCoordsRow>& rows);

}  // namespace mpae::harness
