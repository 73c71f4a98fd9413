#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mpae/common.hpp"
#include "mpae/model.hpp"
#include "mpae/volume.hpp"

namespace mpae::metrics {

// 2|X n Y| / (|X| + |Y|); two empty masks agree perfectly (1.0).
double dice(const PhaseMask& x, const PhaseMask& y);

// Interface voxels: foreground with at least one six-connected background
// neighbor inside the domain. The domain boundary itself is not interface.
PhaseMask interface_mask(const PhaseMask& mask);

// Symmetric Hausdorff distance between the interface voxel sets, in domain
// units (largest grid edge = 1). Both interfaces empty -> 0; exactly one
// empty -> the domain diagonal sqrt(3) with the flag set.
struct HausdorffResult {
  double value = 0.0;
  bool one_sided_empty = false;
};

HausdorffResult hausdorff(const PhaseMask& x, const PhaseMask& y);

// Connected components under 26-connectivity, in first-encounter scan order.
// d_eq = 2 (3V / 4 pi)^(1/3) in voxel units.
struct DropletStats {
  std::vector<std::int64_t> volumes;
  std::vector<double> d_eq;
};

DropletStats droplet_size_distribution(const PhaseMask& mask);

// Log-spaced bins over equivalent diameters; out-of-range values are clamped
// into the edge bins so no droplet disappears from a comparison plot.
struct HistogramSpec {
  double lo = 1.0;
  double hi = 64.0;
  int bins = 16;

  std::vector<double> edges() const;
};

std::vector<std::int64_t> histogram_counts(const std::vector<double>& values,
                                           const HistogramSpec& spec);

// Mean, sample standard deviation and the Student-t 95% confidence interval.
struct SummaryStats {
  double mean = 0.0;
  double stddev = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  int n = 0;
};

SummaryStats summarize(const std::vector<double>& values);

struct EvalResult {
  std::string id;
  double dice = 0.0;
  double hausdorff_norm = 0.0;
  bool empty_pred = false;
  bool empty_truth = false;
  bool hausdorff_degenerate = false;
};

struct EvalReport {
  std::vector<EvalResult> per_sample;
  std::optional<SummaryStats> dice_summary;       // present when >= 2 samples
  std::optional<SummaryStats> hausdorff_summary;
  std::vector<double> d_eq_truth;  // pooled equivalent diameters, voxels
  std::vector<double> d_eq_pred;
};

using ReconstructFn = std::function<VoxelGrid(const VoxelGrid&)>;

// Per sample: derive the input representation from the stored signed-distance
// field, reconstruct, binarize prediction and truth, score. Errors are
// rethrown with the sample id attached.
EvalReport evaluate(const ReconstructFn& reconstruct, const volume::DatasetManifest& manifest,
                    const std::filesystem::path& manifest_dir, volume::Split split,
                    const RepSpec& rep);

EvalReport evaluate(const model::Autoencoder& model, const volume::DatasetManifest& manifest,
                    const std::filesystem::path& manifest_dir, volume::Split split,
                    const RepSpec& rep);

// CSV emission. Flags column holds "|"-joined markers, "-" when clean.
std::string flags_string(const EvalResult& r);
std::string eval_csv(const std::vector<EvalResult>& rows);
std::string histogram_csv(const std::vector<double>& d_eq_truth,
                          const std::vector<double>& d_eq_pred, const HistogramSpec& spec);

}  // namespace mpae::metrics
