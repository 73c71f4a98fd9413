#pragma once

#include <filesystem>
#include <vector>

#include "mpae/common.hpp"
#include "mpae/volume.hpp"

namespace mpae::synthgen {

// One spherical droplet: center in domain units, radius in voxel units.
struct Droplet {
  double cx = 0, cy = 0, cz = 0;
  double radius_voxels = 0;
};

struct SynthConfig {
  Dims grid{64, 64, 64};
  double mu = 2.0;      // lognormal location of the radius (log of voxels)
  double sigma = 0.5;   // lognormal scale
  int max_droplets = 4096;

  void validate() const;
};

// r = exp(N(mu, sigma)).
double sample_radius(double mu, double sigma, Rng& rng);

struct SynthSample {
  PhaseMask mask;
  std::vector<Droplet> droplets;  // only spheres that cover >= 1 voxel center
  double target_vf = 0.0;
  double achieved_vf = 0.0;
  bool capped = false;  // droplet budget ran out before reaching target_vf
};

// Draws target_vf ~ U(0,1), then adds droplets (center uniform over the
// domain box, radius lognormal) until the covered fraction reaches the target
// or the droplet budget is exhausted. A voxel is true iff its center lies
// within at least one sphere.
SynthSample generate_sample(const SynthConfig& config, Rng& rng);

// Same with the target supplied by the caller; generate_sample draws the
// target and delegates here.
SynthSample generate_sample_with_target(const SynthConfig& config, double target_vf, Rng& rng);

struct DatasetStats {
  int n_samples = 0;
  int n_capped = 0;
  std::int64_t total_droplets = 0;
  double vf_mean = 0.0, vf_min = 0.0, vf_max = 0.0;
  std::array<int, 10> vf_histogram{};  // achieved_vf in [0,1), 10 uniform bins
  int droplets_min = 0, droplets_max = 0;
};

// Generates n samples with per-sample seeds derived from `seed`, stores each
// as a canonical signed-distance volume under out_dir/volumes, assigns
// 80/15/5 splits, and writes manifest.json plus a stats.txt report.
volume::DatasetManifest generate_dataset(const SynthConfig& config, int n_samples,
                                         std::uint64_t seed,
                                         const std::filesystem::path& out_dir);

std::string format_stats(const SynthConfig& config, const DatasetStats& stats);

}  // namespace mpae::synthgen
