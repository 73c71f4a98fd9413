#include "mpae/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mpae/detail/io.hpp"
#include "mpae/repr.hpp"

namespace mpae::synthgen {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  if (!grid.valid()) throw ConfigError("synth: grid extents must be positive");
  if (!std::isfinite(mu)) throw ConfigError("synth: mu must be finite");
  if (!(sigma >= 0.0) || !std::isfinite(sigma))
    throw ConfigError("synth: sigma must be non-negative");
  if (max_droplets <= 0) throw ConfigError("synth: max_droplets must be positive");
}

double sample_radius(double mu, double sigma, Rng& rng) {
  if (!std::isfinite(mu) || !(sigma >= 0.0))
    throw ConfigError("sample_radius: invalid lognormal parameters");
  return std::exp(rng.normal(mu, sigma));
}

namespace {

// Marks voxels whose centers fall inside the sphere. Returns the number of
// centers covered (whether or not they were already set) and updates
// new_voxels with the count switched from false to true.
std::int64_t add_droplet(PhaseMask& mask, const Droplet& d, std::int64_t& new_voxels) {
  const Dims& g = mask.dims;
  const double h = g.spacing();
  const double r_dom = d.radius_voxels * h;
  const double r2 = r_dom * r_dom;

  auto lo_index = [&](double c) { return std::max(0, (int)std::floor((c - r_dom) / h - 0.5)); };
  auto hi_index = [&](double c, int n) {
    return std::min(n - 1, (int)std::ceil((c + r_dom) / h - 0.5));
  };

  const int i0 = lo_index(d.cx), i1 = hi_index(d.cx, g.nx);
  const int j0 = lo_index(d.cy), j1 = hi_index(d.cy, g.ny);
  const int k0 = lo_index(d.cz), k1 = hi_index(d.cz, g.nz);

  std::int64_t covered = 0;
  for (int k = k0; k <= k1; ++k) {
    const double dz = (k + 0.5) * h - d.cz;
    for (int j = j0; j <= j1; ++j) {
      const double dy = (j + 0.5) * h - d.cy;
      const double ryz = dy * dy + dz * dz;
      if (ryz > r2) continue;
      const std::int64_t row = flat_index(g, 0, j, k);
      for (int i = i0; i <= i1; ++i) {
        const double dx = (i + 0.5) * h - d.cx;
        if (dx * dx + ryz <= r2) {
          ++covered;
          if (!mask.data[row + i]) {
            mask.data[row + i] = 1;
            ++new_voxels;
          }
        }
      }
    }
  }
  return covered;
}

}  // namespace

SynthSample generate_sample(const SynthConfig& config, Rng& rng) {
  config.validate();
  double target = rng.uniform01();
  return generate_sample_with_target(config, target, rng);
}

SynthSample generate_sample_with_target(const SynthConfig& config, double target_vf, Rng& rng) {
  config.validate();
  if (!(target_vf >= 0.0 && target_vf <= 1.0))
    throw ConfigError("synth: target volume fraction must lie in [0, 1]");

  SynthSample out;
  out.mask = PhaseMask(config.grid);
  out.target_vf = target_vf;

  const double total = static_cast<double>(config.grid.count());
  const double hx = config.grid.nx * config.grid.spacing();
  const double hy = config.grid.ny * config.grid.spacing();
  const double hz = config.grid.nz * config.grid.spacing();

  std::int64_t set_voxels = 0;
  int attempts = 0;
  for (;;) {
    Droplet d;
    d.cx = rng.uniform(0.0, hx);
    d.cy = rng.uniform(0.0, hy);
    d.cz = rng.uniform(0.0, hz);
    d.radius_voxels = sample_radius(config.mu, config.sigma, rng);
    ++attempts;

    std::int64_t covered = add_droplet(out.mask, d, set_voxels);
    if (covered > 0) out.droplets.push_back(d);

    out.achieved_vf = static_cast<double>(set_voxels) / total;
    if (out.achieved_vf >= target_vf) break;
    if (attempts >= config.max_droplets) {
      out.capped = true;
      break;
    }
  }
  return out;
}

volume::DatasetManifest generate_dataset(const SynthConfig& config, int n_samples,
                                         std::uint64_t seed, const fs::path& out_dir) {
  config.validate();
  if (n_samples < 0) throw ConfigError("synth: sample count must be non-negative");

  volume::DatasetManifest manifest;
  manifest.seed = seed;
  {
    std::ostringstream note;
    note << "synthetic droplets, mu=" << format_double(config.mu, 12)
         << " sigma=" << format_double(config.sigma, 12) << " grid=" << config.grid.nx << "x"
         << config.grid.ny << "x" << config.grid.nz;
    manifest.note = note.str();
  }

  DatasetStats stats;
  stats.n_samples = n_samples;
  stats.vf_min = 1.0;
  stats.droplets_min = config.max_droplets + 1;

  for (int i = 0; i < n_samples; ++i) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i)));
    SynthSample sample = generate_sample(config, rng);

    char id[16];
    std::snprintf(id, sizeof(id), "s%04d", i);
    volume::ManifestEntry e;
    e.id = id;
    e.path = std::string("volumes/") + id + ".vol";
    e.representation = RepSpec::sdf();
    e.provenance = volume::Provenance::Synthetic;
    e.capped = sample.capped;

    repr::InterfaceField sdf = repr::signed_distance(sample.mask);
    volume::write_volume(sdf.grid, out_dir / e.path, RepSpec::sdf());
    manifest.entries.push_back(std::move(e));

    stats.n_capped += sample.capped ? 1 : 0;
    stats.total_droplets += static_cast<std::int64_t>(sample.droplets.size());
    stats.vf_mean += sample.achieved_vf;
    stats.vf_min = std::min(stats.vf_min, sample.achieved_vf);
    stats.vf_max = std::max(stats.vf_max, sample.achieved_vf);
    int bin = std::min(9, static_cast<int>(sample.achieved_vf * 10.0));
    stats.vf_histogram[bin] += 1;
    stats.droplets_min = std::min(stats.droplets_min, static_cast<int>(sample.droplets.size()));
    stats.droplets_max = std::max(stats.droplets_max, static_cast<int>(sample.droplets.size()));
  }
  if (n_samples > 0) {
    stats.vf_mean /= n_samples;
  } else {
    stats.vf_min = 0.0;
    stats.droplets_min = 0;
  }

  Rng split_rng(Rng::derive(seed, 0x53504c4954ULL));  // "SPLIT" stream
  volume::split_dataset(manifest, {0.8, 0.15, 0.05}, split_rng);
  volume::write_manifest(manifest, out_dir / "manifest.json");
  detail::write_file_atomic(out_dir / "stats.txt", format_stats(config, stats));
  return manifest;
}

std::string format_stats(const SynthConfig& config, const DatasetStats& stats) {
  std::ostringstream os;
  os << "samples: " << stats.n_samples << "\n";
  os << "grid: " << config.grid.nx << "x" << config.grid.ny << "x" << config.grid.nz << "\n";
  os << "mu: " << format_double(config.mu, 12) << "\n";
  os << "sigma: " << format_double(config.sigma, 12) << "\n";
  os << "capped samples (droplet budget reached): " << stats.n_capped << "\n";
  os << "total droplets: " << stats.total_droplets << "\n";
  if (stats.n_samples > 0) {
    os << "droplets per sample: min " << stats.droplets_min << " max " << stats.droplets_max
       << " mean "
       << format_double(static_cast<double>(stats.total_droplets) / stats.n_samples, 6) << "\n";
    os << "achieved volume fraction: mean " << format_double(stats.vf_mean, 6) << " min "
       << format_double(stats.vf_min, 6) << " max " << format_double(stats.vf_max, 6) << "\n";
    os << "achieved volume fraction histogram (10 bins over [0,1]):\n";
    for (int b = 0; b < 10; ++b) {
      os << "  [" << format_double(b / 10.0, 3) << ", " << format_double((b + 1) / 10.0, 3)
         << "): " << stats.vf_histogram[b] << "\n";
    }
  }
  return os.str();
}

}  // namespace mpae::synthgen
