#include "mpae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "mpae/repr.hpp"

namespace mpae::metrics {

double dice(const PhaseMask& x, const PhaseMask& y) {
  if (!(x.dims == y.dims)) throw DimensionError("dice: masks must share extents");
  std::int64_t nx = 0, ny = 0, both = 0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    nx += x.data[i] != 0;
    ny += y.data[i] != 0;
    both += (x.data[i] != 0) && (y.data[i] != 0);
  }
  if (nx + ny == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(nx + ny);
}

PhaseMask interface_mask(const PhaseMask& mask) {
  const Dims& d = mask.dims;
  PhaseMask gamma(d);
  constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        if (!mask.at(i, j, k)) continue;
        bool boundary = false;
        for (const auto& o : off) {
          int ii = i + o[0], jj = j + o[1], kk = k + o[2];
          if (d.contains(ii, jj, kk) && !mask.at(ii, jj, kk)) {
            boundary = true;
            break;
          }
        }
        if (boundary) gamma.set(i, j, k, true);
      }
  return gamma;
}

namespace {

// Largest EDT value over the true voxels of `where`: the directed Hausdorff
// distance from `where` to the set the EDT was computed against.
double directed_max(const VoxelGrid& edt_to_other, const PhaseMask& where) {
  double worst = 0.0;
  for (std::size_t i = 0; i < where.data.size(); ++i)
    if (where.data[i] != 0) worst = std::max(worst, edt_to_other.data[i]);
  return worst;
}

}  // namespace

HausdorffResult hausdorff(const PhaseMask& x, const PhaseMask& y) {
  if (!(x.dims == y.dims)) throw DimensionError("hausdorff: masks must share extents");
  PhaseMask gx = interface_mask(x);
  PhaseMask gy = interface_mask(y);
  bool ex = gx.count_true() == 0;
  bool ey = gy.count_true() == 0;
  if (ex && ey) return {0.0, false};
  if (ex != ey) return {kDomainDiagonal, true};
  auto dist_to_y = repr::edt(gy);
  auto dist_to_x = repr::edt(gx);
  return {std::max(directed_max(*dist_to_y, gx), directed_max(*dist_to_x, gy)), false};
}

DropletStats droplet_size_distribution(const PhaseMask& mask) {
  const Dims& d = mask.dims;
  std::vector<std::int32_t> label(mask.data.size(), 0);
  DropletStats stats;
  std::vector<std::int64_t> stack;
  std::int32_t next = 0;

  for (std::int64_t start = 0; start < d.count(); ++start) {
    if (mask.data[start] == 0 || label[start] != 0) continue;
    ++next;
    std::int64_t volume = 0;
    label[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      std::int64_t idx = stack.back();
      stack.pop_back();
      ++volume;
      int i = static_cast<int>(idx % d.nx);
      int j = static_cast<int>((idx / d.nx) % d.ny);
      int k = static_cast<int>(idx / (static_cast<std::int64_t>(d.nx) * d.ny));
      for (int dk = -1; dk <= 1; ++dk)
        for (int dj = -1; dj <= 1; ++dj)
          for (int di = -1; di <= 1; ++di) {
            if (di == 0 && dj == 0 && dk == 0) continue;
            int ii = i + di, jj = j + dj, kk = k + dk;
            if (!d.contains(ii, jj, kk)) continue;
            std::int64_t nidx = flat_index(d, ii, jj, kk);
            if (mask.data[nidx] == 0 || label[nidx] != 0) continue;
            label[nidx] = next;
            stack.push_back(nidx);
          }
    }
    stats.volumes.push_back(volume);
  }

  stats.d_eq.reserve(stats.volumes.size());
  constexpr double c = 3.0 / (4.0 * 3.14159265358979323846);
  for (std::int64_t v : stats.volumes)
    stats.d_eq.push_back(2.0 * std::cbrt(c * static_cast<double>(v)));
  return stats;
}

std::vector<double> HistogramSpec::edges() const {
  if (bins < 1) throw ConfigError("HistogramSpec: bins must be >= 1");
  if (!(lo > 0) || !(hi > lo)) throw ConfigError("HistogramSpec: need 0 < lo < hi");
  std::vector<double> e(bins + 1);
  double llo = std::log(lo), lhi = std::log(hi);
  for (int i = 0; i <= bins; ++i)
    e[i] = std::exp(llo + (lhi - llo) * static_cast<double>(i) / bins);
  e.front() = lo;
  e.back() = hi;
  return e;
}

std::vector<std::int64_t> histogram_counts(const std::vector<double>& values,
                                           const HistogramSpec& spec) {
  auto e = spec.edges();
  std::vector<std::int64_t> counts(spec.bins, 0);
  for (double v : values) {
    auto it = std::upper_bound(e.begin(), e.end(), v);
    int bin = static_cast<int>(it - e.begin()) - 1;
    bin = std::clamp(bin, 0, spec.bins - 1);
    ++counts[bin];
  }
  return counts;
}

SummaryStats summarize(const std::vector<double>& values) {
  if (values.size() < 2) throw StatsError("summarize: need at least two values");
  SummaryStats s;
  s.n = static_cast<int>(values.size());
  double sum = std::accumulate(values.begin(), values.end(), 0.0);
  s.mean = sum / s.n;
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / (s.n - 1));
  boost::math::students_t dist(s.n - 1);
  double half = boost::math::quantile(dist, 0.975) * s.stddev / std::sqrt(s.n);
  s.ci_lo = s.mean - half;
  s.ci_hi = s.mean + half;
  return s;
}

EvalReport evaluate(const ReconstructFn& reconstruct, const volume::DatasetManifest& manifest,
                    const std::filesystem::path& manifest_dir, volume::Split split,
                    const RepSpec& rep) {
  EvalReport report;
  std::vector<double> dices, hds;
  for (std::size_t i : manifest.indices_of(split)) {
    const auto& entry = manifest.entries[i];
    try {
      auto loaded = volume::read_volume(manifest_dir / entry.path);
      if (loaded.representation.kind != ReprKind::Sdf)
        throw FormatError("stored volume is not a signed-distance field");
      repr::InterfaceField sdf{std::move(loaded.grid), loaded.representation};
      auto input = repr::from_sdf(sdf, rep);
      PhaseMask truth = repr::binarize(sdf);
      VoxelGrid pred_grid = reconstruct(input.grid);
      PhaseMask pred = repr::binarize({std::move(pred_grid), rep});

      EvalResult r;
      r.id = entry.id;
      r.dice = dice(pred, truth);
      auto hd = hausdorff(pred, truth);
      r.hausdorff_norm = hd.value;
      r.hausdorff_degenerate = hd.one_sided_empty;
      r.empty_pred = pred.count_true() == 0;
      r.empty_truth = truth.count_true() == 0;
      dices.push_back(r.dice);
      hds.push_back(r.hausdorff_norm);

      auto dt = droplet_size_distribution(truth);
      auto dp = droplet_size_distribution(pred);
      report.d_eq_truth.insert(report.d_eq_truth.end(), dt.d_eq.begin(), dt.d_eq.end());
      report.d_eq_pred.insert(report.d_eq_pred.end(), dp.d_eq.begin(), dp.d_eq.end());
      report.per_sample.push_back(std::move(r));
    } catch (const Error& e) {
      throw Error("evaluate: sample " + entry.id + ": " + e.what());
    }
  }
  if (dices.size() >= 2) {
    report.dice_summary = summarize(dices);
    report.hausdorff_summary = summarize(hds);
  }
  return report;
}

EvalReport evaluate(const model::Autoencoder& model, const volume::DatasetManifest& manifest,
                    const std::filesystem::path& manifest_dir, volume::Split split,
                    const RepSpec& rep) {
  return evaluate([&model](const VoxelGrid& g) { return model.reconstruct_field(g); }, manifest,
                  manifest_dir, split, rep);
}

std::string flags_string(const EvalResult& r) {
  std::string f;
  auto add = [&f](const char* tag) {
    if (!f.empty()) f += '|';
    f += tag;
  };
  if (r.empty_pred) add("empty_pred");
  if (r.empty_truth) add("empty_truth");
  if (r.hausdorff_degenerate) add("hd_sentinel");
  return f.empty() ? "-" : f;
}

std::string eval_csv(const std::vector<EvalResult>& rows) {
  std::string out = "sample_id,dice,hausdorff_norm,flags\n";
  for (const auto& r : rows) {
    out += r.id;
    out += ',' + format_double(r.dice) + ',' + format_double(r.hausdorff_norm);
    out += ',' + flags_string(r) + '\n';
  }
  return out;
}

std::string histogram_csv(const std::vector<double>& d_eq_truth,
                          const std::vector<double>& d_eq_pred, const HistogramSpec& spec) {
  auto e = spec.edges();
  auto ct = histogram_counts(d_eq_truth, spec);
  auto cp = histogram_counts(d_eq_pred, spec);
  std::string out = "bin_lo,bin_hi,count_truth,count_pred\n";
  for (int b = 0; b < spec.bins; ++b) {
    out += format_double(e[b]) + ',' + format_double(e[b + 1]) + ',' + std::to_string(ct[b]) +
           ',' + std::to_string(cp[b]) + '\n';
  }
  return out;
}

}  // namespace mpae::metrics
