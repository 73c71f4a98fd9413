#pragma once

// Slow reference implementations the fast library code is tested against.
// Everything here favors obviousness over speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "mpae/common.hpp"
#include "mpae/tensor.hpp"

namespace oracles {

// Distance from every voxel center to the nearest true voxel center, by
// scanning all pairs. Same h * sqrt(integer squared distance) formulation as
// the separable transform, so agreement can be checked to strict tolerance.
inline std::optional<mpae::VoxelGrid> brute_edt(const mpae::PhaseMask& mask) {
  const mpae::Dims& d = mask.dims;
  std::vector<std::array<int, 3>> sites;
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i)
        if (mask.at(i, j, k)) sites.push_back({i, j, k});
  if (sites.empty()) return std::nullopt;
  mpae::VoxelGrid out(d);
  const double h = d.spacing();
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        std::int64_t best = std::numeric_limits<std::int64_t>::max();
        for (const auto& s : sites) {
          std::int64_t dx = i - s[0], dy = j - s[1], dz = k - s[2];
          best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        out.at(i, j, k) = h * std::sqrt(static_cast<double>(best));
      }
  return out;
}

// Foreground voxels with at least one six-connected background neighbor
// inside the domain.
inline mpae::PhaseMask brute_interface(const mpae::PhaseMask& mask) {
  const mpae::Dims& d = mask.dims;
  mpae::PhaseMask out(d);
  const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        if (!mask.at(i, j, k)) continue;
        for (const auto& o : off) {
          int ni = i + o[0], nj = j + o[1], nk = k + o[2];
          if (d.contains(ni, nj, nk) && !mask.at(ni, nj, nk)) {
            out.set(i, j, k, true);
            break;
          }
        }
      }
  return out;
}

// Symmetric Hausdorff distance between the two interface voxel sets, by
// scanning all pairs. Returns {sqrt(3), true} when exactly one set is empty
// and {0, false} when both are.
struct BruteHausdorff {
  double value = 0.0;
  bool one_sided_empty = false;
};

inline BruteHausdorff brute_hausdorff(const mpae::PhaseMask& a, const mpae::PhaseMask& b) {
  auto collect = [](const mpae::PhaseMask& m) {
    std::vector<std::array<int, 3>> pts;
    const mpae::Dims& d = m.dims;
    for (int k = 0; k < d.nz; ++k)
      for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
          if (m.at(i, j, k)) pts.push_back({i, j, k});
    return pts;
  };
  auto ga = collect(brute_interface(a));
  auto gb = collect(brute_interface(b));
  if (ga.empty() && gb.empty()) return {0.0, false};
  if (ga.empty() || gb.empty()) return {mpae::kDomainDiagonal, true};
  const double h = a.dims.spacing();
  auto directed = [h](const std::vector<std::array<int, 3>>& from,
                      const std::vector<std::array<int, 3>>& to) {
    double worst = 0.0;
    for (const auto& p : from) {
      std::int64_t best = std::numeric_limits<std::int64_t>::max();
      for (const auto& q : to) {
        std::int64_t dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      worst = std::max(worst, h * std::sqrt(static_cast<double>(best)));
    }
    return worst;
  };
  return {std::max(directed(ga, gb), directed(gb, ga)), false};
}

// Direct seven-loop cross-correlation in double precision.
// x: (N, Cin, D, H, W); w: (Cout, Cin, k, k, k); b: (Cout).
struct NaiveConvInput {
  std::vector<int> x_shape;
  std::vector<double> x;
  std::vector<int> w_shape;
  std::vector<double> w;
  std::vector<double> b;
  int stride = 1;
  int padding = 0;
  bool circular = false;
};

inline std::vector<double> naive_conv3d(const NaiveConvInput& in, std::vector<int>& out_shape) {
  const int N = in.x_shape[0], Cin = in.x_shape[1], D = in.x_shape[2], H = in.x_shape[3],
            W = in.x_shape[4];
  const int Cout = in.w_shape[0], k = in.w_shape[2];
  const int Do = (D + 2 * in.padding - k) / in.stride + 1;
  const int Ho = (H + 2 * in.padding - k) / in.stride + 1;
  const int Wo = (W + 2 * in.padding - k) / in.stride + 1;
  out_shape = {N, Cout, Do, Ho, Wo};
  auto xv = [&](int n, int c, int z, int y, int x) -> double {
    if (in.circular) {
      z = ((z % D) + D) % D;
      y = ((y % H) + H) % H;
      x = ((x % W) + W) % W;
    } else if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) {
      return 0.0;
    }
    return in.x[(((static_cast<std::size_t>(n) * Cin + c) * D + z) * H + y) * W + x];
  };
  std::vector<double> out(static_cast<std::size_t>(N) * Cout * Do * Ho * Wo);
  std::size_t idx = 0;
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int zo = 0; zo < Do; ++zo)
        for (int yo = 0; yo < Ho; ++yo)
          for (int xo = 0; xo < Wo; ++xo) {
            double acc = in.b.empty() ? 0.0 : in.b[co];
            for (int ci = 0; ci < Cin; ++ci)
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) {
                    double wv =
                        in.w[(((static_cast<std::size_t>(co) * Cin + ci) * k + kz) * k + ky) * k +
                             kx];
                    acc += wv * xv(n, ci, zo * in.stride - in.padding + kz,
                                   yo * in.stride - in.padding + ky,
                                   xo * in.stride - in.padding + kx);
                  }
            out[idx++] = acc;
          }
  return out;
}

// Central finite differences against reverse-mode gradients, in double.
// `scalar_fn` must rebuild the graph from the given leaves on every call.
// Returns the worst relative error across all leaf elements.
inline double fd_max_rel_error(const std::function<mpae::tensor::Tensor<double>()>& scalar_fn,
                               const std::vector<mpae::tensor::Tensor<double>>& leaves,
                               double eps = 1e-5) {
  for (const auto& leaf : leaves) {
    auto handle = leaf;  // tensor copies share the node
    handle.zero_grad();
  }
  auto y = scalar_fn();
  y.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves)
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto handle = leaves[li];
    auto vals = handle.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + eps;
      double up = scalar_fn().item();
      vals[i] = saved - eps;
      double dn = scalar_fn().item();
      vals[i] = saved;
      double fd = (up - dn) / (2.0 * eps);
      double a = analytic[li][i];
      double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Kolmogorov-Smirnov statistic of samples against a reference CDF.
inline double ks_statistic(std::vector<double> samples,
                           const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double f = cdf(samples[i]);
    worst = std::max(worst, std::abs(f - static_cast<double>(i) / n));
    worst = std::max(worst, std::abs(static_cast<double>(i + 1) / n - f));
  }
  return worst;
}

// Scalar Adam recurrence transcribed directly from its defining equations.
struct AdamRef {
  double lr, beta1, beta2, eps, weight_decay;
  std::vector<double> m, v;
  std::int64_t t = 0;

  void step(std::vector<double>& w, const std::vector<double>& g) {
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double gi = g[i] + weight_decay * w[i];
      m[i] = beta1 * m[i] + (1 - beta1) * gi;
      v[i] = beta2 * v[i] + (1 - beta2) * gi * gi;
      double mhat = m[i] / (1 - std::pow(beta1, static_cast<double>(t)));
      double vhat = v[i] / (1 - std::pow(beta2, static_cast<double>(t)));
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
};

// Shared helper: random mask with roughly the given fill probability.
inline mpae::PhaseMask random_mask(const mpae::Dims& d, double p, mpae::Rng& rng) {
  mpae::PhaseMask m(d);
  for (auto& v : m.data) v = rng.uniform01() < p ? 1 : 0;
  return m;
}

}  // namespace oracles
