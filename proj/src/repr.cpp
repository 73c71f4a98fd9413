#include "mpae/repr.hpp"

#include <cmath>

#include "mpae/volume.hpp"

namespace mpae::repr {

namespace {

constexpr double kFar = 1e30;

inline double sq(double x) { return x * x; }

// 1-D squared-distance lower envelope (Felzenszwalb & Huttenlocher). Inputs
// and outputs are squared distances in voxel units; with integer-valued f the
// results are exact.
void dt1d(const double* f, double* d, int n, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kFar;
  z[1] = +kFar;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + sq(q)) - (f[v[k]] + sq(v[k]))) / (2.0 * (q - v[k]));
    while (s <= z[k]) {
      --k;
      s = ((f[q] + sq(q)) - (f[v[k]] + sq(v[k]))) / (2.0 * (q - v[k]));
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = +kFar;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = sq(q - v[k]) + f[v[k]];
  }
}

// Squared distance (voxel units) from every voxel to the nearest true voxel.
std::vector<double> squared_edt(const PhaseMask& mask) {
  const Dims d = mask.dims;
  std::vector<double> dist(static_cast<std::size_t>(d.count()));

  // Pass 1 along x: exact integer sweeps per row.
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j) {
      const std::int64_t row = flat_index(d, 0, j, k);
      int last = -1;
      for (int i = 0; i < d.nx; ++i) {
        if (mask.data[row + i]) last = i;
        dist[row + i] = (last < 0) ? kFar : sq(i - last);
      }
      last = -1;
      for (int i = d.nx - 1; i >= 0; --i) {
        if (mask.data[row + i]) last = i;
        if (last >= 0) dist[row + i] = std::min(dist[row + i], sq(last - i));
      }
    }

  const int nmax = d.max_extent();
  std::vector<double> f(nmax), g(nmax), z(nmax + 1);
  std::vector<int> v(nmax);

  // Pass 2 along y.
  for (int k = 0; k < d.nz; ++k)
    for (int i = 0; i < d.nx; ++i) {
      for (int j = 0; j < d.ny; ++j) f[j] = dist[flat_index(d, i, j, k)];
      dt1d(f.data(), g.data(), d.ny, v.data(), z.data());
      for (int j = 0; j < d.ny; ++j) dist[flat_index(d, i, j, k)] = g[j];
    }

  // Pass 3 along z.
  for (int j = 0; j < d.ny; ++j)
    for (int i = 0; i < d.nx; ++i) {
      for (int k = 0; k < d.nz; ++k) f[k] = dist[flat_index(d, i, j, k)];
      dt1d(f.data(), g.data(), d.nz, v.data(), z.data());
      for (int k = 0; k < d.nz; ++k) dist[flat_index(d, i, j, k)] = g[k];
    }

  return dist;
}

}  // namespace

std::optional<VoxelGrid> edt(const PhaseMask& mask) {
  if (!mask.dims.valid() || mask.data.size() != static_cast<std::size_t>(mask.dims.count()))
    throw DimensionError("edt: mask size does not match extents");
  if (mask.count_true() == 0) return std::nullopt;

  std::vector<double> d2 = squared_edt(mask);
  VoxelGrid out(mask.dims);
  const double h = mask.dims.spacing();
  for (std::size_t i = 0; i < d2.size(); ++i) out.data[i] = h * std::sqrt(d2[i]);
  return out;
}

InterfaceField signed_distance(const PhaseMask& mask) {
  if (!mask.dims.valid() || mask.data.size() != static_cast<std::size_t>(mask.dims.count()))
    throw DimensionError("signed_distance: mask size does not match extents");

  InterfaceField out{VoxelGrid(mask.dims), RepSpec::sdf()};
  auto to_fg = edt(mask);
  if (!to_fg) {  // all background
    std::fill(out.grid.data.begin(), out.grid.data.end(), kDomainDiagonal);
    return out;
  }
  auto to_bg = edt(volume::complement(mask));
  if (!to_bg) {  // all foreground
    std::fill(out.grid.data.begin(), out.grid.data.end(), -kDomainDiagonal);
    return out;
  }

  const double half = 0.5 * mask.dims.spacing();
  for (std::size_t i = 0; i < out.grid.data.size(); ++i)
    out.grid.data[i] = mask.data[i] ? -(to_bg->data[i] - half) : (to_fg->data[i] - half);
  return out;
}

InterfaceField to_tanh(const InterfaceField& sdf, double epsilon) {
  if (sdf.representation.kind != ReprKind::Sdf)
    throw UsageError("to_tanh: input must be a signed-distance field");
  if (!(epsilon > 0.0)) throw ConfigError("to_tanh: epsilon must be positive");

  InterfaceField out{VoxelGrid(sdf.grid.dims), RepSpec::tanh(epsilon)};
  const double inv = 1.0 / (2.0 * epsilon);
  for (std::size_t i = 0; i < out.grid.data.size(); ++i)
    out.grid.data[i] = 0.5 * (1.0 + std::tanh(-sdf.grid.data[i] * inv));
  return out;
}

InterfaceField to_sharp(const InterfaceField& sdf) {
  if (sdf.representation.kind != ReprKind::Sdf)
    throw UsageError("to_sharp: input must be a signed-distance field");

  InterfaceField out{VoxelGrid(sdf.grid.dims), RepSpec::sharp()};
  for (std::size_t i = 0; i < out.grid.data.size(); ++i) {
    double s = sdf.grid.data[i];
    out.grid.data[i] = s < 0.0 ? 1.0 : (s > 0.0 ? 0.0 : 0.5);
  }
  return out;
}

PhaseMask binarize(const InterfaceField& field) {
  PhaseMask mask(field.grid.dims);
  if (field.representation.kind == ReprKind::Sdf) {
    for (std::size_t i = 0; i < mask.data.size(); ++i)
      mask.data[i] = field.grid.data[i] < 0.0 ? 1 : 0;
  } else {
    for (std::size_t i = 0; i < mask.data.size(); ++i)
      mask.data[i] = field.grid.data[i] >= 0.5 ? 1 : 0;
  }
  return mask;
}

InterfaceField from_sdf(const InterfaceField& sdf, const RepSpec& target) {
  if (sdf.representation.kind != ReprKind::Sdf)
    throw UsageError("from_sdf: input must be a signed-distance field");
  switch (target.kind) {
    case ReprKind::Sdf:
      return sdf;
    case ReprKind::Tanh:
      return to_tanh(sdf, target.epsilon);
    case ReprKind::Sharp:
      return to_sharp(sdf);
  }
  throw ConfigError("from_sdf: invalid target representation");
}

void validate(const InterfaceField& field) {
  const auto& g = field.grid;
  if (!g.dims.valid() || g.data.size() != static_cast<std::size_t>(g.dims.count()))
    throw RepresentationError("interface field: size does not match extents");
  for (double v : g.data)
    if (!std::isfinite(v)) throw RepresentationError("interface field: values must be finite");

  switch (field.representation.kind) {
    case ReprKind::Sdf: {
      const double lo = 0.5 * g.spacing() * (1.0 - 1e-6);
      const double hi = kDomainDiagonal * (1.0 + 1e-6);
      for (double v : g.data) {
        double m = std::abs(v);
        if (m < lo || m > hi)
          throw RepresentationError("sdf: |s| must lie in [spacing/2, sqrt(3)], found " +
                                    format_double(v, 9));
      }
      break;
    }
    case ReprKind::Tanh:
      if (!(field.representation.epsilon > 0.0))
        throw RepresentationError("tanh field: epsilon must be positive");
      [[fallthrough]];
    case ReprKind::Sharp:
      for (double v : g.data)
        if (v < 0.0 || v > 1.0)
          throw RepresentationError("interface field: values must lie in [0, 1], found " +
                                    format_double(v, 9));
      break;
  }
}

}  // namespace mpae::repr
