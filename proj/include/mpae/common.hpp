#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpae {

// Error hierarchy. Every failure mode in the library maps onto one of these
// so callers (CLI, sweep drivers) can distinguish "bad input" from "bad code".
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};
class FormatError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class UsageError : public Error {
 public:
  using Error::Error;
};
class StatsError : public Error {
 public:
  using Error::Error;
};
class RepresentationError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

// Grid extents. The physical domain spans one unit along the largest axis,
// voxels are cubes of side spacing() = 1 / max extent.
struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  bool operator==(const Dims&) const = default;

  std::int64_t count() const {
    return static_cast<std::int64_t>(nx) * ny * nz;
  }
  int max_extent() const { return std::max({nx, ny, nz}); }
  double spacing() const { return 1.0 / max_extent(); }
  bool valid() const { return nx > 0 && ny > 0 && nz > 0; }
  bool contains(int i, int j, int k) const {
    return i >= 0 && i < nx && j >= 0 && j < ny && k >= 0 && k < nz;
  }
};

// x-fastest linear index.
inline std::int64_t flat_index(const Dims& d, int i, int j, int k) {
  return i + static_cast<std::int64_t>(d.nx) * (j + static_cast<std::int64_t>(d.ny) * k);
}

// Dense scalar field on a voxel grid, stored x-fastest.
struct VoxelGrid {
  Dims dims;
  std::vector<double> data;

  VoxelGrid() = default;
  explicit VoxelGrid(Dims d, double fill = 0.0)
      : dims(d), data(static_cast<std::size_t>(d.count()), fill) {
    if (!d.valid()) throw DimensionError("VoxelGrid: extents must be positive");
  }

  double& at(int i, int j, int k) { return data[flat_index(dims, i, j, k)]; }
  double at(int i, int j, int k) const { return data[flat_index(dims, i, j, k)]; }
  double spacing() const { return dims.spacing(); }
};

// Binary phase indicator on a voxel grid (1 = phase one / droplet phase).
struct PhaseMask {
  Dims dims;
  std::vector<std::uint8_t> data;

  PhaseMask() = default;
  explicit PhaseMask(Dims d, bool fill = false)
      : dims(d), data(static_cast<std::size_t>(d.count()), fill ? 1 : 0) {
    if (!d.valid()) throw DimensionError("PhaseMask: extents must be positive");
  }

  bool at(int i, int j, int k) const { return data[flat_index(dims, i, j, k)] != 0; }
  void set(int i, int j, int k, bool v) { data[flat_index(dims, i, j, k)] = v ? 1 : 0; }
  std::int64_t count_true() const {
    std::int64_t n = 0;
    for (auto v : data) n += (v != 0);
    return n;
  }
};

// Deterministic random source. The engine is std::mt19937_64 (its sequence is
// fixed by the standard); the distributions are implemented here because the
// std:: distribution objects are implementation-defined and would break
// byte-reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; draws two uniforms per call, no cached spare.
  double normal(double mean, double stddev) {
    double u1 = uniform01();
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    constexpr double two_pi = 6.283185307179586476925286766559;
    return mean + stddev * r * std::cos(two_pi * u2);
  }

  // Unbiased integer on [0, n) by rejection.
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) throw UsageError("Rng::bounded: n must be positive");
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t x = next_u64();
      if (x >= threshold) return x % n;
    }
  }

  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Stream derivation (splitmix64 finalizer) so one experiment seed can fan
  // out into independent per-sample / per-run seeds.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

// Interface-field representation tag. Tanh carries its half-thickness
// parameter epsilon; for the other kinds epsilon is unused and kept at zero.
enum class ReprKind { Sdf, Tanh, Sharp };

struct RepSpec {
  ReprKind kind = ReprKind::Sdf;
  double epsilon = 0.0;

  bool operator==(const RepSpec&) const = default;

  static RepSpec sdf() { return {ReprKind::Sdf, 0.0}; }
  static RepSpec sharp() { return {ReprKind::Sharp, 0.0}; }
  static RepSpec tanh(double eps) { return {ReprKind::Tanh, eps}; }

  // Accepts "sdf", "sharp", "tanh:<eps>" where <eps> is a decimal or "a/b".
  static RepSpec parse(const std::string& text);
  std::string label() const;       // e.g. "tanh:0.03125"
  std::string file_label() const;  // filesystem-safe, e.g. "tanh_0.03125"
};

std::string format_double(double v, int significant = 9);

constexpr double kDomainDiagonal = 1.7320508075688772;  // sqrt(3)

}  // namespace mpae
