#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mpae/common.hpp"

namespace mpae::volume {

enum class Provenance { Synthetic, Ingested };
enum class Split { Unassigned, Train, Test, Val };

std::string to_string(Provenance p);
std::string to_string(Split s);
Provenance provenance_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the manifest's directory
  RepSpec representation;
  Provenance provenance = Provenance::Synthetic;
  Split split = Split::Unassigned;
  bool capped = false;  // generator hit its droplet cap before the target fraction
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  std::string note;

  void validate() const;  // unique ids, non-empty paths
  std::vector<std::size_t> indices_of(Split s) const;
};

// Fraction of voxels whose indicator is true.
double volume_fraction(const PhaseMask& mask);

PhaseMask complement(const PhaseMask& mask);

struct PatchSpec {
  std::array<int, 3> origin{0, 0, 0};
  int size = 0;
};

VoxelGrid extract_patch(const VoxelGrid& v, const PatchSpec& p);

// Draws `count` cube origins uniformly over valid offsets and keeps the
// patches that contain interface, i.e. at least one value strictly inside
// (empty_threshold, 1 - empty_threshold). Intended for diffuse fields.
std::vector<VoxelGrid> extract_patches(const VoxelGrid& diffuse, int patch_size, int count,
                                       double empty_threshold, Rng& rng);

// Largest-remainder apportionment of n into the given ratios (must sum to 1).
// Ties in the remainders go to the lower index.
std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios);

// Assigns train/test/val splits by seeded shuffle + largest-remainder sizes.
void split_dataset(DatasetManifest& manifest, const std::array<double, 3>& ratios, Rng& rng);

// Raw little-endian float32 payload, x-fastest, plus a JSON sidecar at
// "<path>.json" recording dims / dtype / representation / epsilon / byte order.
void write_volume(const VoxelGrid& grid, const std::filesystem::path& path, const RepSpec& rep);

struct LoadedVolume {
  VoxelGrid grid;
  RepSpec representation;
};

LoadedVolume read_volume(const std::filesystem::path& path);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

struct IngestParams {
  double eps_sim = 0.0;  // interface half-thickness of the source fields (recorded only)
  int patch_size = 64;
  int count_per_volume = 64;
  double empty_threshold = 0.01;
  std::uint64_t seed = 0;
  std::array<double, 3> split_ratios{0.8, 0.15, 0.05};
};

// Reads every "*.vol" diffuse volume under in_dir (sorted by filename),
// validates values lie in [-0.05, 1.05], cuts interface patches, converts each
// patch to a signed-distance field and writes canonical volumes plus a
// manifest under out_dir. Nothing is written until all inputs validate.
DatasetManifest ingest_diffuse_volumes(const std::filesystem::path& in_dir,
                                       const IngestParams& params,
                                       const std::filesystem::path& out_dir);

}  // namespace mpae::volume
