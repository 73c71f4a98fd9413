#include "mpae/volume.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include <json.hpp>

#include "mpae/detail/io.hpp"
#include "mpae/repr.hpp"

namespace mpae::volume {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Provenance p) {
  return p == Provenance::Synthetic ? "synthetic" : "ingested";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Test:
      return "test";
    case Split::Val:
      return "val";
    case Split::Unassigned:
      return "unassigned";
  }
  throw ConfigError("split: invalid value");
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "synthetic") return Provenance::Synthetic;
  if (s == "ingested") return Provenance::Ingested;
  throw FormatError("manifest: unknown provenance '" + s + "'");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "val") return Split::Val;
  if (s == "unassigned") return Split::Unassigned;
  throw FormatError("manifest: unknown split '" + s + "'");
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (e.id.empty()) throw FormatError("manifest: empty sample id");
    if (e.path.empty()) throw FormatError("manifest: entry '" + e.id + "' has no path");
    if (!ids.insert(e.id).second)
      throw FormatError("manifest: duplicate sample id '" + e.id + "'");
  }
}

std::vector<std::size_t> DatasetManifest::indices_of(Split s) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s) idx.push_back(i);
  return idx;
}

double volume_fraction(const PhaseMask& mask) {
  if (!mask.dims.valid() || mask.data.size() != static_cast<std::size_t>(mask.dims.count()))
    throw DimensionError("volume_fraction: mask size does not match extents");
  return static_cast<double>(mask.count_true()) / static_cast<double>(mask.dims.count());
}

PhaseMask complement(const PhaseMask& mask) {
  PhaseMask out(mask.dims);
  for (std::size_t i = 0; i < mask.data.size(); ++i) out.data[i] = mask.data[i] ? 0 : 1;
  return out;
}

VoxelGrid extract_patch(const VoxelGrid& v, const PatchSpec& p) {
  const int s = p.size;
  if (s <= 0) throw DimensionError("extract_patch: size must be positive");
  for (int a = 0; a < 3; ++a)
    if (p.origin[a] < 0) throw DimensionError("extract_patch: negative origin");
  if (p.origin[0] + s > v.dims.nx || p.origin[1] + s > v.dims.ny || p.origin[2] + s > v.dims.nz)
    throw DimensionError("extract_patch: patch exceeds volume extents");

  VoxelGrid out(Dims{s, s, s});
  for (int k = 0; k < s; ++k)
    for (int j = 0; j < s; ++j)
      for (int i = 0; i < s; ++i)
        out.at(i, j, k) = v.at(p.origin[0] + i, p.origin[1] + j, p.origin[2] + k);
  return out;
}

std::vector<VoxelGrid> extract_patches(const VoxelGrid& diffuse, int patch_size, int count,
                                       double empty_threshold, Rng& rng) {
  if (patch_size <= 0 || patch_size > diffuse.dims.nx || patch_size > diffuse.dims.ny ||
      patch_size > diffuse.dims.nz)
    throw DimensionError("extract_patches: patch size must fit inside the volume");
  if (count < 0) throw ConfigError("extract_patches: count must be non-negative");
  if (!(empty_threshold >= 0.0 && empty_threshold < 0.5))
    throw ConfigError("extract_patches: empty_threshold must lie in [0, 0.5)");

  const double lo = empty_threshold;
  const double hi = 1.0 - empty_threshold;
  std::vector<VoxelGrid> kept;
  for (int n = 0; n < count; ++n) {
    PatchSpec p;
    p.size = patch_size;
    p.origin[0] = static_cast<int>(rng.bounded(diffuse.dims.nx - patch_size + 1));
    p.origin[1] = static_cast<int>(rng.bounded(diffuse.dims.ny - patch_size + 1));
    p.origin[2] = static_cast<int>(rng.bounded(diffuse.dims.nz - patch_size + 1));
    VoxelGrid patch = extract_patch(diffuse, p);
    bool has_interface = std::any_of(patch.data.begin(), patch.data.end(),
                                     [&](double v) { return v > lo && v < hi; });
    if (has_interface) kept.push_back(std::move(patch));
  }
  return kept;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("split: ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split: ratios must sum to 1");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double quota = ratios[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(quota));
    frac[i] = quota - std::floor(quota);
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t left = n - assigned, i = 0; left > 0; --left, ++i) sizes[order[i % 3]] += 1;
  return sizes;
}

void split_dataset(DatasetManifest& manifest, const std::array<double, 3>& ratios, Rng& rng) {
  const std::size_t n = manifest.entries.size();
  auto sizes = split_sizes(n, ratios);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  for (std::size_t i = 0; i < n; ++i) {
    Split s = i < sizes[0]                ? Split::Train
              : i < sizes[0] + sizes[1]   ? Split::Test
                                          : Split::Val;
    manifest.entries[idx[i]].split = s;
  }
}

namespace {

json sidecar_json(const Dims& dims, const RepSpec& rep) {
  json j;
  j["byte_order"] = "le";
  j["dims"] = {dims.nx, dims.ny, dims.nz};
  j["dtype"] = "f32";
  if (rep.kind == ReprKind::Tanh)
    j["epsilon"] = rep.epsilon;
  else
    j["epsilon"] = nullptr;
  switch (rep.kind) {
    case ReprKind::Sdf:
      j["representation"] = "sdf";
      break;
    case ReprKind::Tanh:
      j["representation"] = "tanh";
      break;
    case ReprKind::Sharp:
      j["representation"] = "sharp";
      break;
  }
  return j;
}

RepSpec rep_from_json(const json& j, const std::string& what) {
  std::string kind = j.at("representation").get<std::string>();
  if (kind == "sdf") return RepSpec::sdf();
  if (kind == "sharp") return RepSpec::sharp();
  if (kind == "tanh") {
    const auto& eps = j.at("epsilon");
    if (eps.is_null()) return RepSpec{ReprKind::Tanh, 0.0};
    return RepSpec{ReprKind::Tanh, eps.get<double>()};
  }
  throw FormatError(what + ": unknown representation '" + kind + "'");
}

json parse_json_file(const fs::path& path, const std::string& what) {
  std::string text = detail::read_file_bytes(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError(what + ": malformed JSON in " + path.string());
  return j;
}

}  // namespace

void write_volume(const VoxelGrid& grid, const fs::path& path, const RepSpec& rep) {
  if (!grid.dims.valid()) throw DimensionError("write_volume: extents must be positive");
  if (grid.data.size() != static_cast<std::size_t>(grid.dims.count()))
    throw DimensionError("write_volume: data length does not match extents");
  for (double v : grid.data)
    if (!std::isfinite(v)) throw FormatError("write_volume: payload must be finite");

  std::string payload;
  payload.reserve(grid.data.size() * 4);
  for (double v : grid.data) detail::put_f32(payload, static_cast<float>(v));
  detail::write_file_atomic(path, payload);

  fs::path sidecar = path;
  sidecar += ".json";
  detail::write_file_atomic(sidecar, sidecar_json(grid.dims, rep).dump(2) + "\n");
}

LoadedVolume read_volume(const fs::path& path) {
  fs::path sidecar = path;
  sidecar += ".json";
  json j = parse_json_file(sidecar, "volume sidecar");

  for (const char* key : {"byte_order", "dims", "dtype", "representation"})
    if (!j.contains(key))
      throw FormatError("volume sidecar: missing field '" + std::string(key) + "'");
  if (j["byte_order"].get<std::string>() != "le")
    throw FormatError("volume sidecar: unsupported byte order");
  if (j["dtype"].get<std::string>() != "f32")
    throw FormatError("volume sidecar: unknown dtype '" + j["dtype"].get<std::string>() + "'");
  auto dims_v = j["dims"].get<std::vector<int>>();
  if (dims_v.size() != 3 || dims_v[0] <= 0 || dims_v[1] <= 0 || dims_v[2] <= 0)
    throw FormatError("volume sidecar: dims must be three positive integers");

  Dims dims{dims_v[0], dims_v[1], dims_v[2]};
  std::string payload = detail::read_file_bytes(path);
  if (payload.size() != static_cast<std::size_t>(dims.count()) * 4)
    throw FormatError("volume payload: expected " + std::to_string(dims.count() * 4) +
                      " bytes, found " + std::to_string(payload.size()));

  LoadedVolume out;
  out.grid = VoxelGrid(dims);
  out.representation = rep_from_json(j, "volume sidecar");
  detail::ByteReader r(payload, "volume payload");
  for (auto& v : out.grid.data) {
    float f = r.f32();
    if (!std::isfinite(f)) throw FormatError("volume payload: values must be finite");
    v = f;
  }
  return out;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  manifest.validate();
  json j;
  j["schema"] = "mpae-manifest-v1";
  j["seed"] = manifest.seed;
  j["note"] = manifest.note;
  j["entries"] = json::array();
  for (const auto& e : manifest.entries) {
    json je;
    je["id"] = e.id;
    je["path"] = e.path;
    switch (e.representation.kind) {
      case ReprKind::Sdf:
        je["representation"] = "sdf";
        je["epsilon"] = nullptr;
        break;
      case ReprKind::Tanh:
        je["representation"] = "tanh";
        je["epsilon"] = e.representation.epsilon;
        break;
      case ReprKind::Sharp:
        je["representation"] = "sharp";
        je["epsilon"] = nullptr;
        break;
    }
    je["provenance"] = to_string(e.provenance);
    je["split"] = to_string(e.split);
    je["capped"] = e.capped;
    j["entries"].push_back(je);
  }
  detail::write_file_atomic(path, j.dump(2) + "\n");
}

DatasetManifest read_manifest(const fs::path& path) {
  json j = parse_json_file(path, "manifest");
  if (!j.contains("schema") || j["schema"].get<std::string>() != "mpae-manifest-v1")
    throw FormatError("manifest: missing or unsupported schema tag");

  DatasetManifest m;
  m.seed = j.value("seed", std::uint64_t{0});
  m.note = j.value("note", std::string{});
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    e.id = je.at("id").get<std::string>();
    e.path = je.at("path").get<std::string>();
    e.representation = rep_from_json(je, "manifest");
    e.provenance = provenance_from_string(je.at("provenance").get<std::string>());
    e.split = split_from_string(je.at("split").get<std::string>());
    e.capped = je.value("capped", false);
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

DatasetManifest ingest_diffuse_volumes(const fs::path& in_dir, const IngestParams& params,
                                       const fs::path& out_dir) {
  if (!fs::exists(in_dir) || !fs::is_directory(in_dir))
    throw IoError("ingest: input directory not found: " + in_dir.string());

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(in_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".vol")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  DatasetManifest manifest;
  manifest.seed = params.seed;
  manifest.note = "ingested diffuse fields, eps_sim=" + format_double(params.eps_sim, 12);

  if (files.empty()) {
    std::cerr << "warning: ingest: no .vol files under " << in_dir.string()
              << ", writing empty manifest\n";
    write_manifest(manifest, out_dir / "manifest.json");
    return manifest;
  }

  // Validate every input before writing anything so a malformed volume cannot
  // leave a partial dataset behind.
  std::vector<VoxelGrid> grids;
  grids.reserve(files.size());
  for (const auto& f : files) {
    LoadedVolume lv = read_volume(f);
    for (double v : lv.grid.data)
      if (v < -0.05 || v > 1.05)
        throw RepresentationError("ingest: " + f.string() +
                                  ": diffuse values must lie in [-0.05, 1.05], found " +
                                  format_double(v, 6));
    grids.push_back(std::move(lv.grid));
  }

  const RepSpec source_rep{ReprKind::Tanh, params.eps_sim};
  for (std::size_t vi = 0; vi < grids.size(); ++vi) {
    Rng rng(Rng::derive(params.seed, vi));
    auto patches = extract_patches(grids[vi], params.patch_size, params.count_per_volume,
                                   params.empty_threshold, rng);
    const std::string stem = files[vi].stem().string();
    for (std::size_t pi = 0; pi < patches.size(); ++pi) {
      char suffix[16];
      std::snprintf(suffix, sizeof(suffix), "_p%03zu", pi);
      ManifestEntry e;
      e.id = stem + suffix;
      e.path = "volumes/" + e.id + ".vol";
      e.representation = RepSpec::sdf();
      e.provenance = Provenance::Ingested;

      PhaseMask mask = repr::binarize({std::move(patches[pi]), source_rep});
      repr::InterfaceField sdf = repr::signed_distance(mask);
      write_volume(sdf.grid, out_dir / e.path, RepSpec::sdf());
      manifest.entries.push_back(std::move(e));
    }
  }

  Rng split_rng(Rng::derive(params.seed, 0x53504c4954ULL));  // "SPLIT" stream
  split_dataset(manifest, params.split_ratios, split_rng);
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace mpae::volume
