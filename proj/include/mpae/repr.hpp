#pragma once

#include <optional>

#include "mpae/common.hpp"

namespace mpae::repr {

// A scalar interface field together with the representation it encodes.
struct InterfaceField {
  VoxelGrid grid;
  RepSpec representation;
};

// Exact Euclidean distance transform: distance (in domain units) from every
// voxel center to the nearest true voxel center. Returns nullopt when the
// mask has no true voxels.
std::optional<VoxelGrid> edt(const PhaseMask& mask);

// Signed distance to the phase interface, negative inside phase one. Voxel
// centers sit half a cell off the interface, so |s| >= spacing/2 and the sign
// is always defined. Degenerate masks map to the constant sentinel -sqrt(3)
// (all foreground) or +sqrt(3) (all background).
InterfaceField signed_distance(const PhaseMask& mask);

// Diffuse profile phi = (1 + tanh(-s / (2 eps))) / 2, so phi -> 1 inside
// phase one and the 0.5 level sits on the interface.
InterfaceField to_tanh(const InterfaceField& sdf, double epsilon);

// Sharp indicator H = (1 - sgn(s)) / 2 in {0, 1} (0.5 only if s == 0, which
// signed_distance never produces).
InterfaceField to_sharp(const InterfaceField& sdf);

// Recover the phase mask: s < 0 for SDFs, value >= 0.5 otherwise.
PhaseMask binarize(const InterfaceField& field);

// Derive any target representation from a canonical SDF.
InterfaceField from_sdf(const InterfaceField& sdf, const RepSpec& target);

// Throws RepresentationError when the field violates the invariants of its
// kind (finite everywhere; SDF magnitude within [spacing/2, sqrt(3)];
// tanh/sharp values within [0, 1]).
void validate(const InterfaceField& field);

}  // namespace mpae::repr
