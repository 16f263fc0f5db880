#pragma once

#include <vector>

#include "nodekit/volume.hpp"

namespace nodekit {

/// Exact squared Euclidean distance (in units of `spacing`) from every voxel
/// center to the nearest voxel center with label > 0. Voxels are infinitely
/// far when the feature set is empty. Separable lower-envelope algorithm.
std::vector<double> squared_distance_transform(const LabelVolume &features, const Vec3 &spacing);

/// Dilation with a Euclidean ball of `radius_vox` voxels measured in index
/// space: offsets with squared length <= radius^2.
LabelVolume dilate_ball(const LabelVolume &mask, int radius_vox);

} // namespace nodekit
