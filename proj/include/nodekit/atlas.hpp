#pragma once

#include <utility>
#include <vector>

#include "nodekit/transform.hpp"
#include "nodekit/volume.hpp"

namespace nodekit {

/// Lymph-node occurrence probability in atlas space, rescaled to [0, 1].
struct ProbAtlas {
    ScalarVolume vol;
    double smoothing_sigma_vox = 5.0;
    int subject_count = 0;
};

/// Distance to the reference landmark, normalized to [0, 1].
struct DistanceMapPrior {
    ScalarVolume vol;
    Vec3 reference = Vec3::Zero();
};

/// Voxelwise mean of the masks, Gaussian-smoothed (sigma in voxels), then
/// min-max rescaled over the whole grid.
ProbAtlas build_prob_atlas(const std::vector<LabelVolume> &warped_masks, double sigma_vox = 5.0);

/// Centroid (mm) of the trachea on the most superior axial slice whose
/// in-slice mask splits into >= 2 components (8-connectivity).
Vec3 find_carina(const LabelVolume &trachea);

/// Distance (mm) to `ref` divided by its maximum over `norm_region`, clamped to 1.
DistanceMapPrior build_distance_prior(const VolumeGeometry &geometry, const Vec3 &ref,
                                      const LabelVolume &norm_region);

/// Box mask covering the bounding box of `mask` (used as the default
/// normalization region for the distance prior).
LabelVolume bbox_mask(const LabelVolume &mask);

/// Pulls both priors onto `subject_geom`: each subject voxel x samples the
/// atlas at affine(x + u(x)). The field must be tagged atlas_to_subject and
/// live on the subject grid. Outputs are clamped to [0, 1].
std::pair<ScalarVolume, ScalarVolume> transfer_priors(const ProbAtlas &pa, const DistanceMapPrior &dm,
                                                      const AffineTransform &affine, const DisplacementField &field,
                                                      const VolumeGeometry &subject_geom);

} // namespace nodekit
