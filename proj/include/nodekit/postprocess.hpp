#pragma once

#include <optional>
#include <vector>

#include "nodekit/losses.hpp"
#include "nodekit/volume.hpp"

namespace nodekit {

struct PostprocessConfig {
    double t = 0.5;
    std::optional<double> min_diameter_mm;
    int connectivity = 26;

    void validate() const;
};

struct ComponentStats {
    std::size_t voxel_count = 0;
    std::size_t first_voxel = 0; // linear index
    Vec3 centroid_mm = Vec3::Zero();
    Mat3 covariance_mm2 = Mat3::Zero(); // population covariance of voxel centers
    double min_diameter_mm = 0.0;
};

/// labels: 0 background, components 1..n ordered by first linear voxel.
struct ComponentSet {
    LabelVolume labels;
    std::vector<ComponentStats> stats; // stats[id - 1]

    std::size_t count() const { return stats.size(); }
};

/// t (1 - 0.5 p)
double adaptive_threshold(double t, double p);

/// Foreground iff probs >= t (1 - 0.5 pa).
LabelVolume adaptive_binarize(const ProbVolume &probs, const ScalarVolume &pa, const PostprocessConfig &cfg);

/// Every voxel with label > 0 is foreground. connectivity is 6, 18 or 26.
ComponentSet connected_components(const LabelVolume &mask, int connectivity = 26);

/// Keeps components with min_diameter_mm >= threshold; nullopt keeps all.
LabelVolume filter_small_components(const ComponentSet &cs, std::optional<double> min_diameter_mm);

/// Voxels whose centers lie in the closed convex hull of the mask's voxel
/// centers. Lower-dimensional hulls (plane, segment, point) are handled.
LabelVolume convex_hull_voxels(const LabelVolume &mask);

/// pred restricted to the convex hull of both lungs; throws empty_mask.
LabelVolume lung_hull_mask(const LabelVolume &pred, const LabelVolume &lungs);

/// Voxelwise mean.
ProbVolume ensemble(const std::vector<ProbVolume> &probs);

/// ensemble -> binarize -> components -> size filter -> lung hull -> pad.
/// probs, pa and lungs share the cropped grid; without a crop record the
/// result stays on that grid.
LabelVolume run_postprocess(const std::vector<ProbVolume> &probs, const ScalarVolume &pa, const LabelVolume &lungs,
                            const CropRecord *crop, const PostprocessConfig &cfg);

} // namespace nodekit
