#pragma once

#include <vector>

#include "nodekit/postprocess.hpp"
#include "nodekit/volume.hpp"

namespace nodekit {

/// Per-voxel class probabilities, voxel-major: probs[v * classes + c].
class SoftmaxVolume {
public:
    SoftmaxVolume() = default;
    /// Throws argument error on negative entries or per-voxel sums off 1 by more than 1e-5.
    SoftmaxVolume(const VolumeGeometry &geometry, int classes, std::vector<double> probs);
    /// Two-class volume (1 - p, p).
    static SoftmaxVolume from_foreground(const ProbVolume &fg);

    const VolumeGeometry &geometry() const { return geometry_; }
    int classes() const { return classes_; }
    std::size_t voxels() const { return geometry_.voxel_count(); }
    double prob(std::size_t voxel, int c) const { return probs_[voxel * classes_ + c]; }
    ScalarVolume channel(int c) const;

private:
    VolumeGeometry geometry_;
    int classes_ = 0;
    std::vector<double> probs_;
};

using ParamVector = std::vector<double>;

/// -sum_c p log p with natural log and 0 log 0 = 0.
ScalarVolume entropy_map(const SoftmaxVolume &sm);

/// Reliable iff the voxel entropy falls in a 256-bin histogram bin at or
/// below the first bin whose cumulative fraction reaches `quantile`.
LabelVolume reliability_mask(const SoftmaxVolume &sm, double quantile);

/// m teacher + (1 - m) student
ParamVector ema_update(const ParamVector &teacher, const ParamVector &student, double momentum);

/// Class with the highest probability; ties resolve to the higher class index.
LabelVolume argmax_labels(const SoftmaxVolume &sm);

/// run_postprocess on the foreground channel of a two-class softmax.
LabelVolume pseudo_label(const SoftmaxVolume &sm, const ScalarVolume &pa, const LabelVolume &lungs,
                         const PostprocessConfig &cfg);

} // namespace nodekit
