#pragma once

#include <optional>
#include <vector>

#include "nodekit/volume.hpp"

namespace nodekit {

/// Foreground probabilities in [0, 1] on a grid.
class ProbVolume {
public:
    ProbVolume() = default;
    /// Throws argument error if any sample lies outside [0, 1].
    explicit ProbVolume(ScalarVolume probs);

    const VolumeGeometry &geometry() const { return vol_.geometry(); }
    const ScalarVolume &volume() const { return vol_; }
    std::size_t size() const { return vol_.size(); }
    double operator[](std::size_t n) const { return vol_[n]; }

private:
    ScalarVolume vol_;
};

struct LossConfig {
    double lambda_ce = 0.25;
    double lambda_dice = 0.25;
    double lambda_tversky = 0.5;
    double alpha = 0.25; // false-positive weight
    double beta = 0.75;  // false-negative weight
    double smooth_eps = 1e-5;
    int dilation_radius_vox = 2;
    double pa_cap = 0.25;

    void validate() const;
};

/// Per-voxel loss weights.
struct WeightMap {
    ScalarVolume weights;
};

/// Loss value with d(loss)/d(pred) per voxel.
struct LossResult {
    double value = 0.0;
    std::vector<double> gradient;
};

/// Mean binary cross-entropy; pred is clamped to [1e-7, 1 - 1e-7].
LossResult cross_entropy(const ProbVolume &pred, const LabelVolume &gt);

/// 1 - (2 sum w p g + eps) / (sum w (p + g) + eps); unit weights when `weights` is null.
LossResult soft_dice_loss(const ProbVolume &pred, const LabelVolume &gt, const WeightMap *weights,
                          double eps = 1e-5);

/// 1 - (TP + eps) / (TP + alpha FP + beta FN + eps) with soft counts.
LossResult tversky_loss(const ProbVolume &pred, const LabelVolume &gt, double alpha, double beta,
                        double eps = 1e-5);

/// w = 1 on the ball-dilated ground truth; elsewhere 1 - p for p <= cap and
/// 1 - cap above it.
WeightMap pa_weight_map(const LabelVolume &gt, const ScalarVolume &pa, const LossConfig &cfg = {});

/// lambda_ce CE + lambda_dice weighted Dice + lambda_tversky Tversky. The Dice
/// weights come from `pa` when given, else are uniform.
LossResult combined_loss(const ProbVolume &pred, const LabelVolume &gt, const ScalarVolume *pa,
                         const LossConfig &cfg = {});

/// Normalized weights 2^-r for `levels` resolutions (full resolution first).
std::vector<double> deep_supervision_weights(std::size_t levels);
double aggregate_deep_supervision(const std::vector<double> &per_level);

/// Per-level targets supplied by the caller; `pas` may be empty (no prior).
double deep_supervision_loss(const std::vector<ProbVolume> &preds, const std::vector<LabelVolume> &gts,
                             const std::vector<ScalarVolume> &pas, const LossConfig &cfg = {});
/// Full-resolution targets resampled onto each prediction grid: nearest for
/// the ground truth, linear for the prior.
double deep_supervision_loss(const std::vector<ProbVolume> &preds, const LabelVolume &gt, const ScalarVolume *pa,
                             const LossConfig &cfg = {});

} // namespace nodekit
