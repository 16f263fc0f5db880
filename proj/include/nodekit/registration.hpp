#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nodekit/transform.hpp"
#include "nodekit/volume.hpp"

namespace nodekit {

struct RegistrationConfig {
    int levels = 3;
    int iterations_per_level = 100;
    double regularization_sigma_mm = 3.0;
    double step_tau = 1.0;
    double convergence_tol = 1e-5;
    FieldDirection direction = FieldDirection::atlas_to_subject;

    /// Throws argument error unless every value is positive and levels <= 4.
    void validate() const;
};

/// Settings of the rigid/affine optimizer (Levenberg-Marquardt on the MSE residuals).
struct LinearOptimizerConfig {
    int levels = 3;
    int max_iterations = 100;
    double initial_damping = 1e-3;
    double min_step_mm = 1e-3;
};

/// Raised when optimization ends worse than where it started; carries the
/// best transform seen.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string &message, AffineTransform best)
        : Error(ErrorCode::convergence, message), best_(std::move(best))
    {
    }
    const AffineTransform &best() const { return best_; }

private:
    AffineTransform best_;
};

using StructureMasks = std::map<std::string, LabelVolume>;

/// bones, heart, esophagus, trachea, aorta
const std::set<std::string> &default_feature_structures();

/// Signed distance (mm) to the union of the selected structures, negative
/// inside, clamped to [-30, 30]. Outside voxels take the distance to the
/// nearest inside voxel center; inside voxels take minus the distance to the
/// nearest outside voxel center, shifted by half the smallest spacing.
ScalarVolume masks_to_feature(const StructureMasks &masks, const std::set<std::string> &selection);
ScalarVolume signed_distance_feature(const LabelVolume &mask, double clamp_mm = 30.0);

/// Mean squared difference between fixed and moving sampled at T(x), x
/// ranging over fixed voxel centers whose image lies inside the moving grid.
double transform_mse(const ScalarVolume &fixed, const ScalarVolume &moving, const AffineTransform &t);

/// Result maps fixed physical points to moving physical points.
AffineTransform register_rigid(const ScalarVolume &fixed_feat, const ScalarVolume &moving_feat,
                               const LinearOptimizerConfig &cfg = {});
AffineTransform register_affine(const ScalarVolume &fixed_feat, const ScalarVolume &moving_feat,
                                const AffineTransform &init, const LinearOptimizerConfig &cfg = {});

/// Per-level trace of the demons iterations that were accepted.
struct VariationalTrace {
    std::vector<std::vector<double>> mse_per_level;
};

/// Demons registration with Gaussian (diffusion) regularization; fixed and
/// moving must be aligned. The field lives on the fixed grid and satisfies
/// moving(x + u(x)) ~ fixed(x).
DisplacementField register_variational(const ScalarVolume &fixed, const ScalarVolume &moving,
                                       const RegistrationConfig &cfg = {}, VariationalTrace *trace = nullptr);

double mean_squared_difference(const ScalarVolume &a, const ScalarVolume &b);

/// Samples `vol` at affine(x + u(x)) for every voxel x of `target`.
/// At least one of affine/field must be given; field geometry must match target.
/// Positions outside `vol` take `outside`.
ScalarVolume warp(const ScalarVolume &vol, const VolumeGeometry &target, const AffineTransform *affine,
                  const DisplacementField *field, Interpolation mode, double outside = 0.0);
LabelVolume warp(const LabelVolume &vol, const VolumeGeometry &target, const AffineTransform *affine,
                 const DisplacementField *field);

/// Convenience overloads: the target grid is the field's grid if present,
/// otherwise the input's own grid.
ScalarVolume warp(const ScalarVolume &vol, const AffineTransform *affine, const DisplacementField *field,
                  Interpolation mode);
LabelVolume warp(const LabelVolume &vol, const AffineTransform *affine, const DisplacementField *field);

} // namespace nodekit
