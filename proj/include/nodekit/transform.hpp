#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Core>

#include "nodekit/volume.hpp"

namespace nodekit {

using Mat4 = Eigen::Matrix4d;

enum class TransformKind { rigid, affine };

/// Homogeneous 4x4 map between physical (mm) coordinates.
class AffineTransform {
public:
    AffineTransform() = default;
    /// Throws argument error if the last row is not (0,0,0,1), or if `kind`
    /// is rigid and the linear part is not a proper rotation.
    AffineTransform(const Mat4 &matrix, TransformKind kind);

    static AffineTransform identity(TransformKind kind = TransformKind::rigid);
    static AffineTransform translation(const Vec3 &t);

    const Mat4 &matrix() const { return matrix_; }
    TransformKind kind() const { return kind_; }
    Mat3 linear() const { return matrix_.topLeftCorner<3, 3>(); }
    Vec3 offset() const { return matrix_.topRightCorner<3, 1>(); }

    Vec3 apply(const Vec3 &p) const { return linear() * p + offset(); }
    /// (this ∘ other)(x) = this(other(x)); rigid only if both are.
    AffineTransform compose(const AffineTransform &other) const;

private:
    Mat4 matrix_ = Mat4::Identity();
    TransformKind kind_ = TransformKind::rigid;
};

/// 16 numbers, row-major, whitespace separated.
void write_affine(const AffineTransform &t, const std::filesystem::path &path);
/// Kind is rigid when the linear part is a proper rotation, else affine.
AffineTransform read_affine(const std::filesystem::path &path);

/// Which way a field resamples images. A field stored on grid G with
/// tag atlas_to_subject lives on the subject grid and points each subject
/// voxel at its atlas position, so atlas images can be pulled onto G.
enum class FieldDirection { atlas_to_subject, subject_to_atlas };

const char *to_string(FieldDirection d);

/// Per-voxel displacement in mm on `geometry`.
struct DisplacementField {
    VolumeGeometry geometry;
    std::vector<Vec3> vectors;
    FieldDirection direction = FieldDirection::atlas_to_subject;

    static DisplacementField zero(const VolumeGeometry &g,
                                  FieldDirection dir = FieldDirection::atlas_to_subject);

    /// Throws geometry/data errors on length mismatch or non-finite entries.
    void validate() const;
    double max_norm() const;
    /// Trilinear interpolation at a physical point, zero outside the grid.
    Vec3 sample(const Vec3 &point) const;
};

/// Linear resample of each component onto `target` (vectors stay in mm).
DisplacementField resample_field(const DisplacementField &field, const VolumeGeometry &target);

} // namespace nodekit
