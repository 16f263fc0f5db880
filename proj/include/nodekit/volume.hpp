#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "nodekit/error.hpp"

namespace nodekit {

using Index3 = std::array<int, 3>;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Grid layout shared by every volume: voxel counts, mm spacing, origin and
/// an orthonormal direction matrix whose columns are the index axes.
struct VolumeGeometry {
    Index3 dims{1, 1, 1};
    Vec3 spacing = Vec3::Ones();
    Vec3 origin = Vec3::Zero();
    Mat3 direction = Mat3::Identity();

    static VolumeGeometry make(Index3 dims, Vec3 spacing = Vec3::Ones(),
                               Vec3 origin = Vec3::Zero(),
                               Mat3 direction = Mat3::Identity());

    std::size_t voxel_count() const
    {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
               static_cast<std::size_t>(dims[2]);
    }

    std::size_t linear(int i, int j, int k) const
    {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
    }

    Index3 unravel(std::size_t n) const
    {
        const auto nx = static_cast<std::size_t>(dims[0]);
        const auto ny = static_cast<std::size_t>(dims[1]);
        return {static_cast<int>(n % nx), static_cast<int>((n / nx) % ny), static_cast<int>(n / (nx * ny))};
    }

    bool contains(int i, int j, int k) const
    {
        return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
    }

    /// index -> physical (mm)
    Mat3 index_to_physical_matrix() const { return direction * spacing.asDiagonal(); }
    Vec3 to_physical(const Vec3 &index) const { return origin + index_to_physical_matrix() * index; }
    Vec3 to_physical(int i, int j, int k) const { return to_physical(Vec3(i, j, k)); }
    Vec3 to_index(const Vec3 &point) const;

    /// Throws Error(geometry) when an invariant is violated.
    void validate() const;
};

/// Equal dims and spacing/origin/direction within 1e-5 relative tolerance.
bool aligned(const VolumeGeometry &a, const VolumeGeometry &b);
void require_aligned(const VolumeGeometry &a, const VolumeGeometry &b, const char *what);

template <typename T>
class Volume {
public:
    using value_type = T;

    Volume() = default;

    explicit Volume(const VolumeGeometry &geometry, T fill = T{})
        : geometry_(geometry), data_(geometry.voxel_count(), fill)
    {
        geometry_.validate();
        check_samples();
    }

    Volume(const VolumeGeometry &geometry, std::vector<T> data)
        : geometry_(geometry), data_(std::move(data))
    {
        geometry_.validate();
        if (data_.size() != geometry_.voxel_count())
            throw Error(ErrorCode::geometry, "volume data length does not match dims");
        check_samples();
    }

    const VolumeGeometry &geometry() const { return geometry_; }
    const Index3 &dims() const { return geometry_.dims; }
    std::size_t size() const { return data_.size(); }

    std::span<const T> data() const { return data_; }
    std::span<T> data() { return data_; }
    const std::vector<T> &values() const & { return data_; }
    // rvalue overload keeps range-for over a temporary volume valid
    std::vector<T> values() && { return std::move(data_); }

    const T &operator[](std::size_t n) const { return data_[n]; }
    T &operator[](std::size_t n) { return data_[n]; }
    const T &at(int i, int j, int k) const { return data_[geometry_.linear(i, j, k)]; }
    T &at(int i, int j, int k) { return data_[geometry_.linear(i, j, k)]; }

    /// Same geometry, different sample type.
    template <typename U>
    Volume<U> like(U fill = U{}) const
    {
        return Volume<U>(geometry_, fill);
    }

private:
    void check_samples() const
    {
        if constexpr (std::is_floating_point_v<T>) {
            for (const T v : data_)
                if (!std::isfinite(v))
                    throw Error(ErrorCode::data, "volume contains non-finite samples");
        }
    }

    VolumeGeometry geometry_;
    std::vector<T> data_;
};

using ScalarVolume = Volume<double>;
using LabelVolume = Volume<std::uint32_t>;

enum class Interpolation { linear, nearest };

/// Bookkeeping needed to undo crop_to_mask_bbox.
struct CropRecord {
    VolumeGeometry original;
    Index3 start{0, 0, 0};
    Index3 size{0, 0, 0};
};

struct BoundingBox {
    Index3 lo{0, 0, 0};
    Index3 hi{0, 0, 0}; // inclusive
};

/// Inclusive index bounding box of voxels with label > 0; throws empty_mask.
BoundingBox mask_bbox(const LabelVolume &mask);

/// Geometry of the sub-grid starting at `start` with `size` voxels.
VolumeGeometry sub_geometry(const VolumeGeometry &g, const Index3 &start, const Index3 &size);

std::pair<ScalarVolume, CropRecord> crop_to_mask_bbox(const ScalarVolume &vol, const LabelVolume &mask,
                                                      double margin_mm);
CropRecord crop_record_for_mask(const LabelVolume &mask, double margin_mm);

template <typename T>
Volume<T> apply_crop(const Volume<T> &vol, const CropRecord &crop);
template <typename T>
Volume<T> pad_to_original(const Volume<T> &vol, const CropRecord &crop);

/// Linear-interpolation percentile (q in [0,100]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

/// Clip to the 0.5/99.5 foreground percentiles, then z-score with the
/// clipped foreground mean and standard deviation.
ScalarVolume normalize_ct(const ScalarVolume &vol, const LabelVolume &fg);

/// Trilinear sample at a continuous index; `outside` beyond the sample lattice.
double sample_linear(const ScalarVolume &vol, const Vec3 &index, double outside = 0.0);
/// Trilinear sample with edge clamping and its index-space gradient.
double sample_linear_clamped(const ScalarVolume &vol, const Vec3 &index, Vec3 *index_gradient = nullptr);
template <typename T>
T sample_nearest(const Volume<T> &vol, const Vec3 &index, T outside = T{});

ScalarVolume resample(const ScalarVolume &vol, const VolumeGeometry &target, Interpolation mode);
LabelVolume resample(const LabelVolume &vol, const VolumeGeometry &target, Interpolation mode);

/// Separable Gaussian blur, sigma given in voxels per axis. Kernels are
/// truncated at 3 sigma and normalized; samples beyond the grid count as zero
/// (`zero_boundary`) or replicate the edge.
ScalarVolume gaussian_smooth(const ScalarVolume &vol, const Vec3 &sigma_vox, bool zero_boundary = true);
/// In-place variant over a raw buffer laid out per `geometry`.
void gaussian_smooth_inplace(std::span<double> data, const VolumeGeometry &geometry, const Vec3 &sigma_vox,
                             bool zero_boundary);

/// Grid with `factor`x coarser spacing covering the same physical extent.
VolumeGeometry downsampled_geometry(const VolumeGeometry &g, int factor);
/// Blur (sigma = factor/2 voxels) then linear resample onto the coarse grid.
ScalarVolume downsample(const ScalarVolume &vol, int factor);

LabelVolume threshold_mask(const ScalarVolume &vol, double level);
std::size_t count_nonzero(const LabelVolume &mask);
ScalarVolume to_scalar(const LabelVolume &labels);

} // namespace nodekit
