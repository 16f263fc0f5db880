#include "nodekit/volume.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace nodekit {

namespace {

bool close_rel(double a, double b, double tol)
{
    return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

} // namespace

VolumeGeometry VolumeGeometry::make(Index3 dims, Vec3 spacing, Vec3 origin, Mat3 direction)
{
    VolumeGeometry g;
    g.dims = dims;
    g.spacing = spacing;
    g.origin = origin;
    g.direction = direction;
    g.validate();
    return g;
}

Vec3 VolumeGeometry::to_index(const Vec3 &point) const
{
    // direction is orthonormal, so its inverse is the transpose
    return spacing.cwiseInverse().asDiagonal() * (direction.transpose() * (point - origin));
}

void VolumeGeometry::validate() const
{
    for (int a = 0; a < 3; ++a) {
        if (dims[a] <= 0)
            throw Error(ErrorCode::geometry, "volume dims must be positive");
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
            throw Error(ErrorCode::geometry, "volume spacing must be positive");
        if (!std::isfinite(origin[a]))
            throw Error(ErrorCode::geometry, "volume origin must be finite");
    }
    const Mat3 gram = direction.transpose() * direction;
    if (!direction.allFinite() || (gram - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
        throw Error(ErrorCode::geometry, "direction matrix is not orthonormal");
}

bool aligned(const VolumeGeometry &a, const VolumeGeometry &b)
{
    if (a.dims != b.dims)
        return false;
    constexpr double tol = 1e-5;
    for (int r = 0; r < 3; ++r) {
        if (!close_rel(a.spacing[r], b.spacing[r], tol) || !close_rel(a.origin[r], b.origin[r], tol))
            return false;
        for (int c = 0; c < 3; ++c)
            if (!close_rel(a.direction(r, c), b.direction(r, c), tol))
                return false;
    }
    return true;
}

void require_aligned(const VolumeGeometry &a, const VolumeGeometry &b, const char *what)
{
    if (!aligned(a, b))
        throw Error(ErrorCode::geometry, std::string(what) + ": volumes are not aligned");
}

BoundingBox mask_bbox(const LabelVolume &mask)
{
    const auto &g = mask.geometry();
    BoundingBox box{{g.dims[0], g.dims[1], g.dims[2]}, {-1, -1, -1}};
    bool any = false;
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                if (mask.at(i, j, k) == 0)
                    continue;
                any = true;
                const Index3 p{i, j, k};
                for (int a = 0; a < 3; ++a) {
                    box.lo[a] = std::min(box.lo[a], p[a]);
                    box.hi[a] = std::max(box.hi[a], p[a]);
                }
            }
    if (!any)
        throw Error(ErrorCode::empty_mask, "mask has no foreground voxels");
    return box;
}

VolumeGeometry sub_geometry(const VolumeGeometry &g, const Index3 &start, const Index3 &size)
{
    VolumeGeometry out = g;
    out.dims = size;
    out.origin = g.to_physical(start[0], start[1], start[2]);
    return out;
}

CropRecord crop_record_for_mask(const LabelVolume &mask, double margin_mm)
{
    if (margin_mm < 0.0)
        throw Error(ErrorCode::argument, "crop margin must be non-negative");
    const auto &g = mask.geometry();
    const BoundingBox box = mask_bbox(mask);
    CropRecord rec;
    rec.original = g;
    for (int a = 0; a < 3; ++a) {
        // round up so no mask voxel is ever lost
        const int pad = static_cast<int>(std::ceil(margin_mm / g.spacing[a] - 1e-9));
        const int lo = std::max(0, box.lo[a] - pad);
        const int hi = std::min(g.dims[a] - 1, box.hi[a] + pad);
        rec.start[a] = lo;
        rec.size[a] = hi - lo + 1;
    }
    return rec;
}

template <typename T>
Volume<T> apply_crop(const Volume<T> &vol, const CropRecord &crop)
{
    require_aligned(vol.geometry(), crop.original, "apply_crop");
    Volume<T> out(sub_geometry(vol.geometry(), crop.start, crop.size));
    for (int k = 0; k < crop.size[2]; ++k)
        for (int j = 0; j < crop.size[1]; ++j)
            for (int i = 0; i < crop.size[0]; ++i)
                out.at(i, j, k) = vol.at(i + crop.start[0], j + crop.start[1], k + crop.start[2]);
    return out;
}

std::pair<ScalarVolume, CropRecord> crop_to_mask_bbox(const ScalarVolume &vol, const LabelVolume &mask,
                                                      double margin_mm)
{
    require_aligned(vol.geometry(), mask.geometry(), "crop_to_mask_bbox");
    CropRecord rec = crop_record_for_mask(mask, margin_mm);
    ScalarVolume out = apply_crop(vol, rec);
    return {std::move(out), rec};
}

template <typename T>
Volume<T> pad_to_original(const Volume<T> &vol, const CropRecord &crop)
{
    if (vol.dims() != crop.size)
        throw Error(ErrorCode::geometry, "pad_to_original: volume dims do not match crop region");
    Volume<T> out(crop.original);
    for (int k = 0; k < crop.size[2]; ++k)
        for (int j = 0; j < crop.size[1]; ++j)
            for (int i = 0; i < crop.size[0]; ++i)
                out.at(i + crop.start[0], j + crop.start[1], k + crop.start[2]) = vol.at(i, j, k);
    return out;
}

template ScalarVolume apply_crop(const ScalarVolume &, const CropRecord &);
template LabelVolume apply_crop(const LabelVolume &, const CropRecord &);
template ScalarVolume pad_to_original(const ScalarVolume &, const CropRecord &);
template LabelVolume pad_to_original(const LabelVolume &, const CropRecord &);

double percentile(std::vector<double> values, double q)
{
    if (values.empty())
        throw Error(ErrorCode::argument, "percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

ScalarVolume normalize_ct(const ScalarVolume &vol, const LabelVolume &fg)
{
    require_aligned(vol.geometry(), fg.geometry(), "normalize_ct");
    std::vector<double> samples;
    for (std::size_t n = 0; n < vol.size(); ++n)
        if (fg[n] > 0)
            samples.push_back(vol[n]);
    if (samples.empty())
        throw Error(ErrorCode::empty_mask, "normalize_ct: foreground mask is empty");

    const double lo = percentile(samples, 0.5);
    const double hi = percentile(samples, 99.5);

    double sum = 0.0;
    for (double &s : samples) {
        s = std::clamp(s, lo, hi);
        sum += s;
    }
    const double mean = sum / static_cast<double>(samples.size());
    double ss = 0.0;
    for (const double s : samples)
        ss += (s - mean) * (s - mean);
    const double stddev = std::sqrt(ss / static_cast<double>(samples.size()));
    if (stddev < 1e-8)
        throw Error(ErrorCode::degenerate, "normalize_ct: foreground intensities are constant");

    std::vector<double> out(vol.size());
    for (std::size_t n = 0; n < vol.size(); ++n)
        out[n] = (std::clamp(vol[n], lo, hi) - mean) / stddev;
    return ScalarVolume(vol.geometry(), std::move(out));
}

namespace {

// Positions within this many voxels of the lattice hull snap onto it.
constexpr double lattice_slack = 1e-6;

bool lattice_coord(double c, int n, int &i0, double &frac)
{
    if (c < -lattice_slack || c > (n - 1) + lattice_slack)
        return false;
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    i0 = std::min(static_cast<int>(std::floor(c)), std::max(n - 2, 0));
    frac = c - i0;
    if (n == 1) {
        i0 = 0;
        frac = 0.0;
    }
    return true;
}

} // namespace

double sample_linear(const ScalarVolume &vol, const Vec3 &index, double outside)
{
    const auto &d = vol.dims();
    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a)
        if (!lattice_coord(index[a], d[a], i0[a], f[a]))
            return outside;
    const int i1[3] = {std::min(i0[0] + 1, d[0] - 1), std::min(i0[1] + 1, d[1] - 1), std::min(i0[2] + 1, d[2] - 1)};
    const double c00 = vol.at(i0[0], i0[1], i0[2]) * (1 - f[0]) + vol.at(i1[0], i0[1], i0[2]) * f[0];
    const double c10 = vol.at(i0[0], i1[1], i0[2]) * (1 - f[0]) + vol.at(i1[0], i1[1], i0[2]) * f[0];
    const double c01 = vol.at(i0[0], i0[1], i1[2]) * (1 - f[0]) + vol.at(i1[0], i0[1], i1[2]) * f[0];
    const double c11 = vol.at(i0[0], i1[1], i1[2]) * (1 - f[0]) + vol.at(i1[0], i1[1], i1[2]) * f[0];
    const double c0 = c00 * (1 - f[1]) + c10 * f[1];
    const double c1 = c01 * (1 - f[1]) + c11 * f[1];
    return c0 * (1 - f[2]) + c1 * f[2];
}

double sample_linear_clamped(const ScalarVolume &vol, const Vec3 &index, Vec3 *index_gradient)
{
    const auto &d = vol.dims();
    int i0[3], i1[3];
    double f[3];
    bool clamped[3];
    for (int a = 0; a < 3; ++a) {
        const double hi = static_cast<double>(d[a] - 1);
        const double c = std::clamp(index[a], 0.0, hi);
        clamped[a] = index[a] < 0.0 || index[a] > hi;
        i0[a] = std::min(static_cast<int>(std::floor(c)), std::max(d[a] - 2, 0));
        i1[a] = std::min(i0[a] + 1, d[a] - 1);
        f[a] = d[a] == 1 ? 0.0 : c - i0[a];
    }
    const double v000 = vol.at(i0[0], i0[1], i0[2]), v100 = vol.at(i1[0], i0[1], i0[2]);
    const double v010 = vol.at(i0[0], i1[1], i0[2]), v110 = vol.at(i1[0], i1[1], i0[2]);
    const double v001 = vol.at(i0[0], i0[1], i1[2]), v101 = vol.at(i1[0], i0[1], i1[2]);
    const double v011 = vol.at(i0[0], i1[1], i1[2]), v111 = vol.at(i1[0], i1[1], i1[2]);

    const double c00 = v000 + f[0] * (v100 - v000);
    const double c10 = v010 + f[0] * (v110 - v010);
    const double c01 = v001 + f[0] * (v101 - v001);
    const double c11 = v011 + f[0] * (v111 - v011);
    const double c0 = c00 + f[1] * (c10 - c00);
    const double c1 = c01 + f[1] * (c11 - c01);
    const double value = c0 + f[2] * (c1 - c0);

    if (index_gradient) {
        const double gx0 = ((v100 - v000) * (1 - f[1]) + (v110 - v010) * f[1]);
        const double gx1 = ((v101 - v001) * (1 - f[1]) + (v111 - v011) * f[1]);
        double gx = gx0 * (1 - f[2]) + gx1 * f[2];
        double gy = (c10 - c00) * (1 - f[2]) + (c11 - c01) * f[2];
        double gz = c1 - c0;
        if (clamped[0] || d[0] == 1)
            gx = 0.0;
        if (clamped[1] || d[1] == 1)
            gy = 0.0;
        if (clamped[2] || d[2] == 1)
            gz = 0.0;
        *index_gradient = Vec3(gx, gy, gz);
    }
    return value;
}

template <typename T>
T sample_nearest(const Volume<T> &vol, const Vec3 &index, T outside)
{
    const auto &d = vol.dims();
    int p[3];
    for (int a = 0; a < 3; ++a) {
        // voxel a covers [a - 0.5, a + 0.5); ties round half up
        const double c = index[a];
        if (c < -0.5 - lattice_slack || c >= d[a] - 0.5 + lattice_slack)
            return outside;
        p[a] = std::clamp(static_cast<int>(std::floor(c + 0.5)), 0, d[a] - 1);
    }
    return vol.at(p[0], p[1], p[2]);
}

template double sample_nearest(const ScalarVolume &, const Vec3 &, double);
template std::uint32_t sample_nearest(const LabelVolume &, const Vec3 &, std::uint32_t);

namespace {

template <typename T, typename Sampler>
Volume<T> resample_with(const Volume<T> &vol, const VolumeGeometry &target, Sampler sampler)
{
    target.validate();
    const auto &src = vol.geometry();
    // target index -> source index is affine: idx_s = M idx_t + b
    const Mat3 m = src.spacing.cwiseInverse().asDiagonal() * src.direction.transpose() *
                   target.index_to_physical_matrix();
    const Vec3 b = src.to_index(target.origin);
    std::vector<T> out(target.voxel_count());
    std::size_t n = 0;
    for (int k = 0; k < target.dims[2]; ++k)
        for (int j = 0; j < target.dims[1]; ++j)
            for (int i = 0; i < target.dims[0]; ++i, ++n)
                out[n] = sampler(vol, m * Vec3(i, j, k) + b);
    return Volume<T>(target, std::move(out));
}

} // namespace

ScalarVolume resample(const ScalarVolume &vol, const VolumeGeometry &target, Interpolation mode)
{
    if (mode == Interpolation::linear)
        return resample_with(vol, target, [](const ScalarVolume &v, const Vec3 &c) { return sample_linear(v, c); });
    return resample_with(vol, target, [](const ScalarVolume &v, const Vec3 &c) { return sample_nearest(v, c); });
}

LabelVolume resample(const LabelVolume &vol, const VolumeGeometry &target, Interpolation mode)
{
    if (mode != Interpolation::nearest)
        throw Error(ErrorCode::mode, "label volumes can only be resampled with nearest interpolation");
    return resample_with(vol, target, [](const LabelVolume &v, const Vec3 &c) { return sample_nearest(v, c); });
}

namespace {

std::vector<double> gaussian_kernel(double sigma)
{
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        const double w = std::exp(-0.5 * (t * t) / (sigma * sigma));
        k[t + radius] = w;
        sum += w;
    }
    for (double &w : k)
        w /= sum;
    return k;
}

} // namespace

void gaussian_smooth_inplace(std::span<double> data, const VolumeGeometry &geometry, const Vec3 &sigma_vox,
                             bool zero_boundary)
{
    const auto &d = geometry.dims;
    const std::size_t stride[3] = {1, static_cast<std::size_t>(d[0]),
                                   static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1])};
    std::vector<double> line, smoothed;
    for (int axis = 0; axis < 3; ++axis) {
        if (sigma_vox[axis] <= 1e-3 || d[axis] == 1)
            continue;
        const auto kernel = gaussian_kernel(sigma_vox[axis]);
        const int radius = static_cast<int>(kernel.size() / 2);
        const int n = d[axis];
        line.resize(n);
        smoothed.resize(n);
        const int o1 = (axis + 1) % 3, o2 = (axis + 2) % 3;
        for (int b = 0; b < d[o2]; ++b)
            for (int a = 0; a < d[o1]; ++a) {
                const std::size_t base = a * stride[o1] + b * stride[o2];
                for (int t = 0; t < n; ++t)
                    line[t] = data[base + t * stride[axis]];
                for (int t = 0; t < n; ++t) {
                    double acc = 0.0;
                    for (int q = -radius; q <= radius; ++q) {
                        int s = t + q;
                        if (s < 0 || s >= n) {
                            if (zero_boundary)
                                continue;
                            s = std::clamp(s, 0, n - 1);
                        }
                        acc += kernel[q + radius] * line[s];
                    }
                    smoothed[t] = acc;
                }
                for (int t = 0; t < n; ++t)
                    data[base + t * stride[axis]] = smoothed[t];
            }
    }
}

ScalarVolume gaussian_smooth(const ScalarVolume &vol, const Vec3 &sigma_vox, bool zero_boundary)
{
    std::vector<double> data(vol.values());
    gaussian_smooth_inplace(data, vol.geometry(), sigma_vox, zero_boundary);
    return ScalarVolume(vol.geometry(), std::move(data));
}

VolumeGeometry downsampled_geometry(const VolumeGeometry &g, int factor)
{
    if (factor < 1)
        throw Error(ErrorCode::argument, "downsample factor must be >= 1");
    VolumeGeometry out = g;
    for (int a = 0; a < 3; ++a) {
        out.dims[a] = std::max(1, (g.dims[a] + factor - 1) / factor);
        out.spacing[a] = g.spacing[a] * factor;
    }
    // coarse voxel centers sit at the centers of the fine blocks
    out.origin = g.to_physical(Vec3::Constant(0.5 * (factor - 1)));
    return out;
}

ScalarVolume downsample(const ScalarVolume &vol, int factor)
{
    if (factor == 1)
        return vol;
    const ScalarVolume blurred = gaussian_smooth(vol, Vec3::Constant(0.5 * factor), false);
    const VolumeGeometry coarse = downsampled_geometry(vol.geometry(), factor);
    // coarse centers past the last fine voxel clamp to the edge instead of zero
    const Mat3 m = vol.geometry().spacing.cwiseInverse().asDiagonal() * vol.geometry().direction.transpose() *
                   coarse.index_to_physical_matrix();
    const Vec3 b = vol.geometry().to_index(coarse.origin);
    std::vector<double> out(coarse.voxel_count());
    std::size_t n = 0;
    for (int k = 0; k < coarse.dims[2]; ++k)
        for (int j = 0; j < coarse.dims[1]; ++j)
            for (int i = 0; i < coarse.dims[0]; ++i, ++n)
                out[n] = sample_linear_clamped(blurred, m * Vec3(i, j, k) + b);
    return ScalarVolume(coarse, std::move(out));
}

LabelVolume threshold_mask(const ScalarVolume &vol, double level)
{
    LabelVolume out(vol.geometry());
    for (std::size_t n = 0; n < vol.size(); ++n)
        out[n] = vol[n] >= level ? 1u : 0u;
    return out;
}

std::size_t count_nonzero(const LabelVolume &mask)
{
    return static_cast<std::size_t>(std::count_if(mask.values().begin(), mask.values().end(),
                                                  [](std::uint32_t v) { return v != 0; }));
}

ScalarVolume to_scalar(const LabelVolume &labels)
{
    std::vector<double> out(labels.values().begin(), labels.values().end());
    return ScalarVolume(labels.geometry(), std::move(out));
}

} // namespace nodekit
