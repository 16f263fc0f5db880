#include "nodekit/atlas.hpp"

#include <algorithm>
#include <numeric>

#include "nodekit/registration.hpp"

namespace nodekit {

ProbAtlas build_prob_atlas(const std::vector<LabelVolume> &warped_masks, double sigma_vox)
{
    if (warped_masks.empty())
        throw Error(ErrorCode::argument, "build_prob_atlas needs at least one mask");
    if (!(sigma_vox >= 0.0))
        throw Error(ErrorCode::argument, "atlas smoothing sigma must be non-negative");
    const VolumeGeometry &g = warped_masks.front().geometry();
    std::vector<double> sum(g.voxel_count(), 0.0);
    for (const auto &mask : warped_masks) {
        require_aligned(g, mask.geometry(), "build_prob_atlas");
        for (std::size_t n = 0; n < sum.size(); ++n)
            sum[n] += mask[n] > 0 ? 1.0 : 0.0;
    }
    // integer counts keep the mean independent of mask order
    const double count = static_cast<double>(warped_masks.size());
    for (double &v : sum)
        v /= count;

    gaussian_smooth_inplace(sum, g, Vec3::Constant(sigma_vox), true);

    const auto [lo, hi] = std::minmax_element(sum.begin(), sum.end());
    const double vmin = *lo, vmax = *hi;
    if (!(vmax > vmin))
        throw Error(ErrorCode::degenerate, "probability atlas is constant (no annotated voxels?)");
    for (double &v : sum)
        v = std::clamp((v - vmin) / (vmax - vmin), 0.0, 1.0);
    return ProbAtlas{ScalarVolume(g, std::move(sum)), sigma_vox, static_cast<int>(warped_masks.size())};
}

namespace {

int count_components_2d(const LabelVolume &mask, int k, std::vector<int> &labels, Vec3 *centroid_index)
{
    const auto &d = mask.dims();
    labels.assign(static_cast<std::size_t>(d[0]) * d[1], 0);
    std::vector<std::pair<int, int>> stack;
    int components = 0;
    Vec3 sum = Vec3::Zero();
    std::size_t voxels = 0;
    for (int j = 0; j < d[1]; ++j)
        for (int i = 0; i < d[0]; ++i) {
            if (mask.at(i, j, k) == 0)
                continue;
            sum += Vec3(i, j, k);
            ++voxels;
            if (labels[i + j * d[0]] != 0)
                continue;
            ++components;
            stack.emplace_back(i, j);
            labels[i + j * d[0]] = components;
            while (!stack.empty()) {
                const auto [ci, cj] = stack.back();
                stack.pop_back();
                for (int dj = -1; dj <= 1; ++dj)
                    for (int di = -1; di <= 1; ++di) {
                        const int ni = ci + di, nj = cj + dj;
                        if (ni < 0 || nj < 0 || ni >= d[0] || nj >= d[1])
                            continue;
                        if (mask.at(ni, nj, k) == 0 || labels[ni + nj * d[0]] != 0)
                            continue;
                        labels[ni + nj * d[0]] = components;
                        stack.emplace_back(ni, nj);
                    }
            }
        }
    if (centroid_index && voxels > 0)
        *centroid_index = sum / static_cast<double>(voxels);
    return components;
}

} // namespace

Vec3 find_carina(const LabelVolume &trachea)
{
    const auto &g = trachea.geometry();
    std::vector<int> order(g.dims[2]);
    std::iota(order.begin(), order.end(), 0);
    // superior = larger physical z
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return g.to_physical(0, 0, a)[2] > g.to_physical(0, 0, b)[2];
    });
    std::vector<int> labels;
    bool any = false;
    for (const int k : order) {
        Vec3 centroid;
        const int n = count_components_2d(trachea, k, labels, &centroid);
        any = any || n > 0;
        if (n >= 2)
            return g.to_physical(centroid);
    }
    if (!any)
        throw Error(ErrorCode::empty_mask, "trachea mask is empty");
    throw Error(ErrorCode::landmark, "trachea never bifurcates on an axial slice");
}

DistanceMapPrior build_distance_prior(const VolumeGeometry &geometry, const Vec3 &ref, const LabelVolume &norm_region)
{
    geometry.validate();
    require_aligned(geometry, norm_region.geometry(), "build_distance_prior");
    const Vec3 c = geometry.to_index(ref);
    for (int a = 0; a < 3; ++a)
        if (c[a] < -0.5 || c[a] > geometry.dims[a] - 0.5)
            throw Error(ErrorCode::argument, "distance prior reference point lies outside the grid");

    std::vector<double> dist(geometry.voxel_count());
    double max_in_region = 0.0;
    bool any = false;
    std::size_t n = 0;
    for (int k = 0; k < geometry.dims[2]; ++k)
        for (int j = 0; j < geometry.dims[1]; ++j)
            for (int i = 0; i < geometry.dims[0]; ++i, ++n) {
                dist[n] = (geometry.to_physical(i, j, k) - ref).norm();
                if (norm_region[n] > 0) {
                    any = true;
                    max_in_region = std::max(max_in_region, dist[n]);
                }
            }
    if (!any)
        throw Error(ErrorCode::empty_mask, "distance prior normalization region is empty");
    if (!(max_in_region > 0.0))
        throw Error(ErrorCode::degenerate, "distance prior normalization region has zero extent");
    for (double &v : dist)
        v = std::min(v / max_in_region, 1.0);
    return DistanceMapPrior{ScalarVolume(geometry, std::move(dist)), ref};
}

LabelVolume bbox_mask(const LabelVolume &mask)
{
    const BoundingBox box = mask_bbox(mask);
    LabelVolume out(mask.geometry());
    for (int k = box.lo[2]; k <= box.hi[2]; ++k)
        for (int j = box.lo[1]; j <= box.hi[1]; ++j)
            for (int i = box.lo[0]; i <= box.hi[0]; ++i)
                out.at(i, j, k) = 1;
    return out;
}

std::pair<ScalarVolume, ScalarVolume> transfer_priors(const ProbAtlas &pa, const DistanceMapPrior &dm,
                                                      const AffineTransform &affine, const DisplacementField &field,
                                                      const VolumeGeometry &subject_geom)
{
    if (field.direction != FieldDirection::atlas_to_subject)
        throw Error(ErrorCode::argument, "transfer_priors needs an atlas_to_subject displacement field");
    require_aligned(pa.vol.geometry(), dm.vol.geometry(), "transfer_priors (atlas priors)");
    auto clamp01 = [](ScalarVolume v) {
        for (std::size_t n = 0; n < v.size(); ++n)
            v[n] = std::clamp(v[n], 0.0, 1.0);
        return v;
    };
    ScalarVolume pa_subject = clamp01(warp(pa.vol, subject_geom, &affine, &field, Interpolation::linear));
    // beyond the atlas grid the landmark is as far away as it gets
    ScalarVolume dm_subject = clamp01(warp(dm.vol, subject_geom, &affine, &field, Interpolation::linear, 1.0));
    return {std::move(pa_subject), std::move(dm_subject)};
}

} // namespace nodekit
