#include "nodekit/distance.hpp"

#include <limits>

namespace nodekit {

namespace {

constexpr double far_away = 1e30;

// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher), positions
// scaled by `h`. `f` holds sampled costs, far_away marks "no feature".
void envelope_1d(const std::vector<double> &f, std::vector<double> &out, double h, std::vector<int> &v,
                 std::vector<double> &z)
{
    const int n = static_cast<int>(f.size());
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] >= far_away)
            continue;
        const double xq = q * h;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -std::numeric_limits<double>::infinity();
            z[1] = std::numeric_limits<double>::infinity();
            continue;
        }
        for (;;) {
            const double xv = v[k] * h;
            const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if (s <= z[k] && k > 0) {
                --k;
                continue;
            }
            if (s <= z[k]) {
                // k == 0: the new parabola dominates everywhere
                v[0] = q;
                z[1] = std::numeric_limits<double>::infinity();
                break;
            }
            ++k;
            v[k] = q;
            z[k] = s;
            z[k + 1] = std::numeric_limits<double>::infinity();
            break;
        }
    }
    if (k < 0) {
        std::fill(out.begin(), out.end(), far_away);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        const double x = q * h;
        while (z[j + 1] < x)
            ++j;
        const double dx = x - v[j] * h;
        out[q] = dx * dx + f[v[j]];
    }
}

} // namespace

std::vector<double> squared_distance_transform(const LabelVolume &features, const Vec3 &spacing)
{
    const auto &d = features.dims();
    std::vector<double> dist(features.size());
    for (std::size_t n = 0; n < dist.size(); ++n)
        dist[n] = features[n] > 0 ? 0.0 : far_away;

    const std::size_t stride[3] = {1, static_cast<std::size_t>(d[0]),
                                   static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1])};
    std::vector<double> f, out;
    std::vector<int> v;
    std::vector<double> z;
    for (int axis = 0; axis < 3; ++axis) {
        const int n = d[axis];
        f.resize(n);
        out.resize(n);
        const int o1 = (axis + 1) % 3, o2 = (axis + 2) % 3;
        for (int b = 0; b < d[o2]; ++b)
            for (int a = 0; a < d[o1]; ++a) {
                const std::size_t base = a * stride[o1] + b * stride[o2];
                for (int t = 0; t < n; ++t)
                    f[t] = dist[base + t * stride[axis]];
                envelope_1d(f, out, spacing[axis], v, z);
                for (int t = 0; t < n; ++t)
                    dist[base + t * stride[axis]] = out[t] >= far_away ? far_away : out[t];
            }
    }
    for (double &x : dist)
        if (x >= far_away)
            x = std::numeric_limits<double>::infinity();
    return dist;
}

LabelVolume dilate_ball(const LabelVolume &mask, int radius_vox)
{
    if (radius_vox < 0)
        throw Error(ErrorCode::argument, "dilation radius must be non-negative");
    LabelVolume out(mask.geometry());
    if (radius_vox == 0) {
        for (std::size_t n = 0; n < mask.size(); ++n)
            out[n] = mask[n] > 0 ? 1u : 0u;
        return out;
    }
    const auto sq = squared_distance_transform(mask, Vec3::Ones());
    const double r2 = static_cast<double>(radius_vox) * radius_vox;
    for (std::size_t n = 0; n < sq.size(); ++n)
        out[n] = sq[n] <= r2 ? 1u : 0u;
    return out;
}

} // namespace nodekit
