#pragma once
// Independent brute-force reference implementations and random generators
// used by the unit and acceptance tests. Nothing here calls into the
// corresponding library routine it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include <Eigen/Geometry>

#include "nodekit/volume.hpp"

namespace oracle {

using nodekit::Index3;
using nodekit::LabelVolume;
using nodekit::ScalarVolume;
using nodekit::Vec3;
using nodekit::VolumeGeometry;

struct Gen {
    std::mt19937_64 rng;
    explicit Gen(std::uint64_t seed) : rng(seed) {}

    double uniform(double a = 0.0, double b = 1.0) { return std::uniform_real_distribution<double>(a, b)(rng); }
    int integer(int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); }
    bool coin(double p = 0.5) { return uniform() < p; }
    double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng); }
};

inline VolumeGeometry cube(int n, double spacing = 1.0)
{
    return VolumeGeometry::make({n, n, n}, Vec3::Constant(spacing));
}

/// Random spacing in [0.5, 2], origin in [-50, 50], random rotation direction.
inline VolumeGeometry random_geometry(Gen &g, const Index3 &dims)
{
    Eigen::Quaterniond q(g.normal(), g.normal(), g.normal(), g.normal());
    q.normalize();
    return VolumeGeometry::make(dims, Vec3(g.uniform(0.5, 2), g.uniform(0.5, 2), g.uniform(0.5, 2)),
                                Vec3(g.uniform(-50, 50), g.uniform(-50, 50), g.uniform(-50, 50)),
                                q.toRotationMatrix());
}

inline LabelVolume random_mask(Gen &g, const VolumeGeometry &geom, double density)
{
    LabelVolume m(geom);
    for (std::size_t n = 0; n < m.size(); ++n)
        m[n] = g.coin(density) ? 1u : 0u;
    return m;
}

/// Union of a few random balls (index space).
inline LabelVolume random_blobs(Gen &g, const VolumeGeometry &geom, int count, double rmin, double rmax)
{
    LabelVolume m(geom);
    const auto &d = geom.dims;
    for (int b = 0; b < count; ++b) {
        const Vec3 c(g.uniform(0, d[0] - 1), g.uniform(0, d[1] - 1), g.uniform(0, d[2] - 1));
        const double r = g.uniform(rmin, rmax);
        for (int k = 0; k < d[2]; ++k)
            for (int j = 0; j < d[1]; ++j)
                for (int i = 0; i < d[0]; ++i)
                    if ((Vec3(i, j, k) - c).squaredNorm() <= r * r)
                        m.at(i, j, k) = 1;
    }
    return m;
}

inline ScalarVolume random_probs(Gen &g, const VolumeGeometry &geom, double lo = 0.0, double hi = 1.0)
{
    ScalarVolume v(geom);
    for (std::size_t n = 0; n < v.size(); ++n)
        v[n] = g.uniform(lo, hi);
    return v;
}

// --- distances ---------------------------------------------------------------

inline std::vector<Index3> foreground(const LabelVolume &m)
{
    std::vector<Index3> out;
    const auto &d = m.dims();
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i)
                if (m.at(i, j, k))
                    out.push_back({i, j, k});
    return out;
}

inline double sq_dist(const Index3 &a, const Index3 &b, const Vec3 &s)
{
    double acc = 0.0;
    for (int x = 0; x < 3; ++x) {
        const double d = (a[x] - b[x]) * s[x];
        acc += d * d;
    }
    return acc;
}

/// All-pairs squared distance to the nearest feature voxel.
inline std::vector<double> brute_sq_edt(const LabelVolume &features, const Vec3 &spacing)
{
    const auto fg = foreground(features);
    const auto &g = features.geometry();
    std::vector<double> out(features.size(), std::numeric_limits<double>::infinity());
    for (std::size_t n = 0; n < out.size(); ++n) {
        const Index3 p = g.unravel(n);
        for (const auto &f : fg)
            out[n] = std::min(out[n], sq_dist(p, f, spacing));
    }
    return out;
}

inline LabelVolume brute_dilate(const LabelVolume &m, int r)
{
    LabelVolume out = m.like<std::uint32_t>();
    const auto &g = m.geometry();
    for (const auto &p : foreground(m))
        for (int dk = -r; dk <= r; ++dk)
            for (int dj = -r; dj <= r; ++dj)
                for (int di = -r; di <= r; ++di)
                    if (di * di + dj * dj + dk * dk <= r * r && g.contains(p[0] + di, p[1] + dj, p[2] + dk))
                        out.at(p[0] + di, p[1] + dj, p[2] + dk) = 1;
    return out;
}

// --- components (union-find over all adjacent pairs) ------------------------

struct UnionFind {
    std::vector<std::size_t> parent;
    explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t x)
    {
        while (parent[x] != x)
            x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(std::size_t a, std::size_t b)
    {
        a = find(a);
        b = find(b);
        if (a != b)
            parent[std::max(a, b)] = std::min(a, b);
    }
};

/// Labels 1..n ordered by smallest linear index in each component.
inline std::vector<std::uint32_t> brute_components(const LabelVolume &m, int connectivity)
{
    const auto &g = m.geometry();
    UnionFind uf(m.size());
    for (std::size_t n = 0; n < m.size(); ++n) {
        if (!m[n])
            continue;
        const Index3 p = g.unravel(n);
        for (int dk = -1; dk <= 1; ++dk)
            for (int dj = -1; dj <= 1; ++dj)
                for (int di = -1; di <= 1; ++di) {
                    const int l1 = std::abs(di) + std::abs(dj) + std::abs(dk);
                    if (l1 == 0 || (connectivity == 6 && l1 > 1) || (connectivity == 18 && l1 > 2))
                        continue;
                    if (g.contains(p[0] + di, p[1] + dj, p[2] + dk) && m.at(p[0] + di, p[1] + dj, p[2] + dk))
                        uf.unite(n, g.linear(p[0] + di, p[1] + dj, p[2] + dk));
                }
    }
    std::vector<std::uint32_t> labels(m.size(), 0);
    std::map<std::size_t, std::uint32_t> root_id;
    for (std::size_t n = 0; n < m.size(); ++n)
        if (m[n]) {
            const auto root = uf.find(n);
            auto it = root_id.find(root);
            if (it == root_id.end())
                it = root_id.emplace(root, static_cast<std::uint32_t>(root_id.size() + 1)).first;
            labels[n] = it->second;
        }
    return labels;
}

inline std::size_t count_labels(const std::vector<std::uint32_t> &labels)
{
    std::uint32_t mx = 0;
    for (auto l : labels)
        mx = std::max(mx, l);
    return mx;
}

// --- metrics ----------------------------------------------------------------

inline double brute_dice(const LabelVolume &a, const LabelVolume &b)
{
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t n = 0; n < a.size(); ++n) {
        na += a[n] != 0;
        nb += b[n] != 0;
        both += a[n] != 0 && b[n] != 0;
    }
    return na + nb == 0 ? 1.0 : 2.0 * both / double(na + nb);
}

inline std::vector<Index3> brute_surface(const LabelVolume &m)
{
    std::vector<Index3> out;
    const auto &g = m.geometry();
    for (const auto &p : foreground(m)) {
        bool border = false;
        for (int a = 0; a < 3 && !border; ++a)
            for (int s = -1; s <= 1; s += 2) {
                Index3 q = p;
                q[a] += s;
                if (!g.contains(q[0], q[1], q[2]) || !m.at(q[0], q[1], q[2]))
                    border = true;
            }
        if (border)
            out.push_back(p);
    }
    return out;
}

inline double brute_assd(const LabelVolume &a, const LabelVolume &b)
{
    const auto sa = brute_surface(a), sb = brute_surface(b);
    const Vec3 &s = a.geometry().spacing;
    double sum = 0.0;
    for (const auto &p : sa) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto &q : sb)
            best = std::min(best, sq_dist(p, q, s));
        sum += std::sqrt(best);
    }
    for (const auto &q : sb) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto &p : sa)
            best = std::min(best, sq_dist(p, q, s));
        sum += std::sqrt(best);
    }
    return sum / double(sa.size() + sb.size());
}

struct Lesions {
    std::size_t tp = 0, fp = 0, fn = 0;
};

inline Lesions brute_lesions(const LabelVolume &pred, const LabelVolume &gt, int r, int connectivity)
{
    const LabelVolume dp = brute_dilate(pred, r), dg = brute_dilate(gt, r);
    const auto lp = brute_components(dp, connectivity), lg = brute_components(dg, connectivity);
    std::set<std::uint32_t> gt_hit, pred_hit;
    for (std::size_t n = 0; n < lp.size(); ++n)
        if (lp[n] && lg[n]) {
            gt_hit.insert(lg[n]);
            pred_hit.insert(lp[n]);
        }
    Lesions l;
    l.tp = gt_hit.size();
    l.fn = count_labels(lg) - gt_hit.size();
    l.fp = count_labels(lp) - pred_hit.size();
    return l;
}

// --- convex hull by facet enumeration ---------------------------------------

/// Voxels in the closed hull of `points`: for full-dimensional sets, the
/// intersection of every supporting plane through three input points.
inline LabelVolume brute_hull(const std::vector<Index3> &points, const VolumeGeometry &geom)
{
    using I = std::int64_t;
    struct Plane {
        std::array<I, 3> n;
        I d;
    };
    auto sub = [](const Index3 &a, const Index3 &b) { return std::array<I, 3>{a[0] - b[0], a[1] - b[1], a[2] - b[2]}; };
    auto cross = [](const std::array<I, 3> &a, const std::array<I, 3> &b) {
        return std::array<I, 3>{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
    };
    auto dot = [](const std::array<I, 3> &a, const Index3 &b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; };
    std::vector<Plane> planes;
    bool full_dim = false;
    const std::size_t n = points.size();
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b)
            for (std::size_t c = b + 1; c < n; ++c) {
                auto nrm = cross(sub(points[b], points[a]), sub(points[c], points[a]));
                if (nrm == std::array<I, 3>{0, 0, 0})
                    continue;
                const I d = dot(nrm, points[a]);
                int pos = 0, neg = 0;
                for (const auto &p : points) {
                    const I s = dot(nrm, p) - d;
                    pos += s > 0;
                    neg += s < 0;
                }
                if (pos && neg)
                    continue;
                if (pos || neg)
                    full_dim = true;
                if (pos)
                    nrm = {-nrm[0], -nrm[1], -nrm[2]};
                planes.push_back({nrm, dot(nrm, points[a])});
                if (!pos && !neg) // coplanar set: both sides bound the slab
                    planes.push_back({{-nrm[0], -nrm[1], -nrm[2]}, -dot(nrm, points[a])});
            }
    LabelVolume out(geom);
    if (!full_dim && !planes.empty()) {
        // planar set: in-plane edges bound the polygon
        const auto nrm = planes.front().n;
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) {
                if (a == b)
                    continue;
                const auto e = cross(nrm, sub(points[b], points[a]));
                const I d = dot(e, points[a]);
                bool ok = true;
                for (const auto &p : points)
                    ok = ok && dot(e, p) <= d;
                if (ok && e != std::array<I, 3>{0, 0, 0})
                    planes.push_back({e, d});
            }
    }
    const auto &dims = geom.dims;
    for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i) {
                const Index3 q{i, j, k};
                bool inside = !planes.empty();
                for (const auto &pl : planes)
                    if (dot(pl.n, q) > pl.d) {
                        inside = false;
                        break;
                    }
                out.at(i, j, k) = inside ? 1u : 0u;
            }
    return out;
}

// --- numerics ---------------------------------------------------------------

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const std::vector<double> &)> &f,
                                  std::vector<double> x, std::size_t i, double h)
{
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-12)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Analytic trilinear interpolation on the unit cube with corner values c[i][j][k].
inline double trilinear(const double c[2][2][2], double x, double y, double z)
{
    double acc = 0.0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k)
                acc += c[i][j][k] * (i ? x : 1 - x) * (j ? y : 1 - y) * (k ? z : 1 - z);
    return acc;
}

} // namespace oracle
