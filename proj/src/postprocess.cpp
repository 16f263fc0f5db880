#include "nodekit/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include <Eigen/Eigenvalues>

namespace nodekit {

void PostprocessConfig::validate() const
{
    if (!(t > 0.0 && t < 1.0))
        throw Error(ErrorCode::argument, "threshold t must lie in (0, 1)");
    if (min_diameter_mm && !(*min_diameter_mm > 0.0 && std::isfinite(*min_diameter_mm)))
        throw Error(ErrorCode::argument, "min_diameter_mm must be positive");
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
        throw Error(ErrorCode::argument, "connectivity must be 6, 18 or 26");
}

double adaptive_threshold(double t, double p) { return t * (1.0 - 0.5 * p); }

LabelVolume adaptive_binarize(const ProbVolume &probs, const ScalarVolume &pa, const PostprocessConfig &cfg)
{
    cfg.validate();
    require_aligned(probs.geometry(), pa.geometry(), "adaptive_binarize");
    LabelVolume out(probs.geometry());
    for (std::size_t n = 0; n < out.size(); ++n) {
        if (pa[n] < 0.0 || pa[n] > 1.0)
            throw Error(ErrorCode::argument, "atlas prior values must lie in [0, 1]");
        out[n] = probs[n] >= adaptive_threshold(cfg.t, pa[n]) ? 1u : 0u;
    }
    return out;
}

namespace {

std::vector<Index3> neighbor_offsets(int connectivity)
{
    std::vector<Index3> out;
    for (int dk = -1; dk <= 1; ++dk)
        for (int dj = -1; dj <= 1; ++dj)
            for (int di = -1; di <= 1; ++di) {
                const int l1 = std::abs(di) + std::abs(dj) + std::abs(dk);
                if (l1 == 0 || (connectivity == 6 && l1 > 1) || (connectivity == 18 && l1 > 2))
                    continue;
                out.push_back({di, dj, dk});
            }
    return out;
}

} // namespace

ComponentSet connected_components(const LabelVolume &mask, int connectivity)
{
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
        throw Error(ErrorCode::argument, "connectivity must be 6, 18 or 26");
    const auto &g = mask.geometry();
    const auto offsets = neighbor_offsets(connectivity);
    ComponentSet cs{mask.like<std::uint32_t>(), {}};
    auto &labels = cs.labels;

    std::vector<std::size_t> queue;
    std::uint32_t next = 0;
    for (std::size_t n = 0; n < mask.size(); ++n) {
        if (mask[n] == 0 || labels[n] != 0)
            continue;
        labels[n] = ++next;
        ComponentStats st;
        st.first_voxel = n;
        queue.assign(1, n);
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const Index3 p = g.unravel(queue[head]);
            for (const auto &o : offsets) {
                const int i = p[0] + o[0], j = p[1] + o[1], k = p[2] + o[2];
                if (!g.contains(i, j, k))
                    continue;
                const std::size_t m = g.linear(i, j, k);
                if (mask[m] == 0 || labels[m] != 0)
                    continue;
                labels[m] = next;
                queue.push_back(m);
            }
        }
        st.voxel_count = queue.size();
        Vec3 mean = Vec3::Zero();
        for (const std::size_t m : queue) {
            const Index3 p = g.unravel(m);
            mean += Vec3(p[0], p[1], p[2]);
        }
        mean /= static_cast<double>(queue.size());
        Mat3 cov = Mat3::Zero();
        for (const std::size_t m : queue) {
            const Index3 p = g.unravel(m);
            const Vec3 d = Vec3(p[0], p[1], p[2]) - mean;
            cov += d * d.transpose();
        }
        cov /= static_cast<double>(queue.size());
        const Mat3 M = g.index_to_physical_matrix();
        st.centroid_mm = g.to_physical(mean);
        st.covariance_mm2 = M * cov * M.transpose();
        Eigen::SelfAdjointEigenSolver<Mat3> eig(st.covariance_mm2, Eigen::EigenvaluesOnly);
        const double lmin = std::max(0.0, eig.eigenvalues()[0]);
        st.min_diameter_mm = 2.0 * std::sqrt(5.0 * lmin);
        cs.stats.push_back(st);
    }
    return cs;
}

LabelVolume filter_small_components(const ComponentSet &cs, std::optional<double> min_diameter_mm)
{
    LabelVolume out = cs.labels.like<std::uint32_t>();
    std::vector<char> keep(cs.count() + 1, 0);
    for (std::size_t c = 0; c < cs.count(); ++c)
        keep[c + 1] = !min_diameter_mm || cs.stats[c].min_diameter_mm >= *min_diameter_mm;
    for (std::size_t n = 0; n < out.size(); ++n)
        out[n] = cs.labels[n] != 0 && keep[cs.labels[n]] ? 1u : 0u;
    return out;
}

namespace {

using P3 = std::array<std::int64_t, 3>;

P3 sub(const P3 &a, const P3 &b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
P3 cross(const P3 &a, const P3 &b)
{
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
std::int64_t dot(const P3 &a, const P3 &b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
bool is_zero(const P3 &a) { return a[0] == 0 && a[1] == 0 && a[2] == 0; }

using P2 = std::array<std::int64_t, 2>;

std::int64_t cross2(const P2 &o, const P2 &a, const P2 &b)
{
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

// counter-clockwise strict vertices; input need not be sorted
std::vector<P2> hull_2d(std::vector<P2> pts)
{
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3)
        return pts;
    std::vector<P2> h(2 * pts.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        while (k >= 2 && cross2(h[k - 2], h[k - 1], pts[i]) <= 0)
            --k;
        h[k++] = pts[i];
    }
    for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
        while (k >= lower && cross2(h[k - 2], h[k - 1], pts[i]) <= 0)
            --k;
        h[k++] = pts[i];
    }
    h.resize(k - 1);
    return h;
}

// Candidate vertices: row extremes, then strict vertices of each axial slice hull.
std::vector<P3> hull_candidates(const LabelVolume &mask)
{
    const auto &d = mask.dims();
    std::vector<P3> out;
    std::vector<P2> slice;
    for (int k = 0; k < d[2]; ++k) {
        slice.clear();
        for (int j = 0; j < d[1]; ++j) {
            int lo = -1, hi = -1;
            for (int i = 0; i < d[0]; ++i)
                if (mask.at(i, j, k) != 0) {
                    if (lo < 0)
                        lo = i;
                    hi = i;
                }
            if (lo < 0)
                continue;
            slice.push_back({lo, j});
            if (hi != lo)
                slice.push_back({hi, j});
        }
        for (const auto &p : hull_2d(slice))
            out.push_back({p[0], p[1], k});
    }
    return out;
}

struct Face {
    int a, b, c;
    P3 n;
    std::int64_t d; // outward: n.x <= d inside
    bool alive;
};

struct HalfSpace {
    P3 n;
    std::int64_t d;
};

std::vector<HalfSpace> hull_3d(const std::vector<P3> &pts, const std::array<int, 4> &tet)
{
    std::vector<Face> faces;
    P3 interior4{0, 0, 0}; // 4 x tetrahedron centroid
    for (const int v : tet)
        for (int a = 0; a < 3; ++a)
            interior4[a] += pts[v][a];

    auto make_face = [&](int a, int b, int c) {
        Face f{a, b, c, cross(sub(pts[b], pts[a]), sub(pts[c], pts[a])), 0, true};
        f.d = dot(f.n, pts[a]);
        if (dot(f.n, interior4) - 4 * f.d > 0) {
            std::swap(f.b, f.c);
            f.n = {-f.n[0], -f.n[1], -f.n[2]};
            f.d = -f.d;
        }
        return f;
    };
    faces.push_back(make_face(tet[0], tet[1], tet[2]));
    faces.push_back(make_face(tet[0], tet[1], tet[3]));
    faces.push_back(make_face(tet[0], tet[2], tet[3]));
    faces.push_back(make_face(tet[1], tet[2], tet[3]));

    auto key = [](int a, int b) { return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint32_t>(b); };
    std::vector<std::size_t> visible;
    std::unordered_set<std::uint64_t> edges;
    std::size_t alive = faces.size();
    for (int p = 0; p < static_cast<int>(pts.size()); ++p) {
        visible.clear();
        for (std::size_t f = 0; f < faces.size(); ++f)
            if (faces[f].alive && dot(faces[f].n, pts[p]) > faces[f].d)
                visible.push_back(f);
        if (visible.empty())
            continue;
        edges.clear();
        for (const std::size_t f : visible) {
            const Face &fc = faces[f];
            edges.insert(key(fc.a, fc.b));
            edges.insert(key(fc.b, fc.c));
            edges.insert(key(fc.c, fc.a));
        }
        std::vector<std::pair<int, int>> horizon;
        for (const std::size_t f : visible) {
            const Face &fc = faces[f];
            const std::array<std::pair<int, int>, 3> es{{{fc.a, fc.b}, {fc.b, fc.c}, {fc.c, fc.a}}};
            for (const auto &[u, v] : es)
                if (!edges.contains(key(v, u)))
                    horizon.emplace_back(u, v);
        }
        for (const std::size_t f : visible)
            faces[f].alive = false;
        alive -= visible.size();
        for (const auto &[u, v] : horizon) {
            Face f{u, v, p, cross(sub(pts[v], pts[u]), sub(pts[p], pts[u])), 0, true};
            f.d = dot(f.n, pts[u]);
            faces.push_back(f);
            ++alive;
        }
        if (faces.size() > 2 * alive + 64)
            std::erase_if(faces, [](const Face &f) { return !f.alive; });
    }
    std::vector<HalfSpace> out;
    for (const auto &f : faces)
        if (f.alive)
            out.push_back({f.n, f.d});
    return out;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b)
{
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0)))
        --q;
    return q;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

// Fills voxels satisfying every half-space, row by row along i.
void fill_halfspaces(LabelVolume &out, const std::vector<HalfSpace> &hs, const BoundingBox &box)
{
    for (int k = box.lo[2]; k <= box.hi[2]; ++k)
        for (int j = box.lo[1]; j <= box.hi[1]; ++j) {
            std::int64_t lo = box.lo[0], hi = box.hi[0];
            for (const auto &h : hs) {
                const std::int64_t rhs = h.d - h.n[1] * j - h.n[2] * k;
                if (h.n[0] > 0)
                    hi = std::min(hi, floor_div(rhs, h.n[0]));
                else if (h.n[0] < 0)
                    lo = std::max(lo, ceil_div(rhs, h.n[0]));
                else if (rhs < 0)
                    hi = lo - 1;
                if (hi < lo)
                    break;
            }
            for (std::int64_t i = lo; i <= hi; ++i)
                out.at(static_cast<int>(i), j, k) = 1;
        }
}

} // namespace

LabelVolume convex_hull_voxels(const LabelVolume &mask)
{
    const BoundingBox box = mask_bbox(mask);
    std::vector<P3> pts = hull_candidates(mask);
    LabelVolume out = mask.like<std::uint32_t>();

    // affine dimension of the point set
    const P3 &p0 = pts[0];
    int i1 = -1, i2 = -1, i3 = -1;
    for (int i = 1; i < static_cast<int>(pts.size()) && i1 < 0; ++i)
        if (pts[i] != p0)
            i1 = i;
    if (i1 < 0) {
        out.at(static_cast<int>(p0[0]), static_cast<int>(p0[1]), static_cast<int>(p0[2])) = 1;
        return out;
    }
    const P3 e1 = sub(pts[i1], p0);
    for (int i = 1; i < static_cast<int>(pts.size()) && i2 < 0; ++i)
        if (!is_zero(cross(e1, sub(pts[i], p0))))
            i2 = i;
    if (i2 < 0) {
        // segment: extreme points along e1
        std::int64_t tmin = 0, tmax = 0;
        for (const auto &p : pts) {
            const std::int64_t t = dot(sub(p, p0), e1);
            tmin = std::min(tmin, t);
            tmax = std::max(tmax, t);
        }
        for (int k = box.lo[2]; k <= box.hi[2]; ++k)
            for (int j = box.lo[1]; j <= box.hi[1]; ++j)
                for (int i = box.lo[0]; i <= box.hi[0]; ++i) {
                    const P3 v = sub(P3{i, j, k}, p0);
                    const std::int64_t t = dot(v, e1);
                    if (is_zero(cross(e1, v)) && t >= tmin && t <= tmax)
                        out.at(i, j, k) = 1;
                }
        return out;
    }
    const P3 normal = cross(e1, sub(pts[i2], p0));
    for (int i = 1; i < static_cast<int>(pts.size()) && i3 < 0; ++i)
        if (dot(normal, sub(pts[i], p0)) != 0)
            i3 = i;
    if (i3 < 0) {
        // planar: 2D hull in the projection dropping the dominant normal axis
        int drop = 0;
        for (int a = 1; a < 3; ++a)
            if (std::abs(normal[a]) > std::abs(normal[drop]))
                drop = a;
        const int u = drop == 0 ? 1 : 0, v = drop == 2 ? 1 : 2;
        std::vector<P2> proj;
        for (const auto &p : pts)
            proj.push_back({p[u], p[v]});
        const auto h = hull_2d(proj);
        for (int k = box.lo[2]; k <= box.hi[2]; ++k)
            for (int j = box.lo[1]; j <= box.hi[1]; ++j)
                for (int i = box.lo[0]; i <= box.hi[0]; ++i) {
                    const P3 q{i, j, k};
                    if (dot(normal, sub(q, p0)) != 0)
                        continue;
                    const P2 q2{q[u], q[v]};
                    bool inside = true;
                    for (std::size_t e = 0; e < h.size() && inside; ++e)
                        inside = cross2(h[e], h[(e + 1) % h.size()], q2) >= 0;
                    if (inside)
                        out.at(i, j, k) = 1;
                }
        return out;
    }
    fill_halfspaces(out, hull_3d(pts, {0, i1, i2, i3}), box);
    return out;
}

LabelVolume lung_hull_mask(const LabelVolume &pred, const LabelVolume &lungs)
{
    require_aligned(pred.geometry(), lungs.geometry(), "lung_hull_mask");
    if (count_nonzero(lungs) == 0)
        throw Error(ErrorCode::empty_mask, "lung mask is empty");
    const LabelVolume hull = convex_hull_voxels(lungs);
    LabelVolume out = pred.like<std::uint32_t>();
    for (std::size_t n = 0; n < out.size(); ++n)
        out[n] = pred[n] != 0 && hull[n] != 0 ? 1u : 0u;
    return out;
}

ProbVolume ensemble(const std::vector<ProbVolume> &probs)
{
    if (probs.empty())
        throw Error(ErrorCode::argument, "ensemble needs at least one probability map");
    const auto &g = probs.front().geometry();
    for (const auto &p : probs)
        require_aligned(g, p.geometry(), "ensemble");
    std::vector<double> mean(g.voxel_count());
    std::vector<double> column(probs.size());
    const double count = static_cast<double>(probs.size());
    for (std::size_t n = 0; n < mean.size(); ++n) {
        for (std::size_t m = 0; m < probs.size(); ++m)
            column[m] = probs[m][n];
        // sorted summation makes the mean independent of model order
        std::sort(column.begin(), column.end());
        double sum = 0.0;
        for (const double v : column)
            sum += v;
        mean[n] = std::clamp(sum / count, 0.0, 1.0);
    }
    return ProbVolume(ScalarVolume(g, std::move(mean)));
}

LabelVolume run_postprocess(const std::vector<ProbVolume> &probs, const ScalarVolume &pa, const LabelVolume &lungs,
                            const CropRecord *crop, const PostprocessConfig &cfg)
{
    cfg.validate();
    const ProbVolume mean = ensemble(probs);
    const LabelVolume binary = adaptive_binarize(mean, pa, cfg);
    const ComponentSet cs = connected_components(binary, cfg.connectivity);
    const LabelVolume kept = filter_small_components(cs, cfg.min_diameter_mm);
    LabelVolume masked = lung_hull_mask(kept, lungs);
    if (crop)
        return pad_to_original(masked, *crop);
    return masked;
}

} // namespace nodekit
