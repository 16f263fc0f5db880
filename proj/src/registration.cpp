#include "nodekit/registration.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "nodekit/distance.hpp"

namespace nodekit {

void RegistrationConfig::validate() const
{
    if (levels < 1 || levels > 4)
        throw Error(ErrorCode::argument, "registration levels must be in [1, 4]");
    if (iterations_per_level < 1)
        throw Error(ErrorCode::argument, "iterations_per_level must be positive");
    if (!(regularization_sigma_mm > 0) || !(step_tau > 0) || !(convergence_tol > 0))
        throw Error(ErrorCode::argument, "sigma, tau and tolerance must be positive");
}

const std::set<std::string> &default_feature_structures()
{
    static const std::set<std::string> names{"bones", "heart", "esophagus", "trachea", "aorta"};
    return names;
}

ScalarVolume signed_distance_feature(const LabelVolume &mask, double clamp_mm)
{
    const auto &g = mask.geometry();
    LabelVolume inside(g), outside(g);
    std::size_t n_inside = 0;
    for (std::size_t n = 0; n < mask.size(); ++n) {
        inside[n] = mask[n] > 0 ? 1u : 0u;
        outside[n] = 1u - inside[n];
        n_inside += inside[n];
    }
    if (n_inside == 0)
        throw Error(ErrorCode::empty_mask, "feature mask union is empty");

    const auto to_inside = squared_distance_transform(inside, g.spacing);
    const auto to_outside = squared_distance_transform(outside, g.spacing);
    const double half = 0.5 * g.spacing.minCoeff();
    std::vector<double> out(mask.size());
    for (std::size_t n = 0; n < out.size(); ++n) {
        const double v = inside[n] ? -(std::sqrt(to_outside[n]) - half) : std::sqrt(to_inside[n]);
        out[n] = std::clamp(v, -clamp_mm, clamp_mm);
    }
    return ScalarVolume(g, std::move(out));
}

ScalarVolume masks_to_feature(const StructureMasks &masks, const std::set<std::string> &selection)
{
    if (selection.empty())
        throw Error(ErrorCode::argument, "feature structure selection is empty");
    const LabelVolume *ref = nullptr;
    for (const auto &name : selection) {
        const auto it = masks.find(name);
        if (it == masks.end())
            continue;
        if (ref)
            require_aligned(ref->geometry(), it->second.geometry(), "masks_to_feature");
        ref = &it->second;
    }
    if (!ref)
        throw Error(ErrorCode::empty_mask, "none of the selected structures is available");
    LabelVolume uni(ref->geometry());
    for (const auto &name : selection) {
        const auto it = masks.find(name);
        if (it == masks.end())
            continue;
        for (std::size_t n = 0; n < uni.size(); ++n)
            if (it->second[n] > 0)
                uni[n] = 1;
    }
    return signed_distance_feature(uni);
}

namespace {

/// y = A (x - c) + c + t
struct LinearParams {
    Mat3 a = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    AffineTransform to_transform(const Vec3 &center, TransformKind kind) const
    {
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = a;
        m.topRightCorner<3, 1>() = t + center - a * center;
        return AffineTransform(m, kind);
    }

    static LinearParams from_transform(const AffineTransform &tr, const Vec3 &center)
    {
        LinearParams p;
        p.a = tr.linear();
        p.t = tr.offset() + p.a * center - center;
        return p;
    }
};

struct ObjectiveValue {
    double mse = 0.0;
    // Gauss-Newton terms over (A row-major, t): sum J J^T and sum r J
    Eigen::Matrix<double, 12, 12> normal = Eigen::Matrix<double, 12, 12>::Zero();
    Eigen::Matrix<double, 12, 1> rhs = Eigen::Matrix<double, 12, 1>::Zero();
};

ObjectiveValue evaluate_linear(const ScalarVolume &fixed, const ScalarVolume &moving, const LinearParams &p,
                               const Vec3 &center, bool with_gradient)
{
    const auto &fg = fixed.geometry();
    const auto &mg = moving.geometry();
    const Mat3 to_moving_index = mg.spacing.cwiseInverse().asDiagonal() * mg.direction.transpose();
    const Mat3 grad_to_physical = mg.direction * mg.spacing.cwiseInverse().asDiagonal();
    const Mat3 fixed_step = fg.index_to_physical_matrix();

    // moving index as an affine function of fixed index
    const Mat3 lin = to_moving_index * p.a * fixed_step;
    const Vec3 base = to_moving_index * (p.a * (fg.origin - center) + center + p.t - mg.origin);

    const Vec3 upper(mg.dims[0] - 1, mg.dims[1] - 1, mg.dims[2] - 1);
    double sum = 0.0;
    std::size_t valid = 0;
    ObjectiveValue out;
    Eigen::Matrix<double, 12, 1> row;
    Vec3 gidx;
    std::size_t n = 0;
    for (int k = 0; k < fg.dims[2]; ++k)
        for (int j = 0; j < fg.dims[1]; ++j)
            for (int i = 0; i < fg.dims[0]; ++i, ++n) {
                const Vec3 idx(i, j, k);
                const Vec3 mi = lin * idx + base;
                if ((mi.array() < 0.0).any() || (mi.array() > upper.array()).any())
                    continue;
                const double val = sample_linear_clamped(moving, mi, with_gradient ? &gidx : nullptr);
                const double r = val - fixed[n];
                sum += r * r;
                ++valid;
                if (with_gradient) {
                    const Vec3 g = grad_to_physical * gidx;
                    if (g.isZero(0.0))
                        continue;
                    const Vec3 xc = fg.origin + fixed_step * idx - center;
                    for (int a = 0; a < 3; ++a)
                        row.segment<3>(3 * a) = g[a] * xc;
                    row.tail<3>() = g;
                    out.normal.selfadjointView<Eigen::Upper>().rankUpdate(row);
                    out.rhs += r * row;
                }
            }
    out.normal = out.normal.selfadjointView<Eigen::Upper>();
    // overlap below a tenth of the fixed grid counts as no overlap
    out.mse = 10 * valid < fixed.size() ? std::numeric_limits<double>::infinity() : sum / static_cast<double>(valid);
    return out;
}

Vec3 grid_center(const VolumeGeometry &g)
{
    return g.to_physical(Vec3(0.5 * (g.dims[0] - 1), 0.5 * (g.dims[1] - 1), 0.5 * (g.dims[2] - 1)));
}

double grid_radius(const VolumeGeometry &g)
{
    double r = 0.0;
    for (int a = 0; a < 3; ++a)
        r += g.dims[a] * g.spacing[a];
    return std::max(r / 6.0, 1.0);
}

Mat3 euler_rotation(const Vec3 &r, int derivative_axis = -1)
{
    const double cx = std::cos(r[0]), sx = std::sin(r[0]);
    const double cy = std::cos(r[1]), sy = std::sin(r[1]);
    const double cz = std::cos(r[2]), sz = std::sin(r[2]);
    Mat3 rx, ry, rz;
    rx << 1, 0, 0, 0, cx, -sx, 0, sx, cx;
    ry << cy, 0, sy, 0, 1, 0, -sy, 0, cy;
    rz << cz, -sz, 0, sz, cz, 0, 0, 0, 1;
    if (derivative_axis == 0)
        rx << 0, 0, 0, 0, -sx, -cx, 0, cx, -sx;
    else if (derivative_axis == 1)
        ry << -sy, 0, cy, 0, 0, 0, -cy, 0, -sy;
    else if (derivative_axis == 2)
        rz << -sz, -cz, 0, cz, -sz, 0, 0, 0, 0;
    return rz * ry * rx;
}

Vec3 euler_angles(const Mat3 &r)
{
    // inverse of rz * ry * rx
    const double sy = std::clamp(-r(2, 0), -1.0, 1.0);
    const double ry = std::asin(sy);
    const double rx = std::atan2(r(2, 1), r(2, 2));
    const double rz = std::atan2(r(1, 0), r(0, 0));
    return Vec3(rx, ry, rz);
}

/// Parameterization of the transform space explored by the optimizer. Scaled
/// coordinates are chosen so one unit moves image content by about 1 mm.
class LinearModel {
public:
    LinearModel(TransformKind kind, double radius) : kind_(kind), radius_(radius) {}

    int size() const { return kind_ == TransformKind::rigid ? 6 : 12; }

    Eigen::VectorXd encode(const LinearParams &p) const
    {
        Eigen::VectorXd q(size());
        if (kind_ == TransformKind::rigid) {
            q.head<3>() = euler_angles(p.a) * radius_;
            q.tail<3>() = p.t;
        } else {
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c)
                    q[3 * r + c] = p.a(r, c) * radius_;
            q.tail<3>() = p.t;
        }
        return q;
    }

    LinearParams decode(const Eigen::VectorXd &q) const
    {
        LinearParams p;
        if (kind_ == TransformKind::rigid) {
            p.a = euler_rotation(q.head<3>() / radius_);
        } else {
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c)
                    p.a(r, c) = q[3 * r + c] / radius_;
        }
        p.t = q.tail(3);
        return p;
    }

    /// d(A row-major, t) / dq at q.
    Eigen::MatrixXd chain(const Eigen::VectorXd &q) const
    {
        Eigen::MatrixXd c = Eigen::MatrixXd::Zero(12, size());
        if (kind_ == TransformKind::rigid) {
            const Vec3 angles = q.head<3>() / radius_;
            for (int axis = 0; axis < 3; ++axis) {
                const Mat3 d = euler_rotation(angles, axis);
                for (int r = 0; r < 3; ++r)
                    for (int k = 0; k < 3; ++k)
                        c(3 * r + k, axis) = d(r, k) / radius_;
            }
        } else {
            for (int e = 0; e < 9; ++e)
                c(e, e) = 1.0 / radius_;
        }
        for (int a = 0; a < 3; ++a)
            c(9 + a, size() - 3 + a) = 1.0;
        return c;
    }

private:
    TransformKind kind_;
    double radius_;
};

AffineTransform optimize_linear(const ScalarVolume &fixed, const ScalarVolume &moving, const AffineTransform &init,
                                TransformKind kind, const LinearOptimizerConfig &cfg)
{
    if (cfg.levels < 1 || cfg.levels > 4 || cfg.max_iterations < 1 || !(cfg.initial_damping > 0) ||
        !(cfg.min_step_mm > 0))
        throw Error(ErrorCode::argument, "invalid linear optimizer configuration");
    const auto [fmin, fmax] = std::minmax_element(fixed.values().begin(), fixed.values().end());
    const auto [mmin, mmax] = std::minmax_element(moving.values().begin(), moving.values().end());
    if (*fmin == *fmax || *mmin == *mmax)
        throw Error(ErrorCode::degenerate, "registration features must not be constant");

    const Vec3 center = grid_center(fixed.geometry());
    const LinearModel model(kind, grid_radius(fixed.geometry()));
    Eigen::VectorXd q = model.encode(LinearParams::from_transform(init, center));

    for (int level = cfg.levels - 1; level >= 0; --level) {
        const int factor = 1 << level;
        const ScalarVolume f = downsample(fixed, factor);
        const ScalarVolume m = downsample(moving, factor);
        const double voxel = f.geometry().spacing.maxCoeff();
        const double min_step = level == 0 ? cfg.min_step_mm : 0.05 * voxel;

        ObjectiveValue cur = evaluate_linear(f, m, model.decode(q), center, true);
        double damping = cfg.initial_damping;
        for (int it = 0; it < cfg.max_iterations && damping < 1e8; ++it) {
            const Eigen::MatrixXd c = model.chain(q);
            const Eigen::MatrixXd h = c.transpose() * cur.normal * c;
            const Eigen::VectorXd b = c.transpose() * cur.rhs;
            Eigen::MatrixXd lhs = h;
            lhs.diagonal() += damping * (h.diagonal().array() + 1e-12).matrix();
            const Eigen::VectorXd delta = lhs.ldlt().solve(-b);
            if (!delta.allFinite())
                break;
            const Eigen::VectorXd cand = q + delta;
            const ObjectiveValue next = evaluate_linear(f, m, model.decode(cand), center, true);
            if (next.mse < cur.mse) {
                const double gain = (cur.mse - next.mse) / std::max(cur.mse, 1e-300);
                q = cand;
                cur = next;
                damping = std::max(damping / 3.0, 1e-9);
                if (gain < 1e-10 || delta.norm() < min_step)
                    break;
            } else {
                damping *= 4.0;
            }
        }
    }

    const AffineTransform result = model.decode(q).to_transform(center, kind);
    const double start = transform_mse(fixed, moving, init);
    const double end = transform_mse(fixed, moving, result);
    // round-off slack: a start at the exact optimum must not read as divergence
    if (end > start * (1.0 + 1e-9) + 1e-12) {
        const TransformKind init_kind = kind == TransformKind::rigid ? init.kind() : TransformKind::affine;
        throw ConvergenceError("linear registration diverged", AffineTransform(init.matrix(), init_kind));
    }
    return result;
}

} // namespace

double transform_mse(const ScalarVolume &fixed, const ScalarVolume &moving, const AffineTransform &t)
{
    const Vec3 center = grid_center(fixed.geometry());
    return evaluate_linear(fixed, moving, LinearParams::from_transform(t, center), center, false).mse;
}

AffineTransform register_rigid(const ScalarVolume &fixed_feat, const ScalarVolume &moving_feat,
                               const LinearOptimizerConfig &cfg)
{
    return optimize_linear(fixed_feat, moving_feat, AffineTransform::identity(), TransformKind::rigid, cfg);
}

AffineTransform register_affine(const ScalarVolume &fixed_feat, const ScalarVolume &moving_feat,
                                const AffineTransform &init, const LinearOptimizerConfig &cfg)
{
    return optimize_linear(fixed_feat, moving_feat, init, TransformKind::affine, cfg);
}

double mean_squared_difference(const ScalarVolume &a, const ScalarVolume &b)
{
    require_aligned(a.geometry(), b.geometry(), "mean_squared_difference");
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n)
        s += (a[n] - b[n]) * (a[n] - b[n]);
    return s / static_cast<double>(a.size());
}

namespace {

std::vector<Vec3> physical_gradient(const ScalarVolume &vol)
{
    const auto &g = vol.geometry();
    const auto &d = g.dims;
    const Mat3 to_physical = g.direction * g.spacing.cwiseInverse().asDiagonal();
    std::vector<Vec3> out(vol.size());
    std::size_t n = 0;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i, ++n) {
                const int p[3] = {i, j, k};
                Vec3 gi;
                for (int a = 0; a < 3; ++a) {
                    int lo[3] = {i, j, k}, hi[3] = {i, j, k};
                    lo[a] = std::max(p[a] - 1, 0);
                    hi[a] = std::min(p[a] + 1, d[a] - 1);
                    const int span = hi[a] - lo[a];
                    gi[a] = span == 0 ? 0.0 : (vol.at(hi[0], hi[1], hi[2]) - vol.at(lo[0], lo[1], lo[2])) / span;
                }
                out[n] = to_physical * gi;
            }
    return out;
}

/// moving sampled at x + u(x) on the (shared) grid, zero outside.
std::vector<double> warp_by_field(const ScalarVolume &moving, const std::vector<Vec3> &u)
{
    const auto &g = moving.geometry();
    const Mat3 to_index = g.spacing.cwiseInverse().asDiagonal() * g.direction.transpose();
    std::vector<double> out(moving.size());
    std::size_t n = 0;
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i, ++n)
                out[n] = sample_linear(moving, Vec3(i, j, k) + to_index * u[n]);
    return out;
}

double mse_of(const ScalarVolume &fixed, const std::vector<double> &warped)
{
    double s = 0.0;
    for (std::size_t n = 0; n < warped.size(); ++n)
        s += (warped[n] - fixed[n]) * (warped[n] - fixed[n]);
    return s / static_cast<double>(warped.size());
}

void smooth_field(std::vector<Vec3> &u, const VolumeGeometry &g, double sigma_mm)
{
    const Vec3 sigma_vox = sigma_mm * g.spacing.cwiseInverse();
    std::vector<double> comp(u.size());
    for (int c = 0; c < 3; ++c) {
        for (std::size_t n = 0; n < u.size(); ++n)
            comp[n] = u[n][c];
        gaussian_smooth_inplace(comp, g, sigma_vox, false);
        for (std::size_t n = 0; n < u.size(); ++n)
            u[n][c] = comp[n];
    }
}

} // namespace

DisplacementField register_variational(const ScalarVolume &fixed, const ScalarVolume &moving,
                                       const RegistrationConfig &cfg, VariationalTrace *trace)
{
    cfg.validate();
    require_aligned(fixed.geometry(), moving.geometry(), "register_variational");
    if (trace)
        trace->mse_per_level.clear();

    std::vector<Vec3> u;
    VolumeGeometry prev_geometry;
    for (int level = cfg.levels - 1; level >= 0; --level) {
        const int factor = 1 << level;
        const ScalarVolume f = downsample(fixed, factor);
        const ScalarVolume m = downsample(moving, factor);
        const auto &g = f.geometry();

        std::vector<double> warped = warp_by_field(m, std::vector<Vec3>(f.size(), Vec3::Zero()));
        double mse = mse_of(f, warped);
        if (u.empty()) {
            u.assign(f.size(), Vec3::Zero());
        } else {
            // start from the coarser solution only if it does not hurt here
            DisplacementField coarse{prev_geometry, std::move(u), cfg.direction};
            std::vector<Vec3> up = resample_field(coarse, g).vectors;
            std::vector<double> up_warped = warp_by_field(m, up);
            const double up_mse = mse_of(f, up_warped);
            if (up_mse <= mse) {
                u = std::move(up);
                warped = std::move(up_warped);
                mse = up_mse;
            } else {
                u.assign(f.size(), Vec3::Zero());
            }
        }

        const std::vector<Vec3> grad = physical_gradient(f);
        const double k_norm = g.spacing.squaredNorm() / 3.0;
        double tau = cfg.step_tau;
        std::vector<double> accepted{mse};
        std::vector<Vec3> candidate(u.size());
        for (int it = 0; it < cfg.iterations_per_level; ++it) {
            for (std::size_t n = 0; n < u.size(); ++n) {
                const double diff = f[n] - warped[n];
                const double denom = grad[n].squaredNorm() + diff * diff / k_norm;
                const Vec3 force = denom > 1e-12 ? Vec3(diff / denom * grad[n]) : Vec3::Zero();
                candidate[n] = u[n] + tau * force;
            }
            smooth_field(candidate, g, cfg.regularization_sigma_mm);
            std::vector<double> cand_warped = warp_by_field(m, candidate);
            const double cand_mse = mse_of(f, cand_warped);
            if (cand_mse <= mse) {
                const double rel = (mse - cand_mse) / std::max(mse, 1e-30);
                u.swap(candidate);
                warped = std::move(cand_warped);
                mse = cand_mse;
                accepted.push_back(mse);
                if (rel < cfg.convergence_tol)
                    break;
            } else {
                tau *= 0.5;
                if (tau < 1e-3 * cfg.step_tau)
                    break;
            }
        }
        if (trace)
            trace->mse_per_level.push_back(std::move(accepted));
        prev_geometry = g;
    }
    DisplacementField out{fixed.geometry(), std::move(u), cfg.direction};
    out.validate();
    return out;
}

namespace {

template <typename T, typename Sampler>
Volume<T> warp_impl(const Volume<T> &vol, const VolumeGeometry &target, const AffineTransform *affine,
                    const DisplacementField *field, Sampler sampler)
{
    if (!affine && !field)
        throw Error(ErrorCode::argument, "warp needs an affine transform, a displacement field, or both");
    target.validate();
    if (field) {
        field->validate();
        require_aligned(field->geometry, target, "warp (field vs target grid)");
    }
    const auto &src = vol.geometry();
    std::vector<T> out(target.voxel_count());
    std::size_t n = 0;
    for (int k = 0; k < target.dims[2]; ++k)
        for (int j = 0; j < target.dims[1]; ++j)
            for (int i = 0; i < target.dims[0]; ++i, ++n) {
                Vec3 p = target.to_physical(i, j, k);
                if (field)
                    p += field->vectors[n];
                if (affine)
                    p = affine->apply(p);
                out[n] = sampler(vol, src.to_index(p));
            }
    return Volume<T>(target, std::move(out));
}

} // namespace

ScalarVolume warp(const ScalarVolume &vol, const VolumeGeometry &target, const AffineTransform *affine,
                  const DisplacementField *field, Interpolation mode, double outside)
{
    if (mode == Interpolation::linear)
        return warp_impl(vol, target, affine, field,
                         [outside](const ScalarVolume &v, const Vec3 &c) { return sample_linear(v, c, outside); });
    return warp_impl(vol, target, affine, field,
                     [outside](const ScalarVolume &v, const Vec3 &c) { return sample_nearest(v, c, outside); });
}

LabelVolume warp(const LabelVolume &vol, const VolumeGeometry &target, const AffineTransform *affine,
                 const DisplacementField *field)
{
    return warp_impl(vol, target, affine, field,
                     [](const LabelVolume &v, const Vec3 &c) { return sample_nearest(v, c); });
}

ScalarVolume warp(const ScalarVolume &vol, const AffineTransform *affine, const DisplacementField *field,
                  Interpolation mode)
{
    return warp(vol, field ? field->geometry : vol.geometry(), affine, field, mode);
}

LabelVolume warp(const LabelVolume &vol, const AffineTransform *affine, const DisplacementField *field)
{
    return warp(vol, field ? field->geometry : vol.geometry(), affine, field);
}

} // namespace nodekit
