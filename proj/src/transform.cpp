#include "nodekit/transform.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <Eigen/LU>

namespace nodekit {

namespace {

bool is_rotation(const Mat3 &r, double tol)
{
    return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

} // namespace

AffineTransform::AffineTransform(const Mat4 &matrix, TransformKind kind)
    : matrix_(matrix), kind_(kind)
{
    if (!matrix_.allFinite())
        throw Error(ErrorCode::argument, "affine matrix has non-finite entries");
    if ((matrix_.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12)
        throw Error(ErrorCode::argument, "affine matrix last row must be (0,0,0,1)");
    matrix_.row(3) = Eigen::RowVector4d(0, 0, 0, 1);
    if (kind_ == TransformKind::rigid && !is_rotation(linear(), 1e-5))
        throw Error(ErrorCode::argument, "rigid transform requires an orthonormal linear part with det +1");
}

AffineTransform AffineTransform::identity(TransformKind kind)
{
    return AffineTransform(Mat4::Identity(), kind);
}

AffineTransform AffineTransform::translation(const Vec3 &t)
{
    Mat4 m = Mat4::Identity();
    m.topRightCorner<3, 1>() = t;
    return AffineTransform(m, TransformKind::rigid);
}

AffineTransform AffineTransform::compose(const AffineTransform &other) const
{
    const TransformKind k =
        kind_ == TransformKind::rigid && other.kind_ == TransformKind::rigid ? TransformKind::rigid : TransformKind::affine;
    return AffineTransform(matrix_ * other.matrix_, k);
}

void write_affine(const AffineTransform &t, const std::filesystem::path &path)
{
    std::ofstream out(path);
    if (!out)
        throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
    char buf[64];
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", t.matrix()(r, c));
            out << buf << (c == 3 ? '\n' : ' ');
        }
    }
    if (!out)
        throw Error(ErrorCode::io, "failed writing " + path.string());
}

AffineTransform read_affine(const std::filesystem::path &path)
{
    std::ifstream in(path);
    if (!in)
        throw Error(ErrorCode::io, "cannot open " + path.string());
    Mat4 m;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
            if (!(in >> m(r, c)))
                throw Error(ErrorCode::format, path.string() + ": expected 16 numbers");
    const TransformKind kind = is_rotation(m.topLeftCorner<3, 3>(), 1e-5) ? TransformKind::rigid : TransformKind::affine;
    return AffineTransform(m, kind);
}

const char *to_string(FieldDirection d)
{
    return d == FieldDirection::atlas_to_subject ? "atlas_to_subject" : "subject_to_atlas";
}

DisplacementField DisplacementField::zero(const VolumeGeometry &g, FieldDirection dir)
{
    g.validate();
    return DisplacementField{g, std::vector<Vec3>(g.voxel_count(), Vec3::Zero()), dir};
}

void DisplacementField::validate() const
{
    geometry.validate();
    if (vectors.size() != geometry.voxel_count())
        throw Error(ErrorCode::geometry, "displacement field length does not match its geometry");
    for (const Vec3 &v : vectors)
        if (!v.allFinite())
            throw Error(ErrorCode::data, "displacement field contains non-finite vectors");
}

double DisplacementField::max_norm() const
{
    double m = 0.0;
    for (const Vec3 &v : vectors)
        m = std::max(m, v.norm());
    return m;
}

Vec3 DisplacementField::sample(const Vec3 &point) const
{
    const Vec3 c = geometry.to_index(point);
    const auto &d = geometry.dims;
    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
        if (c[a] < -1e-6 || c[a] > d[a] - 1 + 1e-6)
            return Vec3::Zero();
        const double x = std::clamp(c[a], 0.0, static_cast<double>(d[a] - 1));
        i0[a] = std::min(static_cast<int>(std::floor(x)), std::max(d[a] - 2, 0));
        f[a] = d[a] == 1 ? 0.0 : x - i0[a];
    }
    Vec3 acc = Vec3::Zero();
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
                if (w == 0.0)
                    continue;
                const int i = std::min(i0[0] + dx, d[0] - 1);
                const int j = std::min(i0[1] + dy, d[1] - 1);
                const int k = std::min(i0[2] + dz, d[2] - 1);
                acc += w * vectors[geometry.linear(i, j, k)];
            }
    return acc;
}

DisplacementField resample_field(const DisplacementField &field, const VolumeGeometry &target)
{
    DisplacementField out = DisplacementField::zero(target, field.direction);
    std::size_t n = 0;
    for (int k = 0; k < target.dims[2]; ++k)
        for (int j = 0; j < target.dims[1]; ++j)
            for (int i = 0; i < target.dims[0]; ++i, ++n) {
                // clamp into the source grid so coarse fields extend to the fine border
                Vec3 c = field.geometry.to_index(target.to_physical(i, j, k));
                for (int a = 0; a < 3; ++a)
                    c[a] = std::clamp(c[a], 0.0, static_cast<double>(field.geometry.dims[a] - 1));
                out.vectors[n] = field.sample(field.geometry.to_physical(c));
            }
    return out;
}

} // namespace nodekit
