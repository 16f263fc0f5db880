#pragma once

#include <cmath>

#include <Eigen/Geometry>

#include "nodekit/registration.hpp"
#include "oracles.hpp"

namespace phantom {

using nodekit::AffineTransform;
using nodekit::LabelVolume;
using nodekit::Mat3;
using nodekit::Mat4;
using nodekit::Vec3;
using nodekit::VolumeGeometry;

inline VolumeGeometry grid() { return oracle::cube(48); }
inline Vec3 centre() { return Vec3(23.5, 23.5, 23.5); }

inline bool inside(const Vec3 &p)
{
    return (p - Vec3(16, 24, 24)).norm() <= 7.0 || (p - Vec3(32, 24, 24)).norm() <= 5.0;
}

// Voxel y is set when the preimage t^-1(y) lies in the spheres, so moving(t(x)) = fixed(x).
inline LabelVolume spheres(const VolumeGeometry &g, const AffineTransform *t = nullptr)
{
    LabelVolume m(g);
    const Mat4 inv = t ? Mat4(t->matrix().inverse()) : Mat4::Identity();
    for (std::size_t n = 0; n < m.size(); ++n) {
        const auto idx = g.unravel(n);
        const Vec3 y = g.to_physical(idx[0], idx[1], idx[2]);
        const Vec3 x = inv.topLeftCorner<3, 3>() * y + inv.topRightCorner<3, 1>();
        m[n] = inside(x) ? 1u : 0u;
    }
    return m;
}

// Rotation by `deg` about an axis through the grid centre, then translation.
inline AffineTransform rigid(const Vec3 &axis, double deg, const Vec3 &shift)
{
    const Mat3 r = Eigen::AngleAxisd(deg * M_PI / 180.0, axis.normalized()).toRotationMatrix();
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r;
    m.topRightCorner<3, 1>() = centre() - r * centre() + shift;
    return AffineTransform(m, nodekit::TransformKind::rigid);
}

inline double offset_error(const AffineTransform &a, const AffineTransform &b)
{
    return (a.apply(centre()) - b.apply(centre())).norm();
}

inline double angle_error_deg(const AffineTransform &a, const AffineTransform &b)
{
    const Mat3 d = a.linear() * b.linear().transpose();
    const double c = std::clamp((d.trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c) * 180.0 / M_PI;
}

} // namespace phantom
