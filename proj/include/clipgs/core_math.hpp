#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "clipgs/types.hpp"

namespace clipgs {

/// Added to the projected covariance diagonal (pixels²) to keep it invertible.
inline constexpr double kLowPassFloor = 0.3;
/// Primitives at camera depth at or below this are culled.
inline constexpr double kNearPlane = 0.01;
/// Gaussian exponent below which the 2D density is treated as zero.
inline constexpr double kExponentCutoff = -12.0;

/// Rotation matrix of the normalized quaternion q = (w, x, y, z).
template <typename Real> Mat3<Real> quat_to_rotation(const Vec4<Real>& q) {
    const Real norm = q.norm();
    if (!(norm > Real(0)) || !std::isfinite(norm)) throw InvalidParameter("quat_to_rotation: zero or non-finite quaternion");
    const Vec4<Real> u = q / norm;
    const Real w = u[0], x = u[1], y = u[2], z = u[3];
    Mat3<Real> r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// Pulls dL/dR back to dL/dq through normalization and the quaternion-to-matrix map.
template <typename Real> Vec4<Real> quat_to_rotation_backward(const Vec4<Real>& q, const Mat3<Real>& dR) {
    const Real norm = q.norm();
    const Vec4<Real> u = q / norm;
    const Real w = u[0], x = u[1], y = u[2], z = u[3];
    Mat3<Real> dw, dx, dy, dz;
    dw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    dy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    dz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    const Vec4<Real> du(dR.cwiseProduct(dw).sum(), dR.cwiseProduct(dx).sum(), dR.cwiseProduct(dy).sum(),
                        dR.cwiseProduct(dz).sum());
    return (du - u * u.dot(du)) / norm;
}

/// Σ = R diag(exp(s))² Rᵀ.
template <typename Real> Mat3<Real> build_covariance(const Vec4<Real>& q, const Vec3<Real>& log_scale) {
    if (!q.allFinite() || !log_scale.allFinite()) throw InvalidParameter("build_covariance: non-finite input");
    const Mat3<Real> m = quat_to_rotation(q) * log_scale.array().exp().matrix().asDiagonal();
    Mat3<Real> cov = m * m.transpose();
    cov(1, 0) = cov(0, 1);
    cov(2, 0) = cov(0, 2);
    cov(2, 1) = cov(1, 2);
    return cov;
}

/// Backward of build_covariance: accumulates dL/dq and dL/d(log_scale) from a symmetric dL/dΣ.
template <typename Real>
void build_covariance_backward(const Vec4<Real>& q, const Vec3<Real>& log_scale, const Mat3<Real>& dcov,
                               Vec4<Real>& dq, Vec3<Real>& dlog_scale) {
    const Mat3<Real> r = quat_to_rotation(q);
    const Vec3<Real> s = log_scale.array().exp().matrix();
    const Mat3<Real> m = r * s.asDiagonal();
    // Σ = M Mᵀ with symmetric upstream: dL/dM = 2 dΣ M
    const Mat3<Real> dm = Real(2) * dcov * m;
    const Mat3<Real> dr = dm * s.asDiagonal();
    for (int k = 0; k < 3; ++k) dlog_scale[k] += r.col(k).dot(dm.col(k)) * s[k];
    dq += quat_to_rotation_backward(q, dr);
}

/// Screen-space footprint of one primitive.
template <typename Real> struct Projected2D {
    Vec2<Real> mean2d = Vec2<Real>::Zero();
    Mat2<Real> cov2d = Mat2<Real>::Identity();
    Mat2<Real> conic = Mat2<Real>::Identity(); // inverse of cov2d
    Real depth = 0;
    Vec3<Real> cam_pos = Vec3<Real>::Zero();
    // Inclusive pixel bounds of the region where the exponent can exceed the cutoff.
    int min_x = 0, min_y = 0, max_x = -1, max_y = -1;
    bool valid = false;
};

namespace detail {

template <typename Real> Eigen::Matrix<Real, 2, 3> projection_jacobian(const Vec3<Real>& t, const Camera& cam) {
    const Real fx = Real(cam.fx), fy = Real(cam.fy);
    const Real iz = Real(1) / t.z();
    Eigen::Matrix<Real, 2, 3> j;
    j << fx * iz, 0, -fx * t.x() * iz * iz, 0, fy * iz, -fy * t.y() * iz * iz;
    return j;
}

} // namespace detail

/// EWA projection of a 3D Gaussian (mean μ, covariance Σ) through a pinhole camera.
template <typename Real> Projected2D<Real> project_gaussian(const Vec3<Real>& mu, const Mat3<Real>& cov, const Camera& cam) {
    Projected2D<Real> p;
    const Mat3<Real> w = cam.rotation.cast<Real>();
    const Vec3<Real> t = w * mu + cam.translation.cast<Real>();
    p.cam_pos = t;
    p.depth = t.z();
    if (!(t.z() > Real(kNearPlane))) return p;

    p.mean2d = Vec2<Real>(Real(cam.fx) * t.x() / t.z() + Real(cam.cx), Real(cam.fy) * t.y() / t.z() + Real(cam.cy));
    const Eigen::Matrix<Real, 2, 3> jw = detail::projection_jacobian(t, cam) * w;
    Mat2<Real> c = jw * cov * jw.transpose();
    c(0, 0) += Real(kLowPassFloor);
    c(1, 1) += Real(kLowPassFloor);
    c(1, 0) = c(0, 1);
    p.cov2d = c;
    const Real det = c(0, 0) * c(1, 1) - c(0, 1) * c(0, 1);
    if (!(det > Real(0))) return p;
    p.conic << c(1, 1) / det, -c(0, 1) / det, -c(0, 1) / det, c(0, 0) / det;

    // dᵀ Σ⁻¹ d ≤ 24 bounds |dx| by sqrt(24 Σ00); one pixel of slack for rounding.
    const Real reach = Real(-2 * kExponentCutoff);
    const Real rx = std::sqrt(reach * c(0, 0)) + Real(1);
    const Real ry = std::sqrt(reach * c(1, 1)) + Real(1);
    p.min_x = std::max(0, int(std::floor(p.mean2d.x() - rx)));
    p.max_x = std::min(cam.width - 1, int(std::ceil(p.mean2d.x() + rx)));
    p.min_y = std::max(0, int(std::floor(p.mean2d.y() - ry)));
    p.max_y = std::min(cam.height - 1, int(std::ceil(p.mean2d.y() + ry)));
    p.valid = std::isfinite(p.mean2d.x()) && std::isfinite(p.mean2d.y()) && p.min_x <= p.max_x && p.min_y <= p.max_y;
    return p;
}

/// Gradients of a scalar loss with respect to one primitive's screen-space footprint.
template <typename Real> struct Projected2DGrad {
    Vec2<Real> dmean2d = Vec2<Real>::Zero();
    Real dconic00 = 0, dconic01 = 0, dconic11 = 0; // conic01 counted once for the symmetric pair
};

/// Backward of project_gaussian: returns dL/dμ and dL/dΣ (symmetric) given footprint gradients.
template <typename Real>
void project_gaussian_backward(const Vec3<Real>& mu, const Mat3<Real>& cov, const Camera& cam, const Projected2D<Real>& p,
                               const Projected2DGrad<Real>& g, Vec3<Real>& dmu, Mat3<Real>& dcov) {
    (void)mu;
    const Mat3<Real> w = cam.rotation.cast<Real>();
    const Vec3<Real> t = p.cam_pos;
    const Real fx = Real(cam.fx), fy = Real(cam.fy);
    const Real iz = Real(1) / t.z(), iz2 = iz * iz, iz3 = iz2 * iz;

    // conic = cov2d⁻¹ ⇒ dL/dcov2d = -Q G Q with G the symmetric upstream.
    Mat2<Real> gq;
    gq << g.dconic00, Real(0.5) * g.dconic01, Real(0.5) * g.dconic01, g.dconic11;
    const Mat2<Real> dcov2 = -p.conic * gq * p.conic;

    const Eigen::Matrix<Real, 2, 3> j = detail::projection_jacobian(t, cam);
    const Eigen::Matrix<Real, 2, 3> jw = j * w;
    dcov = jw.transpose() * dcov2 * jw;

    // cov2d = T Σ Tᵀ with T = J W
    const Eigen::Matrix<Real, 2, 3> dT = Real(2) * dcov2 * jw * cov;
    const Eigen::Matrix<Real, 2, 3> dJ = dT * w.transpose();

    Vec3<Real> dt = Vec3<Real>::Zero();
    dt.x() += g.dmean2d.x() * fx * iz;
    dt.z() += -g.dmean2d.x() * fx * t.x() * iz2;
    dt.y() += g.dmean2d.y() * fy * iz;
    dt.z() += -g.dmean2d.y() * fy * t.y() * iz2;

    dt.z() += dJ(0, 0) * (-fx * iz2);
    dt.x() += dJ(0, 2) * (-fx * iz2);
    dt.z() += dJ(0, 2) * (Real(2) * fx * t.x() * iz3);
    dt.z() += dJ(1, 1) * (-fy * iz2);
    dt.y() += dJ(1, 2) * (-fy * iz2);
    dt.z() += dJ(1, 2) * (Real(2) * fy * t.y() * iz3);

    dmu = w.transpose() * dt;
}

/// Exponent of the projected Gaussian at pixel position (px, py).
template <typename Real> inline Real gaussian_exponent(Real px, Real py, const Vec2<Real>& mean, const Mat2<Real>& conic) {
    const Real dx = px - mean.x();
    const Real dy = py - mean.y();
    return Real(-0.5) * (conic(0, 0) * dx * dx + conic(1, 1) * dy * dy) - conic(0, 1) * dx * dy;
}

/// 2D density exp(-½ dᵀ Σ⁻¹ d), zero below the exponent cutoff.
template <typename Real> Real eval_gaussian_2d(const Vec2<Real>& x, const Projected2D<Real>& p) {
    const Real power = gaussian_exponent(x.x(), x.y(), p.mean2d, p.conic);
    if (power < Real(kExponentCutoff)) return Real(0);
    return std::min(Real(1), std::exp(power));
}

} // namespace clipgs
