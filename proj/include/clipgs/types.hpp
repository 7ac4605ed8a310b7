#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace clipgs {

template <typename Real> using Vec2 = Eigen::Matrix<Real, 2, 1>;
template <typename Real> using Vec3 = Eigen::Matrix<Real, 3, 1>;
template <typename Real> using Vec4 = Eigen::Matrix<Real, 4, 1>;
template <typename Real> using Mat2 = Eigen::Matrix<Real, 2, 2>;
template <typename Real> using Mat3 = Eigen::Matrix<Real, 3, 3>;

/// Raised when a parameter violates a documented precondition.
class InvalidParameter : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

template <typename Real> Real sigmoid(Real x) { return Real(1) / (Real(1) + std::exp(-x)); }

template <typename Real> Real logit(Real p) { return std::log(p / (Real(1) - p)); }

/// Struct-of-arrays storage for a set of 3D Gaussian primitives.
///
/// All quantities are kept in their pre-activation form: rotations are
/// unnormalized quaternions (w, x, y, z), scales are log-extents, colors and
/// opacities are logits. `trunc` holds the learnable plane coordinate m of
/// each primitive's effective barycenter.
template <typename Real> struct GaussianCloud {
    std::vector<Vec3<Real>> positions;
    std::vector<Vec4<Real>> rotations;
    std::vector<Vec3<Real>> log_scales;
    std::vector<Vec3<Real>> color_logits;
    std::vector<Real> opacity_logits;
    std::vector<Real> trunc;

    std::size_t size() const { return positions.size(); }

    void resize(std::size_t n) {
        positions.resize(n, Vec3<Real>::Zero());
        rotations.resize(n, Vec4<Real>(1, 0, 0, 0));
        log_scales.resize(n, Vec3<Real>::Zero());
        color_logits.resize(n, Vec3<Real>::Zero());
        opacity_logits.resize(n, Real(0));
        trunc.resize(n, Real(0));
    }

    bool consistent() const {
        const auto n = positions.size();
        return rotations.size() == n && log_scales.size() == n && color_logits.size() == n &&
               opacity_logits.size() == n && trunc.size() == n;
    }

    void check() const {
        if (!consistent()) throw InvalidParameter("GaussianCloud: array lengths differ");
    }

    template <typename Other> GaussianCloud<Other> cast() const {
        GaussianCloud<Other> out;
        out.resize(size());
        for (std::size_t i = 0; i < size(); ++i) {
            out.positions[i] = positions[i].template cast<Other>();
            out.rotations[i] = rotations[i].template cast<Other>();
            out.log_scales[i] = log_scales[i].template cast<Other>();
            out.color_logits[i] = color_logits[i].template cast<Other>();
            out.opacity_logits[i] = static_cast<Other>(opacity_logits[i]);
            out.trunc[i] = static_cast<Other>(trunc[i]);
        }
        return out;
    }

    bool operator==(const GaussianCloud&) const = default;
};

/// Pinhole camera with a rigid world-to-camera transform. Camera space looks
/// down +z with x to the right and y down; pixel (i, j) samples the point
/// (i, j) in image coordinates.
struct Camera {
    int width = 0;
    int height = 0;
    double fx = 1, fy = 1, cx = 0, cy = 0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    void check() const {
        if (width <= 0 || height <= 0) throw InvalidParameter("Camera: non-positive image size");
        if (!(fx > 0) || !(fy > 0)) throw InvalidParameter("Camera: focal lengths must be positive");
        if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
            throw InvalidParameter("Camera: principal point outside image");
        const Eigen::Matrix3d err = rotation.transpose() * rotation - Eigen::Matrix3d::Identity();
        if (!(err.cwiseAbs().maxCoeff() <= 1e-6)) throw InvalidParameter("Camera: rotation is not orthonormal");
    }

    Eigen::Vector3d center() const { return -rotation.transpose() * translation; }

    bool operator==(const Camera&) const = default;
};

/// Orbit camera at `radius` from `target`, placed by azimuth (about +z) and
/// elevation (from the xy-plane), looking at the target.
inline Camera orbit_camera(double azimuth, double elevation, double radius, const Eigen::Vector3d& target,
                           double fov_y, int width, int height) {
    const Eigen::Vector3d dir(std::cos(elevation) * std::cos(azimuth), std::cos(elevation) * std::sin(azimuth),
                              std::sin(elevation));
    const Eigen::Vector3d eye = target + radius * dir;
    const Eigen::Vector3d forward = (target - eye).normalized();
    Eigen::Vector3d up(0, 0, 1);
    if (std::abs(forward.dot(up)) > 0.999) up = Eigen::Vector3d(0, 1, 0);
    const Eigen::Vector3d right = forward.cross(up).normalized();
    const Eigen::Vector3d down = forward.cross(right);

    Camera cam;
    cam.width = width;
    cam.height = height;
    cam.fy = 0.5 * height / std::tan(0.5 * fov_y);
    cam.fx = cam.fy;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.rotation.row(0) = right.transpose();
    cam.rotation.row(1) = down.transpose();
    cam.rotation.row(2) = forward.transpose();
    cam.translation = -cam.rotation * eye;
    return cam;
}

/// Half-space boundary. Points with p·normal < offset are on the visible side.
struct ClipPlane {
    Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
    double offset = 0;

    void check() const {
        if (!(std::abs(normal.norm() - 1.0) <= 1e-9)) throw InvalidParameter("ClipPlane: normal is not unit length");
    }
};

/// Row-major interleaved RGB image.
template <typename Real> struct Image {
    int width = 0;
    int height = 0;
    std::vector<Real> data;

    Image() = default;
    Image(int w, int h, Real fill = Real(0)) : width(w), height(h), data(std::size_t(w) * h * 3, fill) {}

    Real& at(int x, int y, int ch) { return data[(std::size_t(y) * width + x) * 3 + ch]; }
    Real at(int x, int y, int ch) const { return data[(std::size_t(y) * width + x) * 3 + ch]; }
    std::size_t pixels() const { return std::size_t(width) * height; }

    template <typename Other> Image<Other> cast() const {
        Image<Other> out(width, height);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
        return out;
    }

    bool operator==(const Image&) const = default;
};

} // namespace clipgs
