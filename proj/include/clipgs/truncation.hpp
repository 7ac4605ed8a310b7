#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "clipgs/types.hpp"

namespace clipgs {

/// Default indicator threshold on the surrogate.
inline constexpr double kDefaultEpsilon = 0.5;
/// Half-width of the band around the plane where the straight-through gradient is kept.
inline constexpr double kDefaultBandWidth = 8.0;

/// How a model decides which primitives survive a clipping plane.
enum class TruncationMode {
    none,      // every primitive is visible
    hard,      // μ·n < z
    learnable, // m < z with a straight-through gradient for m
};

inline const char* to_string(TruncationMode mode) {
    switch (mode) {
    case TruncationMode::none: return "none";
    case TruncationMode::hard: return "hard";
    case TruncationMode::learnable: return "learnable";
    }
    return "?";
}

inline TruncationMode truncation_mode_from_string(const std::string& s) {
    if (s == "none") return TruncationMode::none;
    if (s == "hard") return TruncationMode::hard;
    if (s == "learnable") return TruncationMode::learnable;
    throw InvalidParameter("unknown truncation mode '" + s + "'");
}

/// Per-primitive visibility for one plane.
///
/// `mask` is the forward value M (exactly 0 or 1). `surrogate` is σ(z − m),
/// whose derivative stands in for the step function when `in_band` is set.
template <typename Real> struct VisibilityResult {
    std::vector<Real> mask;
    std::vector<Real> surrogate;
    std::vector<std::uint8_t> in_band;
    Real offset = 0;
    Real band_width = 0;

    std::size_t size() const { return mask.size(); }

    std::size_t visible_count() const {
        std::size_t n = 0;
        for (Real m : mask) n += (m == Real(1));
        return n;
    }
};

/// Hard truncation: visible iff μ·n < z. No gradient path.
template <typename Real> VisibilityResult<Real> visibility_hard(const GaussianCloud<Real>& cloud, const ClipPlane& plane) {
    plane.check();
    const Vec3<Real> n = plane.normal.cast<Real>();
    const Real z = Real(plane.offset);
    VisibilityResult<Real> r;
    r.offset = z;
    r.mask.resize(cloud.size());
    r.surrogate.resize(cloud.size());
    r.in_band.assign(cloud.size(), 0);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Real d = cloud.positions[i].dot(n);
        r.mask[i] = d < z ? Real(1) : Real(0);
        r.surrogate[i] = sigmoid(z - d);
    }
    return r;
}

/// All primitives visible; used when a model carries no truncation.
template <typename Real> VisibilityResult<Real> visibility_all(std::size_t count, Real offset = 0) {
    VisibilityResult<Real> r;
    r.offset = offset;
    r.mask.assign(count, Real(1));
    r.surrogate.assign(count, Real(1));
    r.in_band.assign(count, 0);
    return r;
}

/// Learnable truncation forward: M = 1[σ(z − m) > ε] with surrogate σ(z − m).
template <typename Real>
VisibilityResult<Real> visibility_ste_forward(const GaussianCloud<Real>& cloud, const ClipPlane& plane,
                                              Real epsilon = Real(kDefaultEpsilon),
                                              Real band_width = Real(kDefaultBandWidth)) {
    plane.check();
    if (!(epsilon > Real(0) && epsilon < Real(1))) throw InvalidParameter("visibility_ste_forward: epsilon must be in (0,1)");
    const Real z = Real(plane.offset);
    // σ(u) > ε ⇔ u > logit(ε); comparing u directly keeps the indicator exact near the plane.
    const Real threshold = logit(epsilon);
    VisibilityResult<Real> r;
    r.offset = z;
    r.band_width = band_width;
    r.mask.resize(cloud.size());
    r.surrogate.resize(cloud.size());
    r.in_band.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Real u = z - cloud.trunc[i];
        const Real s = sigmoid(u);
        r.surrogate[i] = s;
        r.mask[i] = u > threshold ? Real(1) : Real(0);
        r.in_band[i] = std::abs(u) <= band_width ? 1 : 0;
    }
    return r;
}

/// Straight-through backward: dL/dm = -σ'(z − m) dL/dM inside the band, zero outside.
template <typename Real>
std::vector<Real> visibility_ste_backward(const VisibilityResult<Real>& result, const std::vector<Real>& upstream) {
    if (upstream.size() != result.size()) throw InvalidParameter("visibility_ste_backward: shape mismatch");
    std::vector<Real> dm(result.size(), Real(0));
    for (std::size_t i = 0; i < result.size(); ++i) {
        if (!result.in_band[i]) continue;
        const Real s = result.surrogate[i];
        dm[i] = -upstream[i] * s * (Real(1) - s);
    }
    return dm;
}

/// Sets m_i = μ_i·n so learnable truncation starts out identical to hard truncation.
template <typename Real> void init_trunc_values(GaussianCloud<Real>& cloud, const Eigen::Vector3d& normal) {
    cloud.check();
    const Vec3<Real> n = normal.cast<Real>();
    for (std::size_t i = 0; i < cloud.size(); ++i) cloud.trunc[i] = cloud.positions[i].dot(n);
}

} // namespace clipgs
