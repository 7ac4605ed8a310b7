#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "clipgs/aam.hpp"
#include "clipgs/model_io.hpp"
#include "clipgs/rasterizer.hpp"
#include "clipgs/truncation.hpp"

namespace clipgs {

/// Visibility of every primitive for one plane under the given truncation mode.
template <typename Real>
VisibilityResult<Real> compute_visibility(const GaussianCloud<Real>& cloud, const ClipPlane& plane, TruncationMode mode,
                                          Real epsilon = Real(kDefaultEpsilon), Real band_width = Real(kDefaultBandWidth)) {
    switch (mode) {
    case TruncationMode::none: return visibility_all<Real>(cloud.size(), Real(plane.offset));
    case TruncationMode::hard: return visibility_hard(cloud, plane);
    case TruncationMode::learnable: return visibility_ste_forward(cloud, plane, epsilon, band_width);
    }
    throw InvalidParameter("compute_visibility: bad truncation mode");
}

/// Visibility plus the AAM deformation of the visible primitives for one plane.
template <typename Real> struct FrameInputs {
    VisibilityResult<Real> visibility;
    std::optional<CloudDeformation<Real>> deformation;
    AamCache<Real> cache;
};

template <typename Real>
FrameInputs<Real> prepare_frame(const GaussianCloud<Real>& cloud, const AamParams<Real>* aam, const ClipPlane& plane,
                                TruncationMode mode, Real epsilon = Real(kDefaultEpsilon),
                                Real band_width = Real(kDefaultBandWidth), bool keep_cache = false,
                                std::optional<double> aam_z = std::nullopt) {
    FrameInputs<Real> f;
    f.visibility = compute_visibility(cloud, plane, mode, epsilon, band_width);
    if (aam) {
        CloudDeformation<Real> d;
        std::vector<Vec3<Real>> pos;
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            if (f.visibility.mask[i] != Real(1)) continue;
            d.indices.push_back(std::uint32_t(i));
            pos.push_back(cloud.positions[i]);
        }
        d.values = aam_forward<Real>(*aam, pos, Real(aam_z.value_or(plane.offset)), keep_cache ? &f.cache : nullptr);
        f.deformation = std::move(d);
    }
    return f;
}

/// Renders a cloud (optionally deformed by an AAM) for a camera and plane.
template <typename Real>
RenderOutput<Real> render_frame(const GaussianCloud<Real>& cloud, const AamParams<Real>* aam, const Camera& camera,
                                const ClipPlane& plane, TruncationMode mode, const Vec3<Real>& background,
                                Real epsilon = Real(kDefaultEpsilon), std::optional<double> aam_z = std::nullopt) {
    // The gradient band only matters for training, so inference renders the visible set alone.
    const auto f = prepare_frame(cloud, aam, plane, mode, epsilon, Real(0), false, aam_z);
    RenderSettings<Real> settings;
    settings.background = background;
    return render(cloud, camera, f.visibility, f.deformation ? &*f.deformation : nullptr, settings, false);
}

/// Plane offset fed to the AAM: the query offset clamped to the range seen in training.
inline double aam_plane_input(const ModelMeta& meta, double plane_z) {
    return std::clamp(plane_z, meta.plane_min, meta.plane_max);
}

inline Image<float> render_model(const Model& model, const Camera& camera, double plane_z) {
    const ClipPlane plane{model.meta.plane_normal, plane_z};
    return render_frame<float>(model.cloud, model.aam ? &*model.aam : nullptr, camera, plane, model.meta.truncation,
                               model.meta.background.cast<float>(), float(model.meta.epsilon),
                               aam_plane_input(model.meta, plane_z))
        .image;
}

/// Number of primitives a model shows for a plane offset.
inline std::size_t visible_count(const Model& model, double plane_z) {
    const ClipPlane plane{model.meta.plane_normal, plane_z};
    return compute_visibility<float>(model.cloud, plane, model.meta.truncation, float(model.meta.epsilon), 0.0f).visible_count();
}

} // namespace clipgs
