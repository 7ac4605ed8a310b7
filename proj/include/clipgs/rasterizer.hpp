#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "clipgs/aam.hpp"
#include "clipgs/core_math.hpp"
#include "clipgs/parallel.hpp"
#include "clipgs/truncation.hpp"
#include "clipgs/types.hpp"

namespace clipgs {

/// Blending for a pixel stops before a primitive would push transmittance below this.
inline constexpr double kTransmittanceStop = 1e-4;
/// Upper bound on per-fragment opacity, keeps transmittance recoverable in the backward pass.
inline constexpr double kMaxFragmentAlpha = 0.99;
inline constexpr int kTileSize = 16;

/// Deformation applied to a subset of primitives: column k of `values` belongs to primitive indices[k].
template <typename Real> struct CloudDeformation {
    Deformation<Real> values;
    std::vector<std::uint32_t> indices;
};

template <typename Real> struct RenderSettings {
    Vec3<Real> background = Vec3<Real>::Zero();
};

/// A primitive that takes part in blending, with everything the per-pixel loops need.
template <typename Real> struct PreparedSplat {
    std::uint32_t index = 0; // primitive index in the cloud
    int deform_col = -1;     // column in the deformation, or -1
    Vec3<Real> position;     // deformed
    Vec4<Real> rotation;     // deformed
    Vec3<Real> log_scale;    // deformed
    Mat3<Real> cov3d;
    Projected2D<Real> proj;
    Real opacity = 0; // σ(opacity logit)
    Real mask = 0;    // M
    Vec3<Real> color;
};

/// Packed per-splat data for the inner pixel loops.
template <typename Real> struct PackedSplat {
    Real mx, my, qa, qb, qc, opacity, r, g, b;
};

/// Everything render_backward needs from the matching forward call.
template <typename Real> struct RenderState {
    Camera camera;
    RenderSettings<Real> settings;
    std::size_t cloud_size = 0;
    std::size_t deformation_size = 0;
    std::vector<PreparedSplat<Real>> splats; // depth order
    std::vector<PackedSplat<Real>> packed;   // depth order
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> tile_lists; // positions into `splats`
    std::vector<std::uint32_t> stop_index;              // per pixel: tile-list position where blending stopped
};

template <typename Real> struct RenderOutput {
    Image<Real> image;
    std::vector<Real> final_transmittance;
    std::vector<int> contrib_count;
    std::optional<RenderState<Real>> saved_state;
};

/// Gradients of a scalar loss with respect to every input of render().
template <typename Real> struct CloudGradients {
    std::vector<Vec3<Real>> d_positions;
    std::vector<Vec4<Real>> d_rotations;
    std::vector<Vec3<Real>> d_log_scales;
    std::vector<Vec3<Real>> d_color_logits;
    std::vector<Real> d_opacity_logits;
    std::vector<Real> d_mask;  // dL/dM, fed to the straight-through backward
    std::vector<Real> d_trunc; // dL/dm, filled by the caller
    Deformation<Real> d_deformation;

    void reset(std::size_t n, Eigen::Index deformed = 0) {
        d_positions.assign(n, Vec3<Real>::Zero());
        d_rotations.assign(n, Vec4<Real>::Zero());
        d_log_scales.assign(n, Vec3<Real>::Zero());
        d_color_logits.assign(n, Vec3<Real>::Zero());
        d_opacity_logits.assign(n, Real(0));
        d_mask.assign(n, Real(0));
        d_trunc.assign(n, Real(0));
        d_deformation.d_mu = ColMatrix<Real>::Zero(3, deformed);
        d_deformation.d_rot = ColMatrix<Real>::Zero(4, deformed);
        d_deformation.d_scale = ColMatrix<Real>::Zero(3, deformed);
    }
};

/// Stable ascending order by (depth, index).
template <typename Real> std::vector<std::uint32_t> depth_sort(std::span<const Real> depths) {
    std::vector<std::uint32_t> order(depths.size());
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return depths[a] < depths[b]; });
    return order;
}

namespace detail {

/// Projects every primitive that takes part in blending (visible, or in the gradient band) and sorts by depth.
template <typename Real>
std::vector<PreparedSplat<Real>> prepare_splats(const GaussianCloud<Real>& cloud, const Camera& camera,
                                                const VisibilityResult<Real>& visibility,
                                                const CloudDeformation<Real>* deformation) {
    cloud.check();
    camera.check();
    if (visibility.size() != cloud.size()) throw InvalidParameter("render: visibility does not match cloud");

    std::vector<int> deform_col;
    if (deformation) {
        const auto& d = deformation->values;
        if (std::size_t(d.d_mu.cols()) != deformation->indices.size() || d.d_rot.cols() != d.d_mu.cols() ||
            d.d_scale.cols() != d.d_mu.cols())
            throw InvalidParameter("render: deformation shape mismatch");
        deform_col.assign(cloud.size(), -1);
        for (std::size_t k = 0; k < deformation->indices.size(); ++k) {
            if (deformation->indices[k] >= cloud.size()) throw InvalidParameter("render: deformation index out of range");
            deform_col[deformation->indices[k]] = int(k);
        }
    }

    std::vector<PreparedSplat<Real>> splats;
    std::vector<Real> depths;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Real m = visibility.mask[i];
        if (m == Real(0) && !visibility.in_band[i]) continue;
        PreparedSplat<Real> s;
        s.index = std::uint32_t(i);
        s.position = cloud.positions[i];
        s.rotation = cloud.rotations[i];
        s.log_scale = cloud.log_scales[i];
        if (deformation && deform_col[i] >= 0) {
            const int k = deform_col[i];
            s.deform_col = k;
            s.position += deformation->values.d_mu.col(k);
            s.rotation += deformation->values.d_rot.col(k);
            s.log_scale += deformation->values.d_scale.col(k);
        }
        s.cov3d = build_covariance(s.rotation, s.log_scale);
        s.proj = project_gaussian(s.position, s.cov3d, camera);
        if (!s.proj.valid) continue;
        s.opacity = sigmoid(cloud.opacity_logits[i]);
        s.mask = m;
        s.color = Vec3<Real>(sigmoid(cloud.color_logits[i].x()), sigmoid(cloud.color_logits[i].y()),
                             sigmoid(cloud.color_logits[i].z()));
        depths.push_back(s.proj.depth);
        splats.push_back(std::move(s));
    }
    const auto order = depth_sort<Real>(depths);
    std::vector<PreparedSplat<Real>> sorted;
    sorted.reserve(splats.size());
    for (auto k : order) sorted.push_back(std::move(splats[k]));
    return sorted;
}

template <typename Real> PackedSplat<Real> pack(const PreparedSplat<Real>& s) {
    return {s.proj.mean2d.x(), s.proj.mean2d.y(), s.proj.conic(0, 0), s.proj.conic(0, 1), s.proj.conic(1, 1),
            s.mask * s.opacity, s.color.x(), s.color.y(), s.color.z()};
}

template <typename Real> inline Real splat_exponent(const PackedSplat<Real>& s, Real px, Real py) {
    const Real dx = px - s.mx;
    const Real dy = py - s.my;
    return Real(-0.5) * (s.qa * dx * dx + s.qc * dy * dy) - s.qb * dx * dy;
}

/// Columns [x_lo, x_hi] of row `py` that can reach the exponent cutoff; empty when x_lo > x_hi.
/// Uses a slightly relaxed cutoff so the exact per-pixel test still decides every boundary pixel.
template <typename Real> inline void row_span(const PackedSplat<Real>& s, Real py, int& x_lo, int& x_hi) {
    const double dy = double(py) - double(s.my);
    const double a = 0.5 * double(s.qa);
    const double b = double(s.qb) * dy;
    const double c = 0.5 * double(s.qc) * dy * dy + (kExponentCutoff - 0.05);
    const double disc = b * b - 4 * a * c;
    if (!(disc >= 0) || !(a > 0)) {
        x_lo = 1;
        x_hi = 0;
        return;
    }
    const double root = std::sqrt(disc);
    const double lo = double(s.mx) + (-b - root) / (2 * a);
    const double hi = double(s.mx) + (-b + root) / (2 * a);
    constexpr double kLimit = 1e9;
    x_lo = int(std::floor(std::max(lo, -kLimit))) - 1;
    x_hi = int(std::ceil(std::min(hi, kLimit))) + 1;
}

} // namespace detail

/// Tiled front-to-back α-blending of the masked, optionally deformed cloud:
/// C = Σ M_i T_i α_i G'_i c_i + T_final · background.
///
/// A primitive takes part when its mask is nonzero or it lies inside the straight-through band; in the
/// latter case it blends with effective opacity α·M (zero forward) so dC/dM is available.
template <typename Real>
RenderOutput<Real> render(const GaussianCloud<Real>& cloud, const Camera& camera, const VisibilityResult<Real>& visibility,
                          std::type_identity_t<const CloudDeformation<Real>*> deformation = nullptr,
                          const std::type_identity_t<RenderSettings<Real>>& settings = {},
                          bool keep_state = true) {
    RenderState<Real> st;
    st.camera = camera;
    st.settings = settings;
    st.cloud_size = cloud.size();
    st.deformation_size = deformation ? deformation->indices.size() : 0;
    st.splats = detail::prepare_splats(cloud, camera, visibility, deformation);
    st.packed.reserve(st.splats.size());
    for (const auto& s : st.splats) st.packed.push_back(detail::pack(s));

    const int w = camera.width, h = camera.height;
    st.tiles_x = (w + kTileSize - 1) / kTileSize;
    st.tiles_y = (h + kTileSize - 1) / kTileSize;
    st.tile_lists.assign(std::size_t(st.tiles_x) * st.tiles_y, {});
    for (std::uint32_t k = 0; k < st.splats.size(); ++k) {
        const auto& p = st.splats[k].proj;
        for (int ty = p.min_y / kTileSize; ty <= p.max_y / kTileSize; ++ty)
            for (int tx = p.min_x / kTileSize; tx <= p.max_x / kTileSize; ++tx)
                st.tile_lists[std::size_t(ty) * st.tiles_x + tx].push_back(k);
    }

    RenderOutput<Real> out;
    out.image = Image<Real>(w, h);
    out.final_transmittance.assign(std::size_t(w) * h, Real(1));
    out.contrib_count.assign(std::size_t(w) * h, 0);
    st.stop_index.assign(std::size_t(w) * h, 0);

    const Real cutoff = Real(kExponentCutoff);
    const Real stop = Real(kTransmittanceStop);
    const Real max_alpha = Real(kMaxFragmentAlpha);
    const Vec3<Real> bg = settings.background;

    // Splat-major within a tile: every pixel still sees the splats in list order, but only the pixels
    // inside a splat's cutoff ellipse are visited. Zero-opacity splats cannot change a pixel and are skipped.
    parallel_for(st.tile_lists.size(), [&](std::size_t tile, int) {
        constexpr int kPix = kTileSize * kTileSize;
        const int x0 = int(tile % st.tiles_x) * kTileSize, y0 = int(tile / st.tiles_x) * kTileSize;
        const int x1 = std::min(w, x0 + kTileSize), y1 = std::min(h, y0 + kTileSize);
        const auto& list = st.tile_lists[tile];
        std::array<Real, kPix> t, cr, cg, cb;
        std::array<std::uint32_t, kPix> stop_at;
        std::array<int, kPix> count;
        std::array<std::uint8_t, kPix> done;
        t.fill(Real(1));
        cr.fill(Real(0));
        cg.fill(Real(0));
        cb.fill(Real(0));
        stop_at.fill(std::uint32_t(list.size()));
        count.fill(0);
        done.fill(0);
        int active = (x1 - x0) * (y1 - y0);
        for (std::uint32_t k = 0; k < list.size() && active > 0; ++k) {
            const auto& s = st.packed[list[k]];
            if (s.opacity == Real(0)) continue;
            for (int y = y0; y < y1; ++y) {
                const Real py = Real(y);
                int xs, xe;
                detail::row_span(s, py, xs, xe);
                xs = std::max(xs, x0);
                xe = std::min(xe, x1 - 1);
                for (int x = xs; x <= xe; ++x) {
                    const int p = (y - y0) * kTileSize + (x - x0);
                    if (done[std::size_t(p)]) continue;
                    const Real power = detail::splat_exponent(s, Real(x), py);
                    if (power < cutoff) continue;
                    const Real a = std::min(max_alpha, s.opacity * std::min(Real(1), std::exp(power)));
                    const Real test_t = t[std::size_t(p)] * (Real(1) - a);
                    if (test_t < stop) {
                        done[std::size_t(p)] = 1;
                        stop_at[std::size_t(p)] = k;
                        --active;
                        continue;
                    }
                    const Real wgt = t[std::size_t(p)] * a;
                    cr[std::size_t(p)] += wgt * s.r;
                    cg[std::size_t(p)] += wgt * s.g;
                    cb[std::size_t(p)] += wgt * s.b;
                    t[std::size_t(p)] = test_t;
                    count[std::size_t(p)] += a > Real(0);
                }
            }
        }
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const std::size_t p = std::size_t((y - y0) * kTileSize + (x - x0));
                const std::size_t pix = std::size_t(y) * w + x;
                out.image.data[pix * 3 + 0] = cr[p] + t[p] * bg.x();
                out.image.data[pix * 3 + 1] = cg[p] + t[p] * bg.y();
                out.image.data[pix * 3 + 2] = cb[p] + t[p] * bg.z();
                out.final_transmittance[pix] = t[p];
                out.contrib_count[pix] = count[p];
                st.stop_index[pix] = stop_at[p];
            }
        }
    });

    if (keep_state) out.saved_state = std::move(st);
    return out;
}

/// Direct per-pixel transcription of the blend over every participating primitive in depth order,
/// without tiles or bounding boxes. Shares the exponent cutoff and the transmittance stop rule with render().
template <typename Real>
Image<Real> reference_render(const GaussianCloud<Real>& cloud, const Camera& camera, const VisibilityResult<Real>& visibility,
                             std::type_identity_t<const CloudDeformation<Real>*> deformation = nullptr,
                          const std::type_identity_t<RenderSettings<Real>>& settings = {}) {
    const auto splats = detail::prepare_splats(cloud, camera, visibility, deformation);
    Image<Real> img(camera.width, camera.height);
    for (int y = 0; y < camera.height; ++y) {
        for (int x = 0; x < camera.width; ++x) {
            const Vec2<Real> px{Real(x), Real(y)};
            Real t = 1;
            Vec3<Real> c = Vec3<Real>::Zero();
            for (const auto& s : splats) {
                const Real g = eval_gaussian_2d(px, s.proj);
                if (g == Real(0)) continue;
                const Real a = std::min(Real(kMaxFragmentAlpha), s.mask * s.opacity * g);
                if (t * (Real(1) - a) < Real(kTransmittanceStop)) break;
                c += t * a * s.color;
                t *= Real(1) - a;
            }
            c += t * settings.background;
            for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = c[ch];
        }
    }
    return img;
}

/// Reverse-mode gradients of render() given dL/dimage.
template <typename Real> CloudGradients<Real> render_backward(const RenderOutput<Real>& forward, const Image<Real>& d_image) {
    if (!forward.saved_state) throw InvalidParameter("render_backward: forward pass did not keep its state");
    const RenderState<Real>& st = *forward.saved_state;
    const int w = st.camera.width, h = st.camera.height;
    if (d_image.width != w || d_image.height != h || forward.image.width != w || forward.image.height != h ||
        st.stop_index.size() != std::size_t(w) * h || forward.final_transmittance.size() != std::size_t(w) * h)
        throw InvalidParameter("render_backward: saved state does not match the gradient image");

    const std::size_t n_splats = st.splats.size();
    // Per splat: dmean(2), dconic(3), dopacity, dcolor(3), dmask
    constexpr int kStride = 10;
    const int workers = int(std::min<std::size_t>(std::size_t(worker_count()), std::max<std::size_t>(st.tile_lists.size(), 1)));
    std::vector<std::vector<Real>> partial(std::size_t(workers), std::vector<Real>(n_splats * kStride, Real(0)));

    const Real cutoff = Real(kExponentCutoff);
    const Real max_alpha = Real(kMaxFragmentAlpha);
    const Vec3<Real> bg = st.settings.background;

    parallel_for(st.tile_lists.size(), [&](std::size_t tile, int worker) {
        constexpr int kPix = kTileSize * kTileSize;
        Real* acc = partial[std::size_t(worker)].data();
        const int x0 = int(tile % st.tiles_x) * kTileSize, y0 = int(tile / st.tiles_x) * kTileSize;
        const int x1 = std::min(w, x0 + kTileSize), y1 = std::min(h, y0 + kTileSize);
        const auto& list = st.tile_lists[tile];
        // Per pixel: transmittance in front of the current splat and the normalized color behind it.
        std::array<Real, kPix> t, rr, rg, rb, gr, gg, gb;
        std::array<std::uint32_t, kPix> stop_at;
        std::uint32_t k_end = 0;
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const std::size_t p = std::size_t((y - y0) * kTileSize + (x - x0));
                const std::size_t pix = std::size_t(y) * w + x;
                gr[p] = d_image.data[pix * 3];
                gg[p] = d_image.data[pix * 3 + 1];
                gb[p] = d_image.data[pix * 3 + 2];
                const bool has_grad = gr[p] != Real(0) || gg[p] != Real(0) || gb[p] != Real(0);
                stop_at[p] = has_grad ? st.stop_index[pix] : 0;
                k_end = std::max(k_end, stop_at[p]);
                t[p] = forward.final_transmittance[pix];
                rr[p] = bg.x();
                rg[p] = bg.y();
                rb[p] = bg.z();
            }
        }
        for (std::uint32_t k = k_end; k-- > 0;) {
            const std::uint32_t id = list[k];
            const auto& s = st.packed[id];
            const Real mask = st.splats[id].mask, opacity = st.splats[id].opacity;
            Real g[kStride] = {};
            bool touched = false;
            for (int y = y0; y < y1; ++y) {
                const Real py = Real(y);
                int xs, xe;
                detail::row_span(s, py, xs, xe);
                xs = std::max(xs, x0);
                xe = std::min(xe, x1 - 1);
                for (int x = xs; x <= xe; ++x) {
                    const std::size_t p = std::size_t((y - y0) * kTileSize + (x - x0));
                    if (k >= stop_at[p]) continue;
                    const Real px = Real(x);
                    const Real power = detail::splat_exponent(s, px, py);
                    if (power < cutoff) continue;
                    touched = true;
                    const Real gauss = std::min(Real(1), std::exp(power));
                    const Real raw = s.opacity * gauss;
                    const Real a = std::min(max_alpha, raw);
                    t[p] = t[p] / (Real(1) - a);
                    const Real wgt = t[p] * a;
                    g[6] += wgt * gr[p];
                    g[7] += wgt * gg[p];
                    g[8] += wgt * gb[p];
                    const Real d_alpha = t[p] * (gr[p] * (s.r - rr[p]) + gg[p] * (s.g - rg[p]) + gb[p] * (s.b - rb[p]));
                    rr[p] = a * s.r + (Real(1) - a) * rr[p];
                    rg[p] = a * s.g + (Real(1) - a) * rg[p];
                    rb[p] = a * s.b + (Real(1) - a) * rb[p];
                    if (raw >= max_alpha) continue;
                    g[5] += d_alpha * mask * gauss;
                    g[9] += d_alpha * opacity * gauss;
                    if (s.opacity == Real(0)) continue;
                    const Real d_power = d_alpha * s.opacity * gauss;
                    const Real dx = px - s.mx, dy = py - s.my;
                    g[0] += d_power * (s.qa * dx + s.qb * dy);
                    g[1] += d_power * (s.qb * dx + s.qc * dy);
                    g[2] += d_power * Real(-0.5) * dx * dx;
                    g[3] += d_power * -dx * dy;
                    g[4] += d_power * Real(-0.5) * dy * dy;
                }
            }
            if (touched) {
                Real* dst = acc + std::size_t(id) * kStride;
                for (int c = 0; c < kStride; ++c) dst[c] += g[c];
            }
        }
    }, workers);

    std::vector<Real> total(n_splats * kStride, Real(0));
    for (const auto& p : partial)
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += p[i];

    CloudGradients<Real> grads;
    grads.reset(st.cloud_size, Eigen::Index(st.deformation_size));
    for (std::size_t k = 0; k < n_splats; ++k) {
        const PreparedSplat<Real>& s = st.splats[k];
        const Real* g = total.data() + k * kStride;
        const std::uint32_t i = s.index;
        grads.d_mask[i] = g[9];
        grads.d_opacity_logits[i] = g[5] * s.opacity * (Real(1) - s.opacity);
        for (int c = 0; c < 3; ++c) grads.d_color_logits[i][c] = g[6 + c] * s.color[c] * (Real(1) - s.color[c]);

        Projected2DGrad<Real> pg;
        pg.dmean2d = Vec2<Real>(g[0], g[1]);
        pg.dconic00 = g[2];
        pg.dconic01 = g[3];
        pg.dconic11 = g[4];
        Vec3<Real> dmu;
        Mat3<Real> dcov;
        project_gaussian_backward(s.position, s.cov3d, st.camera, s.proj, pg, dmu, dcov);
        Vec4<Real> dq = Vec4<Real>::Zero();
        Vec3<Real> ds = Vec3<Real>::Zero();
        build_covariance_backward(s.rotation, s.log_scale, dcov, dq, ds);
        grads.d_positions[i] = dmu;
        grads.d_rotations[i] = dq;
        grads.d_log_scales[i] = ds;
        if (s.deform_col >= 0) {
            grads.d_deformation.d_mu.col(s.deform_col) = dmu;
            grads.d_deformation.d_rot.col(s.deform_col) = dq;
            grads.d_deformation.d_scale.col(s.deform_col) = ds;
        }
    }
    return grads;
}

} // namespace clipgs
