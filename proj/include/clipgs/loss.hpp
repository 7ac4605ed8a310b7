#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "clipgs/types.hpp"

namespace clipgs {

/// Weight of the D-SSIM term in the training loss.
inline constexpr double kDefaultLambda = 0.2;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

template <typename Real> struct LossWithGrad {
    double value = 0;
    Image<Real> grad;
};

template <typename Real> struct LossReport {
    double total = 0;
    double l1 = 0;
    double d_ssim = 0;
    double lambda = kDefaultLambda;
};

namespace detail {

template <typename Real> void check_same_shape(const Image<Real>& a, const Image<Real>& b, const char* who) {
    if (a.width != b.width || a.height != b.height || a.data.size() != b.data.size())
        throw InvalidParameter(std::string(who) + ": image dimensions differ");
}

inline const std::array<double, kSsimWindow>& ssim_kernel() {
    static const std::array<double, kSsimWindow> k = [] {
        std::array<double, kSsimWindow> w{};
        double sum = 0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - kSsimWindow / 2;
            w[std::size_t(i)] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
            sum += w[std::size_t(i)];
        }
        for (auto& v : w) v /= sum;
        return w;
    }();
    return k;
}

/// Single-channel plane.
template <typename Real> struct Plane {
    int w = 0, h = 0;
    std::vector<Real> v;
    Plane(int w_, int h_) : w(w_), h(h_), v(std::size_t(w_) * h_, Real(0)) {}
    Real& operator()(int x, int y) { return v[std::size_t(y) * w + x]; }
    Real operator()(int x, int y) const { return v[std::size_t(y) * w + x]; }
};

/// Valid-region separable correlation with the SSIM window: (w-10) × (h-10) output.
template <typename Real> Plane<Real> filter_valid(const Plane<Real>& in) {
    const auto& k = ssim_kernel();
    const int ow = in.w - kSsimWindow + 1, oh = in.h - kSsimWindow + 1;
    Plane<Real> tmp(ow, in.h);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < ow; ++x) {
            Real s = 0;
            for (int i = 0; i < kSsimWindow; ++i) s += Real(k[std::size_t(i)]) * in(x + i, y);
            tmp(x, y) = s;
        }
    Plane<Real> out(ow, oh);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            Real s = 0;
            for (int i = 0; i < kSsimWindow; ++i) s += Real(k[std::size_t(i)]) * tmp(x, y + i);
            out(x, y) = s;
        }
    return out;
}

/// Adjoint of filter_valid: scatters a valid-region map back onto the full grid.
template <typename Real> Plane<Real> filter_valid_adjoint(const Plane<Real>& in, int w, int h) {
    const auto& k = ssim_kernel();
    Plane<Real> tmp(in.w, h);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x)
            for (int i = 0; i < kSsimWindow; ++i) tmp(x, y + i) += Real(k[std::size_t(i)]) * in(x, y);
    Plane<Real> out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < in.w; ++x)
            for (int i = 0; i < kSsimWindow; ++i) out(x + i, y) += Real(k[std::size_t(i)]) * tmp(x, y);
    return out;
}

template <typename Real> Plane<Real> channel(const Image<Real>& img, int ch) {
    Plane<Real> p(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels(); ++i) p.v[i] = img.data[i * 3 + std::size_t(ch)];
    return p;
}

/// Mean SSIM over channels and valid windows; optionally the gradient w.r.t. x.
template <typename Real> double ssim_impl(const Image<Real>& x, const Image<Real>& y, Image<Real>* grad_x) {
    check_same_shape(x, y, "ssim");
    if (x.width < kSsimWindow || x.height < kSsimWindow)
        throw InvalidParameter("ssim: image smaller than the 11x11 window leaves no valid region");
    const int w = x.width, h = x.height;
    const int vw = w - kSsimWindow + 1, vh = h - kSsimWindow + 1;
    const double count = 3.0 * vw * vh;
    const Real c1 = Real(kSsimC1), c2 = Real(kSsimC2);
    if (grad_x) *grad_x = Image<Real>(w, h);

    double total = 0;
    for (int ch = 0; ch < 3; ++ch) {
        const Plane<Real> px = channel(x, ch), py = channel(y, ch);
        Plane<Real> xx(w, h), yy(w, h), xy(w, h);
        for (std::size_t i = 0; i < px.v.size(); ++i) {
            xx.v[i] = px.v[i] * px.v[i];
            yy.v[i] = py.v[i] * py.v[i];
            xy.v[i] = px.v[i] * py.v[i];
        }
        const Plane<Real> mx = filter_valid(px), my = filter_valid(py);
        const Plane<Real> exx = filter_valid(xx), eyy = filter_valid(yy), exy = filter_valid(xy);
        Plane<Real> g_mu(vw, vh), g_exx(vw, vh), g_exy(vw, vh);
        for (std::size_t i = 0; i < mx.v.size(); ++i) {
            const Real ux = mx.v[i], uy = my.v[i];
            const Real vx = exx.v[i] - ux * ux, vy = eyy.v[i] - uy * uy, cxy = exy.v[i] - ux * uy;
            const Real n1 = 2 * ux * uy + c1, d1 = ux * ux + uy * uy + c1;
            const Real n2 = 2 * cxy + c2, d2 = vx + vy + c2;
            const Real lum = n1 / d1, cs = n2 / d2;
            total += double(lum * cs);
            if (grad_x) {
                const Real dlum_dux = 2 * uy / d1 - n1 * 2 * ux / (d1 * d1);
                const Real dcs_dcxy = 2 / d2;
                const Real dcs_dvx = -n2 / (d2 * d2);
                g_mu.v[i] = dlum_dux * cs + lum * (dcs_dcxy * -uy + dcs_dvx * -2 * ux);
                g_exx.v[i] = lum * dcs_dvx;
                g_exy.v[i] = lum * dcs_dcxy;
            }
        }
        if (grad_x) {
            const Plane<Real> a = filter_valid_adjoint(g_mu, w, h);
            const Plane<Real> b = filter_valid_adjoint(g_exx, w, h);
            const Plane<Real> c = filter_valid_adjoint(g_exy, w, h);
            const Real scale = Real(1.0 / count);
            for (std::size_t i = 0; i < px.v.size(); ++i)
                grad_x->data[i * 3 + std::size_t(ch)] = scale * (a.v[i] + 2 * px.v[i] * b.v[i] + py.v[i] * c.v[i]);
        }
    }
    return total / count;
}

} // namespace detail

/// Mean absolute error and its (sub)gradient sign(r − t)/N.
template <typename Real> LossWithGrad<Real> l1_loss(const Image<Real>& rendered, const Image<Real>& target) {
    detail::check_same_shape(rendered, target, "l1_loss");
    LossWithGrad<Real> out;
    out.grad = Image<Real>(rendered.width, rendered.height);
    const std::size_t n = rendered.data.size();
    if (n == 0) throw InvalidParameter("l1_loss: empty image");
    double sum = 0;
    const Real inv = Real(1.0 / double(n));
    for (std::size_t i = 0; i < n; ++i) {
        const Real d = rendered.data[i] - target.data[i];
        sum += std::abs(double(d));
        out.grad.data[i] = d > 0 ? inv : (d < 0 ? -inv : Real(0));
    }
    out.value = sum / double(n);
    return out;
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5) over the padding-free valid region, averaged over channels.
template <typename Real> double ssim(const Image<Real>& x, const Image<Real>& y) { return detail::ssim_impl<Real>(x, y, nullptr); }

/// (1 − SSIM)/2 with its gradient w.r.t. the rendered image.
template <typename Real> LossWithGrad<Real> dssim_with_grad(const Image<Real>& rendered, const Image<Real>& target) {
    LossWithGrad<Real> out;
    const double s = detail::ssim_impl(rendered, target, &out.grad);
    out.value = (1.0 - s) / 2.0;
    for (auto& g : out.grad.data) g *= Real(-0.5);
    return out;
}

/// −10 log10(MSE) for unit dynamic range; +inf when the images are identical.
template <typename Real> double psnr(const Image<Real>& rendered, const Image<Real>& target) {
    detail::check_same_shape(rendered, target, "psnr");
    double sum = 0;
    for (std::size_t i = 0; i < rendered.data.size(); ++i) {
        const double d = double(rendered.data[i]) - double(target.data[i]);
        sum += d * d;
    }
    const double mse = sum / double(rendered.data.size());
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(mse);
}

/// (1 − λ)·L1 + λ·D-SSIM with the gradient w.r.t. the rendered image.
template <typename Real>
LossReport<Real> training_loss(const Image<Real>& rendered, const Image<Real>& target, double lambda, Image<Real>* grad) {
    const auto l1 = l1_loss(rendered, target);
    const auto ds = dssim_with_grad(rendered, target);
    LossReport<Real> r;
    r.lambda = lambda;
    r.l1 = l1.value;
    r.d_ssim = ds.value;
    r.total = (1 - lambda) * l1.value + lambda * ds.value;
    if (std::isfinite(r.total) && !(std::abs(r.total - ((1 - r.lambda) * r.l1 + r.lambda * r.d_ssim)) <= 1e-12))
        throw std::logic_error("training_loss: weighted sum identity violated");
    if (grad) {
        *grad = Image<Real>(rendered.width, rendered.height);
        for (std::size_t i = 0; i < grad->data.size(); ++i)
            grad->data[i] = Real(1 - lambda) * l1.grad.data[i] + Real(lambda) * ds.grad.data[i];
    }
    return r;
}

} // namespace clipgs
