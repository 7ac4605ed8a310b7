#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "clipgs/random.hpp"
#include "clipgs/types.hpp"

namespace clipgs {

template <typename Real> using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real> using ColMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Real> using Column = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

template <typename Real> struct DenseLayer {
    RowMatrix<Real> weight; // out × in
    Column<Real> bias;

    DenseLayer() = default;
    DenseLayer(int in, int out) : weight(RowMatrix<Real>::Zero(out, in)), bias(Column<Real>::Zero(out)) {}

    int in() const { return int(weight.cols()); }
    int out() const { return int(weight.rows()); }
    std::size_t parameter_count() const { return std::size_t(weight.size() + bias.size()); }

    bool operator==(const DenseLayer& o) const {
        return weight.rows() == o.weight.rows() && weight.cols() == o.weight.cols() && weight == o.weight &&
               bias.size() == o.bias.size() && bias == o.bias;
    }
};

/// Length of [v, sin(2^k π v), cos(2^k π v) for k < levels] for a `dims`-vector.
constexpr int encoded_size(int dims, int levels) { return dims * (1 + 2 * levels); }

/// Positional encoding: the raw vector, then for each level k the sines of all
/// components followed by the cosines of all components at frequency 2^k π.
template <typename Real> Column<Real> positional_encoding(std::span<const Real> v, int levels) {
    if (levels < 0) throw InvalidParameter("positional_encoding: negative level count");
    const int d = int(v.size());
    Column<Real> out(encoded_size(d, levels));
    for (int c = 0; c < d; ++c) out[c] = v[c];
    for (int k = 0; k < levels; ++k) {
        const Real freq = Real(std::ldexp(std::numbers::pi, k));
        for (int c = 0; c < d; ++c) {
            out[d + 2 * k * d + c] = std::sin(freq * v[c]);
            out[d + 2 * k * d + d + c] = std::cos(freq * v[c]);
        }
    }
    return out;
}

/// Plane-conditioned deformation network: encoded (μ, z) → rectified trunk → three linear heads.
template <typename Real> struct AamParams {
    int pe_levels_pos = 10;
    int pe_levels_z = 4;
    Real pos_scale = Real(0.01);
    std::vector<DenseLayer<Real>> trunk;
    DenseLayer<Real> head_mu, head_rot, head_scale;

    int input_dim() const { return encoded_size(3, pe_levels_pos) + encoded_size(1, pe_levels_z); }
    int feature_dim() const { return trunk.empty() ? input_dim() : trunk.back().out(); }

    std::size_t parameter_count() const {
        std::size_t n = head_mu.parameter_count() + head_rot.parameter_count() + head_scale.parameter_count();
        for (const auto& l : trunk) n += l.parameter_count();
        return n;
    }

    /// Visits every tensor in serialization order: trunk layers, then the μ, rotation and scale heads;
    /// weights (row-major) before biases.
    template <typename F> void visit(F&& f) {
        for (std::size_t l = 0; l < trunk.size(); ++l) {
            f("trunk" + std::to_string(l) + ".weight", std::span<Real>(trunk[l].weight.data(), trunk[l].weight.size()));
            f("trunk" + std::to_string(l) + ".bias", std::span<Real>(trunk[l].bias.data(), trunk[l].bias.size()));
        }
        auto head = [&](const char* name, DenseLayer<Real>& h) {
            f(std::string(name) + ".weight", std::span<Real>(h.weight.data(), h.weight.size()));
            f(std::string(name) + ".bias", std::span<Real>(h.bias.data(), h.bias.size()));
        };
        head("head_mu", head_mu);
        head("head_rot", head_rot);
        head("head_scale", head_scale);
    }

    template <typename F> void visit(F&& f) const {
        const_cast<AamParams*>(this)->visit([&](const std::string& name, std::span<Real> s) {
            f(name, std::span<const Real>(s.data(), s.size()));
        });
    }

    /// Same architecture, all parameters zero.
    AamParams zeros_like() const {
        AamParams z = *this;
        z.visit([](const std::string&, std::span<Real> s) { std::fill(s.begin(), s.end(), Real(0)); });
        return z;
    }

    void validate() const {
        if (pe_levels_pos < 0 || pe_levels_z < 0) throw InvalidParameter("AamParams: negative encoding levels");
        int width = input_dim();
        for (const auto& l : trunk) {
            if (l.in() != width || l.bias.size() != l.out()) throw InvalidParameter("AamParams: trunk width mismatch");
            width = l.out();
        }
        auto check_head = [&](const DenseLayer<Real>& h, int outs) {
            if (h.in() != width || h.out() != outs || h.bias.size() != outs)
                throw InvalidParameter("AamParams: head shape mismatch");
        };
        check_head(head_mu, 3);
        check_head(head_rot, 4);
        check_head(head_scale, 3);
        bool finite = true;
        visit([&](const std::string&, std::span<const Real> s) {
            for (Real v : s) finite = finite && std::isfinite(v);
        });
        if (!finite) throw InvalidParameter("AamParams: non-finite weight");
    }

    bool operator==(const AamParams&) const = default;
};

/// Rectified trunk initialized with He-uniform weights and zero biases; heads start at zero so the
/// deformation is exactly zero until training moves them.
template <typename Real>
AamParams<Real> make_aam(std::uint64_t seed, int hidden = 64, int layers = 2, int pe_levels_pos = 10,
                         int pe_levels_z = 4, Real pos_scale = Real(0.01)) {
    AamParams<Real> p;
    p.pe_levels_pos = pe_levels_pos;
    p.pe_levels_z = pe_levels_z;
    p.pos_scale = pos_scale;
    Rng rng(seed);
    int width = p.input_dim();
    for (int l = 0; l < layers; ++l) {
        DenseLayer<Real> layer(width, hidden);
        const double bound = std::sqrt(6.0 / width);
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = Real(rng.uniform(-bound, bound));
        p.trunk.push_back(std::move(layer));
        width = hidden;
    }
    p.head_mu = DenseLayer<Real>(width, 3);
    p.head_rot = DenseLayer<Real>(width, 4);
    p.head_scale = DenseLayer<Real>(width, 3);
    return p;
}

/// Deformation of a batch of primitives, one column per primitive.
template <typename Real> struct Deformation {
    ColMatrix<Real> d_mu;    // 3 × N
    ColMatrix<Real> d_rot;   // 4 × N, added to the unnormalized quaternion
    ColMatrix<Real> d_scale; // 3 × N, added to the log-scales

    Eigen::Index size() const { return d_mu.cols(); }
};

/// Activations kept from the forward pass for backpropagation.
template <typename Real> struct AamCache {
    ColMatrix<Real> input;                // encoded (μ, z), input_dim × N
    std::vector<ColMatrix<Real>> hidden;  // post-activation output of each trunk layer
    ColMatrix<Real> positions;            // raw μ, 3 × N
};

template <typename Real> ColMatrix<Real> encode_inputs(const AamParams<Real>& params, std::span<const Vec3<Real>> positions, Real z) {
    const Eigen::Index n = Eigen::Index(positions.size());
    ColMatrix<Real> x(params.input_dim(), n);
    const Real zv[1] = {z};
    const Column<Real> ez = positional_encoding<Real>(std::span<const Real>(zv, 1), params.pe_levels_z);
    const int pos_len = encoded_size(3, params.pe_levels_pos);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec3<Real>& p = positions[std::size_t(i)];
        x.col(i).head(pos_len) = positional_encoding<Real>(std::span<const Real>(p.data(), 3), params.pe_levels_pos);
        x.col(i).tail(ez.size()) = ez;
    }
    return x;
}

/// f = trunk(γ(μ), γ(z)); Δμ = pos_scale·φ_μ(f), Δr = φ_r(f), Δs = φ_s(f).
template <typename Real>
Deformation<Real> aam_forward(const AamParams<Real>& params, std::span<const Vec3<Real>> positions, Real z,
                              AamCache<Real>* cache = nullptr) {
    ColMatrix<Real> x = encode_inputs(params, positions, z);
    std::vector<ColMatrix<Real>> hidden;
    hidden.reserve(params.trunk.size());
    const ColMatrix<Real>* prev = &x;
    for (const auto& layer : params.trunk) {
        ColMatrix<Real> h = layer.weight * *prev;
        h.colwise() += layer.bias;
        h = h.cwiseMax(Real(0));
        hidden.push_back(std::move(h));
        prev = &hidden.back();
    }
    const ColMatrix<Real>& f = *prev;
    Deformation<Real> d;
    d.d_mu = params.head_mu.weight * f;
    d.d_mu.colwise() += params.head_mu.bias;
    d.d_mu *= params.pos_scale;
    d.d_rot = params.head_rot.weight * f;
    d.d_rot.colwise() += params.head_rot.bias;
    d.d_scale = params.head_scale.weight * f;
    d.d_scale.colwise() += params.head_scale.bias;
    if (cache) {
        cache->positions.resize(3, Eigen::Index(positions.size()));
        for (std::size_t i = 0; i < positions.size(); ++i) cache->positions.col(Eigen::Index(i)) = positions[i];
        cache->input = std::move(x);
        cache->hidden = std::move(hidden);
    }
    return d;
}

/// Backpropagates deformation upstreams through heads, trunk and the positional encoding.
/// Parameter gradients accumulate into `grads` (same architecture as `params`); returns dL/dμ (3 × N).
template <typename Real>
ColMatrix<Real> aam_backward(const AamParams<Real>& params, const AamCache<Real>& cache, const Deformation<Real>& upstream,
                             AamParams<Real>& grads) {
    const ColMatrix<Real>& f = cache.hidden.empty() ? cache.input : cache.hidden.back();
    const ColMatrix<Real> g_mu = upstream.d_mu * params.pos_scale;

    grads.head_mu.weight.noalias() += g_mu * f.transpose();
    grads.head_mu.bias += g_mu.rowwise().sum();
    grads.head_rot.weight.noalias() += upstream.d_rot * f.transpose();
    grads.head_rot.bias += upstream.d_rot.rowwise().sum();
    grads.head_scale.weight.noalias() += upstream.d_scale * f.transpose();
    grads.head_scale.bias += upstream.d_scale.rowwise().sum();

    ColMatrix<Real> df = params.head_mu.weight.transpose() * g_mu;
    df.noalias() += params.head_rot.weight.transpose() * upstream.d_rot;
    df.noalias() += params.head_scale.weight.transpose() * upstream.d_scale;

    for (std::size_t l = params.trunk.size(); l-- > 0;) {
        const ColMatrix<Real>& out = cache.hidden[l];
        const ColMatrix<Real>& in = l == 0 ? cache.input : cache.hidden[l - 1];
        const ColMatrix<Real> dz = (out.array() > Real(0)).select(df, Real(0));
        grads.trunk[l].weight.noalias() += dz * in.transpose();
        grads.trunk[l].bias += dz.rowwise().sum();
        df = params.trunk[l].weight.transpose() * dz;
    }

    // df is now dL/d(encoded input); fold the position encoding back to μ.
    const Eigen::Index n = cache.positions.cols();
    ColMatrix<Real> dpos = df.topRows(3);
    for (int k = 0; k < params.pe_levels_pos; ++k) {
        const Real freq = Real(std::ldexp(std::numbers::pi, k));
        for (Eigen::Index i = 0; i < n; ++i) {
            for (int c = 0; c < 3; ++c) {
                const Real a = freq * cache.positions(c, i);
                dpos(c, i) += df(3 + 6 * k + c, i) * freq * std::cos(a) - df(3 + 6 * k + 3 + c, i) * freq * std::sin(a);
            }
        }
    }
    return dpos;
}

} // namespace clipgs
