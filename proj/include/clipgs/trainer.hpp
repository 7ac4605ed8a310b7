#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipgs/aam.hpp"
#include "clipgs/datagen.hpp"
#include "clipgs/loss.hpp"
#include "clipgs/model_io.hpp"
#include "clipgs/pipeline.hpp"
#include "clipgs/random.hpp"
#include "clipgs/rasterizer.hpp"
#include "clipgs/truncation.hpp"

namespace clipgs {

/// 1.1 times the largest distance of a training camera from the centroid of all training cameras.
inline double camera_extent(const Manifest& man, const std::vector<std::size_t>& frames) {
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (auto f : frames) centroid += man.frames[f].camera.center();
    centroid /= double(frames.size());
    double r = 0;
    for (auto f : frames) r = std::max(r, (man.frames[f].camera.center() - centroid).norm());
    return r > 0 ? 1.1 * r : 1.0;
}

/// Step sizes per parameter group. Position rates are multiplied by the scene extent.
struct LearningRates {
    double position_init = 1.6e-4;
    double position_final = 1.6e-6;
    double rotation = 1e-3;
    double scale = 5e-3;
    double color = 2.5e-3;
    double opacity = 5e-2;
    double trunc = 1e-3;
    double aam_init = 1.6e-3;
    double aam_final = 1.6e-5;

    bool operator==(const LearningRates&) const = default;
};

struct TrainConfig {
    int iters_stage1 = 1000;
    int iters_stage2 = 2000;
    int init_points = 5000;
    LearningRates lr;
    double lambda = kDefaultLambda;
    double epsilon = kDefaultEpsilon;
    double band_width = kDefaultBandWidth;
    TruncationMode truncation = TruncationMode::learnable;
    bool use_aam = true;
    int aam_hidden = 64;
    int aam_layers = 2;
    int aam_pe_pos = 10;
    int aam_pe_z = 4;
    double aam_pos_scale = 0.01; // times scene_extent
    bool densify = false;
    int densify_interval = 100;
    int densify_from = 500;
    int densify_until = 15000;
    double prune_opacity = 0.005;
    double densify_grad_threshold = 2e-4; // times scene_extent
    std::uint64_t seed = 0;
    double scene_extent = 0; // 0: 1.1 times the largest training-camera distance from their centroid
    int log_interval = 100;
    int checkpoint_interval = 0;
    std::string checkpoint_path;

    /// 5000 points, 1000 + 2000 iterations, densification off.
    static TrainConfig desk() { return {}; }

    /// 100k points, 7000 + 33000 iterations, densification on.
    static TrainConfig paper() {
        TrainConfig c;
        c.iters_stage1 = 7000;
        c.iters_stage2 = 33000;
        c.init_points = 100000;
        c.densify = true;
        return c;
    }

    void validate() const {
        if (iters_stage1 < 0 || iters_stage2 < 0) throw InvalidParameter("TrainConfig: iteration counts must be >= 0");
        if (init_points <= 0) throw InvalidParameter("TrainConfig: init_points must be positive");
        for (double v : {lr.position_init, lr.position_final, lr.rotation, lr.scale, lr.color, lr.opacity, lr.trunc,
                         lr.aam_init, lr.aam_final})
            if (!(v > 0)) throw InvalidParameter("TrainConfig: learning rates must be positive");
        if (!(lambda >= 0 && lambda <= 1)) throw InvalidParameter("TrainConfig: lambda must be in [0, 1]");
        if (!(epsilon > 0 && epsilon < 1)) throw InvalidParameter("TrainConfig: epsilon must be in (0, 1)");
        if (!(band_width >= 0)) throw InvalidParameter("TrainConfig: band_width must be >= 0");
        if (densify_interval <= 0 || log_interval <= 0) throw InvalidParameter("TrainConfig: intervals must be positive");
        if (!(scene_extent >= 0)) throw InvalidParameter("TrainConfig: scene_extent must be >= 0");
    }

    bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {
        {"iters_stage1", c.iters_stage1},
        {"iters_stage2", c.iters_stage2},
        {"init_points", c.init_points},
        {"lr",
         {{"position_init", c.lr.position_init},
          {"position_final", c.lr.position_final},
          {"rotation", c.lr.rotation},
          {"scale", c.lr.scale},
          {"color", c.lr.color},
          {"opacity", c.lr.opacity},
          {"trunc", c.lr.trunc},
          {"aam_init", c.lr.aam_init},
          {"aam_final", c.lr.aam_final}}},
        {"lambda", c.lambda},
        {"epsilon", c.epsilon},
        {"band_width", c.band_width},
        {"truncation", to_string(c.truncation)},
        {"use_aam", c.use_aam},
        {"aam_hidden", c.aam_hidden},
        {"aam_layers", c.aam_layers},
        {"aam_pe_pos", c.aam_pe_pos},
        {"aam_pe_z", c.aam_pe_z},
        {"aam_pos_scale", c.aam_pos_scale},
        {"densify", c.densify},
        {"densify_interval", c.densify_interval},
        {"densify_from", c.densify_from},
        {"densify_until", c.densify_until},
        {"prune_opacity", c.prune_opacity},
        {"densify_grad_threshold", c.densify_grad_threshold},
        {"seed", c.seed},
        {"scene_extent", c.scene_extent},
        {"log_interval", c.log_interval},
        {"checkpoint_interval", c.checkpoint_interval},
        {"checkpoint_path", c.checkpoint_path},
    };
}

/// Overrides the fields present in `j`; unknown keys are rejected.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidParameter("train config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const auto& v = it.value();
        try {
            if (k == "iters_stage1") c.iters_stage1 = v.get<int>();
            else if (k == "iters_stage2") c.iters_stage2 = v.get<int>();
            else if (k == "init_points") c.init_points = v.get<int>();
            else if (k == "lr") {
                for (auto l = v.begin(); l != v.end(); ++l) {
                    const double x = l.value().get<double>();
                    if (l.key() == "position_init") c.lr.position_init = x;
                    else if (l.key() == "position_final") c.lr.position_final = x;
                    else if (l.key() == "rotation") c.lr.rotation = x;
                    else if (l.key() == "scale") c.lr.scale = x;
                    else if (l.key() == "color") c.lr.color = x;
                    else if (l.key() == "opacity") c.lr.opacity = x;
                    else if (l.key() == "trunc") c.lr.trunc = x;
                    else if (l.key() == "aam_init") c.lr.aam_init = x;
                    else if (l.key() == "aam_final") c.lr.aam_final = x;
                    else throw InvalidParameter("unknown learning rate '" + l.key() + "'");
                }
            } else if (k == "lambda") c.lambda = v.get<double>();
            else if (k == "epsilon") c.epsilon = v.get<double>();
            else if (k == "band_width") c.band_width = v.get<double>();
            else if (k == "truncation") c.truncation = truncation_mode_from_string(v.get<std::string>());
            else if (k == "use_aam") c.use_aam = v.get<bool>();
            else if (k == "aam_hidden") c.aam_hidden = v.get<int>();
            else if (k == "aam_layers") c.aam_layers = v.get<int>();
            else if (k == "aam_pe_pos") c.aam_pe_pos = v.get<int>();
            else if (k == "aam_pe_z") c.aam_pe_z = v.get<int>();
            else if (k == "aam_pos_scale") c.aam_pos_scale = v.get<double>();
            else if (k == "densify") c.densify = v.get<bool>();
            else if (k == "densify_interval") c.densify_interval = v.get<int>();
            else if (k == "densify_from") c.densify_from = v.get<int>();
            else if (k == "densify_until") c.densify_until = v.get<int>();
            else if (k == "prune_opacity") c.prune_opacity = v.get<double>();
            else if (k == "densify_grad_threshold") c.densify_grad_threshold = v.get<double>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else if (k == "scene_extent") c.scene_extent = v.get<double>();
            else if (k == "log_interval") c.log_interval = v.get<int>();
            else if (k == "checkpoint_interval") c.checkpoint_interval = v.get<int>();
            else if (k == "checkpoint_path") c.checkpoint_path = v.get<std::string>();
            else throw InvalidParameter("unknown train config key '" + k + "'");
        } catch (const nlohmann::json::exception& e) {
            throw InvalidParameter("train config key '" + k + "': " + e.what());
        }
    }
    c.validate();
}

/// Independent stream seed derived from a base seed (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

enum : std::uint64_t { kStreamInit = 1, kStreamFrames = 2, kStreamAam = 3, kStreamDensify = 4 };

/// Adam moments for one parameter group, stored flat in parameter order.
template <typename Real> struct AdamState {
    std::vector<Real> m, v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;

    void resize(std::size_t n) {
        m.assign(n, Real(0));
        v.assign(n, Real(0));
        step = 0;
    }

    std::size_t size() const { return m.size(); }

    /// Keeps rows (of `width` values each) whose flag is set, in order.
    void keep_rows(const std::vector<std::uint8_t>& keep, int width) {
        std::size_t out = 0;
        for (std::size_t r = 0; r < keep.size(); ++r) {
            if (!keep[r]) continue;
            for (int c = 0; c < width; ++c) {
                m[out * width + c] = m[r * width + c];
                v[out * width + c] = v[r * width + c];
            }
            ++out;
        }
        m.resize(out * width);
        v.resize(out * width);
    }

    void append_rows(std::size_t rows, int width) {
        m.resize(m.size() + rows * width, Real(0));
        v.resize(v.size() + rows * width, Real(0));
    }
};

/// Raised when training produces a non-finite loss or gradient.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, nlohmann::json diagnostics)
        : std::runtime_error(what + "\n" + diagnostics.dump(2)), diagnostics_(std::move(diagnostics)) {}
    const nlohmann::json& diagnostics() const { return diagnostics_; }

private:
    nlohmann::json diagnostics_;
};

/// Bias-corrected Adam update; a non-finite gradient is reported with the group name.
template <typename Real>
void adam_step(std::span<Real> params, std::span<const Real> grads, AdamState<Real>& st, double lr, const std::string& group) {
    if (params.size() != grads.size() || st.size() != params.size())
        throw InvalidParameter("adam_step: shape mismatch in group '" + group + "'");
    for (std::size_t i = 0; i < grads.size(); ++i)
        if (!std::isfinite(grads[i]))
            throw TrainingDiverged("non-finite gradient in parameter group '" + group + "'",
                                   {{"group", group}, {"index", i}, {"step", st.step}});
    ++st.step;
    const double bc1 = 1.0 - std::pow(st.beta1, double(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, double(st.step));
    const Real b1 = Real(st.beta1), b2 = Real(st.beta2);
    const Real step_size = Real(lr / bc1);
    const Real inv_sqrt_bc2 = Real(1.0 / std::sqrt(bc2));
    const Real eps = Real(st.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Real g = grads[i];
        st.m[i] = b1 * st.m[i] + (Real(1) - b1) * g;
        st.v[i] = b2 * st.v[i] + (Real(1) - b2) * g * g;
        params[i] -= step_size * st.m[i] / (std::sqrt(st.v[i]) * inv_sqrt_bc2 + eps);
    }
}

/// lr_init^(1−t) · lr_final^t for t in [0, 1].
inline double exp_decay(double lr_init, double lr_final, double t) {
    t = std::clamp(t, 0.0, 1.0);
    return std::exp(std::log(lr_init) * (1 - t) + std::log(lr_final) * t);
}

template <typename T> std::span<T> flat(std::vector<T>& v) { return {v.data(), v.size()}; }
template <typename T, int N> std::span<T> flat(std::vector<Eigen::Matrix<T, N, 1>>& v) {
    return {v.empty() ? nullptr : v[0].data(), v.size() * N};
}
template <typename T, int N> std::span<const T> flat(const std::vector<Eigen::Matrix<T, N, 1>>& v) {
    return {v.empty() ? nullptr : v[0].data(), v.size() * N};
}
template <typename T> std::span<const T> flat(const std::vector<T>& v) { return {v.data(), v.size()}; }

/// Adam state for every per-primitive group.
template <typename Real> struct CloudOptimizer {
    AdamState<Real> positions, rotations, log_scales, colors, opacities, trunc;

    void resize(std::size_t n) {
        positions.resize(n * 3);
        rotations.resize(n * 4);
        log_scales.resize(n * 3);
        colors.resize(n * 3);
        opacities.resize(n);
        trunc.resize(n);
    }

    bool matches(std::size_t n) const {
        return positions.size() == n * 3 && rotations.size() == n * 4 && log_scales.size() == n * 3 &&
               colors.size() == n * 3 && opacities.size() == n && trunc.size() == n;
    }

    void keep_rows(const std::vector<std::uint8_t>& keep) {
        positions.keep_rows(keep, 3);
        rotations.keep_rows(keep, 4);
        log_scales.keep_rows(keep, 3);
        colors.keep_rows(keep, 3);
        opacities.keep_rows(keep, 1);
        trunc.keep_rows(keep, 1);
    }

    void append_rows(std::size_t rows) {
        positions.append_rows(rows, 3);
        rotations.append_rows(rows, 4);
        log_scales.append_rows(rows, 3);
        colors.append_rows(rows, 3);
        opacities.append_rows(rows, 1);
        trunc.append_rows(rows, 1);
    }
};

/// Random cloud filling the box: identity rotations, isotropic scale edge/N^(1/3), gray color,
/// opacity 0.1, and m = μ·normal.
template <typename Real>
GaussianCloud<Real> init_cloud(int points, const Eigen::Vector3d& bmin, const Eigen::Vector3d& bmax, std::uint64_t seed,
                               const Eigen::Vector3d& normal = Eigen::Vector3d::UnitZ()) {
    if (points <= 0) throw InvalidParameter("init_cloud: point count must be positive");
    if (!((bmax - bmin).array() > 0).all()) throw InvalidParameter("init_cloud: empty bounds");
    Rng rng(seed);
    GaussianCloud<Real> c;
    c.resize(std::size_t(points));
    const double edge = (bmax - bmin).maxCoeff();
    const Real log_scale = Real(std::log(edge / std::cbrt(double(points))));
    const Real opacity = Real(logit(0.1));
    for (std::size_t i = 0; i < c.size(); ++i) {
        for (int a = 0; a < 3; ++a) c.positions[i][a] = Real(rng.uniform(bmin[a], bmax[a]));
        c.rotations[i] = Vec4<Real>(1, 0, 0, 0);
        c.log_scales[i].setConstant(log_scale);
        c.color_logits[i].setZero();
        c.opacity_logits[i] = opacity;
    }
    init_trunc_values(c, normal);
    return c;
}

/// Per-primitive position-gradient norms accumulated between density-control passes.
struct DensifyStats {
    std::vector<double> grad_norm_sum;
    std::vector<int> count;

    void reset(std::size_t n) {
        grad_norm_sum.assign(n, 0.0);
        count.assign(n, 0);
    }

    template <typename Real> void accumulate(const std::vector<Vec3<Real>>& d_positions) {
        for (std::size_t i = 0; i < d_positions.size(); ++i) {
            const double g = double(d_positions[i].norm());
            if (g == 0) continue;
            grad_norm_sum[i] += g;
            ++count[i];
        }
    }

    double mean(std::size_t i) const { return count[i] ? grad_norm_sum[i] / count[i] : 0.0; }
};

struct DensifyResult {
    std::size_t cloned = 0;
    std::size_t pruned = 0;
};

/// Clones primitives whose mean position-gradient norm exceeds the threshold (with a jitter of half their
/// mean extent), then removes primitives whose opacity is below the prune threshold. Clones inherit every
/// parameter including m and start with zero optimizer moments.
template <typename Real>
DensifyResult densify_and_prune(GaussianCloud<Real>& cloud, const DensifyStats& stats, double grad_threshold,
                                double prune_opacity, Rng& rng, CloudOptimizer<Real>* optimizer = nullptr) {
    cloud.check();
    if (stats.grad_norm_sum.size() != cloud.size() || stats.count.size() != cloud.size())
        throw InvalidParameter("densify_and_prune: stats do not match the cloud");
    DensifyResult r;
    const std::size_t n = cloud.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (!(stats.mean(i) > grad_threshold)) continue;
        const Real extent = cloud.log_scales[i].array().exp().mean();
        Vec3<Real> jitter(Real(rng.normal()), Real(rng.normal()), Real(rng.normal()));
        cloud.positions.push_back(cloud.positions[i] + Real(0.5) * extent * jitter);
        cloud.rotations.push_back(cloud.rotations[i]);
        cloud.log_scales.push_back(cloud.log_scales[i]);
        cloud.color_logits.push_back(cloud.color_logits[i]);
        cloud.opacity_logits.push_back(cloud.opacity_logits[i]);
        cloud.trunc.push_back(cloud.trunc[i]);
        ++r.cloned;
    }
    if (optimizer) optimizer->append_rows(r.cloned);

    std::vector<std::uint8_t> keep(cloud.size(), 1);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (sigmoid(double(cloud.opacity_logits[i])) < prune_opacity) {
            keep[i] = 0;
            ++r.pruned;
        }
    }
    if (r.pruned) {
        GaussianCloud<Real> kept;
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            if (!keep[i]) continue;
            kept.positions.push_back(cloud.positions[i]);
            kept.rotations.push_back(cloud.rotations[i]);
            kept.log_scales.push_back(cloud.log_scales[i]);
            kept.color_logits.push_back(cloud.color_logits[i]);
            kept.opacity_logits.push_back(cloud.opacity_logits[i]);
            kept.trunc.push_back(cloud.trunc[i]);
        }
        cloud = std::move(kept);
        if (optimizer) optimizer->keep_rows(keep);
    }
    return r;
}

/// One line of the metrics log, averaged over the iterations since the previous line.
struct LogRecord {
    int stage = 1;
    int iteration = 0; // within the stage, 1-based
    double loss = 0;
    double l1 = 0;
    double d_ssim = 0;
    double psnr = 0; // from the mean squared error over the window
    double visible_fraction = 0;
    std::size_t primitives = 0;
    double elapsed_s = 0;
};

inline nlohmann::json to_json(const LogRecord& r) {
    return {{"stage", r.stage},
            {"iteration", r.iteration},
            {"loss", r.loss},
            {"l1", r.l1},
            {"d_ssim", r.d_ssim},
            {"psnr", std::isfinite(r.psnr) ? nlohmann::json(r.psnr) : nlohmann::json("inf")},
            {"visible_fraction", r.visible_fraction},
            {"primitives", r.primitives},
            {"elapsed_s", r.elapsed_s}};
}

/// Loss of one optimization step, with the frame it was computed on.
struct StepTrace {
    int stage = 1;
    std::size_t frame = 0;
    double loss = 0;
};

template <typename Real> struct TrainOutput {
    GaussianCloud<Real> cloud;
    std::optional<AamParams<Real>> aam;
    std::vector<LogRecord> log;
    std::vector<StepTrace> trace;
    double seconds_stage1 = 0;
    double seconds_stage2 = 0;
};

/// Loss of a cloud (and optional AAM) on one dataset frame, computed exactly as in a training step.
template <typename Real>
LossReport<Real> frame_loss(const GaussianCloud<Real>& cloud, const AamParams<Real>* aam, const Dataset& ds, std::size_t frame,
                            const TrainConfig& cfg) {
    const auto f = prepare_frame<Real>(cloud, aam, ds.plane(frame), cfg.truncation, Real(cfg.epsilon), Real(cfg.band_width));
    RenderSettings<Real> settings;
    settings.background = ds.manifest.background.cast<Real>();
    const auto out = render(cloud, ds.manifest.frames[frame].camera, f.visibility, f.deformation ? &*f.deformation : nullptr,
                            settings, false);
    const Image<Real> target = ds.images[frame].template cast<Real>();
    return training_loss<Real>(out.image, target, cfg.lambda, nullptr);
}

/// Two-stage optimizer state. Stage 1 trains the cloud alone; stage 2 adds the AAM and trains both.
class Trainer {
public:
    using Real = float;

    Trainer(const Dataset& ds, TrainConfig cfg) : ds_(ds), cfg_(std::move(cfg)), frame_rng_(derive_seed(cfg_.seed, kStreamFrames)),
                                                  densify_rng_(derive_seed(cfg_.seed, kStreamDensify)) {
        cfg_.validate();
        train_frames_ = ds_.manifest.split_indices("train");
        if (train_frames_.empty()) throw InvalidParameter("train: dataset has no training frames");
        if (ds_.images.size() != ds_.manifest.frames.size()) throw InvalidParameter("train: dataset images missing");
        extent_ = cfg_.scene_extent > 0 ? cfg_.scene_extent : camera_extent(ds_.manifest, train_frames_);
        cloud_ = init_cloud<Real>(cfg_.init_points, ds_.manifest.bounds_min, ds_.manifest.bounds_max,
                                  derive_seed(cfg_.seed, kStreamInit), ds_.manifest.plane_normal);
        opt_.resize(cloud_.size());
        stats_.reset(cloud_.size());
        background_ = ds_.manifest.background.cast<Real>();
    }

    /// Starts from a given cloud instead of the random initialization.
    void set_cloud(GaussianCloud<Real> cloud) {
        cloud.check();
        cloud_ = std::move(cloud);
        opt_.resize(cloud_.size());
        stats_.reset(cloud_.size());
    }

    const GaussianCloud<Real>& cloud() const { return cloud_; }
    const std::optional<AamParams<Real>>& aam() const { return aam_; }
    const std::vector<LogRecord>& log() const { return log_; }
    const std::vector<StepTrace>& trace() const { return trace_; }
    const CloudOptimizer<Real>& optimizer() const { return opt_; }
    const TrainConfig& config() const { return cfg_; }
    double scene_extent() const { return extent_; }

    /// Called after every logged window.
    std::function<void(const LogRecord&)> on_log;

    void run_stage1() {
        stage_start_ = std::chrono::steady_clock::now();
        for (int it = 0; it < cfg_.iters_stage1; ++it) step(1, it);
        seconds_stage1_ += seconds_since(stage_start_);
    }

    /// Creates the AAM (zero heads) on first use, then trains cloud and AAM jointly.
    /// Without the AAM the cloud alone keeps training.
    void run_stage2() {
        stage_start_ = std::chrono::steady_clock::now();
        if (cfg_.use_aam) start_aam();
        for (int it = 0; it < cfg_.iters_stage2; ++it) step(2, it);
        seconds_stage2_ += seconds_since(stage_start_);
    }

    void start_aam() {
        if (aam_) return;
        aam_ = make_aam<Real>(derive_seed(cfg_.seed, kStreamAam), cfg_.aam_hidden, cfg_.aam_layers, cfg_.aam_pe_pos,
                              cfg_.aam_pe_z, Real(cfg_.aam_pos_scale * extent_));
        aam_opt_.resize(aam_->parameter_count());
    }

    TrainOutput<Real> result() const {
        TrainOutput<Real> r;
        r.cloud = cloud_;
        r.aam = aam_;
        r.log = log_;
        r.trace = trace_;
        r.seconds_stage1 = seconds_stage1_;
        r.seconds_stage2 = seconds_stage2_;
        return r;
    }

    /// Packages the current state as a model file, with m made consistent with the truncation mode.
    Model model() const {
        Model m;
        m.cloud = cloud_;
        if (cfg_.truncation == TruncationMode::hard) init_trunc_values(m.cloud, ds_.manifest.plane_normal);
        if (cfg_.truncation == TruncationMode::none)
            std::fill(m.cloud.trunc.begin(), m.cloud.trunc.end(), std::numeric_limits<float>::lowest());
        m.aam = aam_;
        m.meta.truncation = cfg_.truncation;
        m.meta.epsilon = cfg_.epsilon;
        m.meta.plane_normal = ds_.manifest.plane_normal;
        m.meta.bounds_min = ds_.manifest.bounds_min;
        m.meta.bounds_max = ds_.manifest.bounds_max;
        m.meta.view_center = ds_.manifest.center;
        m.meta.view_radius = ds_.manifest.radius;
        m.meta.fov_y = ds_.manifest.fov_y;
        m.meta.background = ds_.manifest.background;
        m.meta.plane_min = ds_.manifest.z_min;
        m.meta.plane_max = ds_.manifest.z_max;
        m.meta.train_config = to_json(cfg_);
        m.meta.train_config.erase("checkpoint_path"); // output location, not part of the model
        return m;
    }

private:
    static double seconds_since(std::chrono::steady_clock::time_point t0) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    int total_iterations() const { return cfg_.iters_stage1 + cfg_.iters_stage2; }

    nlohmann::json diagnostics(int stage, int it, std::size_t frame, double loss) const {
        std::size_t bad = 0;
        for (std::size_t i = 0; i < cloud_.size(); ++i) {
            const bool ok = cloud_.positions[i].allFinite() && cloud_.rotations[i].allFinite() &&
                            cloud_.log_scales[i].allFinite() && cloud_.color_logits[i].allFinite() &&
                            std::isfinite(cloud_.opacity_logits[i]) && std::isfinite(cloud_.trunc[i]);
            bad += !ok;
        }
        return {{"stage", stage},
                {"iteration", it},
                {"frame", frame},
                {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(std::to_string(loss))},
                {"primitives", cloud_.size()},
                {"non_finite_primitives", bad},
                {"seed", cfg_.seed}};
    }

    void step(int stage, int it) {
        const std::size_t frame = train_frames_[std::size_t(frame_rng_.below(train_frames_.size()))];
        const ClipPlane plane = ds_.plane(frame);
        const AamParams<Real>* aam = stage == 2 && aam_ ? &*aam_ : nullptr;
        auto inputs = prepare_frame<Real>(cloud_, aam, plane, cfg_.truncation, Real(cfg_.epsilon), Real(cfg_.band_width), true);
        RenderSettings<Real> settings;
        settings.background = background_;
        const auto out = render(cloud_, ds_.manifest.frames[frame].camera, inputs.visibility,
                                inputs.deformation ? &*inputs.deformation : nullptr, settings, true);
        Image<Real> d_image;
        const auto loss = training_loss(out.image, ds_.images[frame], cfg_.lambda, &d_image);
        if (!std::isfinite(loss.total)) {
            const auto diag = diagnostics(stage, it, frame, loss.total);
            dump_on_divergence();
            throw TrainingDiverged("training diverged: non-finite loss", diag);
        }
        trace_.push_back({stage, frame, loss.total});

        auto grads = render_backward(out, d_image);
        if (cfg_.truncation == TruncationMode::learnable) grads.d_trunc = visibility_ste_backward(inputs.visibility, grads.d_mask);

        std::optional<AamParams<Real>> aam_grads;
        if (aam) {
            aam_grads = aam_->zeros_like();
            const auto dpos = aam_backward(*aam_, inputs.cache, grads.d_deformation, *aam_grads);
            const auto& idx = inputs.deformation->indices;
            for (std::size_t k = 0; k < idx.size(); ++k) grads.d_positions[idx[k]] += dpos.col(Eigen::Index(k));
        }

        // updates
        const int global = (stage == 1 ? 0 : cfg_.iters_stage1) + it;
        const double t = total_iterations() > 1 ? double(global) / double(total_iterations() - 1) : 0.0;
        try {
            adam_step<Real>(flat(cloud_.positions), flat(grads.d_positions), opt_.positions,
                            exp_decay(cfg_.lr.position_init, cfg_.lr.position_final, t) * extent_, "positions");
            adam_step<Real>(flat(cloud_.rotations), flat(grads.d_rotations), opt_.rotations, cfg_.lr.rotation, "rotations");
            adam_step<Real>(flat(cloud_.log_scales), flat(grads.d_log_scales), opt_.log_scales, cfg_.lr.scale, "log_scales");
            adam_step<Real>(flat(cloud_.color_logits), flat(grads.d_color_logits), opt_.colors, cfg_.lr.color, "color_logits");
            adam_step<Real>(flat(cloud_.opacity_logits), flat(grads.d_opacity_logits), opt_.opacities, cfg_.lr.opacity,
                            "opacity_logits");
            if (cfg_.truncation == TruncationMode::learnable)
                adam_step<Real>(flat(cloud_.trunc), flat(grads.d_trunc), opt_.trunc, cfg_.lr.trunc, "trunc");
            if (aam) {
                const double t2 = cfg_.iters_stage2 > 1 ? double(it) / double(cfg_.iters_stage2 - 1) : 0.0;
                const double lr = exp_decay(cfg_.lr.aam_init, cfg_.lr.aam_final, t2);
                std::vector<std::span<const Real>> g;
                aam_grads->visit([&](const std::string&, std::span<const Real> s) { g.push_back(s); });
                std::vector<Real> flat_g;
                flat_g.reserve(aam_->parameter_count());
                for (const auto& s : g) flat_g.insert(flat_g.end(), s.begin(), s.end());
                std::vector<Real> flat_p;
                flat_p.reserve(flat_g.size());
                aam_->visit([&](const std::string&, std::span<const Real> s) { flat_p.insert(flat_p.end(), s.begin(), s.end()); });
                adam_step<Real>(flat_p, flat_g, aam_opt_, lr, "aam");
                std::size_t off = 0;
                aam_->visit([&](const std::string&, std::span<Real> s) {
                    std::copy(flat_p.begin() + std::ptrdiff_t(off), flat_p.begin() + std::ptrdiff_t(off + s.size()), s.begin());
                    off += s.size();
                });
            }
        } catch (const TrainingDiverged& e) {
            auto diag = diagnostics(stage, it, frame, loss.total);
            diag["cause"] = e.diagnostics();
            dump_on_divergence();
            throw TrainingDiverged(std::string("training diverged: ") + e.what(), diag);
        }

        // density control
        if (cfg_.densify) {
            stats_.accumulate(grads.d_positions);
            if (global >= cfg_.densify_from && global < cfg_.densify_until && (global + 1) % cfg_.densify_interval == 0) {
                densify_and_prune(cloud_, stats_, cfg_.densify_grad_threshold * extent_, cfg_.prune_opacity, densify_rng_, &opt_);
                stats_.reset(cloud_.size());
            }
        }

        // metrics
        double sq = 0;
        for (std::size_t i = 0; i < out.image.data.size(); ++i) {
            const double d = double(out.image.data[i]) - double(ds_.images[frame].data[i]);
            sq += d * d;
        }
        window_.loss += loss.total;
        window_.l1 += loss.l1;
        window_.d_ssim += loss.d_ssim;
        window_.mse += sq / double(out.image.data.size());
        window_.visible += double(inputs.visibility.visible_count()) / double(std::max<std::size_t>(1, inputs.visibility.size()));
        ++window_.n;
        const int stage_iters = stage == 1 ? cfg_.iters_stage1 : cfg_.iters_stage2;
        if ((it + 1) % cfg_.log_interval == 0 || it + 1 == stage_iters) flush_log(stage, it + 1);

        if (cfg_.checkpoint_interval > 0 && !cfg_.checkpoint_path.empty() && (global + 1) % cfg_.checkpoint_interval == 0)
            save_model(model(), cfg_.checkpoint_path);
    }

    void flush_log(int stage, int iteration) {
        if (window_.n == 0) return;
        LogRecord r;
        r.stage = stage;
        r.iteration = iteration;
        r.loss = window_.loss / window_.n;
        r.l1 = window_.l1 / window_.n;
        r.d_ssim = window_.d_ssim / window_.n;
        const double mse = window_.mse / window_.n;
        r.psnr = mse > 0 ? -10.0 * std::log10(mse) : std::numeric_limits<double>::infinity();
        r.visible_fraction = window_.visible / window_.n;
        r.primitives = cloud_.size();
        r.elapsed_s = seconds_stage1_ + seconds_stage2_ + seconds_since(stage_start_);
        log_.push_back(r);
        window_ = {};
        if (on_log) on_log(r);
    }

    void dump_on_divergence() const {
        if (cfg_.checkpoint_path.empty()) return;
        try {
            save_model(model(), cfg_.checkpoint_path + ".diverged");
        } catch (...) {
        }
    }

    struct Window {
        double loss = 0, l1 = 0, d_ssim = 0, mse = 0, visible = 0;
        int n = 0;
    };

    const Dataset& ds_;
    TrainConfig cfg_;
    Rng frame_rng_;
    Rng densify_rng_;
    std::vector<std::size_t> train_frames_;
    double extent_ = 1;
    Vec3<Real> background_ = Vec3<Real>::Zero();
    GaussianCloud<Real> cloud_;
    CloudOptimizer<Real> opt_;
    DensifyStats stats_;
    std::optional<AamParams<Real>> aam_;
    AdamState<Real> aam_opt_;
    std::vector<LogRecord> log_;
    std::vector<StepTrace> trace_;
    Window window_;
    double seconds_stage1_ = 0, seconds_stage2_ = 0;
    std::chrono::steady_clock::time_point stage_start_ = std::chrono::steady_clock::now();
};

/// Stage 1 from the random initialization.
inline TrainOutput<float> train_stage1(const Dataset& ds, const TrainConfig& cfg) {
    Trainer t(ds, cfg);
    t.run_stage1();
    return t.result();
}

/// Stage 2 starting from a stage-1 cloud with fresh optimizer state.
inline TrainOutput<float> train_stage2(const GaussianCloud<float>& cloud, const Dataset& ds, const TrainConfig& cfg) {
    TrainConfig c = cfg;
    c.use_aam = true;
    Trainer t(ds, c);
    t.set_cloud(cloud);
    t.run_stage2();
    return t.result();
}

/// Both stages with optimizer state carried across the handover.
inline Trainer train(const Dataset& ds, const TrainConfig& cfg) {
    Trainer t(ds, cfg);
    t.run_stage1();
    t.run_stage2();
    return t;
}

} // namespace clipgs
