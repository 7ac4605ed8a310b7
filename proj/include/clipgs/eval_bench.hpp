#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipgs/datagen.hpp"
#include "clipgs/loss.hpp"
#include "clipgs/model_io.hpp"
#include "clipgs/parallel.hpp"
#include "clipgs/pipeline.hpp"
#include "clipgs/trainer.hpp"

namespace clipgs {

/// Reported in place of +inf for frames rendered without any error.
inline constexpr double kPsnrExact = 100.0;

struct Summary {
    double mean = 0;
    double stddev = 0; // sample standard deviation; 0 for a single value
    std::size_t count = 0;
};

inline Summary summarize(const std::vector<double>& v) {
    Summary s;
    s.count = v.size();
    if (v.empty()) return s;
    double sum = 0;
    for (double x : v) sum += x;
    s.mean = sum / double(v.size());
    if (v.size() > 1) {
        double sq = 0;
        for (double x : v) sq += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(sq / double(v.size() - 1));
    }
    return s;
}

/// "36.635 ± 1.926"
inline std::string format_summary(const Summary& s, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f ± %.*f", digits, s.mean, digits, s.stddev);
    return buf;
}

inline nlohmann::json to_json(const Summary& s) { return {{"mean", s.mean}, {"std", s.stddev}, {"count", s.count}}; }

struct FrameScore {
    std::size_t frame = 0;
    double plane_z = 0;
    double psnr = 0;
    double ssim = 0;
    bool exact = false;        // zero error; psnr holds kPsnrExact
    bool empty_target = false; // ground truth is pure background
};

struct EvalReport {
    std::string split;
    std::vector<FrameScore> frames;
    Summary psnr, ssim;
    Summary psnr_content, ssim_content; // frames whose ground truth shows any material
};

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : r.frames)
        frames.push_back({{"frame", f.frame},
                          {"plane_z", f.plane_z},
                          {"psnr", f.psnr},
                          {"ssim", f.ssim},
                          {"exact", f.exact},
                          {"empty_target", f.empty_target}});
    return {{"split", r.split},
            {"psnr", to_json(r.psnr)},
            {"ssim", to_json(r.ssim)},
            {"psnr_content", to_json(r.psnr_content)},
            {"ssim_content", to_json(r.ssim_content)},
            {"frames", frames}};
}

/// Renders every frame of a split at its recorded camera and plane and scores it against the ground truth.
inline EvalReport evaluate(const Model& model, const Dataset& ds, const std::string& split) {
    const auto idx = ds.manifest.split_indices(split);
    if (idx.empty()) throw InvalidParameter("evaluate: split '" + split + "' has no frames");
    if (ds.images.size() != ds.manifest.frames.size()) throw IoError("evaluate: dataset images are missing");
    EvalReport r;
    r.split = split;
    r.frames.resize(idx.size());
    parallel_for(idx.size(), [&](std::size_t k, int) {
        const std::size_t f = idx[k];
        const auto& target = ds.images[f];
        const auto img = render_model(model, ds.manifest.frames[f].camera, ds.manifest.frames[f].plane_z);
        FrameScore& s = r.frames[k];
        s.frame = f;
        s.plane_z = ds.manifest.frames[f].plane_z;
        const double p = psnr(img, target);
        s.exact = !std::isfinite(p);
        s.psnr = s.exact ? kPsnrExact : p;
        s.ssim = ssim(img, target);
        s.empty_target = true;
        for (std::size_t i = 0; i < target.data.size() && s.empty_target; ++i)
            s.empty_target = double(target.data[i]) == ds.manifest.background[int(i % 3)];
    });
    std::vector<double> p, q, pc, qc;
    for (const auto& s : r.frames) {
        p.push_back(s.psnr);
        q.push_back(s.ssim);
        if (s.empty_target) continue;
        pc.push_back(s.psnr);
        qc.push_back(s.ssim);
    }
    r.psnr = summarize(p);
    r.ssim = summarize(q);
    r.psnr_content = summarize(pc);
    r.ssim_content = summarize(qc);
    return r;
}

struct BenchOptions {
    double duration_s = 5.0;
    int width = 0, height = 0; // 0: 256
    std::size_t max_frames = 0; // 0: no limit
};

struct BenchReport {
    std::size_t frames = 0;
    double seconds = 0;
    double fps_mean = 0;   // frames / wall time
    double fps_median = 0; // from the median frame time
    double fps_p5 = 0;     // 5th percentile of per-frame rates (slow frames)
    int width = 0, height = 0;
};

inline nlohmann::json to_json(const BenchReport& r) {
    return {{"frames", r.frames},         {"seconds", r.seconds}, {"fps_mean", r.fps_mean}, {"fps_median", r.fps_median},
            {"fps_p5", r.fps_p5},         {"width", r.width},     {"height", r.height}};
}

/// Camera and plane of frame k of the scripted benchmark path: one orbit per 120 frames with a gentle
/// elevation wobble, and a triangle-wave plane sweep across the model bounds every 90 frames.
inline std::pair<Camera, double> bench_pose(const Model& model, std::size_t k, int width, int height) {
    const double two_pi = 2 * std::numbers::pi;
    const double az = two_pi * double(k % 120) / 120.0;
    const double el = 0.3 * std::sin(two_pi * double(k % 240) / 240.0);
    const Camera cam = orbit_camera(az, el, model.meta.view_radius, model.meta.view_center, model.meta.fov_y, width, height);
    const double lo = model.meta.bounds_min.z(), hi = model.meta.bounds_max.z();
    const double margin = 0.1 * (hi - lo);
    const double phase = double(k % 90) / 90.0;
    const double tri = phase < 0.5 ? 2 * phase : 2 - 2 * phase;
    return {cam, lo - margin + tri * (hi - lo + 2 * margin)};
}

/// Renders the scripted path one frame at a time until the duration (or frame cap) is reached.
inline BenchReport bench_fps(const Model& model, const BenchOptions& opt) {
    if (!(opt.duration_s > 0)) throw InvalidParameter("bench_fps: duration must be positive");
    BenchReport r;
    r.width = opt.width > 0 ? opt.width : 256;
    r.height = opt.height > 0 ? opt.height : 256;
    std::vector<double> times;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t k = 0;; ++k) {
        const auto [cam, z] = bench_pose(model, k, r.width, r.height);
        const auto t0 = std::chrono::steady_clock::now();
        const auto img = render_model(model, cam, z);
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
        (void)img;
        r.seconds = std::chrono::duration<double>(t1 - start).count();
        if (r.seconds >= opt.duration_s || (opt.max_frames && times.size() >= opt.max_frames)) break;
    }
    r.frames = times.size();
    r.fps_mean = double(r.frames) / r.seconds;
    auto sorted = times;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    r.fps_median = 1.0 / median;
    // the slowest 5% of frames bound the 5th percentile rate
    const std::size_t i95 = std::min(n - 1, std::size_t(std::ceil(0.95 * double(n))) - 1);
    r.fps_p5 = 1.0 / sorted[i95];
    return r;
}

struct AblationVariant {
    std::string name;
    TruncationMode truncation;
    bool use_aam;
};

/// The five rows of the ablation table; the last one is the full model.
inline const std::vector<AblationVariant>& ablation_variants() {
    static const std::vector<AblationVariant> v{{"HT", TruncationMode::hard, false},
                                                {"LT", TruncationMode::learnable, false},
                                                {"AAM", TruncationMode::none, true},
                                                {"AAM+HT", TruncationMode::hard, true},
                                                {"AAM+LT", TruncationMode::learnable, true}};
    return v;
}

inline TrainConfig variant_config(const TrainConfig& base, const AblationVariant& v) {
    TrainConfig c = base;
    c.truncation = v.truncation;
    c.use_aam = v.use_aam;
    return c;
}

/// FNV-1a over the raw bytes of every cloud field.
inline std::uint64_t cloud_hash(const GaussianCloud<float>& c) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::span<const float> s) {
        for (float f : s) {
            const auto bits = std::bit_cast<std::uint32_t>(f);
            for (int b = 0; b < 4; ++b) {
                h ^= (bits >> (8 * b)) & 0xffu;
                h *= 1099511628211ull;
            }
        }
    };
    mix(flat(c.positions));
    mix(flat(c.rotations));
    mix(flat(c.log_scales));
    mix(flat(c.color_logits));
    mix(flat(c.opacity_logits));
    mix(flat(c.trunc));
    return h;
}

struct AblationRow {
    AblationVariant variant;
    Summary psnr, ssim;
    Summary psnr_content, ssim_content;
    double train_seconds = 0;
    double fps_median = 0;
    double fps_p5 = 0;
    std::size_t storage_bytes = 0; // whole model file
    std::size_t payload_bytes = 0; // float payload only
    std::size_t primitives = 0;
    std::uint64_t init_hash = 0;
};

struct AblationReport {
    std::uint64_t seed = 0;
    std::string split;
    std::vector<AblationRow> rows;

    const AblationRow& row(const std::string& name) const {
        for (const auto& r : rows)
            if (r.variant.name == name) return r;
        throw InvalidParameter("ablation report has no row '" + name + "'");
    }

    /// True when every variant started from the same initialization bits.
    bool seeds_consistent() const {
        return std::all_of(rows.begin(), rows.end(), [&](const AblationRow& r) { return r.init_hash == rows.front().init_hash; });
    }
};

struct AblationOptions {
    std::string split = "test";
    BenchOptions bench{1.0, 0, 0, 0};
    std::vector<std::string> variants; // empty: all five
    std::function<void(const std::string&, const LogRecord&)> on_log;
};

inline nlohmann::json to_json(const AblationReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    char hash[17];
    for (const auto& row : r.rows) {
        std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(row.init_hash));
        rows.push_back({{"variant", row.variant.name},
                        {"truncation", to_string(row.variant.truncation)},
                        {"aam", row.variant.use_aam},
                        {"psnr", to_json(row.psnr)},
                        {"ssim", to_json(row.ssim)},
                        {"psnr_content", to_json(row.psnr_content)},
                        {"ssim_content", to_json(row.ssim_content)},
                        {"train_seconds", row.train_seconds},
                        {"fps_median", row.fps_median},
                        {"fps_p5", row.fps_p5},
                        {"storage_bytes", row.storage_bytes},
                        {"payload_bytes", row.payload_bytes},
                        {"primitives", row.primitives},
                        {"init_hash", hash}});
    }
    return {{"seed", r.seed}, {"split", r.split}, {"seeds_consistent", r.seeds_consistent()}, {"rows", rows}};
}

/// Text table of one ablation report. PSNR and SSIM are over frames with non-empty ground truth.
inline std::string format_table(const AblationReport& r) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-8s  %-18s  %-14s  %9s  %8s  %10s\n", "variant", "PSNR", "SSIM", "train[s]", "FPS",
                  "storage[B]");
    os << line;
    for (const auto& row : r.rows) {
        std::snprintf(line, sizeof line, "%-8s  %-18s  %-14s  %9.1f  %8.1f  %10zu\n", row.variant.name.c_str(),
                      format_summary(row.psnr_content).c_str(), format_summary(row.ssim_content).c_str(), row.train_seconds, row.fps_median,
                      row.storage_bytes);
        os << line;
    }
    const std::size_t scored = r.rows.empty() ? 0 : r.rows.front().psnr_content.count;
    os << "seed " << r.seed << ", " << scored << " non-empty " << r.split << " frames"
       << (r.seeds_consistent() ? ", identical initialization across variants" : ", INITIALIZATION MISMATCH")
       << "\n";
    return os.str();
}

/// Trains every variant with the same data, seed and iteration counts, then evaluates, benchmarks and sizes it.
inline AblationReport ablate(const Dataset& ds, const TrainConfig& base, const AblationOptions& opt = {}) {
    AblationReport rep;
    rep.seed = base.seed;
    rep.split = opt.split;
    if (ds.manifest.split_indices(opt.split).empty())
        throw InvalidParameter("ablate: split '" + opt.split + "' has no frames");
    for (const auto& v : ablation_variants()) {
        if (!opt.variants.empty() && std::find(opt.variants.begin(), opt.variants.end(), v.name) == opt.variants.end()) continue;
        const TrainConfig cfg = variant_config(base, v);
        Trainer t(ds, cfg);
        AblationRow row;
        row.variant = v;
        row.init_hash = cloud_hash(t.cloud());
        if (opt.on_log) t.on_log = [&](const LogRecord& r) { opt.on_log(v.name, r); };
        const auto t0 = std::chrono::steady_clock::now();
        t.run_stage1();
        t.run_stage2();
        row.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const Model m = t.model();
        const auto ev = evaluate(m, ds, opt.split);
        row.psnr = ev.psnr;
        row.ssim = ev.ssim;
        row.psnr_content = ev.psnr_content;
        row.ssim_content = ev.ssim_content;
        const auto b = bench_fps(m, opt.bench);
        row.fps_median = b.fps_median;
        row.fps_p5 = b.fps_p5;
        row.storage_bytes = serialize_model(m).size();
        row.payload_bytes = cloud_payload_bytes(m.cloud.size()) + (m.aam ? aam_payload_bytes(*m.aam) : 0);
        row.primitives = m.cloud.size();
        rep.rows.push_back(row);
    }
    if (rep.rows.empty()) throw InvalidParameter("ablate: no known variant selected");
    return rep;
}

} // namespace clipgs
