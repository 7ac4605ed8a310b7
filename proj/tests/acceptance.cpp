// Acceptance gate: one PASS/FAIL line per criterion. `acceptance` runs all of them,
// `acceptance N [M ...]` a subset. Exit status is nonzero if any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "clipgs/datagen.hpp"
#include "clipgs/eval_bench.hpp"
#include "clipgs/pipeline.hpp"
#include "clipgs/trainer.hpp"
#include "test_helpers.hpp"

namespace fs = std::filesystem;
using namespace clipgs;
using clipgs::testing::front_camera;
using clipgs::testing::random_cloud;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            if (pass) detail << "first failure: " << what << "; ";
            pass = false;
        }
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool fd_close(double analytic, double fd) { return std::abs(analytic - fd) <= 1e-6 + 1e-3 * std::abs(fd); }

// ---- 1: gradients of the full render + loss pipeline ----

struct GradScene {
    GaussianCloud<double> cloud;
    AamParams<double> aam;
    Camera cam;
    ClipPlane plane;
    Image<double> target;
    double epsilon = 0.5, band = 8.0, lambda = 0.2;
    std::vector<double> m0;             // truncation values the straight-through substitution is anchored at
    std::vector<std::uint32_t> deformed; // visible set at m0

    // Forward value is the binary-mask pipeline; inside the band the mask carries σ(z − m) − σ(z − m0), so
    // derivatives in m are those of the straight-through estimator while the value stays unchanged.
    double loss() const {
        auto vis = visibility_ste_forward(cloud, plane, epsilon, band);
        const double z = plane.offset;
        for (std::size_t i = 0; i < cloud.size(); ++i)
            if (vis.in_band[i]) vis.mask[i] += sigmoid(z - cloud.trunc[i]) - sigmoid(z - m0[i]);
        CloudDeformation<double> d;
        d.indices = deformed;
        std::vector<Vec3<double>> pos;
        for (auto i : deformed) pos.push_back(cloud.positions[i]);
        d.values = aam_forward<double>(aam, pos, z);
        const auto out = render(cloud, cam, vis, &d, {}, false);
        return training_loss<double>(out.image, target, lambda, nullptr).total;
    }

    double central(double& p, double h = 1e-6) {
        const double keep = p;
        p = keep + h;
        const double fp = loss();
        p = keep - h;
        const double fm = loss();
        p = keep;
        return (fp - fm) / (2 * h);
    }
};

GradScene make_grad_scene(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    GradScene s;
    s.cloud = random_cloud<double>(rng, n, 0.5, -1.8, -1.0, -2.0, 1.0);
    for (auto& m : s.cloud.trunc) m += rng.uniform(-0.3, 0.3);
    s.cam = front_camera(16, 16, 14);
    s.cam.rotation = quat_to_rotation<double>(Vec4<double>(1, rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.02));
    s.plane = ClipPlane{Eigen::Vector3d::UnitZ(), rng.uniform(-0.1, 0.3)};
    s.target = Image<double>(16, 16);
    for (auto& v : s.target.data) v = rng.uniform();
    s.aam = make_aam<double>(seed + 100, 64, 2, 10, 4, 0.02);
    // nonzero heads so every trunk weight receives gradient
    for (auto* head : {&s.aam.head_mu, &s.aam.head_rot, &s.aam.head_scale}) {
        for (Eigen::Index k = 0; k < head->weight.size(); ++k) head->weight.data()[k] = rng.uniform(-0.05, 0.05);
        for (Eigen::Index k = 0; k < head->bias.size(); ++k) head->bias[k] = rng.uniform(-0.05, 0.05);
    }
    // one primitive far on each side of the plane, outside the surrogate band
    s.cloud.trunc[0] = s.plane.offset - 20;
    s.cloud.trunc[1] = s.plane.offset + 20;
    s.m0 = s.cloud.trunc;
    const auto vis = visibility_ste_forward(s.cloud, s.plane, s.epsilon, s.band);
    for (std::size_t i = 0; i < n; ++i)
        if (vis.mask[i] == 1.0) s.deformed.push_back(std::uint32_t(i));
    return s;
}

Outcome criterion1() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t checked = 0, zero_band = 0;
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        GradScene s = make_grad_scene(seed, 10);
        // analytic gradients, assembled as in a training step
        const auto f = prepare_frame<double>(s.cloud, &s.aam, s.plane, TruncationMode::learnable, s.epsilon, s.band, true);
        const auto out = render(s.cloud, s.cam, f.visibility, &*f.deformation, {}, true);
        Image<double> d_image;
        training_loss<double>(out.image, s.target, s.lambda, &d_image);
        auto g = render_backward(out, d_image);
        g.d_trunc = visibility_ste_backward(f.visibility, g.d_mask);
        auto ga = s.aam.zeros_like();
        const auto dpos = aam_backward(s.aam, f.cache, g.d_deformation, ga);
        for (std::size_t k = 0; k < f.deformation->indices.size(); ++k)
            g.d_positions[f.deformation->indices[k]] += dpos.col(Eigen::Index(k));
        o.require(f.deformation->indices == s.deformed, "visible set mismatch");

        auto check = [&](double analytic, double& param, const std::string& what) {
            const double fd = s.central(param);
            ++checked;
            o.require(fd_close(analytic, fd), what + " analytic " + std::to_string(analytic) + " fd " + std::to_string(fd));
        };
        for (std::size_t i = 0; i < s.cloud.size(); ++i) {
            const std::string tag = " seed " + std::to_string(seed) + " prim " + std::to_string(i);
            for (int k = 0; k < 3; ++k) {
                check(g.d_positions[i][k], s.cloud.positions[i][k], "mu" + tag);
                check(g.d_log_scales[i][k], s.cloud.log_scales[i][k], "s" + tag);
                check(g.d_color_logits[i][k], s.cloud.color_logits[i][k], "c" + tag);
            }
            for (int k = 0; k < 4; ++k) check(g.d_rotations[i][k], s.cloud.rotations[i][k], "q" + tag);
            check(g.d_opacity_logits[i], s.cloud.opacity_logits[i], "alpha" + tag);
            if (f.visibility.in_band[i]) check(g.d_trunc[i], s.cloud.trunc[i], "m" + tag);
            else {
                o.require(g.d_trunc[i] == 0.0, "m out of band" + tag);
                ++zero_band;
            }
        }
        std::size_t w = 0;
        std::vector<std::span<double>> params;
        std::vector<std::span<const double>> grads;
        s.aam.visit([&](const std::string&, std::span<double> p) { params.push_back(p); });
        ga.visit([&](const std::string&, std::span<const double> p) { grads.push_back(p); });
        for (std::size_t b = 0; b < params.size(); ++b)
            for (std::size_t k = 0; k < params[b].size(); ++k, ++w)
                check(grads[b][k], params[b][k], "aam weight " + std::to_string(w) + " seed " + std::to_string(seed));
    }
    const double secs = seconds_since(t0);
    o.require(secs < 60, "runtime over 60 s");
    o.detail << checked << " partials (mu, q, s, c, alpha, m, all AAM weights) on 3 scenes of 10 primitives at 16x16, "
             << zero_band << " out-of-band m exactly zero, " << secs << " s";
    return o;
}

// ---- 2: optimized renderer against the reference ----

Outcome criterion2() {
    Outcome o;
    double worst = 0;
    int permuted = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(1000 + seed);
        const std::size_t n = 1 + std::size_t(rng.below(50));
        const auto cloud = random_cloud<double>(rng, n);
        Camera cam = front_camera(32, 32, 30);
        cam.rotation = quat_to_rotation<double>(Vec4<double>(1, rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)));
        const ClipPlane plane{Eigen::Vector3d::UnitZ(), rng.uniform(-0.7, 0.7)};
        const auto vis = visibility_ste_forward(cloud, plane);
        RenderSettings<double> settings;
        settings.background = Vec3<double>(rng.uniform(), rng.uniform(), rng.uniform());
        const auto fast = render(cloud, cam, vis, nullptr, settings, false).image;
        const auto ref = reference_render(cloud, cam, vis, nullptr, settings);
        for (std::size_t i = 0; i < fast.data.size(); ++i) worst = std::max(worst, std::abs(fast.data[i] - ref.data[i]));

        // reversed and shuffled primitive order
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[std::size_t(rng.below(i))]);
        GaussianCloud<double> pc;
        VisibilityResult<double> pv = vis;
        pc.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto j = perm[i];
            pc.positions[i] = cloud.positions[j];
            pc.rotations[i] = cloud.rotations[j];
            pc.log_scales[i] = cloud.log_scales[j];
            pc.color_logits[i] = cloud.color_logits[j];
            pc.opacity_logits[i] = cloud.opacity_logits[j];
            pc.trunc[i] = cloud.trunc[j];
            pv.mask[i] = vis.mask[j];
            pv.surrogate[i] = vis.surrogate[j];
            pv.in_band[i] = vis.in_band[j];
        }
        const auto permuted_img = render(pc, cam, pv, nullptr, settings, false).image;
        o.require(permuted_img.data == fast.data, "permutation changed the image, seed " + std::to_string(seed));
        ++permuted;
    }
    o.require(worst <= 1e-5, "max channel difference " + std::to_string(worst));
    o.detail << "200 scenes (1-50 primitives, 32x32): max |render - reference| " << worst << ", " << permuted
             << " permutations bit-identical";
    return o;
}

// ---- 3: learnable truncation at m = mu.n reproduces hard truncation ----

Outcome criterion3() {
    Outcome o;
    Rng rng(31);
    auto cloud = random_cloud<double>(rng, 500, 1.0);
    init_trunc_values(cloud, Eigen::Vector3d::UnitZ());
    auto cloud_f = random_cloud<float>(rng, 500, 1.0);
    init_trunc_values(cloud_f, Eigen::Vector3d::UnitZ());
    std::size_t compared = 0;
    for (int k = 0; k < 50; ++k) {
        // every fifth offset sits exactly on a primitive's plane coordinate
        const double z = k % 5 == 0 ? cloud.positions[std::size_t(rng.below(500))].z() : rng.uniform(-1.2, 1.2);
        const ClipPlane plane{Eigen::Vector3d::UnitZ(), z};
        o.require(visibility_hard(cloud, plane).mask == visibility_ste_forward(cloud, plane, 0.5).mask,
                  "double masks differ at z=" + std::to_string(z));
        const double zf = k % 5 == 0 ? double(cloud_f.positions[std::size_t(rng.below(500))].z()) : z;
        const ClipPlane plane_f{Eigen::Vector3d::UnitZ(), zf};
        o.require(visibility_hard(cloud_f, plane_f).mask == visibility_ste_forward(cloud_f, plane_f, 0.5f).mask,
                  "float masks differ at z=" + std::to_string(zf));
        compared += 2;
    }
    o.detail << compared << " mask pairs over 50 plane offsets (500 primitives, double and float), all identical";
    return o;
}

// ---- 4: straight-through contract ----

Outcome criterion4() {
    Outcome o;
    Rng rng(41);
    auto cloud = random_cloud<double>(rng, 400, 1.0);
    for (auto& m : cloud.trunc) m = rng.uniform(-12, 12);
    double worst = 0;
    std::size_t in_band = 0, out_band = 0;
    for (int k = 0; k < 20; ++k) {
        const double z = rng.uniform(-3, 3);
        const ClipPlane plane{Eigen::Vector3d::UnitZ(), z};
        const auto vis = visibility_ste_forward(cloud, plane, 0.5, 8.0);
        for (double v : vis.mask) o.require(v == 0.0 || v == 1.0, "mask not binary");
        const auto dm = visibility_ste_backward(vis, std::vector<double>(cloud.size(), 1.0));
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            const double m = cloud.trunc[i];
            if (!vis.in_band[i]) {
                o.require(dm[i] == 0.0, "out-of-band gradient nonzero");
                ++out_band;
                continue;
            }
            const double h = 1e-5;
            const double fd = (sigmoid(z - (m + h)) - sigmoid(z - (m - h))) / (2 * h);
            worst = std::max(worst, std::abs(dm[i] - fd));
            ++in_band;
        }
    }
    o.require(worst <= 1e-6, "max |ste - fd| " + std::to_string(worst));
    o.require(in_band > 0 && out_band > 0, "both band regions exercised");
    o.detail << "binary masks; " << in_band << " in-band gradients within " << worst << " of surrogate finite differences; "
             << out_band << " out-of-band gradients exactly zero";
    return o;
}

// ---- 5: zero-head AAM is the identity; stage handover is continuous ----

Dataset small_dataset(int train, int test, int size, std::uint64_t seed) {
    const Volume vol = make_volume("nested-shells", {32, 32, 32}, 0);
    DatasetOptions opt;
    opt.n_train = train;
    opt.n_test = test;
    opt.size = size;
    opt.seed = seed;
    opt.steps = 96;
    return synthesize_dataset(vol, "nested-shells", opt);
}

Outcome criterion5() {
    Outcome o;
    int renders = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(500 + seed);
        const auto cloud = random_cloud<float>(rng, 40);
        const auto aam = make_aam<float>(seed, 64, 2, 10, 4, 0.0173f);
        const Camera cam = front_camera(32, 32, 30);
        for (auto mode : {TruncationMode::learnable, TruncationMode::hard, TruncationMode::none}) {
            const ClipPlane plane{Eigen::Vector3d::UnitZ(), rng.uniform(-0.6, 0.6)};
            const auto with = render_frame<float>(cloud, &aam, cam, plane, mode, Vec3<float>::Zero()).image;
            const auto without = render_frame<float>(cloud, nullptr, cam, plane, mode, Vec3<float>::Zero()).image;
            o.require(with.data == without.data, "zero-head AAM changed pixels");
            ++renders;
        }
    }
    const Dataset ds = small_dataset(6, 0, 32, 3);
    TrainConfig cfg;
    cfg.iters_stage1 = 40;
    cfg.iters_stage2 = 5;
    cfg.init_points = 400;
    cfg.seed = 5;
    Trainer t(ds, cfg);
    t.run_stage1();
    const auto stage1 = t.cloud();
    t.run_stage2();
    const auto& first = t.trace()[std::size_t(cfg.iters_stage1)];
    const double expect = frame_loss<float>(stage1, nullptr, ds, first.frame, cfg).total;
    const double gap = std::abs(first.loss - expect);
    o.require(first.stage == 2 && gap <= 1e-10, "handover gap " + std::to_string(gap));
    o.detail << renders << " renders pixel-identical with zero heads; handover loss gap " << gap;
    return o;
}

// ---- 6: desk-scale training ----

Outcome criterion6() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const Volume vol = make_volume("nested-shells", {64, 64, 64}, 0);
    DatasetOptions opt; // 120 train / 20 test at 128x128
    opt.seed = 0;
    const Dataset ds = synthesize_dataset(vol, "nested-shells", opt);
    const double gen_s = seconds_since(t0);
    TrainConfig cfg = TrainConfig::desk();
    cfg.seed = 0;
    Trainer t(ds, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    t.run_stage1();
    const auto ev1 = evaluate(t.model(), ds, "test");
    t.run_stage2();
    const double train_s = seconds_since(t1);
    const auto ev2 = evaluate(t.model(), ds, "test");
    // frames whose ground truth is empty render exactly and would count as kPsnrExact; they are left out
    const double psnr = ev2.psnr_content.mean, ssim = ev2.ssim_content.mean;
    o.require(psnr >= 24.0, "held-out PSNR " + std::to_string(psnr) + " < 24");
    o.require(ssim >= 0.85, "held-out SSIM " + std::to_string(ssim) + " < 0.85");
    o.require(train_s <= 15 * 60, "training took over 15 min");
    o.detail << "held-out PSNR " << format_summary(ev2.psnr_content) << " dB, SSIM " << format_summary(ev2.ssim_content, 4)
             << " over " << ev2.psnr_content.count << " non-empty test frames (all " << ev2.psnr.count << " frames: PSNR "
             << format_summary(ev2.psnr) << ", SSIM " << format_summary(ev2.ssim, 4) << "); stage 1 alone PSNR "
             << format_summary(ev1.psnr_content) << "; data " << gen_s << " s, training " << train_s << " s on "
             << worker_count() << " worker(s)";
    return o;
}

// ---- 7: ablation direction over three seeds ----

Outcome criterion7() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    const Volume vol = make_volume("nested-shells", {48, 48, 48}, 0);
    DatasetOptions opt;
    opt.n_train = 60;
    opt.n_test = 12;
    opt.size = 64;
    opt.steps = 128;
    opt.seed = 7;
    const Dataset ds = synthesize_dataset(vol, "nested-shells", opt);
    TrainConfig base;
    base.iters_stage1 = 400;
    base.iters_stage2 = 800;
    base.init_points = 2000;
    AblationOptions aopt;
    aopt.bench.duration_s = 1.0;
    aopt.bench.width = aopt.bench.height = 128;
    double lt = 0, full = 0;
    int full_wins = 0;
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        base.seed = seed;
        const auto rep = ablate(ds, base, aopt);
        std::printf("%s", format_table(rep).c_str());
        o.require(rep.rows.size() == 5, "table has 5 rows");
        o.require(rep.seeds_consistent(), "variants share initialization");
        const auto& r_lt = rep.row("LT");
        const auto& r_full = rep.row("AAM+LT");
        const auto& r_aam = rep.row("AAM");
        const std::size_t aam_weights = r_full.payload_bytes - r_lt.payload_bytes;
        o.require(r_aam.payload_bytes == r_lt.payload_bytes + aam_weights, "payload arithmetic");
        o.require(r_lt.payload_bytes < r_aam.payload_bytes + aam_weights, "LT storage below AAM storage plus weights");
        lt += r_lt.psnr_content.mean / 3;
        full += r_full.psnr_content.mean / 3;
        full_wins += r_full.psnr_content.mean >= r_lt.psnr_content.mean;
    }
    o.require(full >= lt, "mean PSNR AAM+LT " + std::to_string(full) + " < LT " + std::to_string(lt));
    o.detail << "mean held-out PSNR over seeds 0-2: AAM+LT " << full << " dB, LT " << lt << " dB (AAM+LT ahead on "
             << full_wins << "/3 seeds); payload identity holds; " << seconds_since(t0) << " s";
    return o;
}

// ---- 8: plane consistency ----

Outcome criterion8() {
    Outcome o;
    Rng rng(81);
    int pairs = 0;
    for (auto mode : {TruncationMode::learnable, TruncationMode::hard}) {
        for (int k = 0; k < 10; ++k) {
            auto cloud = random_cloud<float>(rng, 60);
            for (auto& m : cloud.trunc) m += float(rng.uniform(-0.2, 0.2));
            std::vector<float> keys;
            for (std::size_t i = 0; i < cloud.size(); ++i)
                keys.push_back(mode == TruncationMode::hard ? cloud.positions[i].z() : cloud.trunc[i]);
            std::sort(keys.begin(), keys.end());
            const std::size_t gap = 10 + std::size_t(rng.below(40));
            const double lo = keys[gap], hi = keys[gap + 1];
            const double z1 = lo + 0.25 * (hi - lo), z2 = lo + 0.75 * (hi - lo);
            const Camera cam = front_camera(32, 32, 30);
            const ClipPlane p1{Eigen::Vector3d::UnitZ(), z1}, p2{Eigen::Vector3d::UnitZ(), z2};
            o.require(compute_visibility(cloud, p1, mode, 0.5f, 0.0f).mask == compute_visibility(cloud, p2, mode, 0.5f, 0.0f).mask,
                      "test offsets do not share a visibility set");
            const auto a = render_frame<float>(cloud, nullptr, cam, p1, mode, Vec3<float>::Zero()).image;
            const auto b = render_frame<float>(cloud, nullptr, cam, p2, mode, Vec3<float>::Zero()).image;
            o.require(a.data == b.data, "renders differ for identical visibility");
            ++pairs;
        }
    }
    const Volume vol = make_volume("nested-shells", {32, 32, 32}, 0);
    const Camera cam = orbit_camera(0.7, 0.3, 4.0, vol.center(), 0.8, 48, 48);
    const auto clipped = raymarch_render(vol, cam, ClipPlane{Eigen::Vector3d::UnitZ(), std::numeric_limits<double>::infinity()}, 128);
    const auto unclipped = raymarch_render(vol, cam, std::nullopt, 128);
    o.require(clipped.data == unclipped.data, "raymarch at z=+inf differs from unclipped");
    o.detail << pairs << " offset pairs with equal visibility render bit-identically; raymarch at z=+inf equals unclipped";
    return o;
}

// ---- 9: metrics ----

Outcome criterion9() {
    Outcome o;
    Rng rng(91);
    Image<double> x(24, 24), y(24, 24);
    for (auto& v : x.data) v = rng.uniform();
    for (auto& v : y.data) v = rng.uniform();
    const double self = ssim(x, x);
    o.require(self == 1.0, "SSIM(x,x) = " + std::to_string(self));
    Image<double> a(16, 16, 0.0), b(16, 16, 0.1);
    const double p = psnr(a, b);
    o.require(std::abs(p - 20.0) <= 1e-12, "PSNR " + std::to_string(p));
    const auto d = dssim_with_grad(x, y);
    double worst = 0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double keep = x.data[i], h = 1e-6;
        x.data[i] = keep + h;
        const double fp = dssim_with_grad(x, y).value;
        x.data[i] = keep - h;
        const double fm = dssim_with_grad(x, y).value;
        x.data[i] = keep;
        const double fd = (fp - fm) / (2 * h);
        o.require(fd_close(d.grad.data[i], fd), "D-SSIM gradient at " + std::to_string(i));
        worst = std::max(worst, std::abs(d.grad.data[i] - fd));
    }
    o.detail << "SSIM(x,x) = " << self << "; PSNR of uniform 0.1 error = " << p << " dB; D-SSIM gradient max |analytic - fd| "
             << worst << " over " << x.data.size() << " inputs";
    return o;
}

// ---- 10: determinism of cmd_train ----

int run_cli(const std::string& args) {
    const int status = std::system((std::string(CLIPGS_CLI) + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion10() {
    Outcome o;
    const fs::path dir = fs::temp_directory_path() / ("clipgs_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string ds = (dir / "ds").string();
    o.require(run_cli("gen-data --n-train 8 --n-test 2 --size 48 --dims 32 --steps 96 --seed 10 --out " + ds) == 0, "gen-data");
    const std::string common = "--threads 1 train --quiet --data " + ds + " --iters1 100 --iters2 100 --points 800 --seed 42 --out ";
    const std::string a = (dir / "a.clipgs").string(), b = (dir / "b.clipgs").string();
    o.require(run_cli(common + a) == 0, "first train run");
    o.require(run_cli(common + b) == 0, "second train run");
    const std::string ba = slurp(a), bb = slurp(b);
    o.require(!ba.empty() && ba == bb, "model files differ");
    o.detail << "two single-thread train runs (100+100 iterations, 800 primitives, seed 42): " << ba.size() << " and "
             << bb.size() << " bytes, " << (ba == bb ? "identical" : "different");
    fs::remove_all(dir);
    return o;
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient suite", criterion1},       {"rasterizer oracle", criterion2}, {"LT/HT equivalence", criterion3},
        {"straight-through contract", criterion4}, {"AAM identity and handover", criterion5},
        {"desk-scale training", criterion6}, {"ablation direction", criterion7}, {"plane consistency", criterion8},
        {"metrics", criterion9},             {"determinism", criterion10}};
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    bool all_pass = true;
    for (int k = 1; k <= int(criteria.size()); ++k) {
        if (!selected.empty() && !selected.count(k)) continue;
        Outcome o;
        try {
            o = criteria[std::size_t(k - 1)].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "exception: " << e.what();
        }
        std::printf("criterion %2d %s  %s: %s\n", k, o.pass ? "PASS" : "FAIL", criteria[std::size_t(k - 1)].first,
                    o.detail.str().c_str());
        std::fflush(stdout);
        all_pass = all_pass && o.pass;
    }
    return all_pass ? 0 : 1;
}
