#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clipgs/datagen.hpp"
#include "clipgs/eval_bench.hpp"
#include "clipgs/image_io.hpp"
#include "clipgs/model_io.hpp"
#include "clipgs/pipeline.hpp"
#include "clipgs/trainer.hpp"
#include "serve.hpp"

namespace fs = std::filesystem;
using namespace clipgs;

namespace {

enum Exit : int { ok = 0, runtime_failure = 1, usage = 2, bad_model = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot read '" + p.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("'" + p.string() + "' is not valid JSON: " + e.what());
    }
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write '" + p.string() + "'");
}

// ---- gen-data ----

struct GenDataArgs {
    std::string preset = "nested-shells";
    std::vector<int> dims{64};
    DatasetOptions opt;
    double z_min = std::numeric_limits<double>::quiet_NaN(), z_max = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t volume_seed = 0;
    std::string out;
};

void add_gen_data(CLI::App& app, GenDataArgs& a) {
    auto* c = app.add_subcommand("gen-data", "Ray march a procedural volume into a dataset");
    c->add_option("--preset", a.preset, "Volume preset")->check(CLI::IsMember(volume_presets()))->capture_default_str();
    c->add_option("--dims", a.dims, "Voxel grid size: one value or three")->expected(1, 3)->capture_default_str();
    c->add_option("--n-train", a.opt.n_train, "Training frames")->check(CLI::NonNegativeNumber)->capture_default_str();
    c->add_option("--n-test", a.opt.n_test, "Test frames")->check(CLI::NonNegativeNumber)->capture_default_str();
    c->add_option("--size", a.opt.size, "Image width and height")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--z-min", a.z_min, "Lowest plane offset (default: bounds minus 10%)");
    c->add_option("--z-max", a.z_max, "Highest plane offset (default: bounds plus 10%)");
    c->add_option("--steps", a.opt.steps, "Ray-march samples per ray")->check(CLI::Range(2, 100000))->capture_default_str();
    c->add_option("--seed", a.opt.seed, "Camera and plane sampling seed")->capture_default_str();
    c->add_option("--volume-seed", a.volume_seed, "Seed of randomized presets")->capture_default_str();
    c->add_option("--out", a.out, "Output directory")->required();
}

int run_gen_data(const GenDataArgs& a) {
    std::array<int, 3> dims{};
    if (a.dims.size() == 1) dims.fill(a.dims[0]);
    else if (a.dims.size() == 3) dims = {a.dims[0], a.dims[1], a.dims[2]};
    else throw UsageError("--dims takes one or three values");
    for (int d : dims)
        if (d < 2) throw UsageError("--dims values must be at least 2");
    DatasetOptions opt = a.opt;
    if (!std::isnan(a.z_min)) opt.z_min = a.z_min;
    if (!std::isnan(a.z_max)) opt.z_max = a.z_max;
    if (opt.z_min && opt.z_max && !(*opt.z_min < *opt.z_max)) throw UsageError("--z-min must be below --z-max");
    const Volume vol = make_volume(a.preset, dims, a.volume_seed);
    const Dataset ds = generate_dataset(vol, a.preset, opt, a.out);
    std::cout << "wrote " << ds.manifest.frames.size() << " frames to " << a.out << "\n";
    return ok;
}

// ---- train ----

struct TrainArgs {
    std::string data, out, preset = "desk", config, log;
    std::optional<int> iters1, iters2, points, checkpoint_every;
    std::optional<std::uint64_t> seed;
    bool no_aam = false, hard = false, no_truncation = false, densify = false, quiet = false;
};

void add_train(CLI::App& app, TrainArgs& a) {
    auto* c = app.add_subcommand("train", "Two-stage training of a clippable model");
    c->add_option("--data", a.data, "Dataset directory")->required();
    c->add_option("--out", a.out, "Model file to write")->required();
    c->add_option("--preset", a.preset, "Base configuration")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
    c->add_option("--config", a.config, "JSON file with TrainConfig fields, applied over the preset");
    c->add_option("--iters1", a.iters1, "Stage-1 iterations")->check(CLI::NonNegativeNumber);
    c->add_option("--iters2", a.iters2, "Stage-2 iterations")->check(CLI::NonNegativeNumber);
    c->add_option("--points", a.points, "Initial primitive count")->check(CLI::PositiveNumber);
    c->add_option("--seed", a.seed, "Training seed");
    c->add_flag("--no-aam", a.no_aam, "Train without the adjustment model");
    auto* hard = c->add_flag("--hard-truncation", a.hard, "Decide visibility from primitive centers");
    c->add_flag("--no-truncation", a.no_truncation, "Keep every primitive visible")->excludes(hard);
    c->add_flag("--densify", a.densify, "Enable clone and prune");
    c->add_option("--checkpoint-every", a.checkpoint_every, "Write the model every N iterations")->check(CLI::PositiveNumber);
    c->add_option("--log", a.log, "Metrics log (JSON lines); default <out>.log.jsonl");
    c->add_flag("--quiet", a.quiet, "No progress output");
}

TrainConfig build_config(const std::string& preset, const std::string& config_path) {
    TrainConfig cfg = preset == "paper" ? TrainConfig::paper() : TrainConfig::desk();
    if (!config_path.empty()) {
        try {
            apply_json(cfg, read_json_file(config_path));
        } catch (const InvalidParameter& e) {
            throw UsageError(std::string("--config: ") + e.what());
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(std::string("--config: ") + e.what());
        }
    }
    return cfg;
}

int run_train(const TrainArgs& a) {
    TrainConfig cfg = build_config(a.preset, a.config);
    if (a.iters1) cfg.iters_stage1 = *a.iters1;
    if (a.iters2) cfg.iters_stage2 = *a.iters2;
    if (a.points) cfg.init_points = *a.points;
    if (a.seed) cfg.seed = *a.seed;
    if (a.no_aam) cfg.use_aam = false;
    if (a.hard) cfg.truncation = TruncationMode::hard;
    if (a.no_truncation) cfg.truncation = TruncationMode::none;
    if (a.densify) cfg.densify = true;
    if (a.checkpoint_every) {
        cfg.checkpoint_interval = *a.checkpoint_every;
        cfg.checkpoint_path = a.out;
    } else if (cfg.checkpoint_path.empty()) {
        cfg.checkpoint_path = a.out; // divergence dumps land next to the model
    }
    try {
        cfg.validate();
    } catch (const InvalidParameter& e) {
        throw UsageError(e.what());
    }

    const Dataset ds = load_dataset(a.data);
    const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log.jsonl") : fs::path(a.log);
    if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
    std::ofstream log(log_path);
    if (!log) throw IoError("cannot write '" + log_path.string() + "'");

    Trainer t(ds, cfg);
    t.on_log = [&](const LogRecord& r) {
        log << to_json(r).dump() << "\n" << std::flush;
        if (!a.quiet) {
            std::printf("stage %d  iter %6d  loss %.5f  psnr %6.2f  visible %.3f  %.1fs\n", r.stage, r.iteration, r.loss,
                        r.psnr, r.visible_fraction, r.elapsed_s);
            std::fflush(stdout);
        }
    };
    t.run_stage1();
    t.run_stage2();
    const auto bytes = save_model(t.model(), a.out);
    if (!a.quiet) std::cout << "wrote " << a.out << " (" << bytes << " bytes, " << t.cloud().size() << " primitives)\n";
    return ok;
}

// ---- render ----

struct RenderArgs {
    std::string model, out, data;
    double azimuth = 0.6, elevation = 0.4, plane_z = std::numeric_limits<double>::infinity();
    std::optional<double> radius, fov;
    std::optional<int> frame;
    int width = 256, height = 0;
};

void add_render(CLI::App& app, RenderArgs& a) {
    auto* c = app.add_subcommand("render", "Render one view of a model");
    c->add_option("--model", a.model, "Model file")->required();
    c->add_option("--out", a.out, "PNG to write")->required();
    c->add_option("--azimuth", a.azimuth, "Orbit azimuth in radians")->capture_default_str();
    c->add_option("--elevation", a.elevation, "Orbit elevation in radians")->capture_default_str();
    c->add_option("--radius", a.radius, "Orbit radius (default: model view radius)");
    c->add_option("--fov", a.fov, "Vertical field of view in radians (default: model)");
    c->add_option("--plane-z", a.plane_z, "Clipping plane offset (default: no clipping)");
    c->add_option("--size", a.width, "Image width")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--height", a.height, "Image height (default: width)")->check(CLI::NonNegativeNumber);
    auto* data = c->add_option("--data", a.data, "Dataset to take a recorded camera and plane from");
    c->add_option("--frame", a.frame, "Frame index in --data")->needs(data);
}

int run_render(const RenderArgs& a) {
    const Model m = load_model(a.model);
    Camera cam;
    double z = a.plane_z;
    if (a.frame) {
        const Manifest man = load_manifest(a.data);
        if (*a.frame < 0 || std::size_t(*a.frame) >= man.frames.size()) throw UsageError("--frame out of range");
        cam = man.frames[std::size_t(*a.frame)].camera;
        z = man.frames[std::size_t(*a.frame)].plane_z;
    } else {
        const int h = a.height > 0 ? a.height : a.width;
        cam = orbit_camera(a.azimuth, a.elevation, a.radius.value_or(m.meta.view_radius), m.meta.view_center,
                           a.fov.value_or(m.meta.fov_y), a.width, h);
    }
    const auto img = render_model(m, cam, z);
    if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
    write_png(a.out, img);
    std::cout << "visible " << visible_count(m, z) << " of " << m.cloud.size() << "\n";
    return ok;
}

// ---- eval ----

struct EvalArgs {
    std::string model, data, split = "test", json;
};

void add_eval(CLI::App& app, EvalArgs& a) {
    auto* c = app.add_subcommand("eval", "PSNR and SSIM over a dataset split");
    c->add_option("--model", a.model, "Model file")->required();
    c->add_option("--data", a.data, "Dataset directory")->required();
    c->add_option("--split", a.split, "Split to score")->capture_default_str();
    c->add_option("--json", a.json, "Write the full report as JSON");
}

int run_eval(const EvalArgs& a) {
    const Model m = load_model(a.model);
    const Manifest man = load_manifest(a.data);
    if (man.split_indices(a.split).empty()) throw UsageError("split '" + a.split + "' has no frames");
    const Dataset ds = load_dataset(a.data);
    const auto r = evaluate(m, ds, a.split);
    std::cout << "frames " << r.frames.size() << "\n"
              << "PSNR " << format_summary(r.psnr) << "\n"
              << "SSIM " << format_summary(r.ssim, 4) << "\n";
    if (r.psnr_content.count != r.psnr.count)
        std::cout << "PSNR (non-empty targets, " << r.psnr_content.count << ") " << format_summary(r.psnr_content) << "\n"
                  << "SSIM (non-empty targets) " << format_summary(r.ssim_content, 4) << "\n";
    if (!a.json.empty()) write_text(a.json, to_json(r).dump(2) + "\n");
    return ok;
}

// ---- ablate ----

struct AblateArgs {
    std::string data, preset = "desk", config, split = "test", json, table;
    std::vector<std::uint64_t> seeds{0};
    std::optional<int> iters1, iters2, points;
    std::vector<std::string> variants;
    double bench_seconds = 1.0;
    int bench_size = 128;
    bool quiet = false;
};

void add_ablate(CLI::App& app, AblateArgs& a) {
    auto* c = app.add_subcommand("ablate", "Train and compare the five truncation/adjustment variants");
    c->add_option("--data", a.data, "Dataset directory")->required();
    c->add_option("--preset", a.preset, "Base configuration")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
    c->add_option("--config", a.config, "JSON file with TrainConfig fields");
    c->add_option("--iters1", a.iters1, "Stage-1 iterations")->check(CLI::NonNegativeNumber);
    c->add_option("--iters2", a.iters2, "Stage-2 iterations")->check(CLI::NonNegativeNumber);
    c->add_option("--points", a.points, "Initial primitive count")->check(CLI::PositiveNumber);
    c->add_option("--seeds", a.seeds, "One or more seeds")->capture_default_str();
    c->add_option("--variants", a.variants, "Subset of HT LT AAM AAM+HT AAM+LT");
    c->add_option("--split", a.split, "Evaluation split")->capture_default_str();
    c->add_option("--bench-seconds", a.bench_seconds, "Benchmark time per variant")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--bench-size", a.bench_size, "Benchmark image size")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--json", a.json, "Write all reports as JSON");
    c->add_option("--table", a.table, "Write the text tables");
    c->add_flag("--quiet", a.quiet, "No progress output");
}

int run_ablate(const AblateArgs& a) {
    TrainConfig cfg = build_config(a.preset, a.config);
    if (a.iters1) cfg.iters_stage1 = *a.iters1;
    if (a.iters2) cfg.iters_stage2 = *a.iters2;
    if (a.points) cfg.init_points = *a.points;
    for (const auto& v : a.variants) {
        const auto& all = ablation_variants();
        if (std::none_of(all.begin(), all.end(), [&](const AblationVariant& x) { return x.name == v; }))
            throw UsageError("unknown variant '" + v + "'");
    }
    const Manifest man = load_manifest(a.data);
    if (man.split_indices(a.split).empty()) throw UsageError("split '" + a.split + "' has no frames");
    const Dataset ds = load_dataset(a.data);
    AblationOptions opt;
    opt.split = a.split;
    opt.variants = a.variants;
    opt.bench.duration_s = a.bench_seconds;
    opt.bench.width = opt.bench.height = a.bench_size;
    if (!a.quiet)
        opt.on_log = [](const std::string& name, const LogRecord& r) {
            std::printf("%-7s stage %d  iter %6d  psnr %6.2f\n", name.c_str(), r.stage, r.iteration, r.psnr);
            std::fflush(stdout);
        };
    nlohmann::json all = nlohmann::json::array();
    std::string tables;
    for (auto seed : a.seeds) {
        cfg.seed = seed;
        const auto rep = ablate(ds, cfg, opt);
        tables += format_table(rep) + "\n";
        all.push_back(to_json(rep));
        std::cout << format_table(rep) << "\n";
    }
    if (!a.json.empty()) write_text(a.json, all.dump(2) + "\n");
    if (!a.table.empty()) write_text(a.table, tables);
    return ok;
}

// ---- bench ----

struct BenchArgs {
    std::string model, json;
    double duration = 5.0;
    int size = 256;
};

void add_bench(CLI::App& app, BenchArgs& a) {
    auto* c = app.add_subcommand("bench", "Frames per second over a scripted orbit and plane sweep");
    c->add_option("--model", a.model, "Model file")->required();
    c->add_option("--duration", a.duration, "Seconds to run")->capture_default_str();
    c->add_option("--size", a.size, "Image width and height")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--json", a.json, "Write the report as JSON");
}

int run_bench(const BenchArgs& a) {
    if (!(a.duration > 0)) throw UsageError("--duration must be positive");
    const Model m = load_model(a.model);
    BenchOptions o;
    o.duration_s = a.duration;
    o.width = o.height = a.size;
    const auto r = bench_fps(m, o);
    std::printf("frames %zu  median %.1f FPS  p5 %.1f FPS  mean %.1f FPS\n", r.frames, r.fps_median, r.fps_p5, r.fps_mean);
    if (!a.json.empty()) write_text(a.json, to_json(r).dump(2) + "\n");
    return ok;
}

// ---- parity ----

struct ParityArgs {
    std::string model, out;
    int size = 256;
    int aam_samples = 64;
};

void add_parity(CLI::App& app, ParityArgs& a) {
    auto* c = app.add_subcommand("parity", "Export reference renders, visibility counts and AAM outputs for the viewer");
    c->add_option("--model", a.model, "Model file")->required();
    c->add_option("--out", a.out, "Output directory")->required();
    c->add_option("--size", a.size, "Render size")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--aam-samples", a.aam_samples, "Visible primitives sampled per plane for the AAM check")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
}

int run_parity(const ParityArgs& a) {
    const Model m = load_model(a.model);
    fs::create_directories(a.out);
    const double lo = m.meta.bounds_min.z(), hi = m.meta.bounds_max.z();
    // five fixed views: azimuth, elevation, plane as a fraction of the z range
    const double views[5][3] = {{0.0, 0.0, 1.2}, {0.9, 0.35, 0.7}, {2.2, -0.3, 0.5}, {3.6, 0.8, 0.3}, {5.0, 0.1, -0.1}};
    nlohmann::json fixture;
    fixture["model"] = fs::path(a.model).filename().string();
    fixture["epsilon"] = m.meta.epsilon;
    fixture["truncation"] = to_string(m.meta.truncation);
    fixture["plane_range"] = {m.meta.plane_min, m.meta.plane_max};
    nlohmann::json jv = nlohmann::json::array();
    for (int k = 0; k < 5; ++k) {
        const double z = lo + views[k][2] * (hi - lo);
        const Camera cam = orbit_camera(views[k][0], views[k][1], m.meta.view_radius, m.meta.view_center, m.meta.fov_y, a.size, a.size);
        const std::string name = "view_" + std::to_string(k) + ".png";
        write_png(fs::path(a.out) / name, render_model(m, cam, z));
        jv.push_back({{"azimuth", views[k][0]},
                      {"elevation", views[k][1]},
                      {"radius", m.meta.view_radius},
                      {"target", {m.meta.view_center.x(), m.meta.view_center.y(), m.meta.view_center.z()}},
                      {"fov_y", m.meta.fov_y},
                      {"width", a.size},
                      {"height", a.size},
                      {"plane_z", z},
                      {"visible_count", visible_count(m, z)},
                      {"image", name}});
    }
    fixture["views"] = jv;

    nlohmann::json sweep = nlohmann::json::array();
    for (int k = 0; k <= 20; ++k) {
        const double z = lo - 0.1 * (hi - lo) + (1.2 * (hi - lo)) * k / 20.0;
        sweep.push_back({{"plane_z", z}, {"visible_count", visible_count(m, z)}});
    }
    fixture["visibility_sweep"] = sweep;

    if (m.aam) {
        nlohmann::json checks = nlohmann::json::array();
        for (const auto& v : jv) {
            const double z = v.at("plane_z");
            const ClipPlane plane{m.meta.plane_normal, z};
            const auto vis = compute_visibility<float>(m.cloud, plane, m.meta.truncation, float(m.meta.epsilon), 0.0f);
            std::vector<std::uint32_t> idx;
            for (std::size_t i = 0; i < vis.size(); ++i)
                if (vis.mask[i] == 1.0f) idx.push_back(std::uint32_t(i));
            const std::size_t take = std::min<std::size_t>(idx.size(), std::size_t(a.aam_samples));
            std::vector<Vec3<float>> pos;
            std::vector<std::uint32_t> picked;
            for (std::size_t s = 0; s < take; ++s) {
                const auto i = idx[s * idx.size() / take];
                picked.push_back(i);
                pos.push_back(m.cloud.positions[i]);
            }
            const double aam_z = aam_plane_input(m.meta, z);
            const auto d = aam_forward<float>(*m.aam, pos, float(aam_z));
            nlohmann::json rows = nlohmann::json::array();
            for (std::size_t s = 0; s < picked.size(); ++s) {
                const auto c = Eigen::Index(s);
                rows.push_back({{"index", picked[s]},
                                {"d_mu", {d.d_mu(0, c), d.d_mu(1, c), d.d_mu(2, c)}},
                                {"d_rot", {d.d_rot(0, c), d.d_rot(1, c), d.d_rot(2, c), d.d_rot(3, c)}},
                                {"d_scale", {d.d_scale(0, c), d.d_scale(1, c), d.d_scale(2, c)}}});
            }
            checks.push_back({{"plane_z", z}, {"aam_z", aam_z}, {"samples", rows}});
        }
        fixture["aam"] = checks;
    } else {
        fixture["aam"] = nullptr;
    }
    write_text(fs::path(a.out) / "parity.json", fixture.dump(2) + "\n");
    fs::copy_file(a.model, fs::path(a.out) / fixture["model"].get<std::string>(), fs::copy_options::overwrite_existing);
    std::cout << "wrote parity fixture to " << a.out << "\n";
    return ok;
}

// ---- serve ----

struct ServeArgs {
    std::string root = ".", host = "127.0.0.1", model;
    int port = 8080;
};

void add_serve(CLI::App& app, ServeArgs& a) {
    auto* c = app.add_subcommand("serve", "Serve a directory (the viewer build) and a model over HTTP");
    c->add_option("--root", a.root, "Directory to serve")->check(CLI::ExistingDirectory)->capture_default_str();
    c->add_option("--model", a.model, "Model file exposed as /model.clipgs")->check(CLI::ExistingFile);
    c->add_option("--host", a.host, "Bind address")->capture_default_str();
    c->add_option("--port", a.port, "Port")->check(CLI::Range(1, 65535))->capture_default_str();
}

int run_serve(const ServeArgs& a) {
    if (!a.model.empty()) load_model(a.model); // reject a bad file before serving it
    std::cout << "serving " << a.root << " on http://" << a.host << ":" << a.port << "/\n" << std::flush;
    std::string error;
    if (!serve_static(a.root, a.model, a.host, a.port, error)) throw IoError(error);
    return ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Clippable Gaussian splatting: data generation, training, rendering and evaluation"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (default: CLIPGS_THREADS or all cores)")->check(CLI::NonNegativeNumber);

    GenDataArgs gen;
    TrainArgs tr;
    RenderArgs rn;
    EvalArgs ev;
    AblateArgs ab;
    BenchArgs be;
    ParityArgs pa;
    ServeArgs sv;
    add_gen_data(app, gen);
    add_train(app, tr);
    add_render(app, rn);
    add_eval(app, ev);
    add_ablate(app, ab);
    add_bench(app, be);
    add_parity(app, pa);
    add_serve(app, sv);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }
    if (threads > 0) set_worker_count(threads);

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        if (cmd == "gen-data") return run_gen_data(gen);
        if (cmd == "train") return run_train(tr);
        if (cmd == "render") return run_render(rn);
        if (cmd == "eval") return run_eval(ev);
        if (cmd == "ablate") return run_ablate(ab);
        if (cmd == "bench") return run_bench(be);
        if (cmd == "parity") return run_parity(pa);
        if (cmd == "serve") return run_serve(sv);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return usage;
    } catch (const ModelError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return bad_model;
    } catch (const TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << "\n";
        return runtime_failure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return runtime_failure;
    }
    return usage;
}
