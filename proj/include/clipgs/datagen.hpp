#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipgs/image_io.hpp"
#include "clipgs/parallel.hpp"
#include "clipgs/random.hpp"
#include "clipgs/types.hpp"

namespace clipgs {

/// Voxel grid of densities and colors over an axis-aligned box. Voxel (i, j, k)
/// is centered at bmin + (i + ½, j + ½, k + ½)·spacing; x varies fastest.
struct Volume {
    std::array<int, 3> dims{0, 0, 0};
    std::vector<double> density;
    std::vector<double> color; // RGB per voxel
    Eigen::Vector3d bmin = Eigen::Vector3d::Constant(-1);
    Eigen::Vector3d bmax = Eigen::Vector3d::Constant(1);

    Volume() = default;
    Volume(std::array<int, 3> d, Eigen::Vector3d lo, Eigen::Vector3d hi) : dims(d), bmin(lo), bmax(hi) {
        check_dims();
        density.assign(voxel_count(), 0.0);
        color.assign(voxel_count() * 3, 0.0);
    }

    std::size_t voxel_count() const { return std::size_t(dims[0]) * dims[1] * dims[2]; }
    std::size_t index(int i, int j, int k) const { return (std::size_t(k) * dims[1] + j) * dims[0] + i; }
    Eigen::Vector3d spacing() const {
        return (bmax - bmin).cwiseQuotient(Eigen::Vector3d(dims[0], dims[1], dims[2]));
    }
    Eigen::Vector3d voxel_center(int i, int j, int k) const {
        return bmin + (Eigen::Vector3d(i, j, k) + Eigen::Vector3d::Constant(0.5)).cwiseProduct(spacing());
    }
    Eigen::Vector3d center() const { return 0.5 * (bmin + bmax); }
    double voxel_volume() const { return spacing().prod(); }

    void check() const {
        check_dims();
        if (density.size() != voxel_count() || color.size() != voxel_count() * 3)
            throw InvalidParameter("Volume: voxel arrays do not match dims");
        for (double d : density)
            if (!std::isfinite(d) || d < 0) throw InvalidParameter("Volume: densities must be finite and non-negative");
    }

    bool contains(const Eigen::Vector3d& p) const {
        return (p.array() >= bmin.array()).all() && (p.array() <= bmax.array()).all();
    }

    /// Trilinear density and color at p, clamped to the outermost voxel centers. Zero outside the box.
    void sample(const Eigen::Vector3d& p, double& sigma, Eigen::Vector3d& rgb) const {
        sigma = 0;
        rgb.setZero();
        if (!contains(p)) return;
        const Eigen::Vector3d u = (p - bmin).cwiseQuotient(spacing()) - Eigen::Vector3d::Constant(0.5);
        int i0[3], i1[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
            const double fl = std::floor(u[a]);
            f[a] = u[a] - fl;
            i0[a] = std::clamp(int(fl), 0, dims[std::size_t(a)] - 1);
            i1[a] = std::clamp(int(fl) + 1, 0, dims[std::size_t(a)] - 1);
        }
        for (int c = 0; c < 8; ++c) {
            const int i = (c & 1) ? i1[0] : i0[0];
            const int j = (c & 2) ? i1[1] : i0[1];
            const int k = (c & 4) ? i1[2] : i0[2];
            const double w = ((c & 1) ? f[0] : 1 - f[0]) * ((c & 2) ? f[1] : 1 - f[1]) * ((c & 4) ? f[2] : 1 - f[2]);
            if (w == 0) continue;
            const std::size_t v = index(i, j, k);
            sigma += w * density[v];
            rgb += w * Eigen::Vector3d(color[v * 3], color[v * 3 + 1], color[v * 3 + 2]);
        }
    }

    bool operator==(const Volume&) const = default;

private:
    void check_dims() const {
        if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) throw InvalidParameter("Volume: dims must be positive");
        if (!((bmax - bmin).array() > 0).all()) throw InvalidParameter("Volume: empty bounds");
    }
};

/// Shell boundaries (fraction of the outer radius), densities and colors of the nested-shells preset, inside out.
struct ShellSpec {
    double outer;
    double density;
    Eigen::Vector3d color;
};

inline std::vector<ShellSpec> nested_shell_specs() {
    return {
        {0.35, 40.0, {0.20, 0.40, 0.95}},
        {0.65, 25.0, {0.30, 0.85, 0.35}},
        {1.00, 12.0, {0.95, 0.55, 0.35}},
    };
}

struct BlobSpec {
    Eigen::Vector3d center;
    double sigma;
    double amplitude;
    Eigen::Vector3d color;
};

/// Blob parameters of the blobs preset; a pure function of the seed.
inline std::vector<BlobSpec> blob_specs(std::uint64_t seed) {
    Rng rng(seed);
    const int count = 4 + int(rng.below(4));
    std::vector<BlobSpec> blobs;
    for (int b = 0; b < count; ++b) {
        BlobSpec s;
        s.center = Eigen::Vector3d(rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45));
        s.sigma = rng.uniform(0.10, 0.22);
        s.amplitude = rng.uniform(8.0, 25.0);
        s.color = Eigen::Vector3d(rng.uniform(0.15, 1.0), rng.uniform(0.15, 1.0), rng.uniform(0.15, 1.0));
        blobs.push_back(s);
    }
    return blobs;
}

inline const std::vector<std::string>& volume_presets() {
    static const std::vector<std::string> names{"nested-shells", "blobs", "slab-grid"};
    return names;
}

/// Procedural volume on [-1, 1]³. Deterministic in (preset, dims, seed).
inline Volume make_volume(const std::string& preset, std::array<int, 3> dims, std::uint64_t seed) {
    Volume v(dims, Eigen::Vector3d::Constant(-1), Eigen::Vector3d::Constant(1));
    auto fill = [&](auto&& fn) {
        for (int k = 0; k < dims[2]; ++k)
            for (int j = 0; j < dims[1]; ++j)
                for (int i = 0; i < dims[0]; ++i) {
                    double d = 0;
                    Eigen::Vector3d c = Eigen::Vector3d::Zero();
                    fn(v.voxel_center(i, j, k), d, c);
                    const std::size_t idx = v.index(i, j, k);
                    v.density[idx] = d;
                    for (int a = 0; a < 3; ++a) v.color[idx * 3 + std::size_t(a)] = c[a];
                }
    };

    if (preset == "nested-shells") {
        const auto shells = nested_shell_specs();
        const double radius = 0.9;
        fill([&](const Eigen::Vector3d& p, double& d, Eigen::Vector3d& c) {
            const double r = p.norm() / radius;
            for (const auto& s : shells) {
                if (r < s.outer) {
                    d = s.density;
                    c = s.color;
                    return;
                }
            }
        });
    } else if (preset == "blobs") {
        const auto blobs = blob_specs(seed);
        fill([&](const Eigen::Vector3d& p, double& d, Eigen::Vector3d& c) {
            for (const auto& b : blobs) {
                const double g = b.amplitude * std::exp(-(p - b.center).squaredNorm() / (2 * b.sigma * b.sigma));
                d += g;
                c += g * b.color;
            }
            if (d > 0) c /= d;
        });
    } else if (preset == "slab-grid") {
        const double half = 0.8, period = 0.4, thickness = 0.08;
        fill([&](const Eigen::Vector3d& p, double& d, Eigen::Vector3d& c) {
            if ((p.array().abs() >= half).any()) return;
            bool any = false;
            c = Eigen::Vector3d::Constant(0.25);
            for (int a = 0; a < 3; ++a) {
                const double t = (p[a] + half) / period;
                if (t - std::floor(t) < thickness / period) {
                    any = true;
                    c[a] = 0.95;
                }
            }
            if (any) d = 30.0;
            else c.setZero();
        });
    } else {
        throw InvalidParameter("make_volume: unknown preset '" + preset + "'");
    }
    return v;
}

struct RaymarchSample {
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double transmittance = 1;
    int contributing = 0; // samples with nonzero density that passed the clip test
};

/// Front-to-back emission–absorption along one ray: `steps` midpoint samples over the segment inside the
/// volume box, α_k = 1 − exp(−σ_k Δt). With a plane, samples with p·n ≥ offset carry no density.
inline RaymarchSample raymarch_ray(const Volume& vol, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                                   const std::optional<ClipPlane>& plane, int steps) {
    RaymarchSample out;
    double t0 = 0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (dir[a] == 0) {
            if (origin[a] < vol.bmin[a] || origin[a] > vol.bmax[a]) return out;
            continue;
        }
        double ta = (vol.bmin[a] - origin[a]) / dir[a];
        double tb = (vol.bmax[a] - origin[a]) / dir[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (!(t1 > t0)) return out;
    const double dt = (t1 - t0) / steps;
    for (int s = 0; s < steps; ++s) {
        const Eigen::Vector3d p = origin + (t0 + (s + 0.5) * dt) * dir;
        if (plane && p.dot(plane->normal) >= plane->offset) continue;
        double sigma;
        Eigen::Vector3d rgb;
        vol.sample(p, sigma, rgb);
        if (sigma <= 0) continue;
        const double alpha = 1.0 - std::exp(-sigma * dt);
        out.color += out.transmittance * alpha * rgb;
        out.transmittance *= 1.0 - alpha;
        ++out.contributing;
    }
    return out;
}

/// World-space unit direction of the ray through pixel (x, y).
inline Eigen::Vector3d pixel_ray(const Camera& cam, double x, double y) {
    const Eigen::Vector3d d((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
    return (cam.rotation.transpose() * d).normalized();
}

/// Renders the volume as seen by `cam`. Without a plane nothing is clipped.
inline Image<double> raymarch_render(const Volume& vol, const Camera& cam, const std::optional<ClipPlane>& plane, int steps,
                                     const Eigen::Vector3d& background = Eigen::Vector3d::Zero(), int workers = 0) {
    if (steps < 2) throw InvalidParameter("raymarch_render: steps must be at least 2");
    cam.check();
    if (plane) plane->check();
    Image<double> img(cam.width, cam.height);
    const Eigen::Vector3d origin = cam.center();
    parallel_for(std::size_t(cam.height), [&](std::size_t row, int) {
        const int y = int(row);
        for (int x = 0; x < cam.width; ++x) {
            const auto s = raymarch_ray(vol, origin, pixel_ray(cam, x, y), plane, steps);
            const Eigen::Vector3d c = s.color + s.transmittance * background;
            for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = c[ch];
        }
    }, workers);
    return img;
}

/// 8-bit quantization, matching what a PNG round trip produces.
inline Image<float> quantize(const Image<double>& img) {
    Image<float> out(img.width, img.height);
    for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = float(to_byte(img.data[i])) / 255.0f;
    return out;
}

struct FrameRecord {
    std::string image; // relative to the dataset root
    std::string split; // "train" or "test"
    int index = 0;     // within the split
    Camera camera;
    double plane_z = 0;
    double azimuth = 0;
    double elevation = 0;

    bool operator==(const FrameRecord&) const = default;
};

struct Manifest {
    int width = 128, height = 128;
    double fov_y = 0.8;
    double radius = 4.0;
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    Eigen::Vector3d plane_normal = Eigen::Vector3d::UnitZ();
    double z_min = -1.2, z_max = 1.2;
    Eigen::Vector3d bounds_min = Eigen::Vector3d::Constant(-1);
    Eigen::Vector3d bounds_max = Eigen::Vector3d::Constant(1);
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    std::string preset;
    std::uint64_t seed = 0;
    int steps = 0;
    std::vector<FrameRecord> frames;

    std::vector<std::size_t> split_indices(const std::string& split) const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < frames.size(); ++i)
            if (frames[i].split == split) idx.push_back(i);
        return idx;
    }

    bool operator==(const Manifest&) const = default;
};

/// Manifest plus decoded images, one per frame.
struct Dataset {
    Manifest manifest;
    std::vector<Image<float>> images;

    ClipPlane plane(std::size_t frame) const { return {manifest.plane_normal, manifest.frames[frame].plane_z}; }
};

namespace detail {
inline nlohmann::json vec_json(const Eigen::Vector3d& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }
inline Eigen::Vector3d json_vec(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 3) throw IoError("manifest: expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}
} // namespace detail

inline nlohmann::json manifest_to_json(const Manifest& m) {
    nlohmann::json j;
    j["format"] = "clipgs-dataset";
    j["version"] = 1;
    j["preset"] = m.preset;
    j["seed"] = m.seed;
    j["width"] = m.width;
    j["height"] = m.height;
    j["fov_y"] = m.fov_y;
    j["radius"] = m.radius;
    j["center"] = detail::vec_json(m.center);
    j["plane_normal"] = detail::vec_json(m.plane_normal);
    j["z_range"] = {m.z_min, m.z_max};
    j["bounds"] = {{"min", detail::vec_json(m.bounds_min)}, {"max", detail::vec_json(m.bounds_max)}};
    j["background"] = detail::vec_json(m.background);
    j["raymarch_steps"] = m.steps;
    auto& frames = j["frames"] = nlohmann::json::array();
    for (const auto& f : m.frames) {
        nlohmann::json w2c = nlohmann::json::array();
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) w2c.push_back(f.camera.rotation(r, c));
            w2c.push_back(f.camera.translation[r]);
        }
        frames.push_back({{"image", f.image},
                          {"split", f.split},
                          {"index", f.index},
                          {"plane_z", f.plane_z},
                          {"azimuth", f.azimuth},
                          {"elevation", f.elevation},
                          {"intrinsics",
                           {{"width", f.camera.width},
                            {"height", f.camera.height},
                            {"fx", f.camera.fx},
                            {"fy", f.camera.fy},
                            {"cx", f.camera.cx},
                            {"cy", f.camera.cy}}},
                          {"world_to_camera", w2c}});
    }
    return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "clipgs-dataset") throw IoError("manifest: unknown format");
        if (j.at("version").get<int>() != 1) throw IoError("manifest: unsupported version");
        Manifest m;
        m.preset = j.at("preset").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.width = j.at("width").get<int>();
        m.height = j.at("height").get<int>();
        m.fov_y = j.at("fov_y").get<double>();
        m.radius = j.at("radius").get<double>();
        m.center = detail::json_vec(j.at("center"));
        m.plane_normal = detail::json_vec(j.at("plane_normal"));
        m.z_min = j.at("z_range").at(0).get<double>();
        m.z_max = j.at("z_range").at(1).get<double>();
        m.bounds_min = detail::json_vec(j.at("bounds").at("min"));
        m.bounds_max = detail::json_vec(j.at("bounds").at("max"));
        m.background = detail::json_vec(j.at("background"));
        m.steps = j.at("raymarch_steps").get<int>();
        for (const auto& fj : j.at("frames")) {
            FrameRecord f;
            f.image = fj.at("image").get<std::string>();
            f.split = fj.at("split").get<std::string>();
            f.index = fj.at("index").get<int>();
            f.plane_z = fj.at("plane_z").get<double>();
            f.azimuth = fj.at("azimuth").get<double>();
            f.elevation = fj.at("elevation").get<double>();
            const auto& in = fj.at("intrinsics");
            f.camera.width = in.at("width").get<int>();
            f.camera.height = in.at("height").get<int>();
            f.camera.fx = in.at("fx").get<double>();
            f.camera.fy = in.at("fy").get<double>();
            f.camera.cx = in.at("cx").get<double>();
            f.camera.cy = in.at("cy").get<double>();
            const auto& w2c = fj.at("world_to_camera");
            if (w2c.size() != 12) throw IoError("manifest: world_to_camera must have 12 entries");
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c) f.camera.rotation(r, c) = w2c[std::size_t(r * 4 + c)].get<double>();
                f.camera.translation[r] = w2c[std::size_t(r * 4 + 3)].get<double>();
            }
            f.camera.check();
            m.frames.push_back(std::move(f));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("manifest: ") + e.what());
    }
}

struct DatasetOptions {
    int n_train = 120;
    int n_test = 20;
    int size = 128;
    std::optional<double> z_min, z_max; // default: volume z extent widened by 10% on each side
    std::uint64_t seed = 0;
    double radius = 4.0;
    double fov_y = 0.8;
    int steps = 192;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
};

/// Samples cameras uniformly on the view sphere and plane offsets uniformly in the z range, then ray marches
/// every frame. Train frames come first, then test frames; images are 8-bit quantized.
inline Dataset synthesize_dataset(const Volume& vol, const std::string& preset, const DatasetOptions& opt) {
    vol.check();
    if (opt.n_train < 0 || opt.n_test < 0) throw InvalidParameter("generate_dataset: negative frame count");
    if (opt.size <= 0) throw InvalidParameter("generate_dataset: image size must be positive");
    Dataset ds;
    Manifest& m = ds.manifest;
    const double margin = 0.1 * (vol.bmax.z() - vol.bmin.z());
    m.width = m.height = opt.size;
    m.fov_y = opt.fov_y;
    m.radius = opt.radius;
    m.center = vol.center();
    m.z_min = opt.z_min.value_or(vol.bmin.z() - margin);
    m.z_max = opt.z_max.value_or(vol.bmax.z() + margin);
    if (!(m.z_max >= m.z_min)) throw InvalidParameter("generate_dataset: z range is empty");
    m.bounds_min = vol.bmin;
    m.bounds_max = vol.bmax;
    m.background = opt.background;
    m.preset = preset;
    m.seed = opt.seed;
    m.steps = opt.steps;

    Rng rng(opt.seed);
    for (int i = 0; i < opt.n_train + opt.n_test; ++i) {
        FrameRecord f;
        f.split = i < opt.n_train ? "train" : "test";
        f.index = i < opt.n_train ? i : i - opt.n_train;
        f.image = "images/" + f.split + "_" + std::to_string(f.index) + ".png";
        const double uz = rng.uniform(-1.0, 1.0);
        f.azimuth = rng.uniform(0.0, 2.0 * std::numbers::pi);
        f.elevation = std::asin(uz);
        f.plane_z = rng.uniform(m.z_min, m.z_max);
        f.camera = orbit_camera(f.azimuth, f.elevation, opt.radius, m.center, opt.fov_y, opt.size, opt.size);
        m.frames.push_back(f);
    }

    ds.images.resize(m.frames.size());
    parallel_for(m.frames.size(), [&](std::size_t i, int) {
        const auto& f = m.frames[i];
        ds.images[i] =
            quantize(raymarch_render(vol, f.camera, ClipPlane{m.plane_normal, f.plane_z}, opt.steps, opt.background, 1));
    });
    return ds;
}

/// Writes manifest.json and images/{split}_{index}.png under `root`.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
    std::error_code ec;
    std::filesystem::create_directories(root / "images", ec);
    if (ec) throw IoError("cannot create '" + (root / "images").string() + "': " + ec.message());
    for (std::size_t i = 0; i < ds.images.size(); ++i) write_png(root / ds.manifest.frames[i].image, ds.images[i]);
    const auto path = root / "manifest.json";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << manifest_to_json(ds.manifest).dump(2) << '\n';
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline Dataset generate_dataset(const Volume& vol, const std::string& preset, const DatasetOptions& opt,
                                const std::filesystem::path& root) {
    Dataset ds = synthesize_dataset(vol, preset, opt);
    write_dataset(ds, root);
    return ds;
}

inline Manifest load_manifest(const std::filesystem::path& root) {
    const auto path = root / "manifest.json";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest '" + path.string() + "': " + e.what());
    }
    return manifest_from_json(j);
}

inline Dataset load_dataset(const std::filesystem::path& root) {
    Dataset ds;
    ds.manifest = load_manifest(root);
    for (const auto& f : ds.manifest.frames) {
        const auto path = root / f.image;
        if (!std::filesystem::exists(path)) throw IoError("missing image '" + path.string() + "'");
        ds.images.push_back(read_png<float>(path));
        if (ds.images.back().width != f.camera.width || ds.images.back().height != f.camera.height)
            throw IoError("image '" + path.string() + "' does not match its camera");
    }
    return ds;
}

} // namespace clipgs
