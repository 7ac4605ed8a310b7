#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clipgs/aam.hpp"
#include "clipgs/truncation.hpp"
#include "clipgs/types.hpp"

namespace clipgs {

inline constexpr std::array<char, 8> kModelMagic{'C', 'L', 'I', 'P', 'G', 'S', 'M', 'F'};
inline constexpr std::uint32_t kModelVersion = 1;
/// Magic, version and header length.
inline constexpr std::size_t kModelPreambleBytes = 16;

/// Failure to read a model file. `kind` tells the cases apart.
class ModelError : public std::runtime_error {
public:
    enum class Kind { io, format, version, payload_length, non_finite };
    ModelError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Everything besides the parameters that a renderer or viewer needs.
struct ModelMeta {
    TruncationMode truncation = TruncationMode::learnable;
    double epsilon = kDefaultEpsilon;
    Eigen::Vector3d plane_normal = Eigen::Vector3d::UnitZ();
    Eigen::Vector3d bounds_min = Eigen::Vector3d::Constant(-1);
    Eigen::Vector3d bounds_max = Eigen::Vector3d::Constant(1);
    Eigen::Vector3d view_center = Eigen::Vector3d::Zero();
    double view_radius = 4.0;
    double fov_y = 0.8;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    double plane_min = -1.2, plane_max = 1.2; // plane offsets seen in training; the AAM input is clamped to them
    nlohmann::json train_config = nlohmann::json::object();

    bool operator==(const ModelMeta&) const = default;
};

struct Model {
    GaussianCloud<float> cloud;
    std::optional<AamParams<float>> aam;
    ModelMeta meta;

    bool operator==(const Model&) const = default;
};

struct FieldSpec {
    const char* name;
    int components;
};

/// Per-primitive arrays in payload order.
inline constexpr std::array<FieldSpec, 6> kModelFields{{
    {"positions", 3},
    {"rotations", 4},
    {"log_scales", 3},
    {"color_logits", 3},
    {"opacity_logits", 1},
    {"trunc", 1},
}};

inline constexpr int kFloatsPerPrimitive = 15;

namespace detail {

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xffu));
}

inline void put_bytes(std::vector<char>& out, const char* p, std::size_t n) {
    const std::size_t at = out.size();
    out.resize(at + n);
    if (n) std::memcpy(out.data() + at, p, n);
}

inline void put_f32(std::vector<char>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(const char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(p[i])) << (8 * i);
    return v;
}

inline float get_f32(const char* p) { return std::bit_cast<float>(get_u32(p)); }

/// Pointers to the float storage of each field, in kModelFields order.
template <typename Cloud> auto field_spans(Cloud& c) {
    using F = std::conditional_t<std::is_const_v<Cloud>, const float, float>;
    const std::size_t n = c.size();
    return std::array<std::span<F>, 6>{
        std::span<F>(n ? c.positions[0].data() : nullptr, n * 3),
        std::span<F>(n ? c.rotations[0].data() : nullptr, n * 4),
        std::span<F>(n ? c.log_scales[0].data() : nullptr, n * 3),
        std::span<F>(n ? c.color_logits[0].data() : nullptr, n * 3),
        std::span<F>(c.opacity_logits.data(), n),
        std::span<F>(c.trunc.data(), n),
    };
}

inline nlohmann::json vec3_json(const Eigen::Vector3d& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline Eigen::Vector3d json_vec3(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 3) throw ModelError(ModelError::Kind::format, "model header: expected a 3-vector");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline nlohmann::json aam_descriptor(const AamParams<float>& aam) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < aam.trunk.size(); ++l)
        layers.push_back({{"name", "trunk" + std::to_string(l)}, {"in", aam.trunk[l].in()}, {"out", aam.trunk[l].out()},
                          {"activation", "relu"}});
    auto head = [&](const char* name, const DenseLayer<float>& h) {
        layers.push_back({{"name", name}, {"in", h.in()}, {"out", h.out()}, {"activation", "linear"}});
    };
    head("head_mu", aam.head_mu);
    head("head_rot", aam.head_rot);
    head("head_scale", aam.head_scale);
    return {{"pe_levels_pos", aam.pe_levels_pos},
            {"pe_levels_z", aam.pe_levels_z},
            {"pos_scale", double(aam.pos_scale)},
            {"layers", layers}};
}

} // namespace detail

/// Bytes of the AAM tensors in the payload.
inline std::size_t aam_payload_bytes(const AamParams<float>& aam) { return aam.parameter_count() * sizeof(float); }

inline std::size_t cloud_payload_bytes(std::size_t count) { return count * kFloatsPerPrimitive * sizeof(float); }

/// Serializes to the on-disk layout:
///   0   char[8]  magic "CLIPGSMF"
///   8   u32      version
///   12  u32      header length H (multiple of 4)
///   16  char[H]  JSON header, space padded
///   16+H         float32 payload: per-primitive fields in header order, then AAM tensors
/// All integers and floats are little-endian.
inline std::vector<char> serialize_model(const Model& model) {
    model.cloud.check();
    const std::size_t n = model.cloud.size();
    nlohmann::json header;
    header["count"] = n;
    nlohmann::json fields = nlohmann::json::array();
    for (const auto& f : kModelFields) fields.push_back({{"name", f.name}, {"components", f.components}});
    header["fields"] = fields;
    header["truncation"] = to_string(model.meta.truncation);
    header["epsilon"] = model.meta.epsilon;
    header["plane_normal"] = detail::vec3_json(model.meta.plane_normal);
    header["bounds"] = {{"min", detail::vec3_json(model.meta.bounds_min)}, {"max", detail::vec3_json(model.meta.bounds_max)}};
    header["view"] = {{"center", detail::vec3_json(model.meta.view_center)},
                      {"radius", model.meta.view_radius},
                      {"fov_y", model.meta.fov_y}};
    header["background"] = detail::vec3_json(model.meta.background);
    header["plane_range"] = {model.meta.plane_min, model.meta.plane_max};
    header["aam"] = model.aam ? detail::aam_descriptor(*model.aam) : nlohmann::json(nullptr);
    header["train_config"] = model.meta.train_config;
    const std::size_t payload = cloud_payload_bytes(n) + (model.aam ? aam_payload_bytes(*model.aam) : 0);
    header["payload_bytes"] = payload;

    std::string text = header.dump();
    text.append((4 - text.size() % 4) % 4, ' ');

    std::vector<char> out;
    out.reserve(kModelPreambleBytes + text.size() + payload);
    detail::put_bytes(out, kModelMagic.data(), kModelMagic.size());
    detail::put_u32(out, kModelVersion);
    detail::put_u32(out, std::uint32_t(text.size()));
    detail::put_bytes(out, text.data(), text.size());
    for (const auto& span : detail::field_spans(model.cloud))
        for (float v : span) detail::put_f32(out, v);
    if (model.aam) {
        model.aam->validate();
        model.aam->visit([&](const std::string&, std::span<const float> s) {
            for (float v : s) detail::put_f32(out, v);
        });
    }
    return out;
}

inline Model deserialize_model(std::span<const char> bytes) {
    using K = ModelError::Kind;
    if (bytes.size() < kModelPreambleBytes || !std::equal(kModelMagic.begin(), kModelMagic.end(), bytes.begin()))
        throw ModelError(K::format, "not a clipgs model file (bad magic)");
    const std::uint32_t version = detail::get_u32(bytes.data() + 8);
    if (version != kModelVersion)
        throw ModelError(K::version, "unsupported model version " + std::to_string(version) + " (expected " +
                                         std::to_string(kModelVersion) + ")");
    const std::size_t header_len = detail::get_u32(bytes.data() + 12);
    if (bytes.size() < kModelPreambleBytes + header_len) throw ModelError(K::payload_length, "model file truncated inside header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + kModelPreambleBytes, bytes.begin() + std::ptrdiff_t(kModelPreambleBytes + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(K::format, std::string("model header is not valid JSON: ") + e.what());
    }

    Model model;
    std::vector<std::pair<std::size_t, int>> order; // field index, components
    std::size_t count = 0;
    try {
        count = header.at("count").get<std::size_t>();
        for (const auto& f : header.at("fields")) {
            const auto name = f.at("name").get<std::string>();
            const int comps = f.at("components").get<int>();
            std::size_t k = 0;
            while (k < kModelFields.size() && name != kModelFields[k].name) ++k;
            if (k == kModelFields.size()) throw ModelError(K::format, "model header: unknown field '" + name + "'");
            if (comps != kModelFields[k].components)
                throw ModelError(K::format, "model header: field '" + name + "' has the wrong component count");
            for (const auto& o : order)
                if (o.first == k) throw ModelError(K::format, "model header: duplicate field '" + name + "'");
            order.emplace_back(k, comps);
        }
        if (order.size() != kModelFields.size()) throw ModelError(K::format, "model header: missing fields");
        model.meta.truncation = truncation_mode_from_string(header.at("truncation").get<std::string>());
        model.meta.epsilon = header.value("epsilon", kDefaultEpsilon);
        if (header.contains("plane_normal")) model.meta.plane_normal = detail::json_vec3(header["plane_normal"]);
        if (header.contains("bounds")) {
            model.meta.bounds_min = detail::json_vec3(header["bounds"].at("min"));
            model.meta.bounds_max = detail::json_vec3(header["bounds"].at("max"));
        }
        if (header.contains("view")) {
            const auto& v = header["view"];
            model.meta.view_center = detail::json_vec3(v.at("center"));
            model.meta.view_radius = v.at("radius").get<double>();
            model.meta.fov_y = v.at("fov_y").get<double>();
        }
        if (header.contains("background")) model.meta.background = detail::json_vec3(header["background"]);
        if (header.contains("plane_range")) {
            model.meta.plane_min = header["plane_range"].at(0).get<double>();
            model.meta.plane_max = header["plane_range"].at(1).get<double>();
        }
        if (header.contains("train_config")) model.meta.train_config = header["train_config"];
        const auto& aj = header.contains("aam") ? header["aam"] : nlohmann::json(nullptr);
        if (!aj.is_null()) {
            AamParams<float> aam;
            aam.pe_levels_pos = aj.at("pe_levels_pos").get<int>();
            aam.pe_levels_z = aj.at("pe_levels_z").get<int>();
            aam.pos_scale = float(aj.at("pos_scale").get<double>());
            const auto& layers = aj.at("layers");
            if (layers.size() < 3) throw ModelError(K::format, "model header: AAM needs three heads");
            for (std::size_t l = 0; l + 3 < layers.size(); ++l)
                aam.trunk.emplace_back(layers[l].at("in").get<int>(), layers[l].at("out").get<int>());
            const std::size_t h = layers.size() - 3;
            aam.head_mu = DenseLayer<float>(layers[h].at("in").get<int>(), layers[h].at("out").get<int>());
            aam.head_rot = DenseLayer<float>(layers[h + 1].at("in").get<int>(), layers[h + 1].at("out").get<int>());
            aam.head_scale = DenseLayer<float>(layers[h + 2].at("in").get<int>(), layers[h + 2].at("out").get<int>());
            model.aam = std::move(aam);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(K::format, std::string("model header: ") + e.what());
    } catch (const InvalidParameter& e) {
        throw ModelError(K::format, std::string("model header: ") + e.what());
    }

    const std::size_t expected = cloud_payload_bytes(count) + (model.aam ? aam_payload_bytes(*model.aam) : 0);
    const std::size_t actual = bytes.size() - kModelPreambleBytes - header_len;
    if (actual != expected)
        throw ModelError(K::payload_length, "model payload is " + std::to_string(actual) + " bytes, header declares " +
                                                std::to_string(expected));

    model.cloud.resize(count);
    const char* p = bytes.data() + kModelPreambleBytes + header_len;
    auto spans = detail::field_spans(model.cloud);
    for (const auto& [k, comps] : order) {
        for (float& v : spans[k]) {
            v = detail::get_f32(p);
            p += 4;
        }
    }
    bool finite = true;
    for (const auto& s : spans)
        for (float v : s) finite = finite && std::isfinite(v);
    if (model.aam) {
        model.aam->visit([&](const std::string&, std::span<float> s) {
            for (float& v : s) {
                v = detail::get_f32(p);
                p += 4;
                finite = finite && std::isfinite(v);
            }
        });
    }
    if (!finite) throw ModelError(K::non_finite, "model contains non-finite parameters");
    if (model.aam) {
        try {
            model.aam->validate();
        } catch (const InvalidParameter& e) {
            throw ModelError(K::format, std::string("model header: ") + e.what());
        }
    }
    return model;
}

/// Writes the model and returns the file size in bytes.
inline std::size_t save_model(const Model& model, const std::filesystem::path& path) {
    const auto bytes = serialize_model(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ModelError(ModelError::Kind::io, "cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.close();
    if (!out) throw ModelError(ModelError::Kind::io, "failed writing '" + path.string() + "'");
    return bytes.size();
}

inline Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError(ModelError::Kind::io, "cannot open model '" + path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return deserialize_model(bytes);
    } catch (const ModelError& e) {
        throw ModelError(e.kind(), path.string() + ": " + e.what());
    }
}

} // namespace clipgs
