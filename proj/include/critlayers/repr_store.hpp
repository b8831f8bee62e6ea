#pragma once

// Representation bundles: per-layer N x d last-token activation matrices plus a manifest.
//
// On disk a bundle is a directory:
//
//   manifest.json            UTF-8 manifest (see Manifest)
//   layers/layer_XXX.bin     "RDBM" | u32 version=1 | u64 rows | u64 cols | rows*cols f32, all LE
//
// Storage is f32; every analysis promotes to double via to_eigen().

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "error.hpp"
#include "fsutil.hpp"

namespace critlayers {

namespace fs = std::filesystem;

inline constexpr int kManifestSchemaVersion = 1;
inline constexpr std::uint32_t kLayerFileVersion = 1;
inline constexpr std::size_t kLayerHeaderSize = 24;
inline constexpr char kLayerMagic[4] = {'R', 'D', 'B', 'M'};

struct Manifest {
    int schema_version = kManifestSchemaVersion;
    std::string model_id;
    std::string dataset_id;
    std::size_t num_layers = 0;
    std::size_t num_samples = 0;
    std::vector<std::size_t> hidden_sizes;
    std::string token_position = "last";
    std::string element_type = "f32";
    std::string notes;

    bool operator==(const Manifest &) const = default;
};

struct ReprMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data; // row-major

    ReprMatrix() = default;
    ReprMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
    ReprMatrix(std::size_t r, std::size_t c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {}

    float & operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    // bitwise comparison, so that round-trip checks are exact even for signed zeros
    bool operator==(const ReprMatrix & other) const {
        return rows == other.rows && cols == other.cols && data.size() == other.data.size() &&
               (data.empty() || std::memcmp(data.data(), other.data.data(), data.size() * sizeof(float)) == 0);
    }
};

struct ReprBundle {
    Manifest manifest;
    std::vector<ReprMatrix> layers;

    std::size_t num_layers() const { return layers.size(); }
    std::size_t num_samples() const { return manifest.num_samples; }

    bool operator==(const ReprBundle &) const = default;
};

inline Eigen::MatrixXd to_eigen(const ReprMatrix & m) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols));
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<double>(m(r, c));
        }
    }
    return out;
}

inline ReprMatrix from_eigen(const Eigen::MatrixXd & m) {
    ReprMatrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(m(r, c));
        }
    }
    return out;
}

inline void validate(const ReprMatrix & m, const std::string & what = "matrix") {
    require(m.data.size() == m.rows * m.cols, ErrorCode::dimension_mismatch,
            what + ": declared " + std::to_string(m.rows) + "x" + std::to_string(m.cols) + " but holds " +
                std::to_string(m.data.size()) + " values");
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        require(std::isfinite(m.data[i]), ErrorCode::invariant_violation,
                what + ": non-finite value at row " + std::to_string(i / std::max<std::size_t>(m.cols, 1)) +
                    ", col " + std::to_string(i % std::max<std::size_t>(m.cols, 1)));
    }
}

inline void validate(const Manifest & m) {
    require(m.schema_version == kManifestSchemaVersion, ErrorCode::unsupported_version,
            "manifest schema_version " + std::to_string(m.schema_version));
    require(m.num_layers >= 1, ErrorCode::invariant_violation, "manifest num_layers must be >= 1");
    require(m.num_samples >= 2, ErrorCode::invariant_violation,
            "manifest num_samples must be >= 2 (got " + std::to_string(m.num_samples) + ")");
    require(m.hidden_sizes.size() == m.num_layers, ErrorCode::invariant_violation,
            "manifest hidden_sizes has " + std::to_string(m.hidden_sizes.size()) + " entries, expected " +
                std::to_string(m.num_layers));
    for (std::size_t l = 0; l < m.hidden_sizes.size(); ++l) {
        require(m.hidden_sizes[l] >= 1, ErrorCode::invariant_violation,
                "manifest hidden_sizes[" + std::to_string(l) + "] must be >= 1");
    }
    require(m.token_position == "last", ErrorCode::invariant_violation,
            "unsupported token_position '" + m.token_position + "'");
    require(m.element_type == "f32", ErrorCode::invariant_violation,
            "unsupported element_type '" + m.element_type + "'");
}

inline void validate(const ReprBundle & b) {
    validate(b.manifest);
    require(b.layers.size() == b.manifest.num_layers, ErrorCode::invariant_violation,
            "bundle has " + std::to_string(b.layers.size()) + " layers, manifest declares " +
                std::to_string(b.manifest.num_layers));
    for (std::size_t l = 0; l < b.layers.size(); ++l) {
        const auto name = "layer " + std::to_string(l);
        validate(b.layers[l], name);
        require(b.layers[l].rows == b.manifest.num_samples, ErrorCode::dimension_mismatch,
                name + ": rows " + std::to_string(b.layers[l].rows) + " != num_samples " +
                    std::to_string(b.manifest.num_samples));
        require(b.layers[l].cols == b.manifest.hidden_sizes[l], ErrorCode::dimension_mismatch,
                name + ": cols " + std::to_string(b.layers[l].cols) + " != hidden_sizes " +
                    std::to_string(b.manifest.hidden_sizes[l]));
    }
}

/// Builds a bundle with a manifest derived from the layer shapes.
inline ReprBundle make_bundle(std::vector<ReprMatrix> layers, std::string model_id, std::string dataset_id,
                              std::string notes = {}) {
    ReprBundle b;
    b.manifest.model_id = std::move(model_id);
    b.manifest.dataset_id = std::move(dataset_id);
    b.manifest.notes = std::move(notes);
    b.manifest.num_layers = layers.size();
    b.manifest.num_samples = layers.empty() ? 0 : layers.front().rows;
    for (const auto & l : layers) {
        b.manifest.hidden_sizes.push_back(l.cols);
    }
    b.layers = std::move(layers);
    validate(b);
    return b;
}

inline std::string layer_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "layer_%03zu.bin", index);
    return buf;
}

inline nlohmann::ordered_json manifest_to_json(const Manifest & m) {
    nlohmann::ordered_json j;
    j["schema_version"] = m.schema_version;
    j["model_id"] = m.model_id;
    j["dataset_id"] = m.dataset_id;
    j["num_layers"] = m.num_layers;
    j["num_samples"] = m.num_samples;
    j["hidden_sizes"] = m.hidden_sizes;
    j["token_position"] = m.token_position;
    j["element_type"] = m.element_type;
    j["notes"] = m.notes;
    return j;
}

inline Manifest manifest_from_json(const nlohmann::json & j) {
    Manifest m;
    try {
        m.schema_version = j.at("schema_version").get<int>();
        m.model_id = j.at("model_id").get<std::string>();
        m.dataset_id = j.at("dataset_id").get<std::string>();
        m.num_layers = j.at("num_layers").get<std::size_t>();
        m.num_samples = j.at("num_samples").get<std::size_t>();
        m.hidden_sizes = j.at("hidden_sizes").get<std::vector<std::size_t>>();
        m.token_position = j.at("token_position").get<std::string>();
        m.element_type = j.at("element_type").get<std::string>();
        m.notes = j.value("notes", std::string{});
    } catch (const nlohmann::json::exception & e) {
        throw Error(ErrorCode::parse, std::string("manifest: ") + e.what());
    }
    return m;
}

inline std::string encode_layer(const ReprMatrix & m) {
    std::string out;
    out.reserve(kLayerHeaderSize + m.data.size() * 4);
    out.append(kLayerMagic, 4);
    fsutil::put_le<std::uint32_t>(out, kLayerFileVersion);
    fsutil::put_le<std::uint64_t>(out, m.rows);
    fsutil::put_le<std::uint64_t>(out, m.cols);
    for (float v : m.data) {
        fsutil::put_le<float>(out, v);
    }
    return out;
}

/// Decodes one layer file. Each malformation maps to its own error code.
inline ReprMatrix decode_layer(std::string_view bytes, const std::string & what = "layer file") {
    require(bytes.size() >= kLayerHeaderSize, ErrorCode::truncated_payload,
            what + ": " + std::to_string(bytes.size()) + " bytes is shorter than the 24-byte header");
    require(std::memcmp(bytes.data(), kLayerMagic, 4) == 0, ErrorCode::bad_magic, what + ": bad magic bytes");
    const auto version = fsutil::get_le<std::uint32_t>(bytes.data() + 4);
    require(version == kLayerFileVersion, ErrorCode::unsupported_version,
            what + ": unsupported version " + std::to_string(version));
    const auto rows = fsutil::get_le<std::uint64_t>(bytes.data() + 8);
    const auto cols = fsutil::get_le<std::uint64_t>(bytes.data() + 16);
    // guard the multiplication before comparing byte counts
    require(cols == 0 || rows <= (std::uint64_t{1} << 60) / cols, ErrorCode::dimension_mismatch,
            what + ": implausible dimensions");
    const std::uint64_t expected = kLayerHeaderSize + rows * cols * 4;
    require(bytes.size() == expected, ErrorCode::truncated_payload,
            what + ": header declares " + std::to_string(rows) + "x" + std::to_string(cols) + " (" +
                std::to_string(expected) + " bytes) but file has " + std::to_string(bytes.size()) + " bytes");
    ReprMatrix m(rows, cols);
    const char * p = bytes.data() + kLayerHeaderSize;
    for (std::size_t i = 0; i < m.data.size(); ++i, p += 4) {
        m.data[i] = fsutil::get_le<float>(p);
    }
    return m;
}

/// Content hash over manifest identity and every layer's encoded bytes.
inline std::string bundle_hash(const ReprBundle & b) {
    fsutil::Fnv1a h;
    h.update(b.manifest.model_id);
    h.update(std::string_view("\0", 1));
    h.update(b.manifest.dataset_id);
    for (const auto & layer : b.layers) {
        h.update(encode_layer(layer));
    }
    return h.hex();
}

inline void write_bundle(const ReprBundle & bundle, const fs::path & destination) {
    validate(bundle);
    std::vector<std::string> encoded;
    encoded.reserve(bundle.layers.size());
    for (const auto & layer : bundle.layers) {
        encoded.push_back(encode_layer(layer));
    }
    std::error_code ec;
    fs::create_directories(destination / "layers", ec);
    require(!ec, ErrorCode::io, "cannot create " + (destination / "layers").string() + ": " + ec.message());
    for (std::size_t l = 0; l < encoded.size(); ++l) {
        fsutil::atomic_write(destination / "layers" / layer_file_name(l), encoded[l]);
    }
    fsutil::atomic_write(destination / "manifest.json", manifest_to_json(bundle.manifest).dump(2) + "\n");
}

namespace detail {

inline bool parse_layer_index(const std::string & name, std::size_t & index) {
    // layer_<digits>.bin
    constexpr std::string_view prefix = "layer_";
    constexpr std::string_view suffix = ".bin";
    if (name.size() <= prefix.size() + suffix.size() || name.compare(0, prefix.size(), prefix) != 0 ||
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
        return false;
    }
    const char * first = name.data() + prefix.size();
    const char * last = name.data() + name.size() - suffix.size();
    auto [ptr, ec] = std::from_chars(first, last, index);
    return ec == std::errc() && ptr == last;
}

} // namespace detail

inline ReprBundle read_bundle(const fs::path & source) {
    const auto manifest_path = source / "manifest.json";
    require(fs::exists(manifest_path), ErrorCode::io, "missing manifest " + manifest_path.string());
    nlohmann::json mj;
    try {
        mj = nlohmann::json::parse(fsutil::read_file(manifest_path));
    } catch (const nlohmann::json::parse_error & e) {
        throw Error(ErrorCode::parse, manifest_path.string() + ": " + e.what());
    }
    ReprBundle bundle;
    bundle.manifest = manifest_from_json(mj);
    validate(bundle.manifest);

    const auto layer_dir = source / "layers";
    std::map<std::size_t, fs::path> found;
    if (fs::is_directory(layer_dir)) {
        for (const auto & entry : fs::directory_iterator(layer_dir)) {
            std::size_t index = 0;
            if (entry.is_regular_file() && detail::parse_layer_index(entry.path().filename().string(), index)) {
                require(found.emplace(index, entry.path()).second, ErrorCode::invariant_violation,
                        "duplicate layer index " + std::to_string(index));
            }
        }
    }
    const auto L = bundle.manifest.num_layers;
    for (std::size_t l = 0; l < L; ++l) {
        require(found.count(l) != 0, ErrorCode::missing_layer_file,
                "missing " + (layer_dir / layer_file_name(l)).string());
    }
    require(found.size() == L, ErrorCode::invariant_violation,
            "layer files do not form the contiguous range 0.." + std::to_string(L - 1) + " (found " +
                std::to_string(found.size()) + " files)");

    bundle.layers.reserve(L);
    for (std::size_t l = 0; l < L; ++l) {
        const auto & path = found.at(l);
        auto m = decode_layer(fsutil::read_file(path), path.string());
        require(m.rows == bundle.manifest.num_samples && m.cols == bundle.manifest.hidden_sizes[l],
                ErrorCode::dimension_mismatch,
                path.string() + ": header " + std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                    " disagrees with manifest " + std::to_string(bundle.manifest.num_samples) + "x" +
                    std::to_string(bundle.manifest.hidden_sizes[l]));
        bundle.layers.push_back(std::move(m));
    }
    validate(bundle);
    return bundle;
}

} // namespace critlayers
