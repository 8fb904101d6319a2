#ifndef SYMBOLKIT_MODEL_IO_HPP
#define SYMBOLKIT_MODEL_IO_HPP

#include "cluster.hpp"
#include "detail/binary.hpp"
#include "embed.hpp"
#include "error.hpp"
#include "report.hpp"
#include "symtab.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

/**
 * @file model_io.hpp
 *
 * @brief Persistence of fitted objects (`.skm` files).
 *
 * Layout, all integers little-endian:
 *
 *     8 bytes   magic "SKMODEL\0"
 *     u32       format version
 *     u32       type tag (1 codebook, 2 embedding, 3 correlation map, 4 ESS table)
 *     u64       metadata length, then that many bytes of UTF-8 JSON
 *     u64       payload length, then the raw numeric payload
 *     u32       CRC-32 of every preceding byte
 *
 * Floating-point values live in the payload in their native width, so a load reproduces
 * the saved object bit for bit.
 */

namespace symbolkit::tensorio {

inline constexpr std::uint32_t model_format_version = 1;
inline constexpr std::string_view model_magic{"SKMODEL\0", 8};

enum class ModelType : std::uint32_t { codebook = 1, embedding = 2, correlation_map = 3, ess_table = 4 };

inline const char* to_string(ModelType t) {
    switch (t) {
    case ModelType::codebook:
        return "codebook";
    case ModelType::embedding:
        return "embedding";
    case ModelType::correlation_map:
        return "correlation_map";
    case ModelType::ess_table:
        return "ess_table";
    }
    return "unknown";
}

namespace detail {

using symbolkit::detail::ByteReader;
using symbolkit::detail::ByteWriter;

struct RawModel {
    ModelType type{};
    nlohmann::json meta;
    std::vector<unsigned char> payload;
};

inline std::vector<unsigned char> encode(ModelType type, const nlohmann::json& meta, const std::vector<unsigned char>& payload) {
    ByteWriter w;
    w.put_bytes(model_magic);
    w.put<std::uint32_t>(model_format_version);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(type));
    const std::string text = meta.dump();
    w.put<std::uint64_t>(text.size());
    w.put_bytes(text);
    w.put<std::uint64_t>(payload.size());
    w.bytes().insert(w.bytes().end(), payload.begin(), payload.end());
    const auto crc = symbolkit::detail::Crc32::of(w.bytes().data(), w.bytes().size());
    w.put<std::uint32_t>(crc);
    return std::move(w.bytes());
}

inline RawModel decode(std::span<const unsigned char> bytes, const std::string& what) {
    ByteReader r(bytes, what);
    if (r.get_string(model_magic.size()) != model_magic) {
        throw FormatError(what + ": not a symbolkit model file (bad magic)");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != model_format_version) {
        throw VersionError(what + ": model format version " + std::to_string(version) + ", reader supports " +
                           std::to_string(model_format_version));
    }
    const auto tag = r.get<std::uint32_t>();
    if (tag < 1 || tag > 4) {
        throw FormatError(what + ": unknown model type tag " + std::to_string(tag));
    }
    RawModel out;
    out.type = static_cast<ModelType>(tag);
    const auto meta_len = r.get<std::uint64_t>();
    if (meta_len > r.remaining()) {
        throw FormatError(what + ": truncated metadata");
    }
    const std::string text = r.get_string(static_cast<std::size_t>(meta_len));
    const auto payload_len = r.get<std::uint64_t>();
    if (payload_len > r.remaining()) {
        throw FormatError(what + ": truncated payload");
    }
    out.payload = r.get_array<unsigned char>(static_cast<std::size_t>(payload_len));
    const auto body_end = r.position();
    const auto stored = r.get<std::uint32_t>();
    if (r.remaining() != 0) {
        throw FormatError(what + ": trailing bytes after checksum");
    }
    if (symbolkit::detail::Crc32::of(bytes.data(), body_end) != stored) {
        throw FormatError(what + ": checksum mismatch");
    }
    out.meta = nlohmann::json::parse(text, nullptr, false);
    if (out.meta.is_discarded() || !out.meta.is_object()) {
        throw FormatError(what + ": metadata is not a JSON object");
    }
    return out;
}

inline void expect(const RawModel& m, ModelType t, const std::string& what) {
    if (m.type != t) {
        throw FormatError(what + ": holds a " + std::string(to_string(m.type)) + ", expected a " + to_string(t));
    }
}

template <typename T>
T meta_get(const nlohmann::json& meta, const char* key, const std::string& what) {
    if (!meta.contains(key)) {
        throw FormatError(what + ": metadata lacks '" + key + "'");
    }
    try {
        return meta.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw FormatError(what + ": metadata field '" + key + "' has the wrong type");
    }
}

inline nlohmann::json params_to_json(const embed::Params& p) {
    return {{"n_neighbors", p.n_neighbors},
            {"min_dist", p.min_dist},
            {"spread", p.spread},
            {"local_connectivity", p.local_connectivity},
            {"learning_rate", p.learning_rate},
            {"negative_sample_rate", p.negative_sample_rate},
            {"repulsion_strength", p.repulsion_strength},
            {"n_epochs", p.n_epochs},
            {"transform_epochs", p.transform_epochs},
            {"exact_knn_limit", p.exact_knn_limit}};
}

inline embed::Params params_from_json(const nlohmann::json& j, const std::string& what) {
    embed::Params p;
    p.n_neighbors = meta_get<int>(j, "n_neighbors", what);
    p.min_dist = meta_get<double>(j, "min_dist", what);
    p.spread = meta_get<double>(j, "spread", what);
    p.local_connectivity = meta_get<double>(j, "local_connectivity", what);
    p.learning_rate = meta_get<double>(j, "learning_rate", what);
    p.negative_sample_rate = meta_get<double>(j, "negative_sample_rate", what);
    p.repulsion_strength = meta_get<double>(j, "repulsion_strength", what);
    p.n_epochs = meta_get<int>(j, "n_epochs", what);
    p.transform_epochs = meta_get<int>(j, "transform_epochs", what);
    p.exact_knn_limit = meta_get<std::size_t>(j, "exact_knn_limit", what);
    return p; // worker count is a runtime setting and is not stored
}

template <typename T>
std::vector<T> take(ByteReader& r, std::size_t count) {
    return r.get_array<T>(count);
}

} // namespace detail

// ---- codebook ----

inline std::vector<unsigned char> encode_model(const cluster::SymbolCodebook& cb) {
    nlohmann::json meta{{"layer_id", cb.layer_id},
                        {"k_max", cb.k_max},
                        {"n_centers", cb.centers.rows()},
                        {"dim", cb.centers.cols()},
                        {"embedding_ref", cb.embedding_ref}};
    symbolkit::detail::ByteWriter w;
    w.put<double>(cb.layer_mean);
    w.put_array<double>(cb.centers.data());
    return detail::encode(ModelType::codebook, meta, w.bytes());
}

inline cluster::SymbolCodebook decode_codebook(const detail::RawModel& m, const std::string& what) {
    detail::expect(m, ModelType::codebook, what);
    cluster::SymbolCodebook cb;
    cb.layer_id = detail::meta_get<int>(m.meta, "layer_id", what);
    cb.k_max = detail::meta_get<std::size_t>(m.meta, "k_max", what);
    cb.embedding_ref = detail::meta_get<std::string>(m.meta, "embedding_ref", what);
    const auto n = detail::meta_get<std::size_t>(m.meta, "n_centers", what);
    const auto d = detail::meta_get<std::size_t>(m.meta, "dim", what);
    symbolkit::detail::ByteReader r(m.payload, what);
    cb.layer_mean = r.get<double>();
    cb.centers = Matrix<double>(n, d, r.get_array<double>(n * d));
    if (r.remaining()) {
        throw FormatError(what + ": payload size disagrees with metadata");
    }
    return cb;
}

// ---- embedding ----

inline std::vector<unsigned char> encode_model(const embed::EmbeddingModel& em) {
    nlohmann::json meta{{"layer_id", em.layer_id},
                        {"params", detail::params_to_json(em.params)},
                        {"seed", em.seed},
                        {"n_points", em.training_points.rows()},
                        {"dim", em.training_points.cols()},
                        {"n_components", em.low_dim_coords.cols()},
                        {"graph_k", em.training_graph.k},
                        {"graph_rows", em.training_graph.size()}};
    symbolkit::detail::ByteWriter w;
    w.put<double>(em.a);
    w.put<double>(em.b);
    w.put_array<float>(em.training_points.data());
    w.put_array<float>(em.low_dim_coords.data());
    w.put_array<std::uint32_t>(em.training_graph.indices);
    w.put_array<float>(em.training_graph.distances);
    return detail::encode(ModelType::embedding, meta, w.bytes());
}

inline embed::EmbeddingModel decode_embedding(const detail::RawModel& m, const std::string& what) {
    detail::expect(m, ModelType::embedding, what);
    embed::EmbeddingModel em;
    em.layer_id = detail::meta_get<int>(m.meta, "layer_id", what);
    if (!m.meta.contains("params")) {
        throw FormatError(what + ": metadata lacks 'params'");
    }
    em.params = detail::params_from_json(m.meta.at("params"), what);
    em.seed = detail::meta_get<std::uint64_t>(m.meta, "seed", what);
    const auto n = detail::meta_get<std::size_t>(m.meta, "n_points", what);
    const auto d = detail::meta_get<std::size_t>(m.meta, "dim", what);
    const auto c = detail::meta_get<std::size_t>(m.meta, "n_components", what);
    const auto gk = detail::meta_get<std::size_t>(m.meta, "graph_k", what);
    const auto gr = detail::meta_get<std::size_t>(m.meta, "graph_rows", what);
    symbolkit::detail::ByteReader r(m.payload, what);
    em.a = r.get<double>();
    em.b = r.get<double>();
    em.training_points = Matrix<float>(n, d, r.get_array<float>(n * d));
    em.low_dim_coords = Matrix<float>(n, c, r.get_array<float>(n * c));
    em.training_graph.k = gk;
    em.training_graph.indices = r.get_array<std::uint32_t>(gk * gr);
    em.training_graph.distances = r.get_array<float>(gk * gr);
    if (r.remaining()) {
        throw FormatError(what + ": payload size disagrees with metadata");
    }
    return em;
}

// ---- correlation map ----

inline std::vector<unsigned char> encode_model(const symtab::CorrelationMap& cm) {
    nlohmann::json meta{{"layer_id", cm.layer_id()},
                        {"n_symbols", cm.n_symbols()},
                        {"n_classes", cm.n_classes()},
                        {"class_names", cm.class_names}};
    symbolkit::detail::ByteWriter w;
    w.put_array<std::uint64_t>(cm.counts());
    return detail::encode(ModelType::correlation_map, meta, w.bytes());
}

inline symtab::CorrelationMap decode_correlation_map(const detail::RawModel& m, const std::string& what) {
    detail::expect(m, ModelType::correlation_map, what);
    const auto s = detail::meta_get<std::size_t>(m.meta, "n_symbols", what);
    const auto k = detail::meta_get<std::size_t>(m.meta, "n_classes", what);
    const auto layer = detail::meta_get<int>(m.meta, "layer_id", what);
    symbolkit::detail::ByteReader r(m.payload, what);
    auto counts = r.get_array<std::uint64_t>(s * k);
    if (r.remaining()) {
        throw FormatError(what + ": payload size disagrees with metadata");
    }
    auto cm = symtab::CorrelationMap::from_counts(s, k, std::move(counts), layer);
    cm.class_names = detail::meta_get<std::vector<std::string>>(m.meta, "class_names", what);
    return cm;
}

// ---- ESS table ----

inline std::vector<unsigned char> encode_model(const symtab::EssTable& table) {
    nlohmann::json rows = nlohmann::json::array();
    symbolkit::detail::ByteWriter w;
    for (const auto& p : table) {
        std::vector<int> layers;
        for (const auto& [l, v] : p.per_layer) {
            layers.push_back(l);
            w.put<double>(v);
        }
        w.put<double>(p.norm);
        rows.push_back({{"roi_id", p.roi_id},
                        {"split_tag", p.split_tag},
                        {"class_source", symtab::to_string(p.class_source)},
                        {"resolved_class", p.resolved_class},
                        {"layers", layers}});
    }
    return detail::encode(ModelType::ess_table, {{"rows", rows}}, w.bytes());
}

inline symtab::EssTable decode_ess_table(const detail::RawModel& m, const std::string& what) {
    detail::expect(m, ModelType::ess_table, what);
    if (!m.meta.contains("rows") || !m.meta.at("rows").is_array()) {
        throw FormatError(what + ": metadata lacks 'rows'");
    }
    symbolkit::detail::ByteReader r(m.payload, what);
    symtab::EssTable out;
    for (const auto& row : m.meta.at("rows")) {
        symtab::EssProfile p;
        p.roi_id = detail::meta_get<std::string>(row, "roi_id", what);
        p.split_tag = detail::meta_get<std::string>(row, "split_tag", what);
        try {
            p.class_source = symtab::parse_class_source(detail::meta_get<std::string>(row, "class_source", what));
        } catch (const InvalidArgument& e) {
            throw FormatError(what + ": " + e.what());
        }
        p.resolved_class = detail::meta_get<int>(row, "resolved_class", what);
        for (int l : detail::meta_get<std::vector<int>>(row, "layers", what)) {
            p.per_layer.emplace_back(l, r.get<double>());
        }
        p.norm = r.get<double>();
        out.push_back(std::move(p));
    }
    if (r.remaining()) {
        throw FormatError(what + ": payload size disagrees with metadata");
    }
    return out;
}

// ---- file API ----

using AnyModel = std::variant<cluster::SymbolCodebook, embed::EmbeddingModel, symtab::CorrelationMap, symtab::EssTable>;

template <typename T>
void save_model(const T& object, const std::filesystem::path& path) {
    symbolkit::detail::write_file(path, encode_model(object));
}

inline detail::RawModel read_raw_model(const std::filesystem::path& path) {
    const auto bytes = symbolkit::detail::read_file(path);
    return detail::decode(bytes, path.string());
}

inline ModelType peek_model_type(const std::filesystem::path& path) { return read_raw_model(path).type; }

/// Loads whichever object the file holds.
inline AnyModel load_model(const std::filesystem::path& path) {
    const auto raw = read_raw_model(path);
    const auto what = path.string();
    switch (raw.type) {
    case ModelType::codebook:
        return decode_codebook(raw, what);
    case ModelType::embedding:
        return decode_embedding(raw, what);
    case ModelType::correlation_map:
        return decode_correlation_map(raw, what);
    case ModelType::ess_table:
        return decode_ess_table(raw, what);
    }
    throw FormatError(what + ": unknown model type");
}

/// Loads a file that must hold a `T`; a different stored type is a format error.
template <typename T>
T load_model_as(const std::filesystem::path& path) {
    const auto raw = read_raw_model(path);
    const auto what = path.string();
    if constexpr (std::is_same_v<T, cluster::SymbolCodebook>) {
        return decode_codebook(raw, what);
    } else if constexpr (std::is_same_v<T, embed::EmbeddingModel>) {
        return decode_embedding(raw, what);
    } else if constexpr (std::is_same_v<T, symtab::CorrelationMap>) {
        return decode_correlation_map(raw, what);
    } else {
        static_assert(std::is_same_v<T, symtab::EssTable>, "unsupported model type");
        return decode_ess_table(raw, what);
    }
}

/// Per-ROI score table with columns roi_id, split_tag, class_source, pred, ess_l<k>..., ess_norm.
/// A layer an ROI has no score for leaves an empty cell.
inline report::CsvTable ess_table_csv(const symtab::EssTable& table, const std::vector<int>& layers) {
    std::vector<std::string> header{"roi_id", "split_tag", "class_source", "pred"};
    for (int l : layers) {
        header.push_back("ess_l" + std::to_string(l));
    }
    header.emplace_back("ess_norm");
    report::CsvTable t(header);
    for (const auto& p : table) {
        std::vector<std::string> row{p.roi_id, p.split_tag, symtab::to_string(p.class_source), std::to_string(p.resolved_class)};
        for (int l : layers) {
            const auto v = p.layer(l);
            row.push_back(v ? report::format_number(*v) : "");
        }
        row.push_back(report::format_number(p.norm));
        t.add_row(std::move(row));
    }
    return t;
}

} // namespace symbolkit::tensorio

#endif
