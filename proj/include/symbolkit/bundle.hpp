#ifndef SYMBOLKIT_BUNDLE_HPP
#define SYMBOLKIT_BUNDLE_HPP

#include "detail/binary.hpp"
#include "error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

/**
 * @file bundle.hpp
 *
 * @brief Activation bundles: a JSON manifest, one float32 blob per (image, layer) and a JSON-lines ROI table.
 *
 * Layout of a bundle directory:
 *
 *     manifest.json            dataset metadata, layer catalog, blob checksums
 *     rois.jsonl               one RoiRecord per line
 *     <image_id>/<layer_id>.f32  C*H*W little-endian float32, channel-major
 *
 * See docs/format.md for the field-level contract.
 */

namespace symbolkit::tensorio {

using json = nlohmann::json;

inline constexpr const char* bundle_format_name = "symbolkit.bundle";
inline constexpr int bundle_format_version = 1;

/// One layer's C x H x W response map for one image, channel-major.
struct ActivationTensor {
    std::string image_id;
    int layer_id = 0;
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values;

    float at(int c, int y, int x) const {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float& at(int c, int y, int x) {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    std::size_t expected_size() const {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
               static_cast<std::size_t>(width);
    }

    /// Checks shape and finiteness; the message names the tensor.
    void validate() const {
        const std::string name = "tensor (" + image_id + ", layer " + std::to_string(layer_id) + ")";
        if (channels <= 0 || height <= 0 || width <= 0) {
            throw InvalidArgument(name + ": non-positive shape");
        }
        if (values.size() != expected_size()) {
            throw InvalidArgument(name + ": has " + std::to_string(values.size()) + " values, shape needs " +
                                  std::to_string(expected_size()));
        }
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) {
                throw InvalidArgument(name + ": non-finite value at index " + std::to_string(i));
            }
        }
    }
};

enum class SplitTag { train, test, ood, adversarial };

inline constexpr std::array<SplitTag, 4> all_splits{SplitTag::train, SplitTag::test, SplitTag::ood,
                                                    SplitTag::adversarial};

inline const char* to_string(SplitTag s) {
    switch (s) {
    case SplitTag::train:
        return "train";
    case SplitTag::test:
        return "test";
    case SplitTag::ood:
        return "ood";
    case SplitTag::adversarial:
        return "adversarial";
    }
    return "?";
}

inline SplitTag parse_split(const std::string& s) {
    for (auto tag : all_splits) {
        if (s == to_string(tag)) {
            return tag;
        }
    }
    throw FormatError("unknown split tag '" + s + "'");
}

/// Pixel-space box, half-open on the max side.
struct PixelBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool operator==(const PixelBox&) const = default;
};

/**
 * One detected object. `true_label` indexes `class_names` for train/test/adversarial records
 * and `ood_class_names` for ood records. `model_prediction` values at or above K denote a
 * model output outside the analysed class set.
 */
struct RoiRecord {
    std::string image_id;
    std::string roi_id;
    PixelBox bbox;
    std::optional<int> true_label;
    std::optional<int> model_prediction;
    bool certified = true;
    SplitTag split = SplitTag::train;

    bool operator==(const RoiRecord&) const = default;
};

struct LayerInfo {
    int layer_id = 0;
    int channels = 0;
    int input_width = 0;
    int input_height = 0;
    int feature_width = 0;
    int feature_height = 0;

    bool operator==(const LayerInfo&) const = default;
};

struct BundleManifest {
    std::string dataset_name;
    std::string model_name;
    std::vector<std::string> class_names;
    std::vector<std::string> ood_class_names;
    std::vector<LayerInfo> layers;
    std::map<std::string, std::size_t> records; ///< ROI counts per split tag, filled by the writer.

    std::size_t num_classes() const { return class_names.size(); }

    const LayerInfo& layer(int layer_id) const {
        for (const auto& l : layers) {
            if (l.layer_id == layer_id) {
                return l;
            }
        }
        throw InvalidArgument("layer " + std::to_string(layer_id) + " is not in the layer catalog");
    }

    bool has_layer(int layer_id) const {
        return std::any_of(layers.begin(), layers.end(), [&](const LayerInfo& l) { return l.layer_id == layer_id; });
    }

    void validate() const {
        if (class_names.size() < 2) {
            throw InvalidArgument("manifest needs at least 2 classes, has " + std::to_string(class_names.size()));
        }
        if (layers.empty()) {
            throw InvalidArgument("manifest has an empty layer catalog");
        }
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.channels <= 0 || l.input_width <= 0 || l.input_height <= 0 || l.feature_width <= 0 ||
                l.feature_height <= 0) {
                throw InvalidArgument("layer " + std::to_string(l.layer_id) + ": non-positive dimension in catalog");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (layers[j].layer_id == l.layer_id) {
                    throw InvalidArgument("layer " + std::to_string(l.layer_id) + " listed twice in catalog");
                }
            }
        }
    }

    /// Checks an ROI against the class sets and image bounds; throws naming the record.
    void validate(const RoiRecord& r) const {
        const std::string name = "ROI '" + r.roi_id + "' (image '" + r.image_id + "')";
        const auto& b = r.bbox;
        if (!(std::isfinite(b.x0) && std::isfinite(b.y0) && std::isfinite(b.x1) && std::isfinite(b.y1))) {
            throw InvalidArgument(name + ": non-finite bbox");
        }
        if (!(b.x0 < b.x1 && b.y0 < b.y1)) {
            throw InvalidArgument(name + ": degenerate bbox");
        }
        for (const auto& l : layers) {
            if (b.x0 < 0 || b.y0 < 0 || b.x1 > l.input_width || b.y1 > l.input_height) {
                throw InvalidArgument(name + ": bbox outside the " + std::to_string(l.input_width) + "x" +
                                      std::to_string(l.input_height) + " input image");
            }
        }
        if (r.true_label) {
            const std::size_t limit = r.split == SplitTag::ood ? ood_class_names.size() : class_names.size();
            if (*r.true_label < 0 || static_cast<std::size_t>(*r.true_label) >= limit) {
                throw InvalidArgument(name + ": true_label " + std::to_string(*r.true_label) + " out of range (" +
                                      std::to_string(limit) + " classes for split " + to_string(r.split) + ")");
            }
        }
        if (r.model_prediction && *r.model_prediction < 0) {
            throw InvalidArgument(name + ": negative model_prediction");
        }
    }
};

// JSON mapping. Field names here are the stable public contract.

inline json to_json(const LayerInfo& l) {
    return json{{"layer_id", l.layer_id},
                {"channels", l.channels},
                {"input_size", {l.input_width, l.input_height}},
                {"feature_size", {l.feature_width, l.feature_height}}};
}

inline LayerInfo layer_from_json(const json& j) {
    LayerInfo l;
    l.layer_id = j.at("layer_id").get<int>();
    l.channels = j.at("channels").get<int>();
    l.input_width = j.at("input_size").at(0).get<int>();
    l.input_height = j.at("input_size").at(1).get<int>();
    l.feature_width = j.at("feature_size").at(0).get<int>();
    l.feature_height = j.at("feature_size").at(1).get<int>();
    return l;
}

inline json to_json(const RoiRecord& r) {
    json j;
    j["image_id"] = r.image_id;
    j["roi_id"] = r.roi_id;
    j["bbox"] = {r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1};
    j["true_label"] = r.true_label ? json(*r.true_label) : json(nullptr);
    j["model_prediction"] = r.model_prediction ? json(*r.model_prediction) : json(nullptr);
    j["certified"] = r.certified;
    j["split_tag"] = to_string(r.split);
    return j;
}

inline RoiRecord roi_from_json(const json& j) {
    RoiRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.roi_id = j.at("roi_id").get<std::string>();
    const auto& b = j.at("bbox");
    r.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
    if (!j.at("true_label").is_null()) {
        r.true_label = j.at("true_label").get<int>();
    }
    if (!j.at("model_prediction").is_null()) {
        r.model_prediction = j.at("model_prediction").get<int>();
    }
    r.certified = j.value("certified", true);
    r.split = parse_split((j.contains("split_tag") ? j.at("split_tag") : j.at("split")).get<std::string>());
    return r;
}

inline std::vector<RoiRecord> read_roi_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("missing ROI table " + path.string());
    }
    std::vector<RoiRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(roi_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::string roi_table_text(const std::vector<RoiRecord>& rois) {
    std::string out;
    for (const auto& r : rois) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

namespace detail {

/// Image ids become directory names, so they are restricted to a portable character set.
inline void check_path_safe(const std::string& id, const char* what) {
    if (id.empty() || id == "." || id == "..") {
        throw InvalidArgument(std::string(what) + " '" + id + "' is not a valid path component");
    }
    for (char c : id) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                        c == '-' || c == '.';
        if (!ok) {
            throw InvalidArgument(std::string(what) + " '" + id + "' contains characters outside [A-Za-z0-9_.-]");
        }
    }
}

inline std::string blob_name(const std::string& image_id, int layer_id) {
    return image_id + "/" + std::to_string(layer_id) + ".f32";
}

struct BlobEntry {
    int layer_id = 0;
    std::string file;
    std::uint64_t bytes = 0;
    std::uint32_t crc32 = 0;
};

} // namespace detail

/**
 * Streaming writer for a bundle directory.
 *
 * Tensors are written to disk as they arrive; the manifest, with per-blob CRC-32 values and
 * split counts, is written by `finalize()`. The target directory must not already hold a bundle.
 */
class BundleWriter {
public:
    BundleWriter(std::filesystem::path dir, BundleManifest manifest)
        : dir_(std::move(dir)), manifest_(std::move(manifest)) {
        manifest_.validate();
        if (std::filesystem::exists(dir_ / "manifest.json")) {
            throw InvalidArgument(dir_.string() + " already contains a bundle");
        }
        std::filesystem::create_directories(dir_);
        rois_.open(dir_ / "rois.jsonl", std::ios::binary | std::ios::trunc);
        if (!rois_) {
            throw Error("cannot create " + (dir_ / "rois.jsonl").string());
        }
        manifest_.records.clear();
        for (auto s : all_splits) {
            manifest_.records[to_string(s)] = 0;
        }
    }

    void add_tensor(const ActivationTensor& t) {
        detail::check_path_safe(t.image_id, "image id");
        t.validate();
        if (!manifest_.has_layer(t.layer_id)) {
            throw InvalidArgument("tensor (" + t.image_id + ", layer " + std::to_string(t.layer_id) +
                                  "): layer not in catalog");
        }
        const auto& info = manifest_.layer(t.layer_id);
        if (t.channels != info.channels || t.height != info.feature_height || t.width != info.feature_width) {
            throw InvalidArgument("tensor (" + t.image_id + ", layer " + std::to_string(t.layer_id) + "): shape " +
                                  std::to_string(t.channels) + "x" + std::to_string(t.height) + "x" +
                                  std::to_string(t.width) + " disagrees with catalog " +
                                  std::to_string(info.channels) + "x" + std::to_string(info.feature_height) + "x" +
                                  std::to_string(info.feature_width));
        }
        auto [it, inserted] = image_index_.try_emplace(t.image_id, images_.size());
        if (inserted) {
            images_.push_back({t.image_id, {}});
        }
        auto& blobs = images_[it->second].second;
        for (const auto& b : blobs) {
            if (b.layer_id == t.layer_id) {
                throw InvalidArgument("tensor (" + t.image_id + ", layer " + std::to_string(t.layer_id) +
                                      ") written twice");
            }
        }
        symbolkit::detail::ByteWriter w;
        w.put_array(std::span<const float>(t.values));
        const auto name = detail::blob_name(t.image_id, t.layer_id);
        symbolkit::detail::write_file(dir_ / name, w.bytes());
        blobs.push_back({t.layer_id, name, w.bytes().size(),
                         symbolkit::detail::Crc32::of(w.bytes().data(), w.bytes().size())});
    }

    void add_roi(const RoiRecord& r) {
        manifest_.validate(r);
        if (!roi_ids_.insert({r.roi_id, true}).second) {
            throw InvalidArgument("ROI '" + r.roi_id + "' written twice");
        }
        rois_ << to_json(r).dump() << '\n';
        roi_images_.push_back({r.roi_id, r.image_id});
        ++manifest_.records[to_string(r.split)];
    }

    /// Writes manifest.json. Every ROI must reference an image with a blob for every catalog layer.
    void finalize() {
        for (const auto& [roi_id, image_id] : roi_images_) {
            auto it = image_index_.find(image_id);
            if (it == image_index_.end() || images_[it->second].second.size() != manifest_.layers.size()) {
                throw InvalidArgument("ROI '" + roi_id + "': image '" + image_id +
                                      "' lacks tensors for some catalog layers");
            }
        }
        rois_.close();
        symbolkit::detail::write_text(dir_ / "manifest.json", manifest_json().dump(2) + "\n");
        finalized_ = true;
    }

    bool finalized() const { return finalized_; }

private:
    json manifest_json() const {
        json j;
        j["format"] = bundle_format_name;
        j["version"] = bundle_format_version;
        j["dataset_name"] = manifest_.dataset_name;
        j["model_name"] = manifest_.model_name;
        j["class_names"] = manifest_.class_names;
        j["ood_class_names"] = manifest_.ood_class_names;
        j["layers"] = json::array();
        for (const auto& l : manifest_.layers) {
            j["layers"].push_back(to_json(l));
        }
        j["records"] = manifest_.records;
        j["roi_table"] = "rois.jsonl";
        j["images"] = json::array();
        for (const auto& [image_id, blobs] : images_) {
            json img;
            img["image_id"] = image_id;
            img["blobs"] = json::array();
            for (const auto& b : blobs) {
                img["blobs"].push_back({{"layer_id", b.layer_id}, {"file", b.file}, {"bytes", b.bytes}, {"crc32", b.crc32}});
            }
            j["images"].push_back(std::move(img));
        }
        return j;
    }

    std::filesystem::path dir_;
    BundleManifest manifest_;
    std::ofstream rois_;
    std::vector<std::pair<std::string, std::vector<detail::BlobEntry>>> images_;
    std::unordered_map<std::string, std::size_t> image_index_;
    std::unordered_map<std::string, bool> roi_ids_;
    std::vector<std::pair<std::string, std::string>> roi_images_;
    bool finalized_ = false;
};

/// Writes a complete bundle from in-memory ranges.
template <typename TensorRange, typename RoiRange>
void write_bundle(const std::filesystem::path& dir, const BundleManifest& manifest, const TensorRange& tensors,
                  const RoiRange& rois) {
    BundleWriter writer(dir, manifest);
    for (const auto& t : tensors) {
        writer.add_tensor(t);
    }
    for (const auto& r : rois) {
        writer.add_roi(r);
    }
    writer.finalize();
}

/**
 * Read side of a bundle.
 *
 * Opening validates the manifest, the ROI table and the size of every blob; tensors are read
 * one at a time by `load()`, which also verifies the blob checksum. `load()` is const and keeps
 * no shared state, so concurrent readers are safe.
 */
class Bundle {
public:
    static Bundle open(const std::filesystem::path& dir) {
        Bundle b;
        b.dir_ = dir;
        const auto manifest_path = dir / "manifest.json";
        if (!std::filesystem::exists(manifest_path)) {
            throw FormatError("no manifest.json in " + dir.string());
        }
        json j;
        try {
            j = json::parse(symbolkit::detail::read_text(manifest_path));
        } catch (const json::exception& e) {
            throw FormatError(manifest_path.string() + ": " + e.what());
        }
        try {
            b.parse_manifest(j);
        } catch (const json::exception& e) {
            throw FormatError(manifest_path.string() + ": " + e.what());
        } catch (const InvalidArgument& e) {
            throw FormatError(manifest_path.string() + ": " + e.what());
        }
        b.rois_ = read_roi_table(dir / j.value("roi_table", std::string("rois.jsonl")));
        std::map<std::string, std::size_t> counts;
        for (auto s : all_splits) {
            counts[to_string(s)] = 0;
        }
        for (const auto& r : b.rois_) {
            try {
                b.manifest_.validate(r);
            } catch (const InvalidArgument& e) {
                throw FormatError(e.what());
            }
            if (!b.has_image(r.image_id)) {
                throw FormatError("ROI '" + r.roi_id + "' references unknown image '" + r.image_id + "'");
            }
            ++counts[to_string(r.split)];
        }
        for (const auto& [split, n] : b.manifest_.records) {
            if (counts[split] != n) {
                throw FormatError("manifest records " + std::to_string(n) + " " + split + " ROIs, table has " +
                                  std::to_string(counts[split]));
            }
        }
        return b;
    }

    const BundleManifest& manifest() const { return manifest_; }
    const std::vector<RoiRecord>& rois() const { return rois_; }
    const std::filesystem::path& path() const { return dir_; }

    std::vector<std::string> image_ids() const {
        std::vector<std::string> out;
        out.reserve(images_.size());
        for (const auto& img : images_) {
            out.push_back(img.first);
        }
        return out;
    }

    bool has_image(const std::string& image_id) const { return image_index_.count(image_id) > 0; }

    /// Reads and verifies exactly one (image, layer) blob.
    ActivationTensor load(const std::string& image_id, int layer_id) const {
        const auto& blob = find_blob(image_id, layer_id);
        const auto& info = manifest_.layer(layer_id);
        const auto path = dir_ / blob.file;
        const auto bytes = symbolkit::detail::read_file(path);
        if (bytes.size() != blob.bytes) {
            throw FormatError("blob " + blob.file + ": size " + std::to_string(bytes.size()) + " != " +
                              std::to_string(blob.bytes) + " (truncated?)");
        }
        if (symbolkit::detail::Crc32::of(bytes.data(), bytes.size()) != blob.crc32) {
            throw FormatError("blob " + blob.file + ": checksum mismatch");
        }
        ActivationTensor t;
        t.image_id = image_id;
        t.layer_id = layer_id;
        t.channels = info.channels;
        t.height = info.feature_height;
        t.width = info.feature_width;
        symbolkit::detail::ByteReader reader(bytes, blob.file);
        t.values = reader.get_array<float>(t.expected_size());
        return t;
    }

private:
    void parse_manifest(const json& j) {
        if (j.at("format").get<std::string>() != bundle_format_name) {
            throw FormatError("not a symbolkit bundle manifest");
        }
        const int version = j.at("version").get<int>();
        if (version != bundle_format_version) {
            throw VersionError("bundle format version " + std::to_string(version) + " is not supported (reader is " +
                               std::to_string(bundle_format_version) + ")");
        }
        manifest_.dataset_name = j.at("dataset_name").get<std::string>();
        manifest_.model_name = j.at("model_name").get<std::string>();
        manifest_.class_names = j.at("class_names").get<std::vector<std::string>>();
        manifest_.ood_class_names = j.value("ood_class_names", std::vector<std::string>{});
        for (const auto& l : j.contains("layers") ? j.at("layers") : j.at("layer_catalog")) {
            manifest_.layers.push_back(layer_from_json(l));
        }
        manifest_.records = j.at("records").get<std::map<std::string, std::size_t>>();
        manifest_.validate();
        for (const auto& img : j.at("images")) {
            const auto id = img.at("image_id").get<std::string>();
            detail::check_path_safe(id, "image id");
            std::vector<detail::BlobEntry> blobs;
            for (const auto& bj : img.at("blobs")) {
                detail::BlobEntry e;
                e.layer_id = bj.at("layer_id").get<int>();
                e.file = bj.at("file").get<std::string>();
                e.bytes = bj.at("bytes").get<std::uint64_t>();
                e.crc32 = bj.at("crc32").get<std::uint32_t>();
                const auto& info = manifest_.layer(e.layer_id);
                const std::uint64_t expected = static_cast<std::uint64_t>(info.channels) * info.feature_height *
                                               info.feature_width * sizeof(float);
                if (e.bytes != expected) {
                    throw FormatError("blob " + e.file + ": manifest size " + std::to_string(e.bytes) +
                                      " disagrees with layer shape (" + std::to_string(expected) + " bytes)");
                }
                const auto path = dir_ / e.file;
                if (!std::filesystem::exists(path)) {
                    throw FormatError("missing blob " + e.file);
                }
                const auto actual = std::filesystem::file_size(path);
                if (actual != e.bytes) {
                    throw FormatError("blob " + e.file + ": file has " + std::to_string(actual) + " bytes, expected " +
                                      std::to_string(e.bytes) + " (truncated?)");
                }
                blobs.push_back(std::move(e));
            }
            image_index_[id] = images_.size();
            images_.emplace_back(id, std::move(blobs));
        }
    }

    const detail::BlobEntry& find_blob(const std::string& image_id, int layer_id) const {
        auto it = image_index_.find(image_id);
        if (it == image_index_.end()) {
            throw InvalidArgument("unknown image '" + image_id + "'");
        }
        for (const auto& b : images_[it->second].second) {
            if (b.layer_id == layer_id) {
                return b;
            }
        }
        throw FormatError("missing blob " + detail::blob_name(image_id, layer_id));
    }

    std::filesystem::path dir_;
    BundleManifest manifest_;
    std::vector<RoiRecord> rois_;
    std::vector<std::pair<std::string, std::vector<detail::BlobEntry>>> images_;
    std::unordered_map<std::string, std::size_t> image_index_;
};

inline Bundle read_bundle(const std::filesystem::path& dir) { return Bundle::open(dir); }

} // namespace symbolkit::tensorio

#endif
