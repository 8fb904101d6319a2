#ifndef SYMBOLKIT_PIPELINE_HPP
#define SYMBOLKIT_PIPELINE_HPP

#include "bundle.hpp"
#include "cluster.hpp"
#include "detail/binary.hpp"
#include "embed.hpp"
#include "error.hpp"
#include "knn.hpp"
#include "metrics.hpp"
#include "model_io.hpp"
#include "report.hpp"
#include "roipool.hpp"
#include "symtab.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

/**
 * @file pipeline.hpp
 *
 * @brief The experiment stages behind the command-line front end.
 *
 * Every stage writes into `<out>/<stage>/<key>/`, where `key` hashes the stage's own settings
 * together with the keys of the stages it reads. A finished stage directory holds a
 * `stage.json` marker and is never rewritten, so re-running a command is a no-op and
 * changing a setting only recomputes the stages downstream of it. `<out>/<stage>/latest.json`
 * points at the most recently produced directory of each stage.
 */

namespace symbolkit::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Failure inside a named stage; the CLI maps it to exit code 1.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& message)
        : Error(stage + ": " + message), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct PipelineConfig {
    fs::path bundle;
    fs::path out = "symbolkit-out";
    std::vector<int> layers; ///< empty: every layer of the bundle
    int threads = 1;

    embed::Params embed;
    std::uint64_t embed_seed = 0;

    std::string cluster_mode = "xmeans"; ///< xmeans | fixed-k
    std::size_t k_init = 10;
    std::size_t k_max = 1000;
    std::size_t fixed_k = 1000;
    std::uint64_t cluster_seed = 0;

    std::string label_source = "true"; ///< labels folded into the map: true | model

    std::string class_source = "layer4_prediction";
    std::vector<int> norm_layers; ///< empty: every analysed layer

    std::vector<std::size_t> sweep_ks; ///< fixed-k grid evaluated by predict

    std::size_t resamples = 100;
    std::uint64_t templearn_seed = 7;
    int templearn_layer = 0; ///< 0: deepest layer

    std::string report_format = "both";
};

struct StageRecord {
    std::string stage;
    std::string key;
    fs::path dir;
    bool cached = false;
};

/// Activity vectors of one layer as written by the pool stage.
struct PoolLayer {
    int layer_id = 0;
    double layer_mean = 0.0;
    Matrix<float> vectors;      ///< 9 rows per ROI, ROI table order
    std::vector<bool> retained; ///< mean-filter outcome per row
};

namespace detail {

inline std::string hash_key(const json& j) { return symbolkit::detail::hex64(symbolkit::detail::fnv1a(j.dump())); }

inline std::string layer_dir(int layer_id) { return "layer" + std::to_string(layer_id); }

inline json params_json(const embed::Params& p) { return tensorio::detail::params_to_json(p); }

inline std::vector<std::string> list_files(const fs::path& dir) {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) {
            out.push_back(fs::relative(e.path(), dir).generic_string());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline void write_json(const fs::path& path, const json& j) { symbolkit::detail::write_text(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
    auto j = json::parse(symbolkit::detail::read_text(path), nullptr, false);
    if (j.is_discarded()) {
        throw FormatError(path.string() + ": invalid JSON");
    }
    return j;
}

inline std::vector<std::vector<std::uint32_t>> roi_symbols(const std::vector<std::int32_t>& rows, std::size_t n_rois) {
    if (rows.size() != n_rois * roipool::grid_positions) {
        throw FormatError("symbol table has " + std::to_string(rows.size()) + " rows, expected " +
                          std::to_string(n_rois * roipool::grid_positions));
    }
    std::vector<std::vector<std::uint32_t>> out(n_rois);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= 0) {
            out[i / roipool::grid_positions].push_back(static_cast<std::uint32_t>(rows[i]));
        }
    }
    return out;
}

inline std::optional<double> safe_auroc(const std::vector<double>& pos, const std::vector<double>& neg) {
    if (pos.empty() || neg.empty()) {
        return std::nullopt;
    }
    return metrics::auroc(pos, neg);
}

} // namespace detail

class Pipeline {
public:
    explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.bundle.empty()) {
            throw InvalidArgument("no bundle given (--bundle)");
        }
        if (cfg_.threads < 1) {
            throw InvalidArgument("--threads must be at least 1");
        }
        if (cfg_.cluster_mode != "xmeans" && cfg_.cluster_mode != "fixed-k") {
            throw InvalidArgument("cluster mode must be xmeans or fixed-k, got '" + cfg_.cluster_mode + "'");
        }
        if (cfg_.label_source != "true" && cfg_.label_source != "model") {
            throw InvalidArgument("label source must be true or model, got '" + cfg_.label_source + "'");
        }
        symtab::parse_class_source(cfg_.class_source);
        report::parse_format(cfg_.report_format);
        cfg_.embed.threads = cfg_.threads;
    }

    const PipelineConfig& config() const { return cfg_; }
    const std::vector<StageRecord>& history() const { return history_; }

    // ---- stage keys ----

    std::string bundle_id() const {
        if (bundle_id_.empty()) {
            const auto manifest = cfg_.bundle / "manifest.json";
            if (!fs::exists(manifest)) {
                throw StageError("pool", "no bundle at " + cfg_.bundle.string() + " (missing manifest.json)");
            }
            auto h = symbolkit::detail::fnv1a(symbolkit::detail::read_text(manifest));
            h = symbolkit::detail::fnv1a(symbolkit::detail::read_text(cfg_.bundle / "rois.jsonl"), h);
            bundle_id_ = symbolkit::detail::hex64(h);
        }
        return bundle_id_;
    }

    std::vector<int> layers() const {
        if (layers_.empty()) {
            const auto manifest = detail::read_json(cfg_.bundle / "manifest.json");
            std::vector<int> available;
            for (const auto& l : manifest.at("layers")) {
                available.push_back(l.at("layer_id").get<int>());
            }
            std::sort(available.begin(), available.end());
            if (cfg_.layers.empty()) {
                layers_ = available;
            } else {
                layers_ = cfg_.layers;
                std::sort(layers_.begin(), layers_.end());
                layers_.erase(std::unique(layers_.begin(), layers_.end()), layers_.end());
                for (int l : layers_) {
                    if (!std::binary_search(available.begin(), available.end(), l)) {
                        throw InvalidArgument("layer " + std::to_string(l) + " not in bundle");
                    }
                }
            }
        }
        return layers_;
    }

    std::string pool_key() const { return detail::hash_key({{"stage", "pool"}, {"bundle", bundle_id()}, {"layers", layers()}}); }

    std::string embed_key() const {
        return detail::hash_key(
            {{"stage", "embed"}, {"pool", pool_key()}, {"params", detail::params_json(cfg_.embed)}, {"seed", cfg_.embed_seed}});
    }

    json cluster_settings() const {
        if (cfg_.cluster_mode == "xmeans") {
            return {{"mode", "xmeans"}, {"k_init", cfg_.k_init}, {"k_max", cfg_.k_max}, {"seed", cfg_.cluster_seed}};
        }
        return {{"mode", "fixed-k"}, {"k", cfg_.fixed_k}, {"seed", cfg_.cluster_seed}};
    }

    std::string cluster_key() const {
        return detail::hash_key({{"stage", "cluster"}, {"embed", embed_key()}, {"settings", cluster_settings()}});
    }

    std::string cm_key() const {
        return detail::hash_key({{"stage", "build-cm"}, {"cluster", cluster_key()}, {"label_source", cfg_.label_source}});
    }

    std::string predict_key() const {
        return detail::hash_key({{"stage", "predict"}, {"cm", cm_key()}, {"sweep_ks", cfg_.sweep_ks}});
    }

    std::string ess_key() const {
        return detail::hash_key(
            {{"stage", "ess"}, {"cm", cm_key()}, {"class_source", cfg_.class_source}, {"norm_layers", cfg_.norm_layers}});
    }

    std::string ood_key() const { return detail::hash_key({{"stage", "ood"}, {"cm", cm_key()}}); }

    std::string adv_key() const { return detail::hash_key({{"stage", "adv"}, {"cm", cm_key()}}); }

    std::string templearn_key() const {
        return detail::hash_key({{"stage", "templearn"},
                                 {"cluster", cluster_key()},
                                 {"resamples", cfg_.resamples},
                                 {"seed", cfg_.templearn_seed},
                                 {"layer", templearn_layer()}});
    }

    fs::path stage_dir(const std::string& stage, const std::string& key) const { return cfg_.out / stage / key; }

    bool complete(const std::string& stage, const std::string& key) const {
        return fs::exists(stage_dir(stage, key) / "stage.json");
    }

    // ---- stages ----

    StageRecord pool() {
        return run_stage("pool", pool_key(), {{"bundle", bundle_id()}}, [&](const fs::path& dir) { do_pool(dir); });
    }

    StageRecord embed() {
        require("embed", "pool", pool_key(), "missing activity vectors (run pool first)");
        return run_stage("embed", embed_key(), {{"pool", pool_key()}}, [&](const fs::path& dir) { do_embed(dir); });
    }

    StageRecord cluster() {
        require("cluster", "embed", embed_key(), "missing embedding (run embed first)");
        return run_stage("cluster", cluster_key(), {{"embed", embed_key()}}, [&](const fs::path& dir) { do_cluster(dir); });
    }

    StageRecord build_cm() {
        require("build-cm", "cluster", cluster_key(), "missing codebook (run cluster first)");
        return run_stage("build-cm", cm_key(), {{"cluster", cluster_key()}}, [&](const fs::path& dir) { do_build_cm(dir); });
    }

    StageRecord predict() {
        require("predict", "cluster", cluster_key(), "missing codebook (run cluster first)");
        require("predict", "build-cm", cm_key(), "missing correlation map (run build-cm first)");
        return run_stage("predict", predict_key(), {{"cm", cm_key()}}, [&](const fs::path& dir) { do_predict(dir); });
    }

    StageRecord ess() {
        require_cm("ess");
        return run_stage("ess", ess_key(), {{"cm", cm_key()}}, [&](const fs::path& dir) { do_ess(dir); });
    }

    StageRecord ood() {
        require_cm("ood");
        return run_stage("ood", ood_key(), {{"cm", cm_key()}}, [&](const fs::path& dir) { do_ood(dir); });
    }

    StageRecord adv() {
        require_cm("adv");
        return run_stage("adv", adv_key(), {{"cm", cm_key()}}, [&](const fs::path& dir) { do_adv(dir); });
    }

    StageRecord templearn() {
        require("templearn", "cluster", cluster_key(), "missing codebook (run cluster first)");
        return run_stage("templearn", templearn_key(), {{"cluster", cluster_key()}},
                         [&](const fs::path& dir) { do_templearn(dir); });
    }

    /// Collects whichever experiment stages have finished for the current settings.
    StageRecord report() {
        json inputs = json::object();
        const std::vector<std::pair<std::string, std::string>> experiments{
            {"predict", predict_key()}, {"ess", ess_key()}, {"ood", ood_key()}, {"adv", adv_key()}, {"templearn", templearn_key()}};
        for (const auto& [stage, key] : experiments) {
            if (complete(stage, key)) {
                inputs[stage] = key;
            }
        }
        const auto key = detail::hash_key({{"stage", "report"}, {"inputs", inputs}, {"format", cfg_.report_format}});
        return run_stage("report", key, inputs, [&](const fs::path& dir) { do_report(dir, inputs); });
    }

    /// pool → embed → cluster → build-cm → predict, then every experiment the bundle supports, then report.
    void run_all() {
        pool();
        embed();
        cluster();
        build_cm();
        predict();
        const auto rois = load_rois();
        auto has = [&](tensorio::SplitTag s) {
            return std::any_of(rois.begin(), rois.end(), [&](const auto& r) { return r.split == s; });
        };
        if (has(tensorio::SplitTag::test)) {
            ess();
        }
        if (has(tensorio::SplitTag::test) && has(tensorio::SplitTag::ood) && layers().size() >= 2) {
            ood();
        }
        if (has(tensorio::SplitTag::test) && has(tensorio::SplitTag::adversarial)) {
            adv();
        }
        if (has(tensorio::SplitTag::ood) && !class_names().second.empty()) {
            templearn();
        }
        report();
    }

    /// Machine-readable record of the stages touched by this invocation.
    void write_run_manifest(const std::string& command) const {
        json stages = json::array();
        for (const auto& s : history_) {
            stages.push_back({{"stage", s.stage}, {"key", s.key}, {"dir", fs::relative(s.dir, cfg_.out).generic_string()}});
        }
        json j{{"command", command},
               {"bundle", cfg_.bundle.generic_string()},
               {"layers", layers_.empty() ? json::array() : json(layers_)},
               {"stages", stages}};
        detail::write_json(cfg_.out / "run.json", j);
    }

    // ---- readers for finished stages ----

    std::vector<tensorio::RoiRecord> load_rois() const {
        return tensorio::read_roi_table(stage_dir("pool", pool_key()) / "rois.jsonl");
    }

    std::pair<std::vector<std::string>, std::vector<std::string>> class_names() const {
        const auto j = detail::read_json(stage_dir("pool", pool_key()) / "classes.json");
        return {j.at("class_names").get<std::vector<std::string>>(), j.at("ood_class_names").get<std::vector<std::string>>()};
    }

    PoolLayer load_pool_layer(int layer_id) const {
        const auto dir = stage_dir("pool", pool_key()) / detail::layer_dir(layer_id);
        const auto meta = detail::read_json(dir / "layer.json");
        PoolLayer out;
        out.layer_id = layer_id;
        out.layer_mean = meta.at("layer_mean").get<double>();
        const auto channels = meta.at("channels").get<std::size_t>();
        auto values = symbolkit::detail::read_f32(dir / "vectors.f32");
        if (channels == 0 || values.size() % channels != 0) {
            throw FormatError((dir / "vectors.f32").string() + ": size is not a multiple of the channel count");
        }
        const std::size_t rows = values.size() / channels;
        out.vectors = Matrix<float>(rows, channels, std::move(values));
        std::ifstream in(dir / "index.jsonl", std::ios::binary);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) {
                out.retained.push_back(json::parse(line).at("retained").get<bool>());
            }
        }
        if (out.retained.size() != out.vectors.rows()) {
            throw FormatError((dir / "index.jsonl").string() + ": row count disagrees with vectors.f32");
        }
        return out;
    }

    Matrix<float> load_coords(int layer_id) const {
        const auto path = stage_dir("embed", embed_key()) / detail::layer_dir(layer_id) / "coords.f32";
        auto values = symbolkit::detail::read_f32(path);
        const std::size_t rows = values.size() / embed::n_components;
        return Matrix<float>(rows, embed::n_components, std::move(values));
    }

    cluster::SymbolCodebook load_codebook(int layer_id) const {
        return tensorio::load_model_as<cluster::SymbolCodebook>(stage_dir("cluster", cluster_key()) / detail::layer_dir(layer_id) /
                                                                "codebook.skm");
    }

    std::vector<std::vector<std::uint32_t>> load_symbols(int layer_id, std::size_t n_rois) const {
        return detail::roi_symbols(
            symbolkit::detail::read_i32(stage_dir("cluster", cluster_key()) / detail::layer_dir(layer_id) / "symbols.i32"), n_rois);
    }

    symtab::CorrelationMap load_cm(int layer_id) const {
        return tensorio::load_model_as<symtab::CorrelationMap>(stage_dir("build-cm", cm_key()) / detail::layer_dir(layer_id) /
                                                              "cm.skm");
    }

private:
    template <typename Fn>
    StageRecord run_stage(const std::string& stage, const std::string& key, const json& inputs, Fn&& body) {
        StageRecord rec{stage, key, stage_dir(stage, key), false};
        if (complete(stage, key)) {
            rec.cached = true;
        } else {
            const fs::path partial = cfg_.out / stage / (key + ".partial");
            fs::remove_all(partial);
            fs::create_directories(partial);
            try {
                body(partial);
            } catch (const StageError&) {
                fs::remove_all(partial);
                throw;
            } catch (const std::exception& e) {
                fs::remove_all(partial);
                throw StageError(stage, e.what());
            }
            json marker{{"stage", stage}, {"key", key}, {"inputs", inputs}, {"files", detail::list_files(partial)}};
            detail::write_json(partial / "stage.json", marker);
            fs::remove_all(rec.dir);
            fs::rename(partial, rec.dir);
        }
        detail::write_json(cfg_.out / stage / "latest.json", {{"stage", stage}, {"key", key}});
        history_.push_back(rec);
        return rec;
    }

    void require(const std::string& stage, const std::string& upstream, const std::string& key, const std::string& message) const {
        if (!complete(upstream, key)) {
            throw StageError(stage, message);
        }
    }

    void require_cm(const std::string& stage) const {
        require(stage, "cluster", cluster_key(), "missing codebook (run cluster first)");
        require(stage, "build-cm", cm_key(), "missing correlation map (run build-cm first)");
    }

    int templearn_layer() const {
        if (cfg_.templearn_layer != 0) {
            return cfg_.templearn_layer;
        }
        return layers().back();
    }

    std::vector<std::size_t> rows_of(const std::vector<tensorio::RoiRecord>& rois, tensorio::SplitTag split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < rois.size(); ++i) {
            if (rois[i].split == split) {
                out.push_back(i);
            }
        }
        return out;
    }

    // ---- stage bodies ----

    void do_pool(const fs::path& dir) {
        const auto bundle = tensorio::Bundle::open(cfg_.bundle);
        const auto& manifest = bundle.manifest();
        const auto& rois = bundle.rois();
        const auto layer_ids = layers();
        if (std::none_of(rois.begin(), rois.end(), [](const auto& r) { return r.split == tensorio::SplitTag::train; })) {
            throw Error("bundle has no training ROIs");
        }

        std::vector<std::string> images;
        std::map<std::string, std::vector<std::size_t>> by_image;
        for (std::size_t i = 0; i < rois.size(); ++i) {
            auto& list = by_image[rois[i].image_id];
            if (list.empty()) {
                images.push_back(rois[i].image_id);
            }
            list.push_back(i);
        }

        for (int layer_id : layer_ids) {
            const auto& info = manifest.layer(layer_id);
            const auto c = static_cast<std::size_t>(info.channels);
            Matrix<float> vectors(rois.size() * roipool::grid_positions, c);
            knn::detail::parallel_for(images.size(), cfg_.threads, [&](std::size_t im) {
                const auto tensor = bundle.load(images[im], layer_id); // one tensor per request
                for (std::size_t r : by_image.at(images[im])) {
                    const auto pooled = roipool::roi_pool(tensor, roipool::project_roi(rois[r].bbox, info), rois[r].roi_id);
                    std::copy(pooled.grid.begin(), pooled.grid.end(), vectors.row(r * roipool::grid_positions).begin());
                }
            });

            std::vector<std::size_t> train_rows;
            for (std::size_t r : rows_of(rois, tensorio::SplitTag::train)) {
                for (std::size_t p = 0; p < roipool::grid_positions; ++p) {
                    train_rows.push_back(r * roipool::grid_positions + p);
                }
            }
            const auto mean = roipool::mean_activity_filter(vectors.select_rows(train_rows)).layer_mean;

            std::string index;
            std::size_t kept = 0;
            for (std::size_t row = 0; row < vectors.rows(); ++row) {
                const auto& roi = rois[row / roipool::grid_positions];
                const bool retained = roipool::passes_mean_filter(vectors.row(row), mean);
                kept += retained;
                index += json{{"roi_id", roi.roi_id},
                              {"position", row % roipool::grid_positions + 1},
                              {"split_tag", tensorio::to_string(roi.split)},
                              {"retained", retained}}
                             .dump();
                index += '\n';
            }
            const auto ldir = dir / detail::layer_dir(layer_id);
            symbolkit::detail::write_f32(ldir / "vectors.f32", vectors.data());
            symbolkit::detail::write_text(ldir / "index.jsonl", index);
            detail::write_json(ldir / "layer.json", {{"layer_id", layer_id},
                                                     {"channels", c},
                                                     {"layer_mean", mean},
                                                     {"n_vectors", vectors.rows()},
                                                     {"n_retained", kept}});
        }
        symbolkit::detail::write_text(dir / "rois.jsonl", tensorio::roi_table_text(rois));
        detail::write_json(dir / "classes.json",
                           {{"class_names", manifest.class_names}, {"ood_class_names", manifest.ood_class_names}});
    }

    void do_embed(const fs::path& dir) {
        const auto rois = load_rois();
        for (int layer_id : layers()) {
            const auto pool = load_pool_layer(layer_id);
            std::vector<std::size_t> train_rows, other_rows;
            for (std::size_t row = 0; row < pool.vectors.rows(); ++row) {
                if (!pool.retained[row]) {
                    continue;
                }
                (rois[row / roipool::grid_positions].split == tensorio::SplitTag::train ? train_rows : other_rows).push_back(row);
            }
            if (train_rows.empty()) {
                throw Error("layer " + std::to_string(layer_id) + ": all vectors filtered");
            }
            auto fit = embed::fit_embedding(pool.vectors.select_rows(train_rows), cfg_.embed,
                                            Rng::derive(cfg_.embed_seed, static_cast<std::uint64_t>(layer_id)), layer_id);
            const auto moved = embed::transform(fit.model, pool.vectors.select_rows(other_rows));
            Matrix<float> coords(pool.vectors.rows(), embed::n_components, std::numeric_limits<float>::quiet_NaN());
            auto place = [&](const std::vector<std::size_t>& rows, const Matrix<float>& src) {
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    std::copy(src.row(i).begin(), src.row(i).end(), coords.row(rows[i]).begin());
                }
            };
            place(train_rows, fit.coords);
            place(other_rows, moved);
            const auto ldir = dir / detail::layer_dir(layer_id);
            tensorio::save_model(fit.model, ldir / "embedding.skm");
            symbolkit::detail::write_f32(ldir / "coords.f32", coords.data());
            detail::write_json(ldir / "layer.json", {{"layer_id", layer_id},
                                                     {"n_train", train_rows.size()},
                                                     {"n_unique_train", fit.model.training_points.rows()},
                                                     {"n_transformed", other_rows.size()},
                                                     {"a", fit.model.a},
                                                     {"b", fit.model.b}});
        }
    }

    void do_cluster(const fs::path& dir) {
        const auto rois = load_rois();
        for (int layer_id : layers()) {
            const auto pool = load_pool_layer(layer_id);
            const auto coords = load_coords(layer_id);
            std::vector<std::size_t> train_rows;
            for (std::size_t row = 0; row < coords.rows(); ++row) {
                if (pool.retained[row] && rois[row / roipool::grid_positions].split == tensorio::SplitTag::train) {
                    train_rows.push_back(row);
                }
            }
            const auto train = coords.select_rows(train_rows);
            const auto seed = Rng::derive(cfg_.cluster_seed, static_cast<std::uint64_t>(layer_id));
            cluster::LloydOptions lloyd;
            lloyd.threads = cfg_.threads;
            cluster::SymbolCodebook cb;
            if (cfg_.cluster_mode == "xmeans") {
                cluster::XMeansOptions opts;
                opts.k_init = cfg_.k_init;
                opts.k_max = cfg_.k_max;
                opts.lloyd = lloyd;
                cb = cluster::xmeans_fit(train, seed, opts);
            } else {
                cb = cluster::kmeans_fit(train, cfg_.fixed_k, seed, lloyd);
            }
            const auto embedding_file = stage_dir("embed", embed_key()) / detail::layer_dir(layer_id) / "embedding.skm";
            cb.layer_id = layer_id;
            cb.layer_mean = pool.layer_mean;
            cb.embedding_ref = symbolkit::detail::hex64(symbolkit::detail::fnv1a([&] {
                const auto bytes = symbolkit::detail::read_file(embedding_file);
                return std::string(bytes.begin(), bytes.end());
            }()));
            std::vector<std::int32_t> symbols(coords.rows(), -1);
            for (std::size_t row = 0; row < coords.rows(); ++row) {
                if (pool.retained[row]) {
                    symbols[row] = static_cast<std::int32_t>(cluster::assign_symbol(cb, coords.row(row)));
                }
            }
            const auto ldir = dir / detail::layer_dir(layer_id);
            tensorio::save_model(cb, ldir / "codebook.skm");
            symbolkit::detail::write_i32(ldir / "symbols.i32", symbols);
            detail::write_json(ldir / "layer.json",
                               {{"layer_id", layer_id}, {"n_symbols", cb.centers.rows()}, {"n_train_points", train_rows.size()}});
        }
    }

    std::vector<symtab::RoiSymbols> training_set(const std::vector<tensorio::RoiRecord>& rois,
                                                 const std::vector<std::vector<std::uint32_t>>& symbols, std::size_t k,
                                                 std::size_t* skipped = nullptr) const {
        std::vector<symtab::RoiSymbols> out;
        for (std::size_t r : rows_of(rois, tensorio::SplitTag::train)) {
            const auto label = cfg_.label_source == "true" ? rois[r].true_label : rois[r].model_prediction;
            if (!label || *label < 0 || static_cast<std::size_t>(*label) >= k) {
                if (skipped) {
                    ++*skipped;
                }
                continue;
            }
            out.push_back({symbols[r], *label});
        }
        return out;
    }

    void do_build_cm(const fs::path& dir) {
        const auto rois = load_rois();
        const auto names = class_names().first;
        for (int layer_id : layers()) {
            const auto symbols = load_symbols(layer_id, rois.size());
            const auto s = load_codebook(layer_id).centers.rows();
            std::size_t skipped = 0;
            const auto train = training_set(rois, symbols, names.size(), &skipped);
            auto cm = symtab::build_cm(s, names.size(), train, layer_id, cfg_.threads);
            cm.class_names = names;
            const auto ldir = dir / detail::layer_dir(layer_id);
            tensorio::save_model(cm, ldir / "cm.skm");
            detail::write_json(ldir / "layer.json", {{"layer_id", layer_id},
                                                     {"n_symbols", s},
                                                     {"n_classes", names.size()},
                                                     {"n_rois", train.size()},
                                                     {"n_skipped", skipped},
                                                     {"total_count", cm.total()}});
        }
    }

    void do_predict(const fs::path& dir) {
        const auto rois = load_rois();
        const auto k = class_names().first.size();
        const auto test = rows_of(rois, tensorio::SplitTag::test);
        if (test.empty()) {
            throw Error("bundle has no test ROIs");
        }
        report::ExperimentResults res;
        report::CsvTable preds({"roi_id", "layer", "pred", "true_label", "model_prediction"});
        auto opt = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); };

        auto evaluate = [&](const symtab::NormalizedMap& p, const std::vector<std::vector<std::uint32_t>>& symbols,
                            int layer_id, bool record) {
            std::vector<int> pred_label, true_label, pred_dec, model_dec;
            for (std::size_t r : test) {
                const auto pr = symtab::predict_roi(p, symbols[r]).label;
                if (record) {
                    preds.add_row({rois[r].roi_id, std::to_string(layer_id), std::to_string(pr), opt(rois[r].true_label),
                                   opt(rois[r].model_prediction)});
                }
                if (rois[r].true_label) {
                    pred_label.push_back(pr);
                    true_label.push_back(*rois[r].true_label);
                }
                if (rois[r].model_prediction && static_cast<std::size_t>(*rois[r].model_prediction) < k) {
                    pred_dec.push_back(pr);
                    model_dec.push_back(*rois[r].model_prediction);
                }
            }
            report::LayerAccuracy a{layer_id, pred_label.empty() ? std::nan("") : metrics::accuracy(pred_label, true_label),
                                    pred_label.size()};
            report::LayerAccuracy d{layer_id, pred_dec.empty() ? std::nan("") : metrics::accuracy(pred_dec, model_dec),
                                    pred_dec.size()};
            return std::pair{a, d};
        };

        for (int layer_id : layers()) {
            const auto symbols = load_symbols(layer_id, rois.size());
            const auto p = symtab::normalize_cm(load_cm(layer_id));
            const auto [a, d] = evaluate(p, symbols, layer_id, true);
            res.label_accuracy.push_back(a);
            if (d.n > 0) {
                res.decision_accuracy.push_back(d);
            }
        }

        if (!cfg_.sweep_ks.empty()) {
            res.sweep_layers = layers();
            res.sweep_ks = cfg_.sweep_ks;
            for (int layer_id : layers()) {
                const auto pool = load_pool_layer(layer_id);
                const auto coords = load_coords(layer_id);
                std::vector<std::size_t> train_rows;
                for (std::size_t row = 0; row < coords.rows(); ++row) {
                    if (pool.retained[row] && rois[row / roipool::grid_positions].split == tensorio::SplitTag::train) {
                        train_rows.push_back(row);
                    }
                }
                const auto train = coords.select_rows(train_rows);
                for (auto kk : cfg_.sweep_ks) {
                    if (kk > train.rows()) {
                        continue; // left empty in the grid
                    }
                    cluster::LloydOptions lloyd;
                    lloyd.threads = cfg_.threads;
                    const auto cb = cluster::kmeans_fit(
                        train, kk, Rng::derive(Rng::derive(cfg_.cluster_seed, static_cast<std::uint64_t>(layer_id)), kk), lloyd);
                    std::vector<std::int32_t> sym(coords.rows(), -1);
                    for (std::size_t row = 0; row < coords.rows(); ++row) {
                        if (pool.retained[row]) {
                            sym[row] = static_cast<std::int32_t>(cluster::assign_symbol(cb, coords.row(row)));
                        }
                    }
                    const auto symbols = detail::roi_symbols(sym, rois.size());
                    const auto cm = symtab::build_cm(cb.centers.rows(), k, training_set(rois, symbols, k), layer_id, cfg_.threads);
                    res.sweep_accuracy[{layer_id, kk}] = evaluate(symtab::normalize_cm(cm), symbols, layer_id, false).first.accuracy;
                }
            }
        }

        report::accuracy_table(res.label_accuracy).write(dir / "accuracy.csv");
        report::accuracy_table(res.decision_accuracy).write(dir / "decision_accuracy.csv");
        preds.write(dir / "predictions.csv");
        if (!cfg_.sweep_ks.empty()) {
            report::sweep_table(res).write(dir / "sweep.csv");
        }
        detail::write_json(dir / "results.json", to_json(res));
    }

    struct EssRun {
        symtab::EssTable table;
        symtab::Exclusions exclusions;
        std::vector<std::size_t> rows; ///< ROI index per table entry
    };

    EssRun ess_for(const std::vector<tensorio::RoiRecord>& rois, const std::vector<std::size_t>& which,
                   symtab::ClassSource source, const std::vector<int>& norm_layers) const {
        std::vector<symtab::NormalizedMap> maps;
        std::vector<std::vector<std::vector<std::uint32_t>>> symbols;
        for (int layer_id : layers()) {
            maps.push_back(symtab::normalize_cm(load_cm(layer_id)));
            symbols.push_back(load_symbols(layer_id, rois.size()));
        }
        EssRun out;
        for (std::size_t r : which) {
            std::vector<symtab::LayerSymbols> ls;
            for (std::size_t li = 0; li < maps.size(); ++li) {
                ls.push_back({layers()[li], &maps[li], symbols[li][r]});
            }
            auto prof = symtab::ess_profile(ls, source, rois[r].true_label, rois[r].model_prediction, norm_layers, &out.exclusions);
            if (prof) {
                prof->roi_id = rois[r].roi_id;
                prof->split_tag = tensorio::to_string(rois[r].split);
                out.table.push_back(std::move(*prof));
                out.rows.push_back(r);
            }
        }
        return out;
    }

    void do_ess(const fs::path& dir) {
        const auto rois = load_rois();
        const auto source = symtab::parse_class_source(cfg_.class_source);
        const auto run = ess_for(rois, rows_of(rois, tensorio::SplitTag::test), source, cfg_.norm_layers);
        report::ExperimentResults res;
        std::map<int, std::pair<std::vector<double>, std::vector<double>>> per_layer;
        std::pair<std::vector<double>, std::vector<double>> norm;
        std::size_t n_correct = 0, n_incorrect = 0, n_unknown = 0;
        for (std::size_t i = 0; i < run.table.size(); ++i) {
            const auto& roi = rois[run.rows[i]];
            if (!roi.true_label || !roi.model_prediction) {
                ++n_unknown;
                continue;
            }
            const bool correct = *roi.model_prediction == *roi.true_label;
            (correct ? n_correct : n_incorrect)++;
            for (const auto& [l, v] : run.table[i].per_layer) {
                (correct ? per_layer[l].first : per_layer[l].second).push_back(v);
            }
            (correct ? norm.first : norm.second).push_back(run.table[i].norm);
        }
        for (const auto& [l, pn] : per_layer) {
            if (auto a = detail::safe_auroc(pn.first, pn.second)) {
                res.ess_auroc.push_back({"L" + std::to_string(l), *a});
            }
        }
        if (auto a = detail::safe_auroc(norm.first, norm.second)) {
            res.ess_auroc.push_back({"norm", *a});
        }
        tensorio::ess_table_csv(run.table, layers()).write(dir / "scores.csv");
        report::score_table(res.ess_auroc, "auroc").write(dir / "auroc.csv");
        tensorio::save_model(run.table, dir / "ess_table.skm");
        auto j = to_json(res);
        j["n_correct"] = n_correct;
        j["n_incorrect"] = n_incorrect;
        j["n_without_labels"] = n_unknown;
        j["excluded_missing_class"] = run.exclusions.missing_class;
        j["excluded_outside_class_set"] = run.exclusions.outside_class_set;
        detail::write_json(dir / "results.json", j);
    }

    void do_ood(const fs::path& dir) {
        const auto rois = load_rois();
        const auto all = layers();
        if (all.size() < 2) {
            throw Error("ood needs at least two layers");
        }
        const std::vector<int> shallow(all.begin(), all.end() - 1);
        auto which = rows_of(rois, tensorio::SplitTag::test);
        const auto ood_rows = rows_of(rois, tensorio::SplitTag::ood);
        if (which.empty() || ood_rows.empty()) {
            throw Error("ood needs test and ood ROIs");
        }
        which.insert(which.end(), ood_rows.begin(), ood_rows.end());
        const auto run = ess_for(rois, which, symtab::ClassSource::layer4_prediction, shallow);
        report::ExperimentResults res;
        for (std::size_t i = 0; i < 3 && i < shallow.size(); ++i) {
            res.ood_layers[i] = shallow[i];
        }
        std::map<int, std::pair<std::vector<double>, std::vector<double>>> per_layer;
        std::pair<std::vector<double>, std::vector<double>> norm;
        for (std::size_t i = 0; i < run.table.size(); ++i) {
            const bool in_dist = rois[run.rows[i]].split == tensorio::SplitTag::test;
            const auto& prof = run.table[i];
            for (int l : shallow) {
                const auto v = *prof.layer(l);
                (in_dist ? per_layer[l].first : per_layer[l].second).push_back(v);
            }
            (in_dist ? norm.first : norm.second).push_back(prof.norm);
            if (shallow.size() >= 3) {
                report::OodPoint pt;
                for (std::size_t d = 0; d < 3; ++d) {
                    pt.ess[d] = *prof.layer(shallow[d]);
                }
                pt.ood = !in_dist;
                res.ood_points.push_back(pt);
            }
        }
        for (int l : shallow) {
            res.ood_auroc.push_back({"L" + std::to_string(l), metrics::auroc(per_layer[l].first, per_layer[l].second)});
        }
        res.ood_auroc.push_back({"norm", metrics::auroc(norm.first, norm.second)});
        tensorio::ess_table_csv(run.table, all).write(dir / "scores.csv");
        report::score_table(res.ood_auroc, "auroc").write(dir / "auroc.csv");
        report::ood_points_table(res).write(dir / "points.csv");
        detail::write_json(dir / "results.json", to_json(res));
    }

    void do_adv(const fs::path& dir) {
        const auto rois = load_rois();
        const auto clean = rows_of(rois, tensorio::SplitTag::test);
        const auto adv_rows = rows_of(rois, tensorio::SplitTag::adversarial);
        if (clean.empty() || adv_rows.empty()) {
            throw Error("adv needs test and adversarial ROIs");
        }
        auto which = clean;
        which.insert(which.end(), adv_rows.begin(), adv_rows.end());
        report::ExperimentResults res;

        auto split_norms = [&](const EssRun& run) {
            std::pair<std::vector<double>, std::vector<double>> out;
            for (std::size_t i = 0; i < run.table.size(); ++i) {
                (rois[run.rows[i]].split == tensorio::SplitTag::test ? out.first : out.second).push_back(run.table[i].norm);
            }
            return out;
        };
        const auto standard = ess_for(rois, which, symtab::ClassSource::layer4_prediction, {});
        const auto decision = ess_for(rois, which, symtab::ClassSource::model_decision, {});
        const auto s = split_norms(standard);
        const auto d = split_norms(decision);
        if (auto a = detail::safe_auroc(s.first, s.second)) {
            res.adversarial_auroc.push_back({"ess_norm", *a});
        }
        if (auto a = detail::safe_auroc(d.first, d.second)) {
            res.adversarial_auroc.push_back({"decision_ess_norm", *a});
        }

        std::vector<int> symbol_pred, model_pred, truth;
        for (std::size_t i = 0; i < standard.table.size(); ++i) {
            const auto& roi = rois[standard.rows[i]];
            if (roi.split != tensorio::SplitTag::adversarial || !roi.true_label) {
                continue;
            }
            symbol_pred.push_back(standard.table[i].resolved_class);
            model_pred.push_back(roi.model_prediction.value_or(-1));
            truth.push_back(*roi.true_label);
        }
        if (!truth.empty()) {
            res.adversarial_accuracy.push_back({"symbol_based", metrics::accuracy(symbol_pred, truth)});
            res.adversarial_accuracy.push_back({"model", metrics::accuracy(model_pred, truth)});
        }
        res.adversarial_counts.push_back({"clean_included", static_cast<double>(d.first.size())});
        res.adversarial_counts.push_back({"adversarial_included", static_cast<double>(d.second.size())});
        res.adversarial_counts.push_back(
            {"excluded_outside_class_set", static_cast<double>(decision.exclusions.outside_class_set)});
        res.adversarial_counts.push_back({"excluded_missing_class", static_cast<double>(decision.exclusions.missing_class)});

        tensorio::ess_table_csv(standard.table, layers()).write(dir / "scores.csv");
        tensorio::ess_table_csv(decision.table, layers()).write(dir / "decision_scores.csv");
        report::score_table(res.adversarial_auroc, "auroc").write(dir / "auroc.csv");
        report::score_table(res.adversarial_accuracy, "accuracy").write(dir / "accuracy.csv");
        report::score_table(res.adversarial_counts, "count").write(dir / "counts.csv");
        detail::write_json(dir / "results.json", to_json(res));
    }

    void do_templearn(const fs::path& dir) {
        const auto rois = load_rois();
        const auto n_ood = class_names().second.size();
        if (n_ood < 2) {
            throw Error("bundle declares fewer than 2 ood classes");
        }
        const int layer_id = templearn_layer();
        const auto all = layers();
        if (!std::binary_search(all.begin(), all.end(), layer_id)) {
            throw InvalidArgument("templearn layer " + std::to_string(layer_id) + " not analysed");
        }
        const auto symbols = load_symbols(layer_id, rois.size());
        std::vector<symtab::RoiSymbols> records;
        for (std::size_t r : rows_of(rois, tensorio::SplitTag::ood)) {
            if (rois[r].true_label) {
                records.push_back({symbols[r], *rois[r].true_label});
            }
        }
        const auto acc =
            symtab::temporary_learning(records, n_ood, cfg_.resamples, cfg_.templearn_seed, load_codebook(layer_id).centers.rows());
        report::ExperimentResults res;
        res.templearn_accuracy = acc;
        report::templearn_table(acc).write(dir / "accuracies.csv");
        auto j = to_json(res);
        j["layer"] = layer_id;
        j["mean"] = metrics::mean(acc);
        j["std"] = acc.size() > 1 ? metrics::stddev(acc) : 0.0;
        detail::write_json(dir / "results.json", j);
    }

    void do_report(const fs::path& dir, const json& inputs) {
        report::ExperimentResults res;
        for (const auto& [stage, key] : inputs.items()) {
            merge(res, detail::read_json(stage_dir(stage, key.get<std::string>()) / "results.json"));
        }
        const auto written = report::write_report(res, dir, report::parse_format(cfg_.report_format));
        detail::write_json(dir / "index.json", {{"files", written}, {"inputs", inputs}});
    }

    // ---- results (de)serialisation ----

    static json to_json(const report::ExperimentResults& r) {
        auto acc = [](const std::vector<report::LayerAccuracy>& v) {
            json a = json::array();
            for (const auto& x : v) {
                a.push_back({{"layer", x.layer_id}, {"accuracy", std::isnan(x.accuracy) ? json(nullptr) : json(x.accuracy)}, {"n", x.n}});
            }
            return a;
        };
        auto scores = [](const std::vector<report::NamedScore>& v) {
            json a = json::array();
            for (const auto& x : v) {
                a.push_back({{"name", x.name}, {"value", x.value}});
            }
            return a;
        };
        json j = json::object();
        if (!r.label_accuracy.empty()) {
            j["label_accuracy"] = acc(r.label_accuracy);
        }
        if (!r.decision_accuracy.empty()) {
            j["decision_accuracy"] = acc(r.decision_accuracy);
        }
        if (!r.ess_auroc.empty()) {
            j["ess_auroc"] = scores(r.ess_auroc);
        }
        if (!r.ood_auroc.empty()) {
            j["ood_auroc"] = scores(r.ood_auroc);
            j["ood_layers"] = r.ood_layers;
            json pts = json::array();
            for (const auto& p : r.ood_points) {
                pts.push_back({{"ess", p.ess}, {"ood", p.ood}});
            }
            j["ood_points"] = pts;
        }
        if (!r.adversarial_auroc.empty() || !r.adversarial_counts.empty()) {
            j["adversarial_auroc"] = scores(r.adversarial_auroc);
            j["adversarial_accuracy"] = scores(r.adversarial_accuracy);
            j["adversarial_counts"] = scores(r.adversarial_counts);
        }
        if (!r.templearn_accuracy.empty()) {
            j["templearn_accuracy"] = r.templearn_accuracy;
        }
        if (!r.sweep_ks.empty()) {
            json grid = json::array();
            for (const auto& [lk, v] : r.sweep_accuracy) {
                grid.push_back({{"layer", lk.first}, {"k", lk.second}, {"accuracy", v}});
            }
            j["sweep"] = {{"layers", r.sweep_layers}, {"ks", r.sweep_ks}, {"grid", grid}};
        }
        return j;
    }

    static void merge(report::ExperimentResults& r, const json& j) {
        auto acc = [](const json& a) {
            std::vector<report::LayerAccuracy> out;
            for (const auto& x : a) {
                out.push_back({x.at("layer").get<int>(), x.at("accuracy").is_null() ? std::nan("") : x.at("accuracy").get<double>(),
                               x.at("n").get<std::size_t>()});
            }
            return out;
        };
        auto scores = [](const json& a) {
            std::vector<report::NamedScore> out;
            for (const auto& x : a) {
                out.push_back({x.at("name").get<std::string>(), x.at("value").get<double>()});
            }
            return out;
        };
        if (j.contains("label_accuracy")) {
            r.label_accuracy = acc(j.at("label_accuracy"));
        }
        if (j.contains("decision_accuracy")) {
            r.decision_accuracy = acc(j.at("decision_accuracy"));
        }
        if (j.contains("ess_auroc")) {
            r.ess_auroc = scores(j.at("ess_auroc"));
        }
        if (j.contains("ood_auroc")) {
            r.ood_auroc = scores(j.at("ood_auroc"));
            r.ood_layers = j.at("ood_layers").get<std::array<int, 3>>();
            for (const auto& p : j.at("ood_points")) {
                r.ood_points.push_back({p.at("ess").get<std::array<double, 3>>(), p.at("ood").get<bool>()});
            }
        }
        if (j.contains("adversarial_auroc")) {
            r.adversarial_auroc = scores(j.at("adversarial_auroc"));
            r.adversarial_accuracy = scores(j.at("adversarial_accuracy"));
            r.adversarial_counts = scores(j.at("adversarial_counts"));
        }
        if (j.contains("templearn_accuracy")) {
            r.templearn_accuracy = j.at("templearn_accuracy").get<std::vector<double>>();
        }
        if (j.contains("sweep")) {
            const auto& s = j.at("sweep");
            r.sweep_layers = s.at("layers").get<std::vector<int>>();
            r.sweep_ks = s.at("ks").get<std::vector<std::size_t>>();
            for (const auto& g : s.at("grid")) {
                r.sweep_accuracy[{g.at("layer").get<int>(), g.at("k").get<std::size_t>()}] = g.at("accuracy").get<double>();
            }
        }
    }

    PipelineConfig cfg_;
    mutable std::string bundle_id_;
    mutable std::vector<int> layers_;
    std::vector<StageRecord> history_;
};

} // namespace symbolkit::pipeline

#endif
