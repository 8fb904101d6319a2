// Command-line front end: `symbolkit <subcommand> [options]`.

#include "symbolkit.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace {

using namespace symbolkit;

std::string env_name(const std::string& key) {
    std::string out = "SYMBOLKIT_";
    for (char c : key) {
        out += (c == '.' || c == '-') ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    return out;
}

// Keys settable from the environment, with the subcommand flags that set the same value.
std::vector<std::pair<std::string, std::vector<std::string>>>& env_keys() {
    static std::vector<std::pair<std::string, std::vector<std::string>>> keys;
    return keys;
}

template <typename T>
CLI::Option* keyed(CLI::App& app, const std::string& key, T& target, const std::string& help,
                   std::vector<std::string> aliases = {}) {
    env_keys().emplace_back(key, std::move(aliases));
    return app.add_option("--" + key, target, help)->envname(env_name(key))->capture_default_str();
}

bool on_command_line(const std::vector<std::string>& args, const std::string& flag) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

// CLI11 reads the config file before the environment; to rank the environment above the
// config file, set variables are appended as flags unless the command line already has them.
std::vector<std::string> with_env(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    const auto given = args;
    for (const auto& [key, aliases] : env_keys()) {
        const char* value = std::getenv(env_name(key).c_str());
        if (value == nullptr || on_command_line(given, "--" + key) ||
            std::any_of(aliases.begin(), aliases.end(), [&](const std::string& a) { return on_command_line(given, a); })) {
            continue;
        }
        args.push_back("--" + key);
        args.emplace_back(value);
    }
    std::reverse(args.begin(), args.end()); // CLI11 takes arguments last-first
    return args;
}

void print_stage(const pipeline::StageRecord& s) {
    std::cout << s.stage << ": " << s.dir.generic_string() << (s.cached ? " (cached)" : "") << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"symbolkit: symbols from activity vectors of object-recognition networks"};
    app.name("symbolkit");
    app.set_version_flag("--version", "symbolkit 1.0.0");
    app.set_config("--config", "", "Config file of flat 'key = value' lines (e.g. embed.n_neighbors = 50)");
    {
        auto fmt = std::make_shared<CLI::ConfigTOML>();
        fmt->parentSeparator('/'); // keep dotted keys as option names
        app.config_formatter(fmt);
    }
    app.fallthrough();
    app.require_subcommand(1);

    pipeline::PipelineConfig cfg;
    std::string bundle, out = cfg.out.string();
    keyed(app, "bundle", bundle, "Bundle directory");
    keyed(app, "out", out, "Output directory for all artifacts");
    keyed(app, "layers", cfg.layers, "Layer ids to analyse (default: all)")->delimiter(',');
    keyed(app, "threads", cfg.threads, "Worker cap");

    keyed(app, "embed.n_neighbors", cfg.embed.n_neighbors, "Neighbourhood size");
    keyed(app, "embed.min_dist", cfg.embed.min_dist, "Minimum embedded distance");
    keyed(app, "embed.spread", cfg.embed.spread, "Embedding spread");
    keyed(app, "embed.local_connectivity", cfg.embed.local_connectivity, "Local connectivity");
    keyed(app, "embed.learning_rate", cfg.embed.learning_rate, "Initial SGD learning rate");
    keyed(app, "embed.negative_sample_rate", cfg.embed.negative_sample_rate, "Negative samples per positive");
    keyed(app, "embed.repulsion_strength", cfg.embed.repulsion_strength, "Repulsion weight");
    keyed(app, "embed.n_epochs", cfg.embed.n_epochs, "Layout epochs (-1: by size)");
    keyed(app, "embed.transform_epochs", cfg.embed.transform_epochs, "Out-of-sample epochs (-1: by size)");
    keyed(app, "embed.exact_knn_limit", cfg.embed.exact_knn_limit, "Exact neighbour search up to this many points");
    keyed(app, "embed.seed", cfg.embed_seed, "Embedding seed");

    keyed(app, "cluster.mode", cfg.cluster_mode, "xmeans or fixed-k", {"--mode"})->check(CLI::IsMember({"xmeans", "fixed-k"}));
    keyed(app, "cluster.k_init", cfg.k_init, "Initial X-means centers", {"--kinit"});
    keyed(app, "cluster.k_max", cfg.k_max, "Symbol cap", {"--kmax"});
    auto* fixed_k_key = keyed(app, "cluster.fixed_k", cfg.fixed_k, "k for fixed-k mode", {"--fixed-k"});
    keyed(app, "cluster.seed", cfg.cluster_seed, "Clustering seed", {"--seed"});
    keyed(app, "cm.label_source", cfg.label_source, "Labels folded into the map: true or model", {"--label-source"})
        ->check(CLI::IsMember({"true", "model"}));
    keyed(app, "ess.class_source", cfg.class_source, "true_label, layer4_prediction or model_decision", {"--class-source"})
        ->check(CLI::IsMember({"true_label", "layer4_prediction", "model_decision"}));
    keyed(app, "ess.norm_layers", cfg.norm_layers, "Layers in the ESS norm (default: all)")->delimiter(',');
    keyed(app, "predict.sweep_k", cfg.sweep_ks, "Fixed-k values for the accuracy grid", {"--sweep-k"})->delimiter(',');
    keyed(app, "templearn.resamples", cfg.resamples, "Temporary-learning resamples", {"--resamples"});
    keyed(app, "templearn.seed", cfg.templearn_seed, "Temporary-learning seed", {"--seed"});
    keyed(app, "templearn.layer", cfg.templearn_layer, "Layer for temporary learning (0: deepest)", {"--layer"});
    keyed(app, "report.format", cfg.report_format, "csv, svg or both", {"--format"})->check(CLI::IsMember({"csv", "svg", "both"}));

    // synth
    synth::SynthConfig sc;
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic bundle with planted clusters to --bundle");
    synth_cmd->add_option("--classes", sc.n_classes)->capture_default_str();
    synth_cmd->add_option("--rois-per-class", sc.rois_per_class)->capture_default_str();
    synth_cmd->add_option("--train-per-class", sc.train_per_class)->capture_default_str();
    synth_cmd->add_option("--channels", sc.channels)->capture_default_str();
    synth_cmd->add_option("--clusters-per-class", sc.clusters_per_class)->capture_default_str();
    synth_cmd->add_option("--sigma", sc.sigma)->capture_default_str();
    synth_cmd->add_option("--exclusivity", sc.exclusivity)->capture_default_str();
    synth_cmd->add_flag("--shuffle-labels", sc.shuffle_labels, "Destroy the symbol/class association");
    synth_cmd->add_option("--model-accuracy", sc.model_accuracy)->capture_default_str();
    synth_cmd->add_option("--hard-mix", sc.hard_mix)->capture_default_str();
    synth_cmd->add_option("--ood-classes", sc.n_ood_classes)->capture_default_str();
    synth_cmd->add_option("--ood-rois-per-class", sc.ood_rois_per_class)->capture_default_str();
    synth_cmd->add_option("--ood-consistency", sc.ood_consistency)->capture_default_str();
    synth_cmd->add_option("--adversarial", sc.n_adversarial)->capture_default_str();
    synth_cmd->add_option("--adversarial-strength", sc.adversarial_strength)->capture_default_str();
    synth_cmd->add_option("--feature-size", sc.feature_size)->capture_default_str();
    synth_cmd->add_option("--input-size", sc.input_size)->capture_default_str();
    synth_cmd->add_option("--seed", sc.seed)->capture_default_str();

    auto* pool_cmd = app.add_subcommand("pool", "ROI-pool the bundle into activity vectors");
    auto* embed_cmd = app.add_subcommand("embed", "Fit the 3-D embedding per layer");
    auto* cluster_cmd = app.add_subcommand("cluster", "Discover symbols (xmeans or fixed-k)");
    cluster_cmd->add_option("--mode", cfg.cluster_mode, "Same as --cluster.mode")->check(CLI::IsMember({"xmeans", "fixed-k"}));
    cluster_cmd->add_option("--kinit", cfg.k_init, "Same as --cluster.k_init");
    cluster_cmd->add_option("--kmax", cfg.k_max, "Same as --cluster.k_max");
    auto* fixed_k_flag = cluster_cmd->add_option("--fixed-k", cfg.fixed_k, "Use fixed-k clustering with this k");
    cluster_cmd->add_option("--seed", cfg.cluster_seed, "Same as --cluster.seed");
    auto* cm_cmd = app.add_subcommand("build-cm", "Build symbol/class correlation maps");
    cm_cmd->add_option("--label-source", cfg.label_source, "Same as --cm.label_source")->check(CLI::IsMember({"true", "model"}));
    auto* predict_cmd = app.add_subcommand("predict", "Symbol-based prediction accuracy per layer");
    predict_cmd->add_option("--sweep-k", cfg.sweep_ks, "Also evaluate fixed-k clustering at these k")->delimiter(',');
    auto* ess_cmd = app.add_subcommand("ess", "ESS of correct vs incorrect model decisions");
    ess_cmd->add_option("--class-source", cfg.class_source, "Same as --ess.class_source")
        ->check(CLI::IsMember({"true_label", "layer4_prediction", "model_decision"}));
    auto* ood_cmd = app.add_subcommand("ood", "ESS-based out-of-distribution detection");
    auto* adv_cmd = app.add_subcommand("adv", "ESS on adversarial inputs");
    auto* tl_cmd = app.add_subcommand("templearn", "Temporary learning on OOD symbols");
    tl_cmd->add_option("--resamples", cfg.resamples, "Same as --templearn.resamples");
    tl_cmd->add_option("--seed", cfg.templearn_seed, "Same as --templearn.seed");
    tl_cmd->add_option("--layer", cfg.templearn_layer, "Same as --templearn.layer");
    auto* report_cmd = app.add_subcommand("report", "Render CSV tables and SVG charts");
    report_cmd->add_option("--format", cfg.report_format, "Same as --report.format")->check(CLI::IsMember({"csv", "svg", "both"}));
    auto* run_cmd = app.add_subcommand("run", "Run every stage the bundle supports, then report");

    try {
        app.parse(with_env(argc, argv));
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    cfg.bundle = bundle;
    cfg.out = out;
    if ((fixed_k_flag->count() > 0 || fixed_k_key->count() > 0) && app.get_option("--cluster.mode")->count() == 0 &&
        cluster_cmd->get_option("--mode")->count() == 0) {
        cfg.cluster_mode = "fixed-k";
    }

    try {
        if (synth_cmd->parsed()) {
            if (bundle.empty()) {
                std::cerr << "synth: --bundle is required\n";
                return 2;
            }
            if (!cfg.layers.empty()) {
                sc.layers = cfg.layers; // --layers picks the generated layers
            }
            const auto truth = synth::write_synth_bundle(bundle, sc);
            std::cout << "synth: wrote " << truth.rois.size() << " ROIs to " << bundle << '\n';
            return 0;
        }

        std::unique_ptr<pipeline::Pipeline> pipe;
        try {
            pipe = std::make_unique<pipeline::Pipeline>(cfg);
        } catch (const InvalidArgument& e) {
            std::cerr << "symbolkit: " << e.what() << '\n';
            return 2;
        }
        std::string command;
        auto& p = *pipe;
        if (pool_cmd->parsed()) {
            command = "pool";
            p.pool();
        } else if (embed_cmd->parsed()) {
            command = "embed";
            p.embed();
        } else if (cluster_cmd->parsed()) {
            command = "cluster";
            p.cluster();
        } else if (cm_cmd->parsed()) {
            command = "build-cm";
            p.build_cm();
        } else if (predict_cmd->parsed()) {
            command = "predict";
            p.predict();
        } else if (ess_cmd->parsed()) {
            command = "ess";
            p.ess();
        } else if (ood_cmd->parsed()) {
            command = "ood";
            p.ood();
        } else if (adv_cmd->parsed()) {
            command = "adv";
            p.adv();
        } else if (tl_cmd->parsed()) {
            command = "templearn";
            p.templearn();
        } else if (report_cmd->parsed()) {
            command = "report";
            p.report();
        } else if (run_cmd->parsed()) {
            command = "run";
            p.run_all();
        }
        for (const auto& s : p.history()) {
            print_stage(s);
        }
        p.write_run_manifest(command);
        return 0;
    } catch (const pipeline::StageError& e) {
        std::cerr << "symbolkit: stage " << e.stage() << " failed: " << e.what() << '\n';
        return 1;
    } catch (const InvalidArgument& e) {
        std::cerr << "symbolkit: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "symbolkit: " << e.what() << '\n';
        return 1;
    }
}
