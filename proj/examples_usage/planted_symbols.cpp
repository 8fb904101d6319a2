// Writes a small synthetic bundle, runs pool through predict, and prints per-layer accuracy
// and the ESS of the first test ROI.
//
//   ./example_planted_symbols /tmp/planted

#include "symbolkit.hpp"

#include <iostream>

using namespace symbolkit;

int main(int argc, char** argv) {
    const std::filesystem::path root = argc > 1 ? argv[1] : "planted-example";

    synth::SynthConfig sc;
    sc.n_classes = 6;
    sc.rois_per_class = 30;
    sc.train_per_class = 20;
    sc.layers = {1, 2};
    sc.channels = 16;
    synth::write_synth_bundle(root / "bundle", sc);

    pipeline::PipelineConfig cfg;
    cfg.bundle = root / "bundle";
    cfg.out = root / "out";
    cfg.embed.n_neighbors = 15;
    pipeline::Pipeline p(cfg);
    p.pool();
    p.embed();
    p.cluster();
    p.build_cm();
    p.predict();

    const auto acc = report::read_csv(p.stage_dir("predict", p.predict_key()) / "accuracy.csv");
    for (const auto& row : acc.rows()) {
        std::cout << "layer " << row[0] << ": accuracy " << row[1] << " over " << row[2] << " test ROIs\n";
    }

    // the same numbers by hand for one ROI
    const auto rois = p.load_rois();
    std::size_t first_test = 0;
    while (rois[first_test].split != tensorio::SplitTag::test) {
        ++first_test;
    }
    std::vector<symtab::NormalizedMap> maps;
    std::vector<std::vector<std::vector<std::uint32_t>>> symbols;
    for (int layer : p.layers()) {
        maps.push_back(symtab::normalize_cm(p.load_cm(layer)));
        symbols.push_back(p.load_symbols(layer, rois.size()));
    }
    std::vector<symtab::LayerSymbols> layers;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        layers.push_back({p.layers()[i], &maps[i], symbols[i][first_test]});
    }
    const auto prof = symtab::ess_profile(layers, symtab::ClassSource::layer4_prediction, rois[first_test].true_label,
                                          rois[first_test].model_prediction);
    std::cout << rois[first_test].roi_id << ": resolved class " << prof->resolved_class << ", ESS norm " << prof->norm
              << '\n';
}
