#include "symbolkit/pipeline.hpp"
#include "symbolkit/synth.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <memory>

using namespace symbolkit;
using namespace symbolkit::pipeline;

namespace {

class PipelineTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = std::make_unique<testutil::TempDir>("pipeline");
        synth::SynthConfig sc;
        sc.n_classes = 5;
        sc.rois_per_class = 24;
        sc.train_per_class = 16;
        sc.layers = {1, 2, 3};
        sc.channels = 16;
        sc.n_ood_classes = 3;
        sc.ood_rois_per_class = 12;
        sc.n_adversarial = 20;
        synth::write_synth_bundle(bundle(), sc);
    }
    static void TearDownTestSuite() { root_.reset(); }

    static std::filesystem::path bundle() { return root_->path() / "bundle"; }

    PipelineConfig config(const std::string& out) const {
        PipelineConfig c;
        c.bundle = bundle();
        c.out = root_->path() / out;
        c.embed.n_neighbors = 10;
        c.embed.n_epochs = 60;
        c.k_init = 3;
        c.resamples = 10;
        return c;
    }

    static std::unique_ptr<testutil::TempDir> root_;
};

std::unique_ptr<testutil::TempDir> PipelineTest::root_;

std::map<std::string, std::string> artifacts(const std::filesystem::path& out) {
    auto files = testutil::tree_contents(out);
    files.erase("run.json");
    return files;
}

} // namespace

TEST_F(PipelineTest, RunAllWritesEveryStage) {
    Pipeline p(config("all"));
    p.run_all();
    std::vector<std::string> stages;
    for (const auto& s : p.history()) {
        stages.push_back(s.stage);
        EXPECT_FALSE(s.cached);
        EXPECT_TRUE(std::filesystem::exists(s.dir / "stage.json")) << s.stage;
        EXPECT_EQ(s.dir.filename().string(), s.key);
    }
    EXPECT_EQ(stages, (std::vector<std::string>{"pool", "embed", "cluster", "build-cm", "predict", "ess", "ood", "adv",
                                                "templearn", "report"}));
    const auto acc = report::read_csv(p.stage_dir("predict", p.predict_key()) / "accuracy.csv");
    ASSERT_EQ(acc.rows().size(), 3u);
    for (const auto& row : acc.rows()) {
        EXPECT_GE(std::stod(row[1]), 0.9) << row[0];
    }
    const auto latest = pipeline::detail::read_json(config("all").out / "ess" / "latest.json");
    EXPECT_EQ(latest.at("key").get<std::string>(), p.ess_key());
    for (const char* f : {"accuracy.csv", "ess_auroc.csv", "ood_auroc.csv", "adv_auroc.csv", "templearn.csv", "index.json"}) {
        EXPECT_TRUE(std::filesystem::exists(p.history().back().dir / f)) << f;
    }
}

TEST_F(PipelineTest, SecondRunIsCachedAndUnchanged) {
    const auto cfg = config("cache");
    {
        Pipeline p(cfg);
        p.run_all();
    }
    const auto before = artifacts(cfg.out);
    Pipeline again(cfg);
    again.run_all();
    for (const auto& s : again.history()) {
        EXPECT_TRUE(s.cached) << s.stage;
    }
    EXPECT_EQ(artifacts(cfg.out), before);
}

TEST_F(PipelineTest, ChangedSettingRecomputesDownstreamOnly) {
    auto cfg = config("partial");
    {
        Pipeline p(cfg);
        p.pool();
        p.embed();
        p.cluster();
        p.build_cm();
    }
    cfg.cluster_mode = "fixed-k";
    cfg.fixed_k = 7;
    cfg.threads = 2; // worker count is not part of any key
    Pipeline p(cfg);
    EXPECT_TRUE(p.pool().cached);
    EXPECT_TRUE(p.embed().cached);
    EXPECT_FALSE(p.cluster().cached);
    EXPECT_FALSE(p.build_cm().cached);
    EXPECT_EQ(p.load_codebook(2).centers.rows(), 7u);
    EXPECT_EQ(std::distance(std::filesystem::directory_iterator(cfg.out / "cluster"), {}), 3); // two keys + latest.json
}

TEST_F(PipelineTest, MissingUpstreamIsAStageError) {
    Pipeline p(config("missing"));
    try {
        p.predict();
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "predict");
        EXPECT_NE(std::string(e.what()).find("missing codebook"), std::string::npos);
    }
    EXPECT_THROW(p.embed(), StageError);
    p.pool();
    p.embed();
    try {
        p.build_cm();
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_NE(std::string(e.what()).find("missing codebook"), std::string::npos);
    }
}

TEST_F(PipelineTest, ByteIdenticalAcrossOutputDirsAndThreads) {
    auto a = config("det-a");
    auto b = config("det-b");
    b.threads = 3;
    Pipeline(a).run_all();
    Pipeline(b).run_all();
    const auto fa = artifacts(a.out), fb = artifacts(b.out);
    ASSERT_EQ(fa.size(), fb.size());
    for (const auto& [name, bytes] : fa) {
        ASSERT_TRUE(fb.count(name)) << name;
        EXPECT_TRUE(bytes == fb.at(name)) << name;
    }
}

TEST_F(PipelineTest, InterruptedStageIsRedone) {
    const auto cfg = config("interrupt");
    Pipeline p(cfg);
    p.pool();
    // a crash mid-stage leaves only a .partial directory behind
    const auto leftover = cfg.out / "embed" / (p.embed_key() + ".partial");
    std::filesystem::create_directories(leftover);
    symbolkit::detail::write_text(leftover / "junk", "x");
    const auto rec = p.embed();
    EXPECT_FALSE(rec.cached);
    EXPECT_FALSE(std::filesystem::exists(leftover));
    EXPECT_FALSE(std::filesystem::exists(rec.dir / "junk"));
}

TEST_F(PipelineTest, ModelLabelsChangeTheMap) {
    auto cfg = config("labels");
    Pipeline t(cfg);
    t.pool();
    t.embed();
    t.cluster();
    t.build_cm();
    cfg.label_source = "model";
    Pipeline m(cfg);
    m.build_cm();
    EXPECT_NE(t.cm_key(), m.cm_key());
    EXPECT_NE(t.load_cm(1).counts(), m.load_cm(1).counts());
    EXPECT_EQ(t.load_cm(1).total(), m.load_cm(1).total());
}

TEST_F(PipelineTest, EssTableMatchesScores) {
    Pipeline p(config("ess"));
    p.pool();
    p.embed();
    p.cluster();
    p.build_cm();
    const auto dir = p.ess().dir;
    const auto table = tensorio::load_model_as<symtab::EssTable>(dir / "ess_table.skm");
    const auto scores = report::read_csv(dir / "scores.csv");
    ASSERT_EQ(table.size(), scores.rows().size());
    EXPECT_EQ(scores.header(), (std::vector<std::string>{"roi_id", "split_tag", "class_source", "pred", "ess_l1", "ess_l2",
                                                         "ess_l3", "ess_norm"}));
    for (std::size_t i = 0; i < table.size(); ++i) {
        EXPECT_EQ(table[i].roi_id, scores.rows()[i][0]);
        EXPECT_EQ(std::stod(scores.rows()[i][7]), table[i].norm);
        EXPECT_LE(table[i].norm, std::sqrt(3.0) + 1e-12);
    }
}

TEST_F(PipelineTest, SweepGrid) {
    auto cfg = config("sweep");
    cfg.sweep_ks = {4, 8};
    Pipeline p(cfg);
    p.pool();
    p.embed();
    p.cluster();
    p.build_cm();
    const auto t = report::read_csv(p.predict().dir / "sweep.csv");
    EXPECT_EQ(t.header(), (std::vector<std::string>{"layer", "k4", "k8"}));
    EXPECT_EQ(t.rows().size(), 3u);
}

TEST_F(PipelineTest, BadSettings) {
    auto cfg = config("bad");
    cfg.threads = 0;
    EXPECT_THROW(Pipeline{cfg}, InvalidArgument);
    cfg = config("bad");
    cfg.cluster_mode = "dbscan";
    EXPECT_THROW(Pipeline{cfg}, InvalidArgument);
    cfg = config("bad");
    cfg.class_source = "oracle";
    EXPECT_THROW(Pipeline{cfg}, InvalidArgument);
    cfg = config("bad");
    cfg.layers = {9};
    Pipeline p(cfg);
    EXPECT_THROW(p.pool(), InvalidArgument);
    cfg = config("bad");
    cfg.bundle = root_->path() / "nowhere";
    Pipeline q(cfg);
    EXPECT_THROW(q.pool(), StageError);
}

TEST_F(PipelineTest, CorruptBlobFailsPool) {
    testutil::TempDir copy("pipeline-corrupt");
    std::filesystem::copy(bundle(), copy.path() / "b", std::filesystem::copy_options::recursive);
    {
        auto bytes = symbolkit::detail::read_file(copy.path() / "b" / "img00002" / "1.f32");
        bytes[5] ^= 0x40;
        symbolkit::detail::write_file(copy.path() / "b" / "img00002" / "1.f32", bytes);
    }
    auto cfg = config("corrupt");
    cfg.bundle = copy.path() / "b";
    Pipeline p(cfg);
    try {
        p.pool();
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum mismatch"), std::string::npos) << e.what();
    }
    EXPECT_FALSE(p.complete("pool", p.pool_key()));
}
