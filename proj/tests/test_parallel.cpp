#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <fstream>

#include "mads/engine.hpp"
#include "mads/parallel.hpp"
#include "testutil.hpp"

using namespace mads;

namespace {

struct ParallelGuard {
    bool saved;
    explicit ParallelGuard(bool on) : saved(parallel_enabled()) { set_parallel_enabled(on); }
    ~ParallelGuard() { set_parallel_enabled(saved); }
};

std::string checkpoint_bytes(Model& model, const std::filesystem::path& dir,
                             const std::string& name) {
    const auto path = dir / name;
    engine::save_checkpoint(path, model, "x");
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

TEST_CASE("parallel_for covers every index exactly once") {
    for (bool mode : {false, true}) {
        ParallelGuard guard(mode);
        std::vector<std::atomic<int>> hits(257);
        for (auto& h : hits) h = 0;
        parallel_for(257, [&](int64_t i) { ++hits[static_cast<size_t>(i)]; });
        for (auto& h : hits) CHECK(h.load() == 1);
    }
}

TEST_CASE("exceptions inside the loop body are rethrown, not fatal") {
    for (bool mode : {false, true}) {
        ParallelGuard guard(mode);
        CHECK_THROWS_AS(parallel_for(64,
                                     [&](int64_t i) {
                                         if (i == 13) throw IoError("boom");
                                     }),
                        IoError);
    }
}

TEST_CASE("serial reference and OpenMP kernels produce identical checkpoints") {
    auto run = [&](bool parallel) {
        ParallelGuard guard(parallel);
        corpus::SyntheticConfig sc;
        sc.train_per_class = 6;
        sc.test_seen_per_class = 2;
        sc.test_unseen_per_class = 3;
        testutil::SyntheticPipeline p(sc);
        engine::TrainConfig tc;
        tc.epochs = 3;
        tc.batch_size = 16;
        tc.lr = 2e-3;
        engine::train(p.model, p.data.manifest, p.docs, p.table, p.store, tc);
        return checkpoint_bytes(p.model, p.tmp.path, "ckpt.bin");
    };
    CHECK(run(false) == run(true));
}

TEST_CASE("serial reference and OpenMP kernels produce identical evaluations") {
    corpus::SyntheticConfig sc;
    sc.train_per_class = 6;
    sc.test_seen_per_class = 3;
    sc.test_unseen_per_class = 4;
    testutil::SyntheticPipeline p(sc);
    engine::TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 16;
    tc.lr = 2e-3;
    engine::train(p.model, p.data.manifest, p.docs, p.table, p.store, tc);

    engine::EvalResult serial, parallel;
    {
        ParallelGuard guard(false);
        serial = engine::evaluate(p.model, p.data.manifest, p.docs, p.table, p.store);
    }
    {
        ParallelGuard guard(true);
        parallel = engine::evaluate(p.model, p.data.manifest, p.docs, p.table, p.store);
    }
    CHECK(serial.t1 == parallel.t1);
    CHECK(serial.u == parallel.u);
    CHECK(serial.s == parallel.s);
    CHECK(serial.h == parallel.h);
    CHECK(serial.gamma_used == parallel.gamma_used);
    CHECK(serial.per_class_acc == parallel.per_class_acc);
}

TEST_CASE("feature precomputation matches between modes") {
    corpus::SyntheticConfig sc;
    sc.train_per_class = 4;
    sc.test_seen_per_class = 2;
    sc.test_unseen_per_class = 2;
    auto data = corpus::gen_synthetic_dataset(sc);
    imageenc::SyntheticBackbone backbone(sc.seed, sc.backbone_blocks, sc.patches,
                                         sc.backbone_width, data.latent_dim);
    backbone.set_latents(&data.image_latents);

    testutil::TempDir tmp("parallel-features");
    auto run = [&](bool parallel, const char* dir) {
        ParallelGuard guard(parallel);
        auto store = imageenc::FeatureStore::create_or_open(tmp.path / dir);
        imageenc::precompute_features(data.manifest, backbone, store);
        return store;
    };
    auto serial = run(false, "serial");
    auto threaded = run(true, "parallel");
    for (const auto& s : data.manifest.samples) {
        auto a = serial.get(s.image_ref);
        auto b = threaded.get(s.image_ref);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }
}
