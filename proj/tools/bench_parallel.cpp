// Times the OpenMP kernels against the serial reference on the three
// data-parallel workloads: batch gradient accumulation (one training epoch),
// evaluation scoring, and feature precomputation.

#include <chrono>
#include <cstdio>

#include "mads/engine.hpp"
#include "mads/imageenc.hpp"
#include "mads/parallel.hpp"
#include "mads/rng.hpp"

using namespace mads;

namespace {

double seconds_of(const std::function<void()>& fn) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count();
}

struct Fixture {
    corpus::SyntheticDataset data;
    textenc::EmbeddingTable table;
    ModelConfig cfg;
    std::filesystem::path store_dir;

    Fixture() {
        corpus::SyntheticConfig sc;
        sc.train_per_class = 40;
        sc.test_seen_per_class = 20;
        sc.test_unseen_per_class = 40;
        data = corpus::gen_synthetic_dataset(sc);
        table = textenc::EmbeddingTable::from_rows(data.embedding_rows);
        cfg.vocab_size = table.size();
        cfg.embed_dim = table.dim();
        cfg.r = 16;
        cfg.r_h = 16;
        cfg.heads = 4;
        cfg.k_queries = 2;
        cfg.views = data.views.count();
        cfg.max_len = 64;
        cfg.backbone_blocks = sc.backbone_blocks;
        cfg.backbone_width = sc.backbone_width;
        cfg.patches = sc.patches;
        for (const auto& v : data.views.views()) cfg.view_names.push_back(v.name);
        store_dir = std::filesystem::temp_directory_path() /
                    ("mads-bench-" + std::to_string(::getpid()));
    }
    ~Fixture() {
        std::error_code ec;
        std::filesystem::remove_all(store_dir, ec);
    }
};

}  // namespace

int main() {
    Fixture fx;
    imageenc::SyntheticBackbone backbone(fx.data.config.seed, fx.cfg.backbone_blocks,
                                         fx.cfg.patches, fx.cfg.backbone_width,
                                         fx.data.latent_dim);
    backbone.set_latents(&fx.data.image_latents);

    std::printf("%-24s %10s %10s %8s\n", "workload", "serial(s)", "openmp(s)", "speedup");

    auto bench = [&](const char* name, const std::function<void()>& fn) {
        set_parallel_enabled(false);
        const double serial = seconds_of(fn);
        set_parallel_enabled(true);
        const double parallel = seconds_of(fn);
        std::printf("%-24s %10.3f %10.3f %7.2fx\n", name, serial, parallel,
                    parallel > 0 ? serial / parallel : 0.0);
    };

    bench("precompute_features", [&] {
        std::filesystem::remove_all(fx.store_dir);
        auto store = imageenc::FeatureStore::create_or_open(fx.store_dir);
        imageenc::precompute_features(fx.data.manifest, backbone, store);
    });

    {
        auto store = imageenc::FeatureStore::create_or_open(fx.store_dir);
        imageenc::precompute_features(fx.data.manifest, backbone, store);

        Rng rng(7);
        Model model = Model::init(fx.cfg, rng);
        auto docs =
            engine::prepare_documents(fx.data.documents, fx.cfg, fx.table, fx.data.lexicon);

        engine::TrainConfig tc;
        tc.epochs = 1;
        tc.lr = 1e-3;
        bench("train_epoch", [&] {
            Model m = model;
            engine::train(m, fx.data.manifest, docs, fx.table, store, tc);
        });

        bench("evaluate", [&] {
            engine::evaluate(model, fx.data.manifest, docs, fx.table, store);
        });
    }
    std::printf("workers available: %d\n", worker_count());
    return 0;
}
