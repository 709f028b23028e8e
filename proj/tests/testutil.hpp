#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mads/corpus.hpp"
#include "mads/model.hpp"
#include "mads/rng.hpp"
#include "mads/textenc.hpp"

namespace testutil {

using mads::Mat;
using mads::Vec;

// Central finite differences against analytic gradients. targets are
// perturbed in place; eval returns the scalar objective and, when grads is
// non-null, fills one gradient per label from a full tape backward pass.
struct FdSpec {
    std::string label;
    Mat* target;
};

struct FdResult {
    int checked = 0;
    double worst_rel = 0.0;
    std::vector<std::string> failures;

    bool ok() const { return failures.empty(); }
};

using EvalFn = std::function<double(std::map<std::string, Mat>* grads)>;

inline FdResult fd_check(const std::vector<FdSpec>& specs, const EvalFn& eval,
                         double step = 1e-5, double rel_tol = 1e-4) {
    FdResult result;
    std::map<std::string, Mat> grads;
    eval(&grads);
    for (const FdSpec& spec : specs) {
        auto it = grads.find(spec.label);
        Mat analytic = it != grads.end()
                           ? it->second
                           : Mat::Zero(spec.target->rows(), spec.target->cols());
        for (int i = 0; i < spec.target->rows(); ++i) {
            for (int j = 0; j < spec.target->cols(); ++j) {
                const double saved = (*spec.target)(i, j);
                (*spec.target)(i, j) = saved + step;
                const double up = eval(nullptr);
                (*spec.target)(i, j) = saved - step;
                const double down = eval(nullptr);
                (*spec.target)(i, j) = saved;
                const double fd = (up - down) / (2.0 * step);
                const double a = analytic(i, j);
                const double diff = std::abs(a - fd);
                const double scale = std::max(std::abs(a), std::abs(fd));
                const double rel = scale > 0.0 ? diff / scale : 0.0;
                ++result.checked;
                if (diff > rel_tol * scale && diff > 1e-8) {
                    result.failures.push_back(spec.label + "(" + std::to_string(i) + "," +
                                              std::to_string(j) + "): analytic " +
                                              std::to_string(a) + " vs fd " +
                                              std::to_string(fd));
                }
                if (rel > result.worst_rel && diff > 1e-10) result.worst_rel = rel;
            }
        }
    }
    return result;
}

// Collects named parameter pointers of a model for fd_check.
inline std::vector<FdSpec> param_specs(mads::Model& model,
                                       const std::vector<std::string>& prefixes = {}) {
    std::vector<FdSpec> specs;
    mads::visit_params(model, [&](const std::string& name, Mat& value) {
        if (prefixes.empty()) {
            specs.push_back({name, &value});
            return;
        }
        for (const std::string& p : prefixes)
            if (name.rfind(p, 0) == 0) {
                specs.push_back({name, &value});
                return;
            }
    });
    return specs;
}

inline Mat random_mat(mads::Rng& rng, int rows, int cols, double scale = 1.0) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = rng.normal() * scale;
    return m;
}

// A small model plus a matching synthetic embedding table for gradient tests.
struct TinyInstance {
    mads::ModelConfig cfg;
    mads::Model model;
    mads::textenc::EmbeddingTable table;
};

inline TinyInstance tiny_instance(mads::Rng& rng, int views = 2, int k = 2, int r = 4,
                                  int heads = 2, int vocab = 12, int d = 4, int blocks = 1,
                                  int backbone_blocks = 2, int width = 5, int patches = 3) {
    mads::ModelConfig cfg;
    cfg.vocab_size = vocab + 1;  // the synthesized <unk> row
    cfg.embed_dim = d;
    cfg.r = r;
    cfg.r_h = r;
    cfg.heads = heads;
    cfg.text_blocks = blocks;
    cfg.perceiver_layers = 2;
    cfg.agg_layers = 1;
    cfg.k_queries = k;
    cfg.views = views;
    cfg.max_len = 8;
    cfg.backbone_blocks = backbone_blocks;
    cfg.backbone_width = width;
    cfg.patches = patches;
    cfg.view_names.clear();
    for (int v = 0; v < views; ++v) cfg.view_names.push_back("view" + std::to_string(v));

    std::vector<std::pair<std::string, Vec>> rows;
    for (int w = 0; w < vocab; ++w) {
        Vec row(d);
        for (int i = 0; i < d; ++i) row(i) = rng.normal();
        rows.emplace_back("w" + std::to_string(w), row);
    }
    TinyInstance inst{cfg, mads::Model::init(cfg, rng),
                      mads::textenc::EmbeddingTable::from_rows(rows)};
    return inst;
}

inline mads::corpus::TokenizedParagraph random_paragraph(mads::Rng& rng, int m, int vocab) {
    mads::corpus::TokenizedParagraph tp;
    for (int j = 0; j < m; ++j) {
        int id = rng.uniform_int(vocab);
        tp.tokens.push_back("w" + std::to_string(id));
        tp.token_ids.push_back(id);
        tp.visual_mask.push_back(rng.uniform() < 0.5 ? 1 : 0);
    }
    return tp;
}

// Unique scratch directory, removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& stem) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               (stem + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

}  // namespace testutil

#include "mads/engine.hpp"
#include "mads/imageenc.hpp"

namespace testutil {

// End-to-end synthetic fixture: generated corpus, frozen embeddings, cached
// backbone features, prepared documents, and an initialized model.
struct SyntheticPipeline {
    TempDir tmp{"mads-pipeline"};
    mads::corpus::SyntheticDataset data;
    mads::textenc::EmbeddingTable table;
    mads::imageenc::FeatureStore store;
    mads::ModelConfig cfg;
    mads::Model model;
    mads::engine::PreparedDocuments docs;

    static mads::Model make_model(const mads::ModelConfig& cfg, uint64_t seed) {
        mads::Rng rng(seed);
        return mads::Model::init(cfg, rng);
    }

    explicit SyntheticPipeline(const mads::corpus::SyntheticConfig& scfg = {},
                               int r = 16, int k = 2, uint64_t model_seed = 7)
        : data(mads::corpus::gen_synthetic_dataset(scfg)),
          table(mads::textenc::EmbeddingTable::from_rows(data.embedding_rows)),
          store(mads::imageenc::FeatureStore::create_or_open(tmp.path / "features")),
          cfg(make_config(data, table, r, k)),
          model(make_model(cfg, model_seed)),
          docs(mads::engine::prepare_documents(data.documents, cfg, table, data.lexicon)) {
        mads::imageenc::SyntheticBackbone backbone(
            data.config.seed, data.config.backbone_blocks, data.config.patches,
            data.config.backbone_width, data.latent_dim);
        backbone.set_latents(&data.image_latents);
        mads::imageenc::precompute_features(data.manifest, backbone, store);
    }

    static mads::ModelConfig make_config(const mads::corpus::SyntheticDataset& data,
                                         const mads::textenc::EmbeddingTable& table, int r,
                                         int k) {
        mads::ModelConfig cfg;
        cfg.vocab_size = table.size();
        cfg.embed_dim = table.dim();
        cfg.r = r;
        cfg.r_h = r;
        cfg.heads = 4;
        cfg.k_queries = k;
        cfg.views = data.views.count();
        cfg.max_len = 64;
        cfg.backbone_blocks = data.config.backbone_blocks;
        cfg.backbone_width = data.config.backbone_width;
        cfg.patches = data.config.patches;
        for (const auto& v : data.views.views()) cfg.view_names.push_back(v.name);
        return cfg;
    }
};

}  // namespace testutil
