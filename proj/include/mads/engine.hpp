#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mads/aggregate.hpp"
#include "mads/corpus.hpp"
#include "mads/imageenc.hpp"
#include "mads/model.hpp"
#include "mads/objective.hpp"
#include "mads/textenc.hpp"

namespace mads::engine {

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 0.05;
    int batch_size = 64;
    int epochs = 40;
    int warmup_epochs = 0;  // linear ramp, then per-step cosine decay
    uint64_t seed = 7;
    objective::LossWeights weights;

    void validate() const;
};

struct MetricsRecord {
    int epoch = 0;
    double l_global = 0, l_local = 0, l_focus = 0, lr = 0, t1_val = 0;
};

// Documents tokenized against the model vocabulary in config view order.
// Paragraphs longer than max_len are truncated with a warning on stderr.
struct PreparedDocuments {
    std::vector<int> class_ids;
    std::vector<std::string> class_names;
    std::vector<std::vector<corpus::TokenizedParagraph>> tokens;  // [class][view]

    int index_of(int class_id) const;
    int require(int class_id) const;  // throws if the class has no document
};

PreparedDocuments prepare_documents(const std::vector<corpus::MultiAttributeDocument>& docs,
                                    const ModelConfig& cfg, const textenc::EmbeddingTable& table,
                                    const corpus::VisualWordLexicon& lexicon);

struct ClassEmbeddings {
    std::vector<int> class_ids;
    Mat t_g;                                  // C x r
    std::vector<Mat> t_l;                     // per class: (V*K) x r
    std::vector<Mat> per_view_core;           // per class: V x r
    std::vector<std::vector<Mat>> attention;  // per class, per view: K x M
};

ClassEmbeddings class_embeddings(const Model& model, const PreparedDocuments& docs,
                                 const textenc::EmbeddingTable& table);

// Memoized on the model's parameter version.
struct EmbeddingCache {
    int64_t version = -1;
    ClassEmbeddings value;
};
const ClassEmbeddings& class_embeddings_cached(const Model& model, const PreparedDocuments& docs,
                                               const textenc::EmbeddingTable& table,
                                               EmbeddingCache& cache);

double harmonic_mean(double u, double s);

// Argmax with ties broken toward the lowest index.
int argmax_lowest(const Vec& scores);

// Highest global score among unseen classes; returns a row index into
// unseen_embeddings.
int predict_zsl(const Vec& i_g, const Mat& unseen_embeddings);

// Calibrated stacking: argmax over all classes of score - gamma * [seen].
int predict_gzsl(const Vec& i_g, const Mat& all_embeddings, const std::vector<bool>& seen_mask,
                 double gamma);
int predict_gzsl_scores(const Vec& scores, const std::vector<bool>& seen_mask, double gamma);

struct EvalResult {
    double t1 = 0, u = 0, s = 0, h = 0, gamma_used = 0;
    std::map<int, double> per_class_acc;
    struct SweepPoint {
        double gamma = 0, u = 0, s = 0, h = 0;
    };
    std::vector<SweepPoint> sweep;

    nlohmann::json to_json() const;
};

std::vector<double> default_gamma_grid();  // 0 to 1, step 0.02

// Per-class top-1 accuracies; gamma swept on per-image min-max normalized
// scores, the reported (U, S, H) taken at the grid point maximizing H.
EvalResult evaluate(const Model& model, const corpus::DatasetManifest& manifest,
                    const PreparedDocuments& docs, const textenc::EmbeddingTable& table,
                    const imageenc::FeatureStore& store,
                    const std::vector<double>& gamma_grid = default_gamma_grid());

struct TrainResult {
    std::vector<MetricsRecord> log;
};

// Optimizes Eq.-19-style total loss with decoupled weight decay and per-step
// cosine learning-rate decay. Deterministic for a fixed seed regardless of the
// parallel/serial execution mode.
TrainResult train(Model& model, const corpus::DatasetManifest& manifest,
                  const PreparedDocuments& docs, const textenc::EmbeddingTable& table,
                  const imageenc::FeatureStore& store, const TrainConfig& config,
                  const std::filesystem::path& metrics_path = {});

// Per-view interpretable scores plus the top attended words of every view.
nlohmann::json explain(const Model& model, const std::string& image_ref,
                       const imageenc::FeatureStore& store, const PreparedDocuments& docs,
                       const textenc::EmbeddingTable& table, int top_k = 10);

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const std::string& embedding_checksum);
Model load_checkpoint(const std::filesystem::path& path,
                      std::string* embedding_checksum = nullptr);
void validate_config_compat(const ModelConfig& loaded, const ModelConfig& expected);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

}  // namespace mads::engine
