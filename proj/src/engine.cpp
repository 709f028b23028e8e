#include "mads/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <unordered_map>

#include "mads/parallel.hpp"

namespace mads::engine {

using nlohmann::json;

void TrainConfig::validate() const {
    if (lr < 0.0) throw ConfigError("train: learning rate must be non-negative");
    if (weight_decay < 0.0) throw ConfigError("train: weight decay must be non-negative");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (warmup_epochs < 0) throw ConfigError("train: warmup epochs must be >= 0");
    weights.validate();
}

int PreparedDocuments::index_of(int class_id) const {
    for (size_t i = 0; i < class_ids.size(); ++i)
        if (class_ids[i] == class_id) return static_cast<int>(i);
    return -1;
}

int PreparedDocuments::require(int class_id) const {
    int idx = index_of(class_id);
    if (idx < 0)
        throw ValidationError("no document for class id " + std::to_string(class_id));
    return idx;
}

PreparedDocuments prepare_documents(const std::vector<corpus::MultiAttributeDocument>& docs,
                                    const ModelConfig& cfg, const textenc::EmbeddingTable& table,
                                    const corpus::VisualWordLexicon& lexicon) {
    PreparedDocuments out;
    int unk_fallbacks = 0;
    for (const auto& doc : docs) {
        std::vector<corpus::TokenizedParagraph> per_view;
        per_view.reserve(cfg.view_names.size());
        for (const std::string& view : cfg.view_names) {
            auto it = doc.paragraphs.find(view);
            if (it == doc.paragraphs.end())
                throw ValidationError("category '" + doc.category_name + "' lacks the '" + view +
                                      "' paragraph");
            corpus::TokenizedParagraph tp = corpus::tokenize(it->second, lexicon, table.vocab);
            if (tp.size() > cfg.max_len) {
                std::cerr << "[mads] warning: truncating '" << doc.category_name << "' / '"
                          << view << "' from " << tp.size() << " to " << cfg.max_len
                          << " tokens\n";
                tp.tokens.resize(static_cast<size_t>(cfg.max_len));
                tp.token_ids.resize(static_cast<size_t>(cfg.max_len));
                tp.visual_mask.resize(static_cast<size_t>(cfg.max_len));
            }
            unk_fallbacks += tp.unk_count;
            per_view.push_back(std::move(tp));
        }
        out.class_ids.push_back(doc.category_id);
        out.class_names.push_back(doc.category_name);
        out.tokens.push_back(std::move(per_view));
    }
    if (unk_fallbacks > 0)
        std::cerr << "[mads] " << unk_fallbacks
                  << " tokens were missing from the embedding table and fell back to <unk>\n";
    return out;
}

namespace {

struct TextForward {
    ad::Var t_g_all;                          // C x r
    std::vector<ad::Var> t_l;                 // per class
    std::vector<std::vector<ad::Var>> h;      // per class, per view
    std::vector<std::vector<ad::Var>> cores;  // per class, per view (1 x r)
};

// Runs the full text tower for the given classes on one tape.
TextForward text_forward(ad::Tape& tape, const TapeBindings& params, const Model& model,
                         const PreparedDocuments& docs, const textenc::EmbeddingTable& table,
                         const std::vector<int>& doc_indices, DropoutCtx* dropout) {
    const ModelConfig& cfg = model.cfg;
    TextForward out;
    std::vector<ad::Var> tg_rows;
    tg_rows.reserve(doc_indices.size());
    for (int di : doc_indices) {
        const auto& per_view = docs.tokens[static_cast<size_t>(di)];
        std::vector<textenc::ViewFeatures> feats;
        feats.reserve(per_view.size());
        std::vector<ad::Var> h_views, core_views;
        for (int v = 0; v < cfg.views; ++v) {
            textenc::ViewFeatures vf = textenc::view_features(
                tape, per_view[static_cast<size_t>(v)], v, table, params, cfg, dropout);
            h_views.push_back(vf.h);
            core_views.push_back(vf.g);
            feats.push_back(std::move(vf));
        }
        aggregate::Aggregated agg = aggregate::aggregate_attend(tape, feats, params, cfg);
        aggregate::SemanticEmbeddings sem =
            aggregate::fuse(tape, feats, agg.a_g, agg.a_l, cfg.beta);
        tg_rows.push_back(sem.t_g);
        out.t_l.push_back(sem.t_l);
        out.h.push_back(std::move(h_views));
        out.cores.push_back(std::move(core_views));
    }
    out.t_g_all = tape.concat_rows(tg_rows);
    return out;
}

struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.05;
    int64_t t = 0;
    std::unordered_map<std::string, std::pair<Mat, Mat>> moments;

    void step(Model& model, const std::unordered_map<std::string, Mat>& grads, double lr) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        visit_params(model, [&](const std::string& name, Mat& value) {
            auto& [m, v] = moments[name];
            if (m.size() == 0) {
                m = Mat::Zero(value.rows(), value.cols());
                v = Mat::Zero(value.rows(), value.cols());
            }
            auto git = grads.find(name);
            Mat g = git != grads.end() ? git->second : Mat::Zero(value.rows(), value.cols());
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
            Mat update = (m / bc1).array() / ((v / bc2).array().sqrt() + eps);
            value -= lr * (update + weight_decay * value);
        });
        ++model.version;
    }
};

double cosine_lr(double base, int64_t step, int64_t warmup_steps, int64_t total_steps) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const int64_t decay_total = std::max<int64_t>(1, total_steps - warmup_steps);
    const int64_t decay_step = std::min(step - warmup_steps, decay_total);
    return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(decay_step) /
                                        static_cast<double>(decay_total)));
}

Mat normalize_scores(const Vec& scores) {
    const double lo = scores.minCoeff();
    const double hi = scores.maxCoeff();
    if (hi - lo <= 0.0) return Mat::Zero(scores.size(), 1);
    return (scores.array() - lo).matrix() / (hi - lo);
}

struct PerClassTally {
    std::map<int, int> correct, total;

    void add(int class_id, bool ok) {
        ++total[class_id];
        if (ok) ++correct[class_id];
    }
    double mean_acc() const {
        if (total.empty()) return 0.0;
        double sum = 0;
        for (const auto& [cid, n] : total) {
            auto it = correct.find(cid);
            sum += (it == correct.end() ? 0.0 : static_cast<double>(it->second)) /
                   static_cast<double>(n);
        }
        return sum / static_cast<double>(total.size());
    }
    void merge_acc_into(std::map<int, double>& out) const {
        for (const auto& [cid, n] : total) {
            auto it = correct.find(cid);
            out[cid] = (it == correct.end() ? 0.0 : static_cast<double>(it->second)) /
                       static_cast<double>(n);
        }
    }
};

}  // namespace

ClassEmbeddings class_embeddings(const Model& model, const PreparedDocuments& docs,
                                 const textenc::EmbeddingTable& table) {
    ad::Tape tape;
    TapeBindings params = bind_params(tape, model, false);
    std::vector<int> all(docs.class_ids.size());
    std::iota(all.begin(), all.end(), 0);
    TextForward fwd = text_forward(tape, params, model, docs, table, all, nullptr);

    ClassEmbeddings out;
    out.class_ids = docs.class_ids;
    out.t_g = tape.val(fwd.t_g_all);
    for (size_t c = 0; c < all.size(); ++c) {
        out.t_l.push_back(tape.val(fwd.t_l[c]));
        Mat cores(model.cfg.views, model.cfg.r);
        std::vector<Mat> maps;
        for (int v = 0; v < model.cfg.views; ++v) {
            cores.row(v) = tape.val(fwd.cores[c][static_cast<size_t>(v)]).row(0);
            maps.push_back(tape.val(fwd.h[c][static_cast<size_t>(v)]));
        }
        out.per_view_core.push_back(std::move(cores));
        out.attention.push_back(std::move(maps));
    }
    return out;
}

const ClassEmbeddings& class_embeddings_cached(const Model& model, const PreparedDocuments& docs,
                                               const textenc::EmbeddingTable& table,
                                               EmbeddingCache& cache) {
    if (cache.version != model.version ||
        cache.value.class_ids.size() != docs.class_ids.size()) {
        cache.value = class_embeddings(model, docs, table);
        cache.version = model.version;
    }
    return cache.value;
}

double harmonic_mean(double u, double s) {
    if (u + s <= 0.0) return 0.0;
    return 2.0 * u * s / (u + s);
}

int argmax_lowest(const Vec& scores) {
    if (scores.size() == 0) throw ConfigError("argmax over an empty score vector");
    int best = 0;
    for (int i = 1; i < scores.size(); ++i)
        if (scores(i) > scores(best)) best = i;
    return best;
}

int predict_zsl(const Vec& i_g, const Mat& unseen_embeddings) {
    if (unseen_embeddings.rows() == 0)
        throw ConfigError("predict_zsl: empty unseen class set");
    Vec scores = unseen_embeddings * i_g;
    return argmax_lowest(scores);
}

int predict_gzsl_scores(const Vec& scores, const std::vector<bool>& seen_mask, double gamma) {
    if (!std::isfinite(gamma)) throw ConfigError("predict_gzsl: gamma must be finite");
    if (static_cast<int>(seen_mask.size()) != scores.size())
        throw ShapeError("predict_gzsl: mask/score size mismatch");
    Vec adjusted = scores;
    for (int i = 0; i < adjusted.size(); ++i)
        if (seen_mask[static_cast<size_t>(i)]) adjusted(i) -= gamma;
    return argmax_lowest(adjusted);
}

int predict_gzsl(const Vec& i_g, const Mat& all_embeddings, const std::vector<bool>& seen_mask,
                 double gamma) {
    Vec scores = all_embeddings * i_g;
    return predict_gzsl_scores(scores, seen_mask, gamma);
}

std::vector<double> default_gamma_grid() {
    std::vector<double> grid;
    for (int i = 0; i <= 50; ++i) grid.push_back(static_cast<double>(i) * 0.02);
    return grid;
}

json EvalResult::to_json() const {
    json j;
    j["T1"] = t1;
    j["U"] = u;
    j["S"] = s;
    j["H"] = h;
    j["gamma_used"] = gamma_used;
    j["per_class_acc"] = json::object();
    for (const auto& [cid, acc] : per_class_acc) j["per_class_acc"][std::to_string(cid)] = acc;
    j["sweep"] = json::array();
    for (const auto& p : sweep)
        j["sweep"].push_back(json{{"gamma", p.gamma}, {"U", p.u}, {"S", p.s}, {"H", p.h}});
    return j;
}

EvalResult evaluate(const Model& model, const corpus::DatasetManifest& manifest,
                    const PreparedDocuments& docs, const textenc::EmbeddingTable& table,
                    const imageenc::FeatureStore& store, const std::vector<double>& gamma_grid) {
    manifest.validate();
    if (gamma_grid.empty()) throw ConfigError("evaluate: empty gamma grid");
    std::vector<corpus::Sample> test_unseen, test_seen;
    for (const auto& s : manifest.samples) {
        if (s.split == "test_unseen") test_unseen.push_back(s);
        if (s.split == "test_seen") test_seen.push_back(s);
    }
    if (test_unseen.empty()) throw ConfigError("evaluate: test_unseen split is empty");

    const std::vector<int> order = manifest.categories();
    const int c_total = static_cast<int>(order.size());
    const int c_seen = static_cast<int>(manifest.seen_ids.size());
    Mat emb(c_total, model.cfg.r);
    {
        ClassEmbeddings ce = class_embeddings(model, docs, table);
        for (int i = 0; i < c_total; ++i)
            emb.row(i) = ce.t_g.row(docs.require(order[static_cast<size_t>(i)]));
    }
    std::vector<bool> seen_mask(static_cast<size_t>(c_total));
    for (int i = 0; i < c_total; ++i) seen_mask[static_cast<size_t>(i)] = i < c_seen;

    // Raw and normalized per-image scores over all classes, computed once.
    auto score_samples = [&](const std::vector<corpus::Sample>& samples) {
        std::vector<Vec> raw(samples.size());
        parallel_for(static_cast<int64_t>(samples.size()), [&](int64_t i) {
            imageenc::ImageFeatures feats = imageenc::encode_image_from_store(
                samples[static_cast<size_t>(i)].image_ref, store, model);
            raw[static_cast<size_t>(i)] = emb * feats.i_g;
        });
        return raw;
    };
    std::vector<Vec> unseen_scores = score_samples(test_unseen);
    std::vector<Vec> seen_scores = score_samples(test_seen);

    EvalResult out;

    // ZSL: argmax of the raw global score among unseen classes only.
    {
        PerClassTally tally;
        for (size_t i = 0; i < test_unseen.size(); ++i) {
            Vec restricted = unseen_scores[i].tail(c_total - c_seen);
            int pred = argmax_lowest(restricted);
            int pred_id = order[static_cast<size_t>(c_seen + pred)];
            tally.add(test_unseen[i].category_id, pred_id == test_unseen[i].category_id);
        }
        out.t1 = tally.mean_acc();
    }

    // GZSL: calibrated stacking swept on per-image min-max normalized scores.
    std::vector<Vec> unseen_norm(unseen_scores.size()), seen_norm(seen_scores.size());
    for (size_t i = 0; i < unseen_scores.size(); ++i)
        unseen_norm[i] = normalize_scores(unseen_scores[i]);
    for (size_t i = 0; i < seen_scores.size(); ++i)
        seen_norm[i] = normalize_scores(seen_scores[i]);

    int best = -1;
    std::map<int, double> best_acc;
    for (double gamma : gamma_grid) {
        PerClassTally u_tally, s_tally;
        for (size_t i = 0; i < unseen_norm.size(); ++i) {
            int pred = predict_gzsl_scores(unseen_norm[i], seen_mask, gamma);
            u_tally.add(test_unseen[i].category_id,
                        order[static_cast<size_t>(pred)] == test_unseen[i].category_id);
        }
        for (size_t i = 0; i < seen_norm.size(); ++i) {
            int pred = predict_gzsl_scores(seen_norm[i], seen_mask, gamma);
            s_tally.add(test_seen[i].category_id,
                        order[static_cast<size_t>(pred)] == test_seen[i].category_id);
        }
        EvalResult::SweepPoint p;
        p.gamma = gamma;
        p.u = u_tally.mean_acc();
        p.s = s_tally.mean_acc();
        p.h = harmonic_mean(p.u, p.s);
        out.sweep.push_back(p);
        if (best < 0 || p.h > out.sweep[static_cast<size_t>(best)].h) {
            best = static_cast<int>(out.sweep.size()) - 1;
            best_acc.clear();
            u_tally.merge_acc_into(best_acc);
            s_tally.merge_acc_into(best_acc);
        }
    }
    const auto& bp = out.sweep[static_cast<size_t>(best)];
    out.u = bp.u;
    out.s = bp.s;
    out.h = bp.h;
    out.gamma_used = bp.gamma;
    out.per_class_acc = std::move(best_acc);

    std::set<int> with_samples;
    for (const auto& s : test_unseen) with_samples.insert(s.category_id);
    for (const auto& s : test_seen) with_samples.insert(s.category_id);
    for (int cid : order)
        if (!with_samples.count(cid))
            std::cerr << "[mads] warning: class " << cid
                      << " has no test samples and is excluded from per-class accuracy\n";
    return out;
}

TrainResult train(Model& model, const corpus::DatasetManifest& manifest,
                  const PreparedDocuments& docs, const textenc::EmbeddingTable& table,
                  const imageenc::FeatureStore& store, const TrainConfig& config,
                  const std::filesystem::path& metrics_path) {
    config.validate();
    manifest.validate();
    const ModelConfig& cfg = model.cfg;

    std::vector<corpus::Sample> train_samples;
    for (const auto& s : manifest.samples)
        if (s.split == "train") train_samples.push_back(s);
    if (train_samples.empty()) throw ConfigError("train: no samples in the train split");

    // Seen-class ordering fixes the logit layout for the whole run.
    const std::vector<int>& seen_ids = manifest.seen_ids;
    std::vector<int> seen_doc_idx;
    std::unordered_map<int, int> label_row;
    for (size_t i = 0; i < seen_ids.size(); ++i) {
        seen_doc_idx.push_back(docs.require(seen_ids[i]));
        label_row[seen_ids[i]] = static_cast<int>(i);
    }
    const int c_seen = static_cast<int>(seen_ids.size());

    // All unique train features are loaded once up front.
    std::map<std::string, std::vector<MatF>> feature_cache;
    for (const auto& s : train_samples)
        if (!feature_cache.count(s.image_ref)) feature_cache[s.image_ref] = store.get(s.image_ref);

    const int n_train = static_cast<int>(train_samples.size());
    const int steps_per_epoch = (n_train + config.batch_size - 1) / config.batch_size;
    const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * config.epochs;
    const int64_t warmup_steps =
        static_cast<int64_t>(steps_per_epoch) * config.warmup_epochs;

    Rng root(config.seed);
    Rng shuffle_rng = root.fork(0x51);
    Rng dropout_root = root.fork(0xd0);

    AdamW opt;
    opt.weight_decay = config.weight_decay;

    std::vector<std::string> param_names;
    visit_params(model, [&](const std::string& name, Mat&) { param_names.push_back(name); });

    std::ofstream metrics_out;
    if (!metrics_path.empty()) {
        if (metrics_path.has_parent_path())
            std::filesystem::create_directories(metrics_path.parent_path());
        metrics_out.open(metrics_path, std::ios::trunc);
        if (!metrics_out) throw IoError("cannot write metrics log " + metrics_path.string());
    }

    TrainResult result;
    std::vector<int> perm(static_cast<size_t>(n_train));
    std::iota(perm.begin(), perm.end(), 0);
    int64_t global_step = 0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(perm);
        double ep_global = 0, ep_local = 0, ep_focus = 0, last_lr = 0;
        int ep_batches = 0;

        for (int start = 0; start < n_train; start += config.batch_size) {
            const int bsz = std::min(config.batch_size, n_train - start);
            const double lr = cosine_lr(config.lr, global_step, warmup_steps, total_steps);
            last_lr = lr;

            std::vector<int> batch_rows(static_cast<size_t>(bsz));
            std::map<int, int> batch_class_counts;  // seen-row -> count
            for (int i = 0; i < bsz; ++i) {
                const auto& sample =
                    train_samples[static_cast<size_t>(perm[static_cast<size_t>(start + i)])];
                batch_rows[static_cast<size_t>(i)] = label_row.at(sample.category_id);
                ++batch_class_counts[batch_rows[static_cast<size_t>(i)]];
            }

            // Text tower once per step, shared by the whole batch.
            ad::Tape text_tape;
            TapeBindings text_params = bind_params(text_tape, model, true);
            Rng text_dropout_rng = dropout_root.fork(static_cast<uint64_t>(global_step) * 2 + 1);
            DropoutCtx text_dropout{&text_dropout_rng, cfg.dropout};
            TextForward fwd = text_forward(text_tape, text_params, model, docs, table,
                                           seen_doc_idx, &text_dropout);

            // Focus loss over the documents of the classes present in the batch,
            // weighted by batch composition.
            ad::Var focus_batch;
            double focus_value = 0.0;
            {
                bool first = true;
                for (const auto& [row, count] : batch_class_counts) {
                    std::vector<std::vector<int>> masks;
                    const auto& tp = docs.tokens[static_cast<size_t>(
                        seen_doc_idx[static_cast<size_t>(row)])];
                    for (int v = 0; v < cfg.views; ++v)
                        masks.push_back(tp[static_cast<size_t>(v)].visual_mask);
                    ad::Var f = objective::focus_loss(
                        text_tape, fwd.h[static_cast<size_t>(row)], masks,
                        cfg.literal_focus_form);
                    ad::Var weighted =
                        text_tape.scale(f, static_cast<double>(count) / bsz);
                    focus_batch = first ? weighted : text_tape.add(focus_batch, weighted);
                    first = false;
                }
                focus_value = text_tape.val(focus_batch)(0, 0);
            }

            // Image tower per sample; each slot is independent, so the loop runs
            // under the parallel kernel with a serial fixed-order reduction after.
            const Mat t_g_value = text_tape.val(fwd.t_g_all);
            std::vector<Mat> t_l_values;
            t_l_values.reserve(static_cast<size_t>(c_seen));
            for (int c = 0; c < c_seen; ++c)
                t_l_values.push_back(text_tape.val(fwd.t_l[static_cast<size_t>(c)]));

            struct SampleGrads {
                std::unordered_map<std::string, Mat> params;
                Mat d_tg;
                std::vector<Mat> d_tl;
                double loss_global = 0, loss_local = 0;
            };
            std::vector<SampleGrads> slots(static_cast<size_t>(bsz));

            try {
            parallel_for(bsz, [&](int64_t i) {
                const auto& sample =
                    train_samples[static_cast<size_t>(perm[static_cast<size_t>(start + i)])];
                ad::Tape tape;
                TapeBindings params = bind_params(tape, model, true);
                ad::Var tg = tape.input(t_g_value, true);
                std::vector<ad::Var> tl;
                tl.reserve(t_l_values.size());
                for (const Mat& m : t_l_values) tl.push_back(tape.input(m, true));
                Rng img_dropout_rng = dropout_root.fork(
                    static_cast<uint64_t>(global_step) * 131071 + 2 * static_cast<uint64_t>(i));
                DropoutCtx img_dropout{&img_dropout_rng, cfg.dropout};
                imageenc::ImageFeaturesVar feats = imageenc::encode_image_tokens(
                    tape, feature_cache.at(sample.image_ref), params, cfg, &img_dropout);
                const int row = batch_rows[static_cast<size_t>(i)];
                objective::ScoredLoss g = objective::global_loss(tape, feats.i_g, tg, row);
                objective::ScoredLoss l =
                    objective::local_loss(tape, feats.i_l, tl, row, params, cfg);
                ad::Var obj = tape.scale(
                    tape.add(g.loss, tape.scale(l.loss, config.weights.lambda_local)),
                    1.0 / static_cast<double>(bsz));
                tape.backward(obj);

                SampleGrads& out = slots[static_cast<size_t>(i)];
                out.loss_global = tape.val(g.loss)(0, 0);
                out.loss_local = tape.val(l.loss)(0, 0);
                for (const char* name :
                     {"image.ssf_scale", "image.ssf_shift", "image.proj_w", "image.proj_b",
                      "local.wq", "local.wk", "local.wv", "local.wo", "local.mlp_w1",
                      "local.mlp_b1", "local.mlp_w2", "local.mlp_b2", "local.scorer"}) {
                    ad::Var pv = params.at(name);
                    out.params.emplace(name, tape.grad(pv));
                }
                out.d_tg = tape.grad(tg);
                out.d_tl.reserve(tl.size());
                for (ad::Var v : tl) out.d_tl.push_back(tape.grad(v));
            });
            } catch (const NumericError& e) {
                throw NumericError("train: aborted at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(start / config.batch_size) +
                                   ": " + e.what());
            }

            // Fixed-order reduction keeps results independent of thread count.
            std::unordered_map<std::string, Mat> grads;
            Mat d_tg = Mat::Zero(t_g_value.rows(), t_g_value.cols());
            std::vector<Mat> d_tl;
            for (const Mat& m : t_l_values) d_tl.push_back(Mat::Zero(m.rows(), m.cols()));
            double batch_global = 0, batch_local = 0;
            for (int i = 0; i < bsz; ++i) {
                SampleGrads& sg = slots[static_cast<size_t>(i)];
                batch_global += sg.loss_global;
                batch_local += sg.loss_local;
                for (auto& [name, g] : sg.params) {
                    auto it = grads.find(name);
                    if (it == grads.end())
                        grads.emplace(name, g);
                    else
                        it->second += g;
                }
                d_tg += sg.d_tg;
                for (size_t c = 0; c < d_tl.size(); ++c) d_tl[c] += sg.d_tl[c];
            }
            batch_global /= bsz;
            batch_local /= bsz;

            if (!std::isfinite(batch_global) || !std::isfinite(batch_local) ||
                !std::isfinite(focus_value))
                throw NumericError(
                    "train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(start / config.batch_size) + " (global=" +
                    std::to_string(batch_global) + ", local=" + std::to_string(batch_local) +
                    ", focus=" + std::to_string(focus_value) + ")");

            // Close the text tape: inject the batch gradients of T_g / T_l and
            // the focus term, then sweep once.
            text_tape.seed(fwd.t_g_all, d_tg);
            for (int c = 0; c < c_seen; ++c)
                text_tape.seed(fwd.t_l[static_cast<size_t>(c)], d_tl[static_cast<size_t>(c)]);
            Mat focus_seed(1, 1);
            focus_seed(0, 0) = config.weights.lambda_focus;
            text_tape.seed(focus_batch, focus_seed);
            text_tape.backward();
            for (const std::string& name : param_names) {
                ad::Var pv = text_params.at(name);
                if (!text_tape.needs_grad(pv)) continue;
                Mat g;
                try {
                    g = text_tape.grad(pv);
                } catch (const ShapeError&) {
                    continue;  // parameter untouched by the text tower
                }
                auto it = grads.find(name);
                if (it == grads.end())
                    grads.emplace(name, std::move(g));
                else
                    it->second += g;
            }

            opt.step(model, grads, lr);
            ep_global += batch_global;
            ep_local += batch_local;
            ep_focus += focus_value;
            ++ep_batches;
            ++global_step;
        }

        MetricsRecord rec;
        rec.epoch = epoch;
        rec.l_global = ep_batches ? ep_global / ep_batches : 0.0;
        rec.l_local = ep_batches ? ep_local / ep_batches : 0.0;
        rec.l_focus = ep_batches ? ep_focus / ep_batches : 0.0;
        rec.lr = last_lr;

        // Per-epoch validation T1 on the unseen test split.
        bool has_unseen_split = false;
        for (const auto& s : manifest.samples)
            if (s.split == "test_unseen") { has_unseen_split = true; break; }
        if (has_unseen_split) {
            ClassEmbeddings ce = class_embeddings(model, docs, table);
            const auto& unseen = manifest.unseen_ids;
            Mat emb(unseen.size(), cfg.r);
            for (size_t i = 0; i < unseen.size(); ++i)
                emb.row(static_cast<int>(i)) = ce.t_g.row(docs.require(unseen[i]));
            std::vector<corpus::Sample> test;
            for (const auto& s : manifest.samples)
                if (s.split == "test_unseen") test.push_back(s);
            std::vector<int> preds(test.size());
            parallel_for(static_cast<int64_t>(test.size()), [&](int64_t i) {
                imageenc::ImageFeatures feats = imageenc::encode_image_from_store(
                    test[static_cast<size_t>(i)].image_ref, store, model);
                preds[static_cast<size_t>(i)] = predict_zsl(feats.i_g, emb);
            });
            PerClassTally tally;
            for (size_t i = 0; i < test.size(); ++i)
                tally.add(test[i].category_id,
                          unseen[static_cast<size_t>(preds[i])] == test[i].category_id);
            rec.t1_val = tally.mean_acc();
        }

        if (metrics_out.is_open()) {
            json line;
            line["epoch"] = rec.epoch;
            line["L_global"] = rec.l_global;
            line["L_local"] = rec.l_local;
            line["L_focus"] = rec.l_focus;
            line["lr"] = rec.lr;
            line["T1_val"] = rec.t1_val;
            metrics_out << line.dump() << "\n";
            metrics_out.flush();
        }
        result.log.push_back(rec);
    }
    return result;
}

json explain(const Model& model, const std::string& image_ref,
             const imageenc::FeatureStore& store, const PreparedDocuments& docs,
             const textenc::EmbeddingTable& table, int top_k) {
    imageenc::ImageFeatures feats = imageenc::encode_image_from_store(image_ref, store, model);
    ClassEmbeddings ce = class_embeddings(model, docs, table);
    const double ig_norm = feats.i_g.norm();

    json classes = json::object();
    for (size_t c = 0; c < docs.class_ids.size(); ++c) {
        json views = json::object();
        for (int v = 0; v < model.cfg.views; ++v) {
            const Vec core = ce.per_view_core[c].row(v).transpose();
            const double denom = ig_norm * core.norm();
            const double cosine = denom > 0.0 ? feats.i_g.dot(core) / denom : 0.0;

            const Mat& h = ce.attention[c][static_cast<size_t>(v)];
            const auto& tp = docs.tokens[c][static_cast<size_t>(v)];
            std::vector<std::pair<double, int>> word_scores;
            for (int j = 0; j < h.cols(); ++j)
                word_scores.emplace_back(h.col(j).maxCoeff(), j);
            std::stable_sort(word_scores.begin(), word_scores.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            json top = json::array();
            for (int k = 0; k < std::min<int>(top_k, static_cast<int>(word_scores.size())); ++k) {
                const auto& [score, j] = word_scores[static_cast<size_t>(k)];
                top.push_back(json::array({tp.tokens[static_cast<size_t>(j)], score,
                                           tp.visual_mask[static_cast<size_t>(j)]}));
            }
            views[model.cfg.view_names[static_cast<size_t>(v)]] =
                json{{"cosine", cosine}, {"top_words", top}};
        }
        const double s_g = feats.i_g.dot(ce.t_g.row(static_cast<int>(c)).transpose());
        classes[docs.class_names[c]] = json{{"global_score", s_g}, {"views", views}};
    }
    json out;
    out["image_ref"] = image_ref;
    out["classes"] = classes;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, 8-byte little-endian header length, JSON header, then
// each tensor's doubles row-major in visit order.

namespace {
constexpr char kMagic[] = "MADSCKPT1\n";
constexpr size_t kMagicLen = sizeof(kMagic) - 1;
}  // namespace

json config_to_json(const ModelConfig& cfg) {
    json j;
    j["vocab_size"] = cfg.vocab_size;
    j["embed_dim"] = cfg.embed_dim;
    j["r"] = cfg.r;
    j["r_h"] = cfg.r_h;
    j["heads"] = cfg.heads;
    j["text_blocks"] = cfg.text_blocks;
    j["perceiver_layers"] = cfg.perceiver_layers;
    j["agg_layers"] = cfg.agg_layers;
    j["k_queries"] = cfg.k_queries;
    j["views"] = cfg.views;
    j["max_len"] = cfg.max_len;
    j["backbone_blocks"] = cfg.backbone_blocks;
    j["backbone_width"] = cfg.backbone_width;
    j["patches"] = cfg.patches;
    j["beta"] = cfg.beta;
    j["dropout"] = cfg.dropout;
    j["shared_view_tokens"] = cfg.shared_view_tokens;
    j["agg_prenorm"] = cfg.agg_prenorm;
    j["literal_focus_form"] = cfg.literal_focus_form;
    j["local_pool"] = cfg.local_pool;
    j["view_names"] = cfg.view_names;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.r = j.at("r").get<int>();
    cfg.r_h = j.at("r_h").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.text_blocks = j.at("text_blocks").get<int>();
    cfg.perceiver_layers = j.at("perceiver_layers").get<int>();
    cfg.agg_layers = j.at("agg_layers").get<int>();
    cfg.k_queries = j.at("k_queries").get<int>();
    cfg.views = j.at("views").get<int>();
    cfg.max_len = j.at("max_len").get<int>();
    cfg.backbone_blocks = j.at("backbone_blocks").get<int>();
    cfg.backbone_width = j.at("backbone_width").get<int>();
    cfg.patches = j.at("patches").get<int>();
    cfg.beta = j.at("beta").get<double>();
    cfg.dropout = j.at("dropout").get<double>();
    cfg.shared_view_tokens = j.at("shared_view_tokens").get<bool>();
    cfg.agg_prenorm = j.at("agg_prenorm").get<bool>();
    cfg.literal_focus_form = j.at("literal_focus_form").get<bool>();
    cfg.local_pool = j.at("local_pool").get<std::string>();
    cfg.view_names = j.at("view_names").get<std::vector<std::string>>();
    return cfg;
}

void validate_config_compat(const ModelConfig& loaded, const ModelConfig& expected) {
    auto fail = [](const std::string& field, const std::string& got, const std::string& want) {
        throw ConfigError("checkpoint config mismatch: " + field + " (checkpoint " + got +
                          ", expected " + want + ")");
    };
    auto check_int = [&](const char* field, int a, int b) {
        if (a != b) fail(field, std::to_string(a), std::to_string(b));
    };
    check_int("vocab_size", loaded.vocab_size, expected.vocab_size);
    check_int("embed_dim", loaded.embed_dim, expected.embed_dim);
    check_int("r", loaded.r, expected.r);
    check_int("r_h", loaded.r_h, expected.r_h);
    check_int("heads", loaded.heads, expected.heads);
    check_int("text_blocks", loaded.text_blocks, expected.text_blocks);
    check_int("perceiver_layers", loaded.perceiver_layers, expected.perceiver_layers);
    check_int("agg_layers", loaded.agg_layers, expected.agg_layers);
    check_int("k_queries", loaded.k_queries, expected.k_queries);
    check_int("views", loaded.views, expected.views);
    check_int("max_len", loaded.max_len, expected.max_len);
    check_int("backbone_blocks", loaded.backbone_blocks, expected.backbone_blocks);
    check_int("backbone_width", loaded.backbone_width, expected.backbone_width);
    check_int("patches", loaded.patches, expected.patches);
    if (loaded.view_names != expected.view_names)
        fail("view_names", "[...]", "[...]");
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const std::string& embedding_checksum) {
    json header;
    header["config"] = config_to_json(model.cfg);
    header["embedding_checksum"] = embedding_checksum;
    header["tensors"] = json::array();
    visit_params(model, [&](const std::string& name, const Mat& value) {
        header["tensors"].push_back(json{
            {"name", name}, {"rows", value.rows()}, {"cols", value.cols()}});
    });
    const std::string header_str = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + path.string());
        out.write(kMagic, static_cast<std::streamsize>(kMagicLen));
        uint64_t len = header_str.size();
        unsigned char len_bytes[8];
        for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>(len >> (8 * i));
        out.write(reinterpret_cast<const char*>(len_bytes), 8);
        out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
        visit_params(model, [&](const std::string&, const Mat& value) {
            for (int i = 0; i < value.rows(); ++i)
                for (int j = 0; j < value.cols(); ++j) {
                    double d = value(i, j);
                    out.write(reinterpret_cast<const char*>(&d), sizeof(double));
                }
        });
        if (!out) throw IoError("short write to checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path, std::string* embedding_checksum) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[kMagicLen];
    in.read(magic, static_cast<std::streamsize>(kMagicLen));
    if (!in || std::string(magic, kMagicLen) != kMagic)
        throw SchemaError(path.string() + ": not a MADS checkpoint");
    unsigned char len_bytes[8];
    in.read(reinterpret_cast<char*>(len_bytes), 8);
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(len_bytes[i]) << (8 * i);
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!in) throw SchemaError(path.string() + ": truncated header");
    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": bad header: " + e.what());
    }
    ModelConfig cfg = config_from_json(header.at("config"));
    if (embedding_checksum != nullptr)
        *embedding_checksum = header.value("embedding_checksum", "");

    Rng rng(0);
    Model model = Model::init(cfg, rng);
    size_t cursor = 0;
    const auto& tensors = header.at("tensors");
    visit_params(model, [&](const std::string& name, Mat& value) {
        if (cursor >= tensors.size())
            throw SchemaError(path.string() + ": missing tensor '" + name + "'");
        const auto& t = tensors[cursor++];
        if (t.at("name").get<std::string>() != name)
            throw SchemaError(path.string() + ": tensor order mismatch at '" + name + "'");
        if (t.at("rows").get<long>() != value.rows() || t.at("cols").get<long>() != value.cols())
            throw SchemaError(path.string() + ": tensor '" + name + "' has unexpected shape");
        for (int i = 0; i < value.rows(); ++i)
            for (int j = 0; j < value.cols(); ++j) {
                double d = 0;
                in.read(reinterpret_cast<char*>(&d), sizeof(double));
                value(i, j) = d;
            }
    });
    if (!in) throw SchemaError(path.string() + ": truncated tensor payload");
    return model;
}

}  // namespace mads::engine
