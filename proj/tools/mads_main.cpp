// Command-line entry point: document collection, synthetic data generation,
// feature precomputation, training, evaluation, prediction and explanation.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "mads/collect.hpp"
#include "mads/corpus.hpp"
#include "mads/engine.hpp"
#include "mads/imageenc.hpp"
#include "mads/profiles.hpp"
#include "mads/textenc.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mads;

namespace {

struct CommonArgs {
    std::string profile = "synthetic";
    fs::path data_dir;
    fs::path out_dir;
    fs::path cache_dir;
    std::optional<uint64_t> seed;
    std::optional<double> gamma;
    std::optional<double> beta;
    std::optional<double> lambda_focus;
    std::optional<double> lambda_local;
    std::optional<int> k_queries;
    bool mock_llm = false;
};

profiles::RunProfile resolve_profile(const CommonArgs& args) {
    profiles::RunProfile p = fs::exists(args.profile)
                                 ? profiles::RunProfile::load(args.profile)
                                 : profiles::RunProfile::builtin(args.profile);
    if (args.seed) {
        p.train.seed = *args.seed;
        p.synthetic.seed = *args.seed;
    }
    if (args.beta) p.model.beta = *args.beta;
    if (args.lambda_focus) p.train.weights.lambda_focus = *args.lambda_focus;
    if (args.lambda_local) p.train.weights.lambda_local = *args.lambda_local;
    if (args.k_queries) p.model.k_queries = *args.k_queries;
    return p;
}

void require_exists(const fs::path& path, const std::string& what) {
    if (!fs::exists(path))
        throw IoError(what + " not found at " + path.string());
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_lexicon(const fs::path& path, const corpus::VisualWordLexicon& lex) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "# " << lex.source_tag << "\n";
    for (const auto& entry : lex.entries) out << entry << "\n";
}

// Everything a model-facing command needs, loaded from a data directory.
struct LoadedData {
    corpus::DatasetManifest manifest;
    corpus::AttributeViewSet views;
    corpus::VisualWordLexicon lexicon;
    std::vector<corpus::MultiAttributeDocument> documents;
    textenc::EmbeddingTable table;
    imageenc::FeatureStore store;
};

LoadedData load_data(const profiles::RunProfile& p, const fs::path& dir) {
    for (const std::string& name : {p.manifest_file, p.views_file, p.lexicon_file,
                                    p.embeddings_file, p.documents_file})
        require_exists(dir / name, name);
    require_exists(dir / p.features_dir / "index.json", "feature store index");

    corpus::AttributeViewSet views = corpus::load_views(dir / p.views_file);
    LoadedData data{corpus::load_manifest(dir / p.manifest_file),
                    views,
                    corpus::build_lexicon({dir / p.lexicon_file}),
                    corpus::load_documents(dir / p.documents_file, views),
                    textenc::EmbeddingTable::load(dir / p.embeddings_file),
                    imageenc::FeatureStore::create_or_open(dir / p.features_dir)};
    return data;
}

ModelConfig config_from_data(const profiles::RunProfile& p, const LoadedData& data) {
    ModelConfig cfg = p.model;
    cfg.vocab_size = data.table.size();
    cfg.embed_dim = data.table.dim();
    cfg.views = data.views.count();
    cfg.view_names.clear();
    for (const auto& v : data.views.views()) cfg.view_names.push_back(v.name);
    const auto shape = data.store.shape_of(data.manifest.samples.front().image_ref);
    cfg.backbone_blocks = shape[0];
    cfg.patches = shape[1] - 1;
    cfg.backbone_width = shape[2];
    cfg.validate();
    return cfg;
}

int cmd_gen_synthetic(const CommonArgs& args) {
    profiles::RunProfile p = resolve_profile(args);
    if (args.out_dir.empty()) throw ConfigError("gen-synthetic requires --out-dir");
    const fs::path out = args.out_dir;

    corpus::SyntheticDataset data = corpus::gen_synthetic_dataset(p.synthetic);
    corpus::save_manifest(out / p.manifest_file, data.manifest);
    corpus::save_documents(out / p.documents_file, data.documents);
    corpus::save_views(out / p.views_file, data.views);
    write_lexicon(out / p.lexicon_file, data.lexicon);
    textenc::EmbeddingTable::from_rows(data.embedding_rows).save(out / p.embeddings_file);
    corpus::save_image_latents(out / p.images_file, data.image_latents);
    corpus::save_class_table(out / "latents.json", data);

    imageenc::SyntheticBackbone backbone(p.synthetic.seed, p.synthetic.backbone_blocks,
                                         p.synthetic.patches, p.synthetic.backbone_width,
                                         data.latent_dim);
    backbone.save_spec(out / p.backbone_file);
    backbone.set_latents(&data.image_latents);
    auto store = imageenc::FeatureStore::create_or_open(out / p.features_dir);
    int computed = imageenc::precompute_features(data.manifest, backbone, store);
    std::cout << "generated " << data.documents.size() << " classes, "
              << data.manifest.samples.size() << " samples, " << computed
              << " feature entries under " << out.string() << "\n";
    return 0;
}

int cmd_prepare_features(const CommonArgs& args) {
    profiles::RunProfile p = resolve_profile(args);
    if (args.data_dir.empty()) throw ConfigError("prepare-features requires --data-dir");
    const fs::path dir = args.data_dir;
    require_exists(dir / p.manifest_file, p.manifest_file);
    require_exists(dir / p.backbone_file, p.backbone_file);
    require_exists(dir / p.images_file, p.images_file);

    auto manifest = corpus::load_manifest(dir / p.manifest_file);
    auto latents = corpus::load_image_latents(dir / p.images_file);
    auto backbone = imageenc::SyntheticBackbone::load_spec(dir / p.backbone_file);
    backbone.set_latents(&latents);
    const fs::path store_dir =
        args.out_dir.empty() ? dir / p.features_dir : args.out_dir / p.features_dir;
    auto store = imageenc::FeatureStore::create_or_open(store_dir);
    int computed = imageenc::precompute_features(manifest, backbone, store);
    std::cout << "feature store at " << store_dir.string() << ": " << computed
              << " new entries, " << store.entry_count() << " total\n";
    return 0;
}

int cmd_collect(const CommonArgs& args, const fs::path& classes_file,
                const fs::path& raw_docs_file, const fs::path& prompts_dir) {
    profiles::RunProfile p = resolve_profile(args);
    if (args.out_dir.empty()) throw ConfigError("collect requires --out-dir");
    require_exists(classes_file, "class list");
    require_exists(raw_docs_file, "raw document file");

    collect::CollectionConfig cfg = p.collection;
    cfg.cache_dir = args.cache_dir.empty() ? args.out_dir / "llm-cache" : args.cache_dir;

    std::vector<std::pair<int, std::string>> classes;
    {
        std::ifstream in(classes_file);
        json j;
        in >> j;
        for (const auto& rec : j)
            classes.emplace_back(rec.at("id").get<int>(), rec.at("name").get<std::string>());
    }
    std::map<std::string, std::string> raw_docs;
    {
        std::ifstream in(raw_docs_file);
        json j;
        in >> j;
        for (const auto& [name, text] : j.items()) raw_docs[name] = text.get<std::string>();
    }

    collect::PromptTemplates templates = prompts_dir.empty()
                                             ? collect::PromptTemplates::defaults()
                                             : collect::PromptTemplates::load(prompts_dir);

    std::unique_ptr<collect::LlmClient> client;
    if (args.mock_llm) {
        client = std::make_unique<collect::MockLlmClient>(args.seed.value_or(7));
    } else {
        const char* host = std::getenv("MADS_LLM_HOST");
        client = std::make_unique<collect::HttpLlmClient>(
            host != nullptr ? host : "http://localhost:8000", "/v1/chat/completions");
    }
    collect::CachingClient cache(*client, cfg.cache_dir);
    auto result = collect::collect_all(cache, cfg, templates, classes, raw_docs);

    corpus::save_views(args.out_dir / p.views_file, result.views);
    corpus::save_documents(args.out_dir / p.documents_file, result.documents);
    std::cout << "collected " << result.documents.size() << " documents over "
              << result.views.count() << " views (" << cache.client_calls()
              << " client calls)\n";
    return 0;
}

int cmd_train(const CommonArgs& args, std::optional<int> epochs, std::optional<double> lr,
              std::optional<int> batch_size, std::optional<double> dropout) {
    profiles::RunProfile p = resolve_profile(args);
    if (args.data_dir.empty()) throw ConfigError("train requires --data-dir");
    const fs::path out = args.out_dir.empty() ? args.data_dir : args.out_dir;

    LoadedData data = load_data(p, args.data_dir);
    if (dropout) p.model.dropout = *dropout;
    ModelConfig cfg = config_from_data(p, data);

    engine::TrainConfig tc = p.train;
    if (epochs) tc.epochs = *epochs;
    if (lr) tc.lr = *lr;
    if (batch_size) tc.batch_size = *batch_size;

    Rng rng(tc.seed);
    Model model = Model::init(cfg, rng);
    auto prepared = engine::prepare_documents(data.documents, cfg, data.table, data.lexicon);
    auto result = engine::train(model, data.manifest, prepared, data.table, data.store, tc,
                                out / "metrics.jsonl");
    engine::save_checkpoint(out / "model.ckpt", model, data.table.checksum());
    const auto& last = result.log.empty() ? engine::MetricsRecord{} : result.log.back();
    std::cout << "trained " << tc.epochs << " epochs; final L_global=" << last.l_global
              << " L_local=" << last.l_local << " L_focus=" << last.l_focus
              << " T1_val=" << last.t1_val << "\ncheckpoint: " << (out / "model.ckpt").string()
              << "\n";
    return 0;
}

// Shared by eval / predict / explain: checkpoint + data, validated together.
struct EvalContext {
    Model model;
    LoadedData data;
    engine::PreparedDocuments prepared;
};

EvalContext load_eval_context(const CommonArgs& args, const fs::path& checkpoint) {
    profiles::RunProfile p = resolve_profile(args);
    if (args.data_dir.empty()) throw ConfigError("--data-dir is required");
    require_exists(checkpoint, "checkpoint");
    std::string checksum;
    Model model = engine::load_checkpoint(checkpoint, &checksum);
    LoadedData data = load_data(p, args.data_dir);
    if (!checksum.empty() && checksum != data.table.checksum())
        throw ConfigError("embedding table does not match the one used at training time");
    auto prepared =
        engine::prepare_documents(data.documents, model.cfg, data.table, data.lexicon);
    return EvalContext{std::move(model), std::move(data), std::move(prepared)};
}

int cmd_eval(const CommonArgs& args, const fs::path& checkpoint, const fs::path& out_file) {
    EvalContext ctx = load_eval_context(args, checkpoint);
    std::vector<double> grid =
        args.gamma ? std::vector<double>{*args.gamma} : engine::default_gamma_grid();
    auto result =
        engine::evaluate(ctx.model, ctx.data.manifest, ctx.prepared, ctx.data.table,
                         ctx.data.store, grid);
    json j = result.to_json();
    if (!out_file.empty()) write_json(out_file, j);
    std::cout << "T1=" << result.t1 * 100 << " U=" << result.u * 100
              << " S=" << result.s * 100 << " H=" << result.h * 100
              << " gamma=" << result.gamma_used << "\n";
    return 0;
}

int cmd_predict(const CommonArgs& args, const fs::path& checkpoint, const fs::path& out_file,
                bool gzsl) {
    EvalContext ctx = load_eval_context(args, checkpoint);
    const auto order = ctx.data.manifest.categories();
    const int c_seen = static_cast<int>(ctx.data.manifest.seen_ids.size());
    auto ce = engine::class_embeddings(ctx.model, ctx.prepared, ctx.data.table);

    Mat emb(order.size(), ctx.model.cfg.r);
    for (size_t i = 0; i < order.size(); ++i)
        emb.row(static_cast<int>(i)) = ce.t_g.row(ctx.prepared.require(order[i]));
    std::vector<bool> seen_mask(order.size());
    for (size_t i = 0; i < order.size(); ++i) seen_mask[i] = static_cast<int>(i) < c_seen;

    json preds = json::array();
    const double gamma = args.gamma.value_or(0.0);
    for (const auto& s : ctx.data.manifest.samples) {
        if (s.split == "train") continue;
        auto feats = imageenc::encode_image_from_store(s.image_ref, ctx.data.store, ctx.model);
        int pred_id;
        if (gzsl) {
            int row = engine::predict_gzsl(feats.i_g, emb, seen_mask, gamma);
            pred_id = order[static_cast<size_t>(row)];
        } else {
            Mat unseen = emb.bottomRows(static_cast<int>(order.size()) - c_seen);
            int row = engine::predict_zsl(feats.i_g, unseen);
            pred_id = order[static_cast<size_t>(c_seen + row)];
        }
        preds.push_back(json{{"image_ref", s.image_ref},
                             {"split", s.split},
                             {"true_class_id", s.category_id},
                             {"predicted_class_id", pred_id}});
    }
    json j;
    j["mode"] = gzsl ? "gzsl" : "zsl";
    j["gamma"] = gamma;
    j["predictions"] = preds;
    if (!out_file.empty()) write_json(out_file, j);
    std::cout << "predicted " << preds.size() << " test samples ("
              << (gzsl ? "gzsl" : "zsl") << ")\n";
    return 0;
}

int cmd_explain(const CommonArgs& args, const fs::path& checkpoint, const fs::path& out_file,
                const std::string& image_ref, int top_k) {
    EvalContext ctx = load_eval_context(args, checkpoint);
    json dump =
        engine::explain(ctx.model, image_ref, ctx.data.store, ctx.prepared, ctx.data.table,
                        top_k);
    if (!out_file.empty()) write_json(out_file, dump);
    else std::cout << dump.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MADS: multi-attribute document supervision for zero-shot image "
                 "classification"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string command;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--profile", args.profile,
                        "built-in profile name (synthetic, awa2-like, cub-like, flo-like) or a "
                        "profile JSON path");
        sub->add_option("--seed", args.seed, "seed override");
        sub->add_option("--gamma", args.gamma, "calibrated-stacking margin");
        sub->add_option("--beta", args.beta, "fuse ratio override");
        sub->add_option("--lambda-focus", args.lambda_focus, "focus loss weight override");
        sub->add_option("--lambda-local", args.lambda_local, "local loss weight override");
        sub->add_option("--k-queries", args.k_queries, "semantic query count override");
        sub->add_option("--out-dir", args.out_dir, "output directory");
        sub->add_option("--cache-dir", args.cache_dir, "LLM exchange cache directory");
        sub->add_flag("--mock-llm", args.mock_llm, "use the deterministic mock LLM client");
    };

    // gen-synthetic
    auto* gen = app.add_subcommand("gen-synthetic", "generate the synthetic dataset");
    add_common(gen);

    // collect
    fs::path classes_file, raw_docs_file, prompts_dir;
    auto* collect_cmd = app.add_subcommand("collect", "run the document collection pipeline");
    add_common(collect_cmd);
    collect_cmd->add_option("--classes", classes_file, "JSON list of {id, name}")->required();
    collect_cmd->add_option("--raw-docs", raw_docs_file, "JSON object name -> collected text")
        ->required();
    collect_cmd->add_option("--prompts-dir", prompts_dir,
                            "directory with p_view.txt / p_divide.txt / p_enrich.txt");

    // prepare-features
    auto* prep = app.add_subcommand("prepare-features", "cache backbone block outputs");
    add_common(prep);
    prep->add_option("--data-dir", args.data_dir, "dataset directory");

    // train
    std::optional<int> epochs, batch_size;
    std::optional<double> lr, dropout;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    add_common(train_cmd);
    train_cmd->add_option("--data-dir", args.data_dir, "dataset directory");
    train_cmd->add_option("--epochs", epochs, "epoch override");
    train_cmd->add_option("--lr", lr, "learning rate override");
    train_cmd->add_option("--batch-size", batch_size, "batch size override");
    train_cmd->add_option("--dropout", dropout, "dropout override");

    // eval / predict / explain
    fs::path checkpoint, out_file;
    std::string image_ref;
    int top_k = 10;
    bool gzsl = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate ZSL and GZSL metrics");
    add_common(eval_cmd);
    eval_cmd->add_option("--data-dir", args.data_dir, "dataset directory");
    eval_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    eval_cmd->add_option("--out", out_file, "write the EvalResult JSON here");

    auto* predict_cmd = app.add_subcommand("predict", "per-image predictions");
    add_common(predict_cmd);
    predict_cmd->add_option("--data-dir", args.data_dir, "dataset directory");
    predict_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    predict_cmd->add_option("--out", out_file, "write predictions JSON here");
    predict_cmd->add_flag("--gzsl", gzsl, "predict over seen+unseen with calibrated stacking");

    auto* explain_cmd = app.add_subcommand("explain", "per-view scores and attended words");
    add_common(explain_cmd);
    explain_cmd->add_option("--data-dir", args.data_dir, "dataset directory");
    explain_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    explain_cmd->add_option("--image-ref", image_ref, "image reference to explain")->required();
    explain_cmd->add_option("--out", out_file, "write the explain dump here");
    explain_cmd->add_option("--top-k", top_k, "attended words per view");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_synthetic(args);
        if (collect_cmd->parsed())
            return cmd_collect(args, classes_file, raw_docs_file, prompts_dir);
        if (prep->parsed()) return cmd_prepare_features(args);
        if (train_cmd->parsed()) return cmd_train(args, epochs, lr, batch_size, dropout);
        if (eval_cmd->parsed()) return cmd_eval(args, checkpoint, out_file);
        if (predict_cmd->parsed()) return cmd_predict(args, checkpoint, out_file, gzsl);
        if (explain_cmd->parsed())
            return cmd_explain(args, checkpoint, out_file, image_ref, top_k);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        json record;
        record["error"] = e.what();
        record["command"] = argc > 1 ? argv[1] : "";
        std::cerr << record.dump() << "\n";
        return 1;
    }
}
