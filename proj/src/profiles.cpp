#include "mads/profiles.hpp"

#include <fstream>

#include <json.hpp>

namespace mads::profiles {

using nlohmann::json;

RunProfile RunProfile::builtin(const std::string& name) {
    RunProfile p;
    p.name = name;
    if (name == "synthetic") {
        p.model.r = 16;
        p.model.r_h = 16;
        p.model.heads = 4;
        p.model.k_queries = 2;
        p.model.embed_dim = 32;
        p.model.max_len = 64;
        p.model.dropout = 0.1;
        p.train.lr = 4e-3;
        p.train.epochs = 40;
        p.train.weights.lambda_local = 0.2;
        p.train.weights.lambda_focus = 0.5;
        p.collection.dataset_domain = "animal";
        return p;
    }
    if (name == "awa2-like") {
        p.model.r = 256;
        p.model.r_h = 256;
        p.model.heads = 4;
        p.model.k_queries = 4;
        p.model.embed_dim = 300;
        p.model.max_len = 512;
        p.model.dropout = 0.25;
        p.train.lr = 1.5e-4;
        p.train.epochs = 40;
        p.train.warmup_epochs = 0;
        p.train.weights.lambda_local = 0.2;
        p.train.weights.lambda_focus = 0.5;
        p.collection.dataset_domain = "animal";
        return p;
    }
    if (name == "cub-like") {
        p.model.r = 128;  // main text also cites 64; the supplementary table wins
        p.model.r_h = 128;
        p.model.heads = 4;
        p.model.k_queries = 4;
        p.model.embed_dim = 300;
        p.model.max_len = 512;
        p.model.dropout = 0.15;
        p.train.lr = 1e-3;
        p.train.epochs = 40;
        p.train.warmup_epochs = 3;
        p.train.weights.lambda_local = 0.5;
        p.train.weights.lambda_focus = 0.5;
        p.collection.dataset_domain = "bird";
        p.notes = "r follows the supplementary hyperparameter table (128); the main text lists 64";
        return p;
    }
    if (name == "flo-like") {
        p.model.r = 128;
        p.model.r_h = 128;
        p.model.heads = 4;
        p.model.k_queries = 8;
        p.model.embed_dim = 300;
        p.model.max_len = 512;
        p.model.dropout = 0.15;
        p.train.lr = 7e-4;
        p.train.epochs = 40;
        p.train.warmup_epochs = 0;
        p.train.weights.lambda_local = 0.5;
        p.train.weights.lambda_focus = 0.5;
        p.collection.dataset_domain = "flower";
        return p;
    }
    throw ConfigError("unknown profile '" + name +
                      "'; built-ins: synthetic, awa2-like, cub-like, flo-like");
}

namespace {

json profile_to_json(const RunProfile& p) {
    json j;
    j["name"] = p.name;
    j["model"] = {{"r", p.model.r},
                  {"r_h", p.model.r_h},
                  {"heads", p.model.heads},
                  {"k_queries", p.model.k_queries},
                  {"embed_dim", p.model.embed_dim},
                  {"max_len", p.model.max_len},
                  {"text_blocks", p.model.text_blocks},
                  {"perceiver_layers", p.model.perceiver_layers},
                  {"agg_layers", p.model.agg_layers},
                  {"beta", p.model.beta},
                  {"dropout", p.model.dropout},
                  {"shared_view_tokens", p.model.shared_view_tokens},
                  {"agg_prenorm", p.model.agg_prenorm},
                  {"literal_focus_form", p.model.literal_focus_form},
                  {"local_pool", p.model.local_pool}};
    j["train"] = {{"lr", p.train.lr},
                  {"weight_decay", p.train.weight_decay},
                  {"batch_size", p.train.batch_size},
                  {"epochs", p.train.epochs},
                  {"warmup_epochs", p.train.warmup_epochs},
                  {"seed", p.train.seed},
                  {"lambda_local", p.train.weights.lambda_local},
                  {"lambda_focus", p.train.weights.lambda_focus}};
    j["synthetic"] = {{"seed", p.synthetic.seed},
                      {"n_seen", p.synthetic.n_seen},
                      {"n_unseen", p.synthetic.n_unseen},
                      {"views", p.synthetic.views},
                      {"attrs_per_view", p.synthetic.attrs_per_view},
                      {"train_per_class", p.synthetic.train_per_class},
                      {"test_seen_per_class", p.synthetic.test_seen_per_class},
                      {"test_unseen_per_class", p.synthetic.test_unseen_per_class},
                      {"noise_words_per_paragraph", p.synthetic.noise_words_per_paragraph},
                      {"embed_dim", p.synthetic.embed_dim},
                      {"image_noise", p.synthetic.image_noise},
                      {"backbone_blocks", p.synthetic.backbone_blocks},
                      {"backbone_width", p.synthetic.backbone_width},
                      {"patches", p.synthetic.patches}};
    j["collection"] = {{"dataset_domain", p.collection.dataset_domain},
                       {"t_repeat", p.collection.t_repeat},
                       {"temperature", p.collection.temperature},
                       {"model_id", p.collection.model_id},
                       {"max_retries", p.collection.max_retries}};
    j["files"] = {{"documents", p.documents_file},   {"manifest", p.manifest_file},
                  {"lexicon", p.lexicon_file},       {"embeddings", p.embeddings_file},
                  {"views", p.views_file},           {"features", p.features_dir},
                  {"images", p.images_file},         {"backbone", p.backbone_file}};
    if (!p.notes.empty()) j["notes"] = p.notes;
    return j;
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

RunProfile profile_from_json(const json& j) {
    RunProfile p;
    maybe(j, "name", p.name);
    if (j.contains("model")) {
        const json& m = j.at("model");
        maybe(m, "r", p.model.r);
        maybe(m, "r_h", p.model.r_h);
        maybe(m, "heads", p.model.heads);
        maybe(m, "k_queries", p.model.k_queries);
        maybe(m, "embed_dim", p.model.embed_dim);
        maybe(m, "max_len", p.model.max_len);
        maybe(m, "text_blocks", p.model.text_blocks);
        maybe(m, "perceiver_layers", p.model.perceiver_layers);
        maybe(m, "agg_layers", p.model.agg_layers);
        maybe(m, "beta", p.model.beta);
        maybe(m, "dropout", p.model.dropout);
        maybe(m, "shared_view_tokens", p.model.shared_view_tokens);
        maybe(m, "agg_prenorm", p.model.agg_prenorm);
        maybe(m, "literal_focus_form", p.model.literal_focus_form);
        maybe(m, "local_pool", p.model.local_pool);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        maybe(t, "lr", p.train.lr);
        maybe(t, "weight_decay", p.train.weight_decay);
        maybe(t, "batch_size", p.train.batch_size);
        maybe(t, "epochs", p.train.epochs);
        maybe(t, "warmup_epochs", p.train.warmup_epochs);
        maybe(t, "seed", p.train.seed);
        maybe(t, "lambda_local", p.train.weights.lambda_local);
        maybe(t, "lambda_focus", p.train.weights.lambda_focus);
    }
    if (j.contains("synthetic")) {
        const json& s = j.at("synthetic");
        maybe(s, "seed", p.synthetic.seed);
        maybe(s, "n_seen", p.synthetic.n_seen);
        maybe(s, "n_unseen", p.synthetic.n_unseen);
        maybe(s, "views", p.synthetic.views);
        maybe(s, "attrs_per_view", p.synthetic.attrs_per_view);
        maybe(s, "train_per_class", p.synthetic.train_per_class);
        maybe(s, "test_seen_per_class", p.synthetic.test_seen_per_class);
        maybe(s, "test_unseen_per_class", p.synthetic.test_unseen_per_class);
        maybe(s, "noise_words_per_paragraph", p.synthetic.noise_words_per_paragraph);
        maybe(s, "embed_dim", p.synthetic.embed_dim);
        maybe(s, "image_noise", p.synthetic.image_noise);
        maybe(s, "backbone_blocks", p.synthetic.backbone_blocks);
        maybe(s, "backbone_width", p.synthetic.backbone_width);
        maybe(s, "patches", p.synthetic.patches);
    }
    if (j.contains("collection")) {
        const json& c = j.at("collection");
        maybe(c, "dataset_domain", p.collection.dataset_domain);
        maybe(c, "t_repeat", p.collection.t_repeat);
        maybe(c, "temperature", p.collection.temperature);
        maybe(c, "model_id", p.collection.model_id);
        maybe(c, "max_retries", p.collection.max_retries);
    }
    if (j.contains("files")) {
        const json& f = j.at("files");
        maybe(f, "documents", p.documents_file);
        maybe(f, "manifest", p.manifest_file);
        maybe(f, "lexicon", p.lexicon_file);
        maybe(f, "embeddings", p.embeddings_file);
        maybe(f, "views", p.views_file);
        maybe(f, "features", p.features_dir);
        maybe(f, "images", p.images_file);
        maybe(f, "backbone", p.backbone_file);
    }
    maybe(j, "notes", p.notes);
    return p;
}

}  // namespace

RunProfile RunProfile::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open profile " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError(file.string() + ": " + e.what());
    }
    return profile_from_json(j);
}

void RunProfile::save(const std::filesystem::path& file) const {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw IoError("cannot write profile " + file.string());
    out << profile_to_json(*this).dump(2) << "\n";
}

}  // namespace mads::profiles
