#include "mads/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mads::corpus {

using nlohmann::json;

namespace {

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError("failed to parse " + path.string() + ": " + e.what());
    }
    return j;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

}  // namespace

std::string AttributeViewSet::fold_name(std::string_view name) {
    std::string out;
    out.reserve(name.size());
    bool pending_space = false;
    for (char ch : name) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
    return out;
}

AttributeViewSet AttributeViewSet::make(std::vector<AttributeView> views) {
    if (views.empty()) throw ValidationError("attribute view set must contain at least one view");
    AttributeViewSet set;
    for (size_t i = 0; i < views.size(); ++i) {
        std::string folded = fold_name(views[i].name);
        if (folded.empty())
            throw ValidationError("attribute view name is empty at position " + std::to_string(i));
        if (!set.folded_index_.emplace(folded, static_cast<int>(i)).second)
            throw ValidationError("duplicate attribute view name: " + views[i].name);
    }
    set.views_ = std::move(views);
    return set;
}

std::optional<int> AttributeViewSet::index_of(std::string_view name) const {
    auto it = folded_index_.find(fold_name(name));
    if (it == folded_index_.end()) return std::nullopt;
    return it->second;
}

void MultiAttributeDocument::validate_against(const AttributeViewSet& views) const {
    for (const auto& view : views.views()) {
        auto it = paragraphs.find(view.name);
        if (it == paragraphs.end())
            throw ValidationError("category '" + category_name + "' (id " +
                                  std::to_string(category_id) + ") lacks the '" + view.name +
                                  "' paragraph");
        if (trim(it->second).empty())
            throw ValidationError("category '" + category_name + "' (id " +
                                  std::to_string(category_id) + ") has an empty '" + view.name +
                                  "' paragraph");
    }
    for (const auto& [name, _] : paragraphs) {
        if (!views.index_of(name).has_value())
            throw ValidationError("category '" + category_name + "' has paragraph '" + name +
                                  "' that is not an attribute view");
    }
}

std::string normalize_token(std::string_view raw) {
    size_t b = 0, e = raw.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(raw[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(raw[e - 1]))) --e;
    std::string out;
    out.reserve(e - b);
    for (size_t i = b; i < e; ++i)
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(raw[i]))));
    return out;
}

std::vector<std::string> split_normalize(std::string_view text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j > i) {
            std::string norm = normalize_token(text.substr(i, j - i));
            if (!norm.empty()) out.push_back(std::move(norm));
        }
        i = j;
    }
    return out;
}

TokenizedParagraph tokenize(const std::string& paragraph, const VisualWordLexicon& lexicon,
                            const Vocabulary& vocab) {
    TokenizedParagraph out;
    out.tokens = split_normalize(paragraph);
    if (out.tokens.empty())
        throw ValidationError("paragraph is empty after tokenization");
    out.token_ids.reserve(out.tokens.size());
    out.visual_mask.reserve(out.tokens.size());
    for (const std::string& token : out.tokens) {
        int id = vocab.lookup(token);
        if (id == vocab.unk_id && vocab.ids.find(token) == vocab.ids.end()) ++out.unk_count;
        out.token_ids.push_back(id);
        out.visual_mask.push_back(lexicon.contains(token) ? 1 : 0);
    }
    return out;
}

VisualWordLexicon build_lexicon(const std::vector<std::filesystem::path>& label_files) {
    VisualWordLexicon lex;
    std::vector<std::string> tags;
    for (const auto& path : label_files) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open label file " + path.string());
        std::string first;
        std::getline(in, first);
        std::string lead = trim(first);
        if (!lead.empty() && lead.front() == '[') {
            // JSON list format
            in.seekg(0);
            json j;
            try {
                in >> j;
            } catch (const json::exception& e) {
                throw SchemaError("failed to parse label file " + path.string() + ": " + e.what());
            }
            for (const auto& item : j) {
                std::string entry = trim(item.get<std::string>());
                std::transform(entry.begin(), entry.end(), entry.begin(),
                               [](unsigned char c) { return std::tolower(c); });
                if (!entry.empty()) lex.entries.insert(entry);
            }
        } else {
            in.clear();
            in.seekg(0);
            std::string line;
            while (std::getline(in, line)) {
                std::string entry = trim(line);
                if (entry.empty() || entry.front() == '#') continue;
                std::transform(entry.begin(), entry.end(), entry.begin(),
                               [](unsigned char c) { return std::tolower(c); });
                lex.entries.insert(entry);
            }
        }
        tags.push_back(path.filename().string());
    }
    std::ostringstream tag;
    for (size_t i = 0; i < tags.size(); ++i) tag << (i ? "+" : "") << tags[i];
    lex.source_tag = tag.str();
    return lex;
}

std::vector<MultiAttributeDocument> load_documents(const std::filesystem::path& path,
                                                   const AttributeViewSet& views) {
    json j = read_json_file(path);
    if (!j.is_array()) throw SchemaError(path.string() + ": expected a JSON array of documents");
    std::vector<MultiAttributeDocument> docs;
    docs.reserve(j.size());
    for (size_t i = 0; i < j.size(); ++i) {
        const json& rec = j[i];
        MultiAttributeDocument doc;
        try {
            doc.category_id = rec.at("category_id").get<int>();
            doc.category_name = rec.at("category_name").get<std::string>();
            for (const auto& [key, value] : rec.at("paragraphs").items())
                doc.paragraphs[key] = value.get<std::string>();
        } catch (const json::exception& e) {
            throw SchemaError(path.string() + ": record " + std::to_string(i) + ": " + e.what());
        }
        doc.validate_against(views);
        docs.push_back(std::move(doc));
    }
    return docs;
}

void save_documents(const std::filesystem::path& path,
                    const std::vector<MultiAttributeDocument>& docs) {
    json arr = json::array();
    for (const auto& doc : docs) {
        json rec;
        rec["category_id"] = doc.category_id;
        rec["category_name"] = doc.category_name;
        rec["paragraphs"] = json::object();
        for (const auto& [view, text] : doc.paragraphs) rec["paragraphs"][view] = text;
        arr.push_back(std::move(rec));
    }
    write_text_file(path, arr.dump(2) + "\n");
}

AttributeViewSet load_views(const std::filesystem::path& path) {
    json j = read_json_file(path);
    if (!j.is_array()) throw SchemaError(path.string() + ": expected a JSON array of views");
    std::vector<AttributeView> views;
    for (const auto& rec : j) {
        AttributeView v;
        v.name = rec.at("name").get<std::string>();
        v.explanation = rec.value("explanation", "");
        views.push_back(std::move(v));
    }
    return AttributeViewSet::make(std::move(views));
}

void save_views(const std::filesystem::path& path, const AttributeViewSet& views) {
    json arr = json::array();
    for (const auto& v : views.views())
        arr.push_back(json{{"name", v.name}, {"explanation", v.explanation}});
    write_text_file(path, arr.dump(2) + "\n");
}

std::vector<int> DatasetManifest::categories() const {
    std::vector<int> all = seen_ids;
    all.insert(all.end(), unseen_ids.begin(), unseen_ids.end());
    return all;
}

bool DatasetManifest::is_seen(int id) const {
    return std::find(seen_ids.begin(), seen_ids.end(), id) != seen_ids.end();
}

void DatasetManifest::validate() const {
    std::set<int> seen(seen_ids.begin(), seen_ids.end());
    std::set<int> unseen(unseen_ids.begin(), unseen_ids.end());
    for (int id : unseen)
        if (seen.count(id))
            throw ValidationError("seen and unseen class sets overlap at id " +
                                  std::to_string(id));
    for (const Sample& s : samples) {
        if (s.split != "train" && s.split != "test_seen" && s.split != "test_unseen")
            throw ValidationError("sample '" + s.image_ref + "' has unknown split '" + s.split +
                                  "'");
        if (s.split == "train" && !seen.count(s.category_id))
            throw ValidationError("train sample '" + s.image_ref + "' has non-seen label " +
                                  std::to_string(s.category_id));
        if (s.split == "test_unseen" && !unseen.count(s.category_id))
            throw ValidationError("test_unseen sample '" + s.image_ref +
                                  "' has non-unseen label " + std::to_string(s.category_id));
        if (s.split == "test_seen" && !seen.count(s.category_id))
            throw ValidationError("test_seen sample '" + s.image_ref + "' has non-seen label " +
                                  std::to_string(s.category_id));
    }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    json j = read_json_file(path);
    DatasetManifest m;
    try {
        m.seen_ids = j.at("seen").get<std::vector<int>>();
        m.unseen_ids = j.at("unseen").get<std::vector<int>>();
        for (const auto& rec : j.at("samples")) {
            Sample s;
            s.image_ref = rec.at("image_ref").get<std::string>();
            s.category_id = rec.at("category_id").get<int>();
            s.split = rec.at("split").get<std::string>();
            m.samples.push_back(std::move(s));
        }
        m.feature_source = j.value("feature_source", "");
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    manifest.validate();
    json j;
    j["seen"] = manifest.seen_ids;
    j["unseen"] = manifest.unseen_ids;
    j["samples"] = json::array();
    for (const Sample& s : manifest.samples)
        j["samples"].push_back(json{{"image_ref", s.image_ref},
                                    {"category_id", s.category_id},
                                    {"split", s.split}});
    if (!manifest.feature_source.empty()) j["feature_source"] = manifest.feature_source;
    write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Synthetic generation

namespace {

struct ViewPool {
    const char* name;
    const char* explanation;
    const char* attrs[8];
    const char* generics[2];
};

constexpr ViewPool kViewPools[5] = {
    {"Color and Patterns",
     "Coloration and distinctive markings on the body.",
     {"crimson", "azure", "golden", "ivory", "ebony", "emerald", "silver", "russet"},
     {"colored", "patterned"}},
    {"Size and Shape",
     "Overall body size and silhouette.",
     {"slender", "bulky", "rounded", "tapered", "angular", "elongated", "stocky", "compact"},
     {"shaped", "built"}},
    {"Texture and Covering",
     "Surface texture of the body covering.",
     {"furry", "scaly", "glossy", "bristly", "velvety", "spiky", "woolly", "sleek"},
     {"textured", "coated"}},
    {"Habitat and Environment",
     "Typical surroundings visible behind the subject.",
     {"alpine", "coastal", "wetland", "desert", "forest", "prairie", "tundra", "urban"},
     {"dwelling", "native"}},
    {"Physical Features",
     "Distinctive anatomical details.",
     {"horned", "winged", "clawed", "tufted", "maned", "crested", "whiskered", "fanged"},
     {"featured", "marked"}},
};

const std::vector<std::string>& noise_pool() {
    static const std::vector<std::string> pool = {
        "the",      "a",           "with",    "and",      "its",      "often",
        "diet",     "sound",       "call",    "grazing",  "breeding", "nocturnal",
        "lifespan", "temperament", "species", "intruder", "feeding",  "migration"};
    return pool;
}

std::string zero_pad(int value, int width) {
    std::string s = std::to_string(value);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

}  // namespace

SyntheticDataset gen_synthetic_dataset(const SyntheticConfig& config) {
    if (config.n_seen < 2 || config.n_unseen < 2)
        throw ConfigError("synthetic dataset needs n_seen >= 2 and n_unseen >= 2");
    if (config.views < 1 || config.views > 5)
        throw ConfigError("synthetic dataset supports 1..5 views");
    if (config.attrs_per_view < 1 || config.attrs_per_view > 8)
        throw ConfigError("synthetic dataset supports 1..8 attributes per view");
    if (config.embed_dim < 2) throw ConfigError("embed_dim must be >= 2");

    const int v_count = config.views;
    const int q = config.attrs_per_view;
    const int latent_dim = v_count * q;

    SyntheticDataset data;
    data.config = config;
    data.latent_dim = latent_dim;

    std::vector<AttributeView> views;
    for (int v = 0; v < v_count; ++v)
        views.push_back({kViewPools[v].name, kViewPools[v].explanation});
    data.views = AttributeViewSet::make(std::move(views));

    Rng root(config.seed);
    Rng combo_rng = root.fork(1);
    Rng doc_rng = root.fork(2);
    Rng image_rng = root.fork(3);
    Rng embed_rng = root.fork(4);

    // Seen classes: distinct random attribute combinations.
    const int n_total = config.n_seen + config.n_unseen;
    std::set<std::vector<int>> used;
    std::vector<std::vector<int>> combos;
    for (int i = 0; i < config.n_seen; ++i) {
        std::vector<int> combo(static_cast<size_t>(v_count));
        bool ok = false;
        for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
            for (int v = 0; v < v_count; ++v) combo[static_cast<size_t>(v)] = combo_rng.uniform_int(q);
            ok = used.insert(combo).second;
        }
        if (!ok)
            throw ConfigError(
                "infeasible composition: cannot draw distinct seen-class attribute combinations");
        combos.push_back(combo);
    }
    // Attributes covered by some seen class, per view.
    std::vector<std::vector<int>> covered(static_cast<size_t>(v_count));
    for (int v = 0; v < v_count; ++v) {
        std::set<int> c;
        for (int i = 0; i < config.n_seen; ++i) c.insert(combos[static_cast<size_t>(i)][static_cast<size_t>(v)]);
        covered[static_cast<size_t>(v)].assign(c.begin(), c.end());
    }
    // Unseen classes: novel combinations drawn only from covered attributes, so
    // every unseen attribute occurs in at least one seen document.
    for (int i = 0; i < config.n_unseen; ++i) {
        std::vector<int> combo(static_cast<size_t>(v_count));
        bool ok = false;
        for (int attempt = 0; attempt < 5000 && !ok; ++attempt) {
            for (int v = 0; v < v_count; ++v) {
                const auto& pool = covered[static_cast<size_t>(v)];
                combo[static_cast<size_t>(v)] = pool[static_cast<size_t>(combo_rng.uniform_int(
                    static_cast<int>(pool.size())))];
            }
            ok = used.insert(combo).second;
        }
        if (!ok)
            throw ConfigError(
                "infeasible composition: unseen classes cannot be novel combinations of "
                "seen-class attributes with this configuration");
        combos.push_back(combo);
    }

    for (int i = 0; i < n_total; ++i) {
        SyntheticClass cls;
        cls.id = i;
        cls.attr_choice = combos[static_cast<size_t>(i)];
        std::string name;
        for (int v = 0; v < v_count; ++v) {
            if (v) name += "_";
            name += kViewPools[v].attrs[cls.attr_choice[static_cast<size_t>(v)]];
        }
        cls.name = name;
        cls.latent = Vec::Zero(latent_dim);
        for (int v = 0; v < v_count; ++v)
            cls.latent(v * q + cls.attr_choice[static_cast<size_t>(v)]) = 1.0;
        data.classes.push_back(std::move(cls));
    }

    // Documents: per view, a token template shared by every class (attribute
    // slot plus template noise that recurs across classes, like real
    // encyclopedia noise), followed by class-specific noise words. The
    // class-specific words are the harmful kind of non-visual text: they
    // correlate with seen-class identity without carrying transferable signal.
    const std::string kAttrSlot = "\x01";
    const int class_noise = config.noise_words_per_paragraph / 4;
    const int shared_noise = config.noise_words_per_paragraph - class_noise;
    const auto& noise = noise_pool();
    std::vector<std::vector<std::string>> view_templates;
    for (int v = 0; v < v_count; ++v) {
        std::vector<std::string> tokens = {kAttrSlot, kViewPools[v].generics[0],
                                           kViewPools[v].generics[1]};
        for (int k = 0; k < shared_noise; ++k)
            tokens.push_back(noise[static_cast<size_t>(
                doc_rng.uniform_int(static_cast<int>(noise.size())))]);
        doc_rng.shuffle(tokens);
        view_templates.push_back(std::move(tokens));
    }
    for (const SyntheticClass& cls : data.classes) {
        MultiAttributeDocument doc;
        doc.category_id = cls.id;
        doc.category_name = cls.name;
        for (int v = 0; v < v_count; ++v) {
            std::string paragraph;
            for (size_t t = 0; t < view_templates[static_cast<size_t>(v)].size(); ++t) {
                const std::string& tok = view_templates[static_cast<size_t>(v)][t];
                if (t) paragraph += " ";
                paragraph += tok == kAttrSlot
                                 ? kViewPools[v].attrs[cls.attr_choice[static_cast<size_t>(v)]]
                                 : tok;
            }
            for (int k = 0; k < class_noise; ++k) {
                paragraph += " ";
                paragraph += noise[static_cast<size_t>(
                    doc_rng.uniform_int(static_cast<int>(noise.size())))];
            }
            doc.paragraphs[data.views.at(v).name] = paragraph;
        }
        data.documents.push_back(std::move(doc));
    }

    // Lexicon: exactly the visual words (attributes plus shared visual words).
    data.lexicon.source_tag = "synthetic-visual-words";
    for (int v = 0; v < v_count; ++v) {
        for (int j = 0; j < q; ++j) data.lexicon.entries.insert(kViewPools[v].attrs[j]);
        data.lexicon.entries.insert(kViewPools[v].generics[0]);
        data.lexicon.entries.insert(kViewPools[v].generics[1]);
    }

    // Frozen embedding table: UNK first, then the full working vocabulary.
    std::vector<std::string> vocab_words;
    for (int v = 0; v < v_count; ++v) {
        for (int j = 0; j < q; ++j) vocab_words.push_back(kViewPools[v].attrs[j]);
        vocab_words.push_back(kViewPools[v].generics[0]);
        vocab_words.push_back(kViewPools[v].generics[1]);
    }
    for (const std::string& w : noise_pool()) vocab_words.push_back(w);
    const double emb_scale = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
    data.embedding_rows.emplace_back("<unk>", Vec::Zero(config.embed_dim));
    for (const std::string& w : vocab_words) {
        Vec row(config.embed_dim);
        for (int k = 0; k < config.embed_dim; ++k) row(k) = embed_rng.normal() * emb_scale;
        data.embedding_rows.emplace_back(w, std::move(row));
    }

    // Samples: train/test_seen for seen classes, test_unseen for unseen ones.
    data.manifest.feature_source = "features";
    for (int i = 0; i < config.n_seen; ++i) data.manifest.seen_ids.push_back(i);
    for (int i = config.n_seen; i < n_total; ++i) data.manifest.unseen_ids.push_back(i);

    auto emit_samples = [&](const SyntheticClass& cls, int count, const std::string& split,
                            int base_index) {
        for (int k = 0; k < count; ++k) {
            Sample s;
            s.image_ref = "img_" + zero_pad(cls.id, 3) + "_" + zero_pad(base_index + k, 3);
            s.category_id = cls.id;
            s.split = split;
            Vec z = cls.latent;
            for (int d = 0; d < latent_dim; ++d) z(d) += config.image_noise * image_rng.normal();
            data.image_latents[s.image_ref] = std::move(z);
            data.manifest.samples.push_back(std::move(s));
        }
    };
    for (int i = 0; i < n_total; ++i) {
        const SyntheticClass& cls = data.classes[static_cast<size_t>(i)];
        if (i < config.n_seen) {
            emit_samples(cls, config.train_per_class, "train", 0);
            emit_samples(cls, config.test_seen_per_class, "test_seen", config.train_per_class);
        } else {
            emit_samples(cls, config.test_unseen_per_class, "test_unseen", 0);
        }
    }
    data.manifest.validate();
    return data;
}

void save_image_latents(const std::filesystem::path& path,
                        const std::map<std::string, Vec>& latents) {
    json j = json::object();
    for (const auto& [ref, z] : latents) {
        json arr = json::array();
        for (int i = 0; i < z.size(); ++i) arr.push_back(z(i));
        j[ref] = std::move(arr);
    }
    write_text_file(path, j.dump() + "\n");
}

std::map<std::string, Vec> load_image_latents(const std::filesystem::path& path) {
    json j = read_json_file(path);
    std::map<std::string, Vec> out;
    for (const auto& [ref, arr] : j.items()) {
        Vec z(arr.size());
        for (size_t i = 0; i < arr.size(); ++i) z(static_cast<int>(i)) = arr[i].get<double>();
        out[ref] = std::move(z);
    }
    return out;
}

void save_class_table(const std::filesystem::path& path, const SyntheticDataset& data) {
    json arr = json::array();
    for (const auto& cls : data.classes) {
        json rec;
        rec["id"] = cls.id;
        rec["name"] = cls.name;
        rec["attrs"] = json::object();
        for (int v = 0; v < data.views.count(); ++v)
            rec["attrs"][data.views.at(v).name] =
                kViewPools[v].attrs[cls.attr_choice[static_cast<size_t>(v)]];
        json latent = json::array();
        for (int i = 0; i < cls.latent.size(); ++i) latent.push_back(cls.latent(i));
        rec["latent"] = std::move(latent);
        arr.push_back(std::move(rec));
    }
    write_text_file(path, arr.dump(2) + "\n");
}

}  // namespace mads::corpus
