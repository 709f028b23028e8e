#include "mads/collect.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <functional>

#include <httplib.h>
#include <json.hpp>

#include "mads/parallel.hpp"
#include "mads/rng.hpp"
#include "mads/sha256.hpp"

namespace mads::collect {

using corpus::AttributeView;
using corpus::AttributeViewSet;
using nlohmann::json;

namespace {

constexpr const char* kFormatLine =
    "Respond with one '### <view name>' header per attribute view, each followed by ";

std::string replace_all(std::string text, const std::string& slot, const std::string& value) {
    size_t at = 0;
    while ((at = text.find(slot, at)) != std::string::npos) {
        text.replace(at, slot.size(), value);
        at += value.size();
    }
    return text;
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

std::string view_list_bullets(const std::vector<std::string>& names) {
    std::string out;
    for (const std::string& n : names) out += "- " + n + "\n";
    return trim(out);
}

std::string sections_to_text(const AttributeViewSet& views,
                             const std::map<std::string, std::string>& paragraphs) {
    std::string out;
    for (const auto& v : views.views()) {
        auto it = paragraphs.find(v.name);
        out += "### " + v.name + "\n";
        if (it != paragraphs.end() && !trim(it->second).empty()) out += trim(it->second) + "\n";
        out += "\n";
    }
    return trim(out);
}

}  // namespace

void CollectionConfig::validate() const {
    if (t_repeat < 1) throw ConfigError("collect: T_repeat must be >= 1");
    if (max_retries < 0) throw ConfigError("collect: max_retries must be >= 0");
    if (dataset_domain.empty()) throw ConfigError("collect: dataset domain is empty");
    if (temperature < 0.6 || temperature > 1.4)
        std::fprintf(stderr,
                     "[mads] warning: LLM temperature %.2f is outside the [0.6, 1.4] band\n",
                     temperature);
}

PromptTemplates PromptTemplates::defaults() {
    PromptTemplates t;
    t.view =
        "Given an image, what visual attribute views can be used to determine what {type} "
        "species it is?\n\n" +
        std::string(kFormatLine) + "a one-line explanation.";
    t.divide =
        "As an {type} expert, your task is to divide documents into paragraphs based on the "
        "following attribute views. Each paragraph contains descriptions of one attribute "
        "view.\n\n" +
        std::string(kFormatLine) +
        "the sentences of that view. Leave a section empty when the document does not describe "
        "that view.\n\nAttribute views:\n{visual attributes}\n\nDocument:\n{collected document}";
    t.enrich =
        "As an {type} expert, your task is to enrich the attribute documents with concise "
        "visual details. Try to keep the original description unchanged. Below is the document "
        "about {category} that needs additional descriptions:\n\n" +
        std::string(kFormatLine) + "its enriched paragraph.\n\n{divided document}";
    return t;
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& dir) {
    auto read = [&](const char* name) {
        std::ifstream in(dir / name);
        if (!in) throw IoError("cannot open prompt template " + (dir / name).string());
        std::ostringstream buf;
        buf << in.rdbuf();
        return trim(buf.str());
    };
    PromptTemplates t;
    t.view = read("p_view.txt");
    t.divide = read("p_divide.txt");
    t.enrich = read("p_enrich.txt");
    return t;
}

void PromptTemplates::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    auto write = [&](const char* name, const std::string& text) {
        std::ofstream out(dir / name, std::ios::trunc);
        if (!out) throw IoError("cannot write prompt template " + (dir / name).string());
        out << text << "\n";
    };
    write("p_view.txt", view);
    write("p_divide.txt", divide);
    write("p_enrich.txt", enrich);
}

// ---------------------------------------------------------------------------
// Cache

CachingClient::CachingClient(LlmClient& inner, std::filesystem::path cache_dir)
    : inner_(inner), dir_(std::move(cache_dir)) {
    std::filesystem::create_directories(dir_);
}

std::string CachingClient::cache_key(const std::string& model_id, double temperature,
                                     const std::string& prompt) {
    char temp_str[32];
    std::snprintf(temp_str, sizeof(temp_str), "%.6f", temperature);
    return sha256_hex(model_id + "\x1f" + temp_str + "\x1f" + prompt);
}

std::string CachingClient::complete(const std::string& prompt, double temperature,
                                    const std::string& model_id, bool force_refresh) {
    const std::string key = cache_key(model_id, temperature, prompt);
    const auto path = dir_ / (key + ".json");
    if (!force_refresh && std::filesystem::exists(path)) {
        std::ifstream in(path);
        json j;
        try {
            in >> j;
            if (j.contains("prompt") && j.contains("temperature") && j.contains("model_id") &&
                j.contains("response") && j.at("prompt").get<std::string>() == prompt)
                return j.at("response").get<std::string>();
        } catch (const json::exception&) {
            // corrupted entry: fall through, re-query and repair
        }
    }
    std::string response = inner_.complete(prompt, temperature, model_id);
    json j;
    j["prompt"] = prompt;
    j["temperature"] = temperature;
    j["model_id"] = model_id;
    j["response"] = response;
    {
        std::lock_guard<std::mutex> lock(write_mutex_);
        const auto tmp = dir_ / (key + ".json.tmp");
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write cache entry " + path.string());
        out << j.dump(2) << "\n";
        out.close();
        std::filesystem::rename(tmp, path);
    }
    return response;
}

// ---------------------------------------------------------------------------
// Parsing

std::vector<std::pair<std::string, std::string>> parse_sections(const std::string& response) {
    std::vector<std::pair<std::string, std::string>> sections;
    std::set<std::string> seen;
    std::string current_name, current_body;
    bool in_section = false;
    auto commit = [&]() {
        if (!in_section) return;
        if (seen.insert(AttributeViewSet::fold_name(current_name)).second)
            sections.emplace_back(current_name, trim(current_body));
        current_body.clear();
    };
    for (const std::string& line : split_lines(response)) {
        if (line.rfind("### ", 0) == 0) {
            commit();
            current_name = trim(line.substr(4));
            in_section = true;
        } else if (in_section) {
            current_body += line + "\n";
        }
    }
    commit();
    return sections;
}

// ---------------------------------------------------------------------------
// Pipeline operations

namespace {

std::string complete_with_retries(CachingClient& client, const CollectionConfig& config,
                                  const std::string& prompt,
                                  const std::function<bool(const std::string&)>& valid,
                                  const std::string& what) {
    std::string last;
    for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
        last = client.complete(prompt, config.temperature, config.model_id, attempt > 0);
        if (valid(last)) return last;
    }
    throw ParseError(what + " failed after " + std::to_string(config.max_retries) +
                     " retries; last response:\n" + last);
}

}  // namespace

AttributeViewSet generate_views(CachingClient& client, const CollectionConfig& config,
                                const PromptTemplates& templates) {
    config.validate();
    const std::string base = replace_all(templates.view, "{type}", config.dataset_domain);

    std::vector<std::vector<std::pair<std::string, std::string>>> responses;
    for (int t = 1; t <= config.t_repeat; ++t) {
        // The sample tag keeps repeated queries distinct in the cache, so a
        // warm rerun replays all T_repeat exchanges byte-for-byte.
        const std::string prompt = base + "\n\n(sample " + std::to_string(t) + " of " +
                                   std::to_string(config.t_repeat) + ")";
        std::string response = complete_with_retries(
            client, config, prompt,
            [](const std::string& r) { return !parse_sections(r).empty(); },
            "view generation (sample " + std::to_string(t) + ")");
        responses.push_back(parse_sections(response));
    }

    // Names common to every response, in first-response order.
    std::vector<std::pair<std::string, std::string>> common;
    for (const auto& [name, explanation] : responses.front()) {
        const std::string folded = AttributeViewSet::fold_name(name);
        bool in_all = true;
        for (size_t t = 1; t < responses.size() && in_all; ++t) {
            bool found = false;
            for (const auto& [other, _] : responses[t])
                if (AttributeViewSet::fold_name(other) == folded) {
                    found = true;
                    break;
                }
            in_all = found;
        }
        if (in_all) common.emplace_back(name, explanation);
    }
    if (common.empty())
        throw CollectionError(
            "view generation: the intersection of the repeated responses is empty");

    // One canonicalization query provides the explanation for every selected
    // view.
    std::vector<std::string> names;
    for (const auto& [name, _] : common) names.push_back(name);
    const std::string explain_prompt =
        base + "\n\nProvide a one-line explanation for each of the following visual attribute "
               "views:\n" +
        view_list_bullets(names);
    std::string explain_response = complete_with_retries(
        client, config, explain_prompt,
        [](const std::string& r) { return !parse_sections(r).empty(); },
        "view explanation");
    std::map<std::string, std::string> explained;
    for (const auto& [name, body] : parse_sections(explain_response))
        explained[AttributeViewSet::fold_name(name)] = body;

    std::vector<AttributeView> views;
    for (auto& [name, fallback] : common) {
        auto it = explained.find(AttributeViewSet::fold_name(name));
        views.push_back({name, it != explained.end() && !it->second.empty() ? it->second
                                                                            : fallback});
    }
    return AttributeViewSet::make(std::move(views));
}

std::map<std::string, std::string> divide_document(CachingClient& client,
                                                   const CollectionConfig& config,
                                                   const PromptTemplates& templates,
                                                   const AttributeViewSet& views,
                                                   const std::string& collected_doc) {
    if (trim(collected_doc).empty())
        throw ValidationError("divide_document: empty collected document");
    std::vector<std::string> names;
    for (const auto& v : views.views()) names.push_back(v.name);
    std::string prompt = replace_all(templates.divide, "{type}", config.dataset_domain);
    prompt = replace_all(prompt, "{visual attributes}", view_list_bullets(names));
    prompt = replace_all(prompt, "{collected document}", trim(collected_doc));

    auto valid = [&](const std::string& r) {
        auto sections = parse_sections(r);
        if (sections.empty()) return false;
        for (const auto& [name, _] : sections)
            if (views.index_of(name).has_value()) return true;
        return false;
    };
    std::string response =
        complete_with_retries(client, config, prompt, valid, "document division");

    std::map<std::string, std::string> out;
    for (const auto& v : views.views()) out[v.name] = "";
    for (const auto& [name, body] : parse_sections(response)) {
        auto idx = views.index_of(name);
        if (idx.has_value()) out[views.at(*idx).name] = body;
    }
    return out;
}

std::map<std::string, std::string> enrich_document(
    CachingClient& client, const CollectionConfig& config, const PromptTemplates& templates,
    const std::string& category_name, const AttributeViewSet& views,
    const std::map<std::string, std::string>& divided) {
    for (const auto& v : views.views())
        if (divided.find(v.name) == divided.end())
            throw ValidationError("enrich_document: divided document lacks an entry for view '" +
                                  v.name + "'");
    std::string prompt = replace_all(templates.enrich, "{type}", config.dataset_domain);
    prompt = replace_all(prompt, "{category}", category_name);
    prompt = replace_all(prompt, "{divided document}", sections_to_text(views, divided));

    auto valid = [&](const std::string& r) {
        auto sections = parse_sections(r);
        std::map<std::string, std::string> by_view;
        for (const auto& [name, body] : sections) {
            auto idx = views.index_of(name);
            if (idx.has_value()) by_view[views.at(*idx).name] = body;
        }
        for (const auto& v : views.views()) {
            auto it = by_view.find(v.name);
            if (it == by_view.end() || trim(it->second).empty()) return false;
        }
        return true;
    };
    std::string response;
    try {
        response = complete_with_retries(client, config, prompt, valid,
                                         "enrichment of '" + category_name + "'");
    } catch (const ParseError& e) {
        throw CollectionError(std::string("enrich_document: a view stayed empty: ") + e.what());
    }
    std::map<std::string, std::string> out;
    for (const auto& [name, body] : parse_sections(response)) {
        auto idx = views.index_of(name);
        if (idx.has_value()) out[views.at(*idx).name] = body;
    }
    return out;
}

CollectResult collect_all(CachingClient& client, const CollectionConfig& config,
                          const PromptTemplates& templates,
                          const std::vector<std::pair<int, std::string>>& classes,
                          const std::map<std::string, std::string>& raw_docs) {
    for (const auto& [id, name] : classes)
        if (raw_docs.find(name) == raw_docs.end())
            throw ValidationError("collect_all: no raw document for class '" + name + "'");

    CollectResult result;
    result.views = generate_views(client, config, templates);

    const int n = static_cast<int>(classes.size());
    std::vector<corpus::MultiAttributeDocument> docs(static_cast<size_t>(n));
    std::vector<std::string> errors(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t i) {
        const auto& [id, name] = classes[static_cast<size_t>(i)];
        try {
            auto divided =
                divide_document(client, config, templates, result.views, raw_docs.at(name));
            auto enriched =
                enrich_document(client, config, templates, name, result.views, divided);
            corpus::MultiAttributeDocument doc;
            doc.category_id = id;
            doc.category_name = name;
            doc.paragraphs = std::move(enriched);
            doc.validate_against(result.views);
            docs[static_cast<size_t>(i)] = std::move(doc);
        } catch (const std::exception& e) {
            errors[static_cast<size_t>(i)] = e.what();
        }
    });
    for (int i = 0; i < n; ++i)
        if (!errors[static_cast<size_t>(i)].empty())
            throw CollectionError("class '" + classes[static_cast<size_t>(i)].second +
                                  "': " + errors[static_cast<size_t>(i)]);
    result.documents = std::move(docs);
    return result;
}

// ---------------------------------------------------------------------------
// Mock client

namespace {

struct DomainViews {
    const char* domain;
    std::vector<std::pair<const char*, const char*>> views;
};

const std::vector<DomainViews>& domain_view_table() {
    static const std::vector<DomainViews> table = {
        {"animal",
         {{"Size and Shape",
           "The overall body size and shape, including head, body, limbs, and tail."},
          {"Color and Patterns",
           "Coloration of fur or skin and unique markings like stripes or spots."},
          {"Physical Features",
           "Anatomical details such as the shape of beak, ears, nose, tail, paws, or horns."},
          {"Fur, Feathers, or Scales Texture",
           "The type and texture of the body covering."},
          {"Habitat and Environment",
           "The environment or habitat evident from the image background."}}},
        {"bird",
         {{"Size and Shape", "The overall size and body shape of the bird."},
          {"Beak Shape and Size", "The size and shape of the bird's beak."},
          {"Color and Markings", "Color patterns including distinctive markings or stripes."},
          {"Legs and Feet", "The length and color of the legs and the type of feet."},
          {"Tail", "The shape and length of the tail."},
          {"Wing Shape", "Shape and size of the wings, especially in flight."},
          {"Behavior", "Distinctive behaviors such as flying or foraging style."},
          {"Habitat", "The environment where the bird is found."}}},
        {"flower",
         {{"Petal Characteristics", "Color, shape, size, texture, and arrangement of petals."},
          {"Center of the Flower", "The stamen and pistil structure, color, and features."},
          {"Leaf and Stem Features", "Shape, size, color, and arrangement of leaves and stems."},
          {"Size and Shape of the Flower", "Overall flower size and general shape."},
          {"Patterns and Markings", "Unique patterns or markings on petals or leaves."},
          {"Habitat and Location", "The environment where the flower grows."}}},
    };
    return table;
}

const std::vector<std::pair<const char*, const char*>>& views_for_domain(
    const std::string& domain) {
    for (const auto& entry : domain_view_table())
        if (entry.domain == domain) return entry.views;
    static const std::vector<std::pair<const char*, const char*>> generic = {
        {"Color and Patterns", "Coloration and distinctive markings on the body."},
        {"Size and Shape", "Overall body size and silhouette."},
        {"Texture and Covering", "Surface texture of the body covering."}};
    return generic;
}

const std::vector<const char*>& decoy_views() {
    static const std::vector<const char*> decoys = {"Sound and Calls", "Diet and Feeding",
                                                    "Migration Timing", "Scent Marking"};
    return decoys;
}

// Keyword table driving the mock's sentence-to-view assignment.
std::vector<std::string> keywords_for_view(const std::string& view_name) {
    static const std::vector<std::pair<const char*, const char*>> table = {
        {"size and shape", "size shape large small tall body built slender bulky rounded"},
        {"size and shape of the flower", "size shape diameter bloom"},
        {"color and patterns", "color colors colored coloration pattern patterns markings "
                               "stripes spots crimson azure golden ivory ebony emerald silver "
                               "russet"},
        {"color and markings", "color colors colored markings stripes spots wingbars"},
        {"physical features", "beak ears nose paws horns antlers eyes features hooves claws"},
        {"fur, feathers, or scales texture", "fur feathers scales texture coat fluffy coarse"},
        {"texture and covering", "texture covering furry scaly glossy bristly velvety spiky "
                                 "woolly sleek coated textured"},
        {"habitat and environment", "habitat environment forest desert woodland savanna alpine "
                                    "coastal wetland prairie tundra urban dwelling native"},
        {"habitat", "habitat environment forest woodland wetland grassland"},
        {"habitat and location", "habitat location native region grows"},
        {"beak shape and size", "beak bill"},
        {"legs and feet", "legs feet toes"},
        {"tail", "tail tails"},
        {"wing shape", "wing wings wingspan"},
        {"behavior", "behavior forages sings flies hops perches"},
        {"petal characteristics", "petal petals"},
        {"center of the flower", "center stamen pistil pollen"},
        {"leaf and stem features", "leaf leaves stem stems"},
        {"patterns and markings", "pattern patterns markings striations speckles"},
    };
    static const std::set<std::string> stop = {"and", "or", "the", "of", "a", "an", "on", "in"};
    std::vector<std::string> words;
    for (const std::string& w : corpus::split_normalize(view_name))
        if (!stop.count(w)) words.push_back(w);
    const std::string folded = AttributeViewSet::fold_name(view_name);
    for (const auto& [name, list] : table)
        if (folded == name) {
            for (const std::string& w : corpus::split_normalize(list)) words.push_back(w);
            break;
        }
    return words;
}

std::string extract_between(const std::string& text, const std::string& before,
                            const std::string& after) {
    size_t b = text.find(before);
    if (b == std::string::npos) return "";
    b += before.size();
    size_t e = text.find(after, b);
    if (e == std::string::npos) return "";
    return trim(text.substr(b, e - b));
}

std::vector<std::string> extract_bullets(const std::string& text, const std::string& marker) {
    std::vector<std::string> out;
    size_t at = text.find(marker);
    if (at == std::string::npos) return out;
    std::istringstream in(text.substr(at + marker.size()));
    std::string line;
    while (std::getline(in, line)) {
        std::string t = trim(line);
        if (t.rfind("- ", 0) == 0)
            out.push_back(trim(t.substr(2)));
        else if (!t.empty() && !out.empty())
            break;
    }
    return out;
}

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        cur.push_back(ch);
        if (ch == '.' || ch == '!' || ch == '?') {
            std::string t = trim(cur);
            if (!t.empty()) out.push_back(t);
            cur.clear();
        }
    }
    std::string t = trim(cur);
    if (!t.empty()) out.push_back(t);
    return out;
}

}  // namespace

std::string MockLlmClient::complete(const std::string& prompt, double /*temperature*/,
                                    const std::string& /*model_id*/) {
    calls_.fetch_add(1);

    // View explanation (canonicalization) query.
    if (prompt.find("what visual attribute views can be used") != std::string::npos &&
        prompt.find("Provide a one-line explanation") != std::string::npos) {
        const std::string domain =
            extract_between(prompt, "determine what ", " species");
        std::vector<std::string> requested =
            extract_bullets(prompt, "visual attribute\nviews:\n");
        if (requested.empty()) requested = extract_bullets(prompt, "views:\n");
        std::string out;
        for (const std::string& name : requested) {
            std::string explanation = "Visual characteristics of the " + name + " view.";
            for (const auto& [canon, expl] : views_for_domain(domain))
                if (AttributeViewSet::fold_name(canon) == AttributeViewSet::fold_name(name))
                    explanation = expl;
            out += "### " + name + "\n" + explanation + "\n\n";
        }
        return trim(out);
    }

    // View generation query.
    if (prompt.find("what visual attribute views can be used") != std::string::npos) {
        const std::string domain = extract_between(prompt, "determine what ", " species");
        const auto& canonical = views_for_domain(domain);
        int sample = 0, of = 0;
        {
            const std::string tag = extract_between(prompt, "(sample ", ")");
            if (!tag.empty()) std::sscanf(tag.c_str(), "%d of %d", &sample, &of);
        }
        std::vector<std::pair<std::string, std::string>> views;
        for (const auto& [name, expl] : canonical) views.emplace_back(name, expl);
        if (sample > 0) {
            // One decoy per sample, rotated so no decoy survives intersection
            // once T_repeat >= 2.
            const auto& decoys = decoy_views();
            const std::string decoy =
                decoys[static_cast<size_t>(sample) % decoys.size()];
            const size_t at = static_cast<size_t>(sample) % (views.size() + 1);
            views.insert(views.begin() + static_cast<long>(at),
                         {decoy, "Non-visual cue sometimes referenced for this domain."});
        }
        std::string out;
        for (const auto& [name, expl] : views) out += "### " + name + "\n" + expl + "\n\n";
        return trim(out);
    }

    // Document division query.
    if (prompt.find("divide documents into paragraphs") != std::string::npos) {
        std::vector<std::string> names = extract_bullets(prompt, "Attribute views:\n");
        const size_t doc_at = prompt.find("Document:\n");
        const std::string document =
            doc_at == std::string::npos ? "" : prompt.substr(doc_at + 10);
        std::map<std::string, std::string> assigned;
        for (const std::string& sentence : split_sentences(document)) {
            std::set<std::string> words;
            for (const std::string& w : corpus::split_normalize(sentence)) words.insert(w);
            for (const std::string& name : names) {
                bool hit = false;
                for (const std::string& kw : keywords_for_view(name))
                    if (words.count(kw)) {
                        hit = true;
                        break;
                    }
                if (hit) {
                    std::string& body = assigned[name];
                    if (!body.empty()) body += " ";
                    body += sentence;
                    break;  // each sentence lands in exactly one view
                }
            }
        }
        std::string out;
        for (const std::string& name : names) {
            out += "### " + name + "\n";
            auto it = assigned.find(name);
            if (it != assigned.end()) out += it->second + "\n";
            out += "\n";
        }
        return trim(out);
    }

    // Enrichment query: non-empty sections pass through unchanged, empty ones
    // are filled with a deterministic visual sentence.
    if (prompt.find("enrich the attribute documents") != std::string::npos) {
        const std::string category = extract_between(prompt, "about ", " that needs");
        std::string out;
        for (const auto& [name, body] : parse_sections(prompt)) {
            out += "### " + name + "\n";
            if (!trim(body).empty()) {
                out += trim(body) + "\n";
            } else {
                std::string lowered = name;
                std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                               [](unsigned char c) { return std::tolower(c); });
                out += "Distinctive " + lowered + " details of the " +
                       (category.empty() ? std::string("subject") : category) +
                       " are clearly visible.\n";
            }
            out += "\n";
        }
        return trim(out);
    }

    // Unknown prompt shape: echo a single section so parsers have something
    // deterministic to chew on.
    Rng rng(seed_ ^ std::hash<std::string>{}(prompt));
    return "### Response\nDeterministic mock output " + std::to_string(rng.next_u64() % 1000) +
           ".";
}

// ---------------------------------------------------------------------------
// HTTP client (OpenAI-style chat completions over plain HTTP)

HttpLlmClient::HttpLlmClient(std::string host, std::string path)
    : host_(std::move(host)), path_(std::move(path)) {}

std::string HttpLlmClient::complete(const std::string& prompt, double temperature,
                                    const std::string& model_id) {
    calls_.fetch_add(1);
    const char* key = std::getenv("MADS_LLM_API_KEY");
    if (key == nullptr || *key == '\0')
        throw CollectionError("MADS_LLM_API_KEY is not set; cannot reach a real LLM backend");
    json body;
    body["model"] = model_id;
    body["temperature"] = temperature;
    body["messages"] = json::array({json{{"role", "user"}, {"content", prompt}}});

    httplib::Client http(host_);
    http.set_read_timeout(120, 0);
    httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
    auto res = http.Post(path_, headers, body.dump(), "application/json");
    if (!res)
        throw CollectionError("LLM request to " + host_ + " failed: " +
                              httplib::to_string(res.error()));
    if (res->status != 200)
        throw CollectionError("LLM request to " + host_ + " returned status " +
                              std::to_string(res->status));
    try {
        json parsed = json::parse(res->body);
        return parsed.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw CollectionError(std::string("LLM response was not parseable: ") + e.what());
    }
}

}  // namespace mads::collect
