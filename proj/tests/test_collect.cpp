#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <set>

#include "mads/collect.hpp"
#include "testutil.hpp"

using namespace mads;
using namespace mads::collect;
using corpus::AttributeViewSet;

namespace {

// Test double that replays a fixed list of view responses for p_view queries
// and answers the explanation query by echoing the requested names.
class ScriptedClient : public LlmClient {
public:
    explicit ScriptedClient(std::vector<std::vector<std::string>> view_lists)
        : view_lists_(std::move(view_lists)) {}

    std::string complete(const std::string& prompt, double, const std::string&) override {
        ++calls_;
        if (prompt.find("Provide a one-line explanation") != std::string::npos) {
            std::string out;
            std::istringstream in(prompt.substr(prompt.find("views:\n") + 7));
            std::string line;
            while (std::getline(in, line))
                if (line.rfind("- ", 0) == 0)
                    out += "### " + line.substr(2) + "\nexplained\n\n";
            return out;
        }
        const auto& names = view_lists_.at(static_cast<size_t>(next_) % view_lists_.size());
        ++next_;
        std::string out;
        for (const auto& n : names) out += "### " + n + "\nsome explanation\n\n";
        return out;
    }
    long call_count() const override { return calls_; }

private:
    std::vector<std::vector<std::string>> view_lists_;
    int next_ = 0;
    long calls_ = 0;
};

CollectionConfig make_config(const std::filesystem::path& cache, int t_repeat = 5) {
    CollectionConfig cfg;
    cfg.dataset_domain = "animal";
    cfg.t_repeat = t_repeat;
    cfg.temperature = 1.0;
    cfg.model_id = "mock-1";
    cfg.cache_dir = cache;
    return cfg;
}

}  // namespace

TEST_CASE("generate_views keeps exactly the common names in first-response order") {
    testutil::TempDir tmp("collect-views");
    ScriptedClient scripted({{"A", "B", "C"}, {"A", "B", "D"}, {"A", "B"}, {"A", "B", "E"},
                             {"A", "B"}});
    CachingClient cache(scripted, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache");
    auto views = generate_views(cache, cfg, PromptTemplates::defaults());
    REQUIRE(views.count() == 2);
    CHECK(views.at(0).name == "A");
    CHECK(views.at(1).name == "B");
    CHECK(views.at(0).explanation == "explained");
    CHECK(scripted.call_count() == 6);  // T_repeat view queries + 1 explanation query
}

TEST_CASE("generate_views with T_repeat 1 returns that response verbatim") {
    testutil::TempDir tmp("collect-single");
    std::vector<std::vector<std::string>> lists = {{"Size and Shape", "Color"}};
    ScriptedClient scripted(lists);
    CachingClient cache(scripted, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache", 1);
    auto views = generate_views(cache, cfg, PromptTemplates::defaults());
    REQUIRE(views.count() == 2);
    CHECK(views.at(0).name == "Size and Shape");
    CHECK(views.at(1).name == "Color");
}

TEST_CASE("empty intersection raises a collection error") {
    testutil::TempDir tmp("collect-empty");
    ScriptedClient scripted({{"A"}, {"B"}, {"C"}, {"D"}, {"E"}});
    CachingClient cache(scripted, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache");
    CHECK_THROWS_AS(generate_views(cache, cfg, PromptTemplates::defaults()), CollectionError);
}

TEST_CASE("the mock animal run includes the reference attribute views") {
    testutil::TempDir tmp("collect-mock-animal");
    MockLlmClient mock(7);
    CachingClient cache(mock, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache");
    auto views = generate_views(cache, cfg, PromptTemplates::defaults());
    for (const char* name : {"Size and Shape", "Color and Patterns", "Habitat and Environment"})
        CHECK(views.index_of(name).has_value());
    // the rotating decoys never survive the intersection
    CHECK_FALSE(views.index_of("Sound and Calls").has_value());
    CHECK_FALSE(views.index_of("Diet and Feeding").has_value());
    CHECK(views.count() == 5);
}

TEST_CASE("divide_document recovers a pre-segmented mock response") {
    testutil::TempDir tmp("collect-divide");
    MockLlmClient mock(7);
    CachingClient cache(mock, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache");
    auto views = AttributeViewSet::make({{"Color and Patterns", ""}, {"Habitat", ""}});

    const std::string doc =
        "The coat color is golden with dark stripes. It lives in dense forest. "
        "Its diet consists of insects and small rodents.";
    auto divided = divide_document(cache, cfg, PromptTemplates::defaults(), views, doc);
    REQUIRE(divided.size() == 2);
    CHECK(divided.at("Color and Patterns").find("golden") != std::string::npos);
    CHECK(divided.at("Habitat").find("forest") != std::string::npos);
    // the diet sentence describes no view and is dropped everywhere
    CHECK(divided.at("Color and Patterns").find("diet") == std::string::npos);
    CHECK(divided.at("Habitat").find("diet") == std::string::npos);

    CHECK_THROWS_AS(divide_document(cache, cfg, PromptTemplates::defaults(), views, "  "),
                    ValidationError);
}

TEST_CASE("divide keeps a color-only document out of the habitat view") {
    testutil::TempDir tmp("collect-divide2");
    MockLlmClient mock(7);
    CachingClient cache(mock, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache");
    auto views = AttributeViewSet::make({{"Color and Patterns", ""}, {"Habitat", ""}});
    const std::string doc = "Its color is deep crimson. The diet is mostly seeds.";
    auto divided = divide_document(cache, cfg, PromptTemplates::defaults(), views, doc);
    CHECK(divided.at("Color and Patterns").find("crimson") != std::string::npos);
    CHECK(divided.at("Habitat").empty());
}

TEST_CASE("no sentence is assigned to two views") {
    testutil::TempDir tmp("collect-nodup");
    MockLlmClient mock(9);
    CachingClient cache(mock, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache");
    auto views = AttributeViewSet::make(
        {{"Color and Patterns", ""}, {"Size and Shape", ""}, {"Habitat", ""}});
    const std::string doc =
        "The color pattern covers a large body. Body size is large in forest habitat. "
        "Stripes and spots mark the fur color. It lives in a forest.";
    auto divided = divide_document(cache, cfg, PromptTemplates::defaults(), views, doc);
    std::vector<std::string> sentences;
    for (const auto& [view, text] : divided) {
        std::istringstream in(text);
        std::string sentence;
        while (std::getline(in, sentence, '.')) {
            std::string t = sentence;
            t.erase(0, t.find_first_not_of(" \t"));
            if (!t.empty()) sentences.push_back(t);
        }
    }
    std::set<std::string> unique(sentences.begin(), sentences.end());
    CHECK(unique.size() == sentences.size());
}

TEST_CASE("enrich_document fills empty views and preserves the rest verbatim") {
    testutil::TempDir tmp("collect-enrich");
    MockLlmClient mock(7);
    CachingClient cache(mock, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache");
    auto views = AttributeViewSet::make({{"Color and Patterns", ""}, {"Habitat", ""}});

    SUBCASE("fixed point when every view is already rich") {
        std::map<std::string, std::string> divided = {
            {"Color and Patterns", "Golden fur with stripes."},
            {"Habitat", "Dense forest near rivers."}};
        auto enriched =
            enrich_document(cache, cfg, PromptTemplates::defaults(), "tiger", views, divided);
        CHECK(enriched == divided);
    }

    SUBCASE("an empty view is filled while others stay unchanged") {
        std::map<std::string, std::string> divided = {
            {"Color and Patterns", "Golden fur with stripes."}, {"Habitat", ""}};
        auto enriched =
            enrich_document(cache, cfg, PromptTemplates::defaults(), "tiger", views, divided);
        CHECK(enriched.at("Color and Patterns") == divided.at("Color and Patterns"));
        CHECK_FALSE(enriched.at("Habitat").empty());
        CHECK(enriched.at("Habitat").find("tiger") != std::string::npos);
    }

    SUBCASE("the original text appears verbatim inside the enriched paragraph") {
        std::map<std::string, std::string> divided = {
            {"Color and Patterns", "Deep russet coloration."}, {"Habitat", ""}};
        auto enriched =
            enrich_document(cache, cfg, PromptTemplates::defaults(), "fox", views, divided);
        CHECK(enriched.at("Color and Patterns").find(divided.at("Color and Patterns")) !=
              std::string::npos);
    }

    SUBCASE("missing view entry violates the precondition") {
        std::map<std::string, std::string> divided = {{"Habitat", "x"}};
        CHECK_THROWS_AS(
            enrich_document(cache, cfg, PromptTemplates::defaults(), "fox", views, divided),
            ValidationError);
    }
}

TEST_CASE("collect_all is countable cold, idempotent warm, and deterministic") {
    testutil::TempDir tmp("collect-all");
    const std::vector<std::pair<int, std::string>> classes = {
        {0, "tiger"}, {1, "zebra"}, {2, "horse"}};
    std::map<std::string, std::string> raw_docs;
    raw_docs["tiger"] = "Golden color fur with black stripes. Large muscular body shape. "
                        "Lives in forest habitat. Feeds on deer.";
    raw_docs["zebra"] = "Black and white striped color. Compact body size. "
                        "Grassland habitat with herds. Eats grass all day.";
    raw_docs["horse"] = "Brown color coat. Tall body shape with long legs. "
                        "Open prairie habitat. Neighs loudly.";

    MockLlmClient mock(7);
    CachingClient cache(mock, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache");

    auto first = collect_all(cache, cfg, PromptTemplates::defaults(), classes, raw_docs);
    const long cold_calls = mock.call_count();
    CHECK(cold_calls == 1 + cfg.t_repeat + 2 * static_cast<long>(classes.size()));
    CHECK(first.documents.size() == 3);
    for (const auto& doc : first.documents) doc.validate_against(first.views);

    // warm rerun replays the cache: zero client calls, identical bytes
    auto second = collect_all(cache, cfg, PromptTemplates::defaults(), classes, raw_docs);
    CHECK(mock.call_count() == cold_calls);
    REQUIRE(second.documents.size() == first.documents.size());
    for (size_t i = 0; i < first.documents.size(); ++i)
        CHECK(second.documents[i].paragraphs == first.documents[i].paragraphs);

    // a fresh client over a fresh cache reproduces the same documents
    MockLlmClient mock2(7);
    testutil::TempDir tmp2("collect-all-2");
    CachingClient cache2(mock2, tmp2.path / "cache");
    auto cfg2 = make_config(tmp2.path / "cache");
    auto third = collect_all(cache2, cfg2, PromptTemplates::defaults(), classes, raw_docs);
    for (size_t i = 0; i < first.documents.size(); ++i)
        CHECK(third.documents[i].paragraphs == first.documents[i].paragraphs);

    SUBCASE("missing raw document names the class") {
        std::map<std::string, std::string> incomplete = raw_docs;
        incomplete.erase("zebra");
        CHECK_THROWS_AS(
            collect_all(cache, cfg, PromptTemplates::defaults(), classes, incomplete),
            ValidationError);
    }
}

TEST_CASE("a corrupted cache entry is ignored, re-queried and repaired") {
    testutil::TempDir tmp("collect-corrupt");
    MockLlmClient mock(7);
    CachingClient cache(mock, tmp.path / "cache");

    const std::string prompt = "divide documents into paragraphs based on the following "
                               "attribute views.\n\nAttribute views:\n- Color and Patterns\n\n"
                               "Document:\nRed color fur.";
    const std::string first = cache.complete(prompt, 1.0, "mock-1");
    CHECK(mock.call_count() == 1);
    CHECK(cache.complete(prompt, 1.0, "mock-1") == first);
    CHECK(mock.call_count() == 1);  // served from cache

    const std::string key = CachingClient::cache_key("mock-1", 1.0, prompt);
    {
        std::ofstream out(tmp.path / "cache" / (key + ".json"), std::ios::trunc);
        out << "{ corrupted";
    }
    CHECK(cache.complete(prompt, 1.0, "mock-1") == first);
    CHECK(mock.call_count() == 2);  // re-queried once
    CHECK(cache.complete(prompt, 1.0, "mock-1") == first);
    CHECK(mock.call_count() == 2);  // repaired entry serves again
}

TEST_CASE("cache entries carry exactly the documented fields") {
    testutil::TempDir tmp("collect-fields");
    MockLlmClient mock(7);
    CachingClient cache(mock, tmp.path / "cache");
    cache.complete("enrich the attribute documents with concise visual details about x that "
                   "needs additional descriptions:\n### A\ntext",
                   0.9, "mock-9");
    int files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(tmp.path / "cache")) {
        std::ifstream in(entry.path());
        nlohmann::json j;
        in >> j;
        CHECK(j.size() == 4);
        for (const char* k : {"prompt", "temperature", "model_id", "response"})
            CHECK(j.contains(k));
        CHECK(j.at("model_id") == "mock-9");
        CHECK(j.at("temperature").get<double>() == 0.9);
        ++files;
    }
    CHECK(files == 1);
}

TEST_CASE("view intersection matches a brute-force oracle on randomized sets") {
    Rng rng(123);
    const std::vector<std::string> pool = {"Alpha", "Beta",  "Gamma", "Delta",
                                           "Edges", "Fur",   "Glow",  "Hue"};
    for (int trial = 0; trial < 50; ++trial) {
        const int repeats = 2 + rng.uniform_int(4);
        std::vector<std::vector<std::string>> lists;
        for (int t = 0; t < repeats; ++t) {
            std::vector<std::string> names;
            for (const auto& name : pool)
                if (rng.uniform() < 0.6) names.push_back(name);
            if (names.empty()) names.push_back(pool[0]);
            lists.push_back(names);
        }

        // brute-force oracle: names present in every list, first-list order
        std::vector<std::string> expected;
        for (const auto& name : lists[0]) {
            bool everywhere = true;
            for (const auto& list : lists)
                everywhere = everywhere &&
                             std::find(list.begin(), list.end(), name) != list.end();
            if (everywhere) expected.push_back(name);
        }

        testutil::TempDir tmp("collect-oracle");
        ScriptedClient scripted(lists);
        CachingClient cache(scripted, tmp.path / "cache");
        auto cfg = make_config(tmp.path / "cache", repeats);
        if (expected.empty()) {
            CHECK_THROWS_AS(generate_views(cache, cfg, PromptTemplates::defaults()),
                            CollectionError);
            continue;
        }
        auto views = generate_views(cache, cfg, PromptTemplates::defaults());
        REQUIRE(views.count() == static_cast<int>(expected.size()));
        for (size_t i = 0; i < expected.size(); ++i)
            CHECK(views.at(static_cast<int>(i)).name == expected[i]);
    }
}

TEST_CASE("prompt templates save and load through the documented files") {
    testutil::TempDir tmp("collect-templates");
    auto defaults = PromptTemplates::defaults();
    defaults.save(tmp.path / "prompts");
    auto loaded = PromptTemplates::load(tmp.path / "prompts");
    CHECK(loaded.view == defaults.view);
    CHECK(loaded.divide == defaults.divide);
    CHECK(loaded.enrich == defaults.enrich);
    CHECK(loaded.view.find("{type}") != std::string::npos);
    CHECK(loaded.divide.find("{collected document}") != std::string::npos);
    CHECK(loaded.divide.find("{visual attributes}") != std::string::npos);
    CHECK(loaded.enrich.find("{category}") != std::string::npos);
    CHECK(loaded.enrich.find("{divided document}") != std::string::npos);
    CHECK_THROWS_AS(PromptTemplates::load(tmp.path / "nowhere"), IoError);
}

TEST_CASE("shipped prompt files match the built-in defaults") {
    const std::filesystem::path assets = std::filesystem::path(MADS_SOURCE_DIR) / "assets";
    auto shipped = PromptTemplates::load(assets / "prompts");
    auto defaults = PromptTemplates::defaults();
    CHECK(shipped.view == defaults.view);
    CHECK(shipped.divide == defaults.divide);
    CHECK(shipped.enrich == defaults.enrich);

    // the shipped per-dataset view sets parse and keep their view counts
    CHECK(corpus::load_views(assets / "views" / "awa2.json").count() == 5);
    CHECK(corpus::load_views(assets / "views" / "cub.json").count() == 8);
    CHECK(corpus::load_views(assets / "views" / "flo.json").count() == 6);
}

TEST_CASE("unparsable responses exhaust retries and surface the raw response") {
    testutil::TempDir tmp("collect-retries");

    struct GarbageClient : LlmClient {
        long calls = 0;
        std::string complete(const std::string&, double, const std::string&) override {
            ++calls;
            return "no headers at all";
        }
        long call_count() const override { return calls; }
    } garbage;

    CachingClient cache(garbage, tmp.path / "cache");
    auto cfg = make_config(tmp.path / "cache", 2);
    cfg.max_retries = 2;
    try {
        generate_views(cache, cfg, PromptTemplates::defaults());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("no headers at all") != std::string::npos);
    }
    CHECK(garbage.calls == 3);  // initial attempt + 2 retries on the first sample
}
