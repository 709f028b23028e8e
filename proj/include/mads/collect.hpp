#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "mads/corpus.hpp"

namespace mads::collect {

// Behavioral contract for language-model backends. Mock responses are pure
// functions of (prompt, seed); real backends honor the temperature.
struct LlmClient {
    virtual ~LlmClient() = default;
    virtual std::string complete(const std::string& prompt, double temperature,
                                 const std::string& model_id) = 0;
    virtual long call_count() const { return 0; }
};

// Deterministic stand-in. It parses the incoming prompt (view generation,
// document division, enrichment) and answers with well-formed '###'-sectioned
// text. View lists come from a built-in per-domain table plus per-query decoy
// views, so repeated queries differ and intersection prunes the decoys.
class MockLlmClient : public LlmClient {
public:
    explicit MockLlmClient(uint64_t seed) : seed_(seed) {}

    std::string complete(const std::string& prompt, double temperature,
                         const std::string& model_id) override;
    long call_count() const override { return calls_.load(); }

private:
    uint64_t seed_;
    std::atomic<long> calls_{0};
};

// Minimal OpenAI-style chat backend. Reads the API key from the environment
// (MADS_LLM_API_KEY); the key is never written to the cache or logs.
class HttpLlmClient : public LlmClient {
public:
    HttpLlmClient(std::string host, std::string path);
    std::string complete(const std::string& prompt, double temperature,
                         const std::string& model_id) override;
    long call_count() const override { return calls_.load(); }

private:
    std::string host_, path_;
    std::atomic<long> calls_{0};
};

struct CollectionConfig {
    std::string dataset_domain = "animal";  // the {type} slot
    int t_repeat = 5;
    double temperature = 1.0;
    std::string model_id = "mock-1";
    int max_retries = 3;
    std::filesystem::path cache_dir;

    void validate() const;
};

// Prompt templates with {type}, {collected document}, {visual attributes},
// {category} and {divided document} slots.
struct PromptTemplates {
    std::string view;
    std::string divide;
    std::string enrich;

    static PromptTemplates defaults();
    static PromptTemplates load(const std::filesystem::path& dir);
    void save(const std::filesystem::path& dir) const;
};

// Write-through exchange cache: one JSON file per key under cache_dir with
// {"prompt", "temperature", "model_id", "response"}. The key is the SHA-256
// of (model_id, temperature, prompt). Unreadable entries count as misses and
// are repaired. force_refresh bypasses the cached entry (retry semantics).
class CachingClient {
public:
    CachingClient(LlmClient& inner, std::filesystem::path cache_dir);

    std::string complete(const std::string& prompt, double temperature,
                         const std::string& model_id, bool force_refresh = false);
    long client_calls() const { return inner_.call_count(); }

    static std::string cache_key(const std::string& model_id, double temperature,
                                 const std::string& prompt);

private:
    LlmClient& inner_;
    std::filesystem::path dir_;
    std::mutex write_mutex_;
};

// Response blocks keyed on '### <name>' headers, in response order.
std::vector<std::pair<std::string, std::string>> parse_sections(const std::string& response);

// Queries p_view t_repeat times, intersects the returned view names (first
// response fixes the order), then issues one canonicalization query that
// provides the explanation for every selected view: 1 + T_repeat client calls
// on a cold cache.
corpus::AttributeViewSet generate_views(CachingClient& client, const CollectionConfig& config,
                                        const PromptTemplates& templates);

std::map<std::string, std::string> divide_document(CachingClient& client,
                                                   const CollectionConfig& config,
                                                   const PromptTemplates& templates,
                                                   const corpus::AttributeViewSet& views,
                                                   const std::string& collected_doc);

std::map<std::string, std::string> enrich_document(CachingClient& client,
                                                   const CollectionConfig& config,
                                                   const PromptTemplates& templates,
                                                   const std::string& category_name,
                                                   const corpus::AttributeViewSet& views,
                                                   const std::map<std::string, std::string>& divided);

struct CollectResult {
    corpus::AttributeViewSet views;
    std::vector<corpus::MultiAttributeDocument> documents;
};

// Full Algorithm-1 loop: views once, then divide + enrich per class. Every
// exchange goes through the cache, so reruns replay byte-for-byte with zero
// client calls.
CollectResult collect_all(CachingClient& client, const CollectionConfig& config,
                          const PromptTemplates& templates,
                          const std::vector<std::pair<int, std::string>>& classes,
                          const std::map<std::string, std::string>& raw_docs);

}  // namespace mads::collect
