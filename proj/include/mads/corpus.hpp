#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mads/common.hpp"
#include "mads/rng.hpp"

namespace mads::corpus {

struct AttributeView {
    std::string name;
    std::string explanation;
};

// Ordered set of attribute views. Names must be unique after case-folding and
// whitespace normalization; V >= 1.
class AttributeViewSet {
public:
    static AttributeViewSet make(std::vector<AttributeView> views);
    static std::string fold_name(std::string_view name);

    int count() const { return static_cast<int>(views_.size()); }
    const std::vector<AttributeView>& views() const { return views_; }
    const AttributeView& at(int i) const { return views_.at(static_cast<size_t>(i)); }
    std::optional<int> index_of(std::string_view name) const;

private:
    std::vector<AttributeView> views_;
    std::unordered_map<std::string, int> folded_index_;
};

// Per-category auxiliary document: one enriched paragraph per attribute view.
struct MultiAttributeDocument {
    int category_id = 0;
    std::string category_name;
    std::map<std::string, std::string> paragraphs;

    void validate_against(const AttributeViewSet& views) const;
};

struct VisualWordLexicon {
    std::set<std::string> entries;  // normalized: lowercase, trimmed, non-empty
    std::string source_tag;

    bool contains(const std::string& normalized) const {
        return entries.count(normalized) > 0;
    }
};

struct TokenizedParagraph {
    std::vector<std::string> tokens;      // normalized forms
    std::vector<int> token_ids;
    std::vector<int> visual_mask;         // 1 iff token is in the lexicon
    int unk_count = 0;

    int size() const { return static_cast<int>(tokens.size()); }
};

// Word -> embedding-row mapping with a reserved UNK id.
struct Vocabulary {
    std::unordered_map<std::string, int> ids;
    int unk_id = 0;
    int vocab_size = 0;

    int lookup(const std::string& word) const {
        auto it = ids.find(word);
        return it == ids.end() ? unk_id : it->second;
    }
};

// Lowercase and strip leading/trailing punctuation; empty result means the
// token was punctuation-only and is dropped.
std::string normalize_token(std::string_view raw);
std::vector<std::string> split_normalize(std::string_view text);

TokenizedParagraph tokenize(const std::string& paragraph, const VisualWordLexicon& lexicon,
                            const Vocabulary& vocab);

// Union of label files (one label per line, '#' comments, or a JSON list).
VisualWordLexicon build_lexicon(const std::vector<std::filesystem::path>& label_files);

std::vector<MultiAttributeDocument> load_documents(const std::filesystem::path& path,
                                                   const AttributeViewSet& views);
void save_documents(const std::filesystem::path& path,
                    const std::vector<MultiAttributeDocument>& docs);

AttributeViewSet load_views(const std::filesystem::path& path);
void save_views(const std::filesystem::path& path, const AttributeViewSet& views);

struct Sample {
    std::string image_ref;
    int category_id = 0;
    std::string split;  // "train" | "test_seen" | "test_unseen"
};

struct DatasetManifest {
    std::vector<int> seen_ids;
    std::vector<int> unseen_ids;
    std::vector<Sample> samples;
    std::string feature_source;

    std::vector<int> categories() const;
    bool is_seen(int id) const;
    void validate() const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Synthetic desk-scale dataset: classes are combinations of latent attributes
// (one per view); documents name those attributes among injected non-visual
// noise words; images are noisy latent vectors consumed by the synthetic
// backbone. Unseen classes are novel combinations of attributes that each
// appear in some seen class, so knowledge transfer is possible by design.

struct SyntheticConfig {
    uint64_t seed = 7;
    int n_seen = 8;
    int n_unseen = 4;
    int views = 3;                     // V
    int attrs_per_view = 3;            // working vocabulary per view
    int train_per_class = 25;
    int test_seen_per_class = 13;      // 8*13 + 4*24 = 200 test images
    int test_unseen_per_class = 24;
    int noise_words_per_paragraph = 4;
    int embed_dim = 32;
    double image_noise = 0.25;
    int backbone_blocks = 2;           // B
    int backbone_width = 32;           // D
    int patches = 16;                  // N
};

struct SyntheticClass {
    int id = 0;
    std::string name;
    std::vector<int> attr_choice;  // per view, index into that view's pool
    Vec latent;
};

struct SyntheticDataset {
    SyntheticConfig config;
    AttributeViewSet views;
    DatasetManifest manifest;
    std::vector<MultiAttributeDocument> documents;
    VisualWordLexicon lexicon;
    std::vector<SyntheticClass> classes;  // latent-attribute table
    std::map<std::string, Vec> image_latents;
    std::vector<std::pair<std::string, Vec>> embedding_rows;  // "<unk>" first
    int latent_dim = 0;
};

SyntheticDataset gen_synthetic_dataset(const SyntheticConfig& config);

void save_image_latents(const std::filesystem::path& path,
                        const std::map<std::string, Vec>& latents);
std::map<std::string, Vec> load_image_latents(const std::filesystem::path& path);
void save_class_table(const std::filesystem::path& path, const SyntheticDataset& data);

}  // namespace mads::corpus
