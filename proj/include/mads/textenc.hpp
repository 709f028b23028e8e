#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "mads/corpus.hpp"
#include "mads/model.hpp"

namespace mads::textenc {

// Frozen pretrained word vectors in the standard text format:
// header "vocab_size dim", then one "word v1 ... vd" line per word.
// An <unk> row is guaranteed: taken from the file when present, otherwise a
// zero row is appended (reported via synthesized_unk).
struct EmbeddingTable {
    Mat table;  // vocab_size x d
    corpus::Vocabulary vocab;
    bool synthesized_unk = false;

    int dim() const { return static_cast<int>(table.cols()); }
    int size() const { return static_cast<int>(table.rows()); }
    std::string checksum() const;

    static EmbeddingTable load(const std::filesystem::path& path);
    static EmbeddingTable from_rows(const std::vector<std::pair<std::string, Vec>>& rows);
    void save(const std::filesystem::path& path) const;
};

// Improved word embeddings (the learnable shallow MLP over frozen vectors).
// Returns an M x r matrix.
ad::Var embed_words(ad::Tape& tape, const corpus::TokenizedParagraph& tokens,
                    const EmbeddingTable& table, const TapeBindings& params,
                    const ModelConfig& cfg);

struct EncodedParagraph {
    ad::Var g;  // 1 x r, output at the [CLS] position
    ad::Var l;  // M x r, outputs at word positions
};

// [CLS]-prefixed transformer encoder with learned positions; pre-norm blocks.
EncodedParagraph encode_paragraph(ad::Tape& tape, ad::Var word_embs, int view_index,
                                  const TapeBindings& params, const ModelConfig& cfg,
                                  DropoutCtx* dropout = nullptr);

struct Perceived {
    ad::Var e;  // K x r salient local features
    ad::Var h;  // K x M attention map of the final perceiver layer
};

// Stacked cross-attention with K learnable queries per view; the queries of
// layer n+1 are the outputs of layer n.
Perceived perceive(ad::Tape& tape, ad::Var local_feats, int view_index,
                   const TapeBindings& params, const ModelConfig& cfg);

struct ViewFeatures {
    ad::Var g;  // 1 x r single-view core feature
    ad::Var e;  // K x r salient local features
    ad::Var h;  // K x M attention map (rows sum to 1)
    int view_index = 0;
};

ViewFeatures view_features(ad::Tape& tape, const corpus::TokenizedParagraph& tokens,
                           int view_index, const EmbeddingTable& table,
                           const TapeBindings& params, const ModelConfig& cfg,
                           DropoutCtx* dropout = nullptr);

}  // namespace mads::textenc
