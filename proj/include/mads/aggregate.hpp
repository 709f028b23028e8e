#pragma once

#include <vector>

#include "mads/model.hpp"
#include "mads/textenc.hpp"

namespace mads::aggregate {

struct Aggregated {
    ad::Var a_g;  // 1 x r, aggregated global feature (the [CLS] slot)
    ad::Var a_l;  // (V*K) x r, aggregated local features
};

// Self-attention over [z, e_1, ..., e_V] followed by a residual MLP. No layer
// normalization by default, matching the update equations literally; the
// prenorm variant sits behind cfg.agg_prenorm.
Aggregated aggregate_attend(ad::Tape& tape, const std::vector<textenc::ViewFeatures>& views,
                            const TapeBindings& params, const ModelConfig& cfg);

struct SemanticEmbeddings {
    ad::Var t_g;  // 1 x r global semantic embedding
    ad::Var t_l;  // (V*K) x r local semantic embeddings
    std::vector<ad::Var> per_view_core;  // g_i, retained for explanations
};

// T_g = beta * mean(g_i) + (1 - beta) * A_g;  T_l = [e_1; ...; e_V] + A_l.
SemanticEmbeddings fuse(ad::Tape& tape, const std::vector<textenc::ViewFeatures>& views,
                        ad::Var a_g, ad::Var a_l, double beta);

}  // namespace mads::aggregate
