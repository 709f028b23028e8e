#pragma once

#include <vector>

#include "mads/model.hpp"

namespace mads::objective {

struct LossWeights {
    double lambda_local = 0.5;
    double lambda_focus = 0.5;

    void validate() const {
        if (lambda_local < 0.0 || lambda_focus < 0.0)
            throw ConfigError("loss weights must be non-negative");
    }
};

// Focus loss over the perceiver attention maps of one document. Per view,
// s_j = max over the K query rows at word j; the loss is binary cross-entropy
// pushing s_j toward the visual flag of word j, averaged over views, with
// scores clamped to [eps, 1-eps]. The equation as printed carries log(s_j) in
// both terms; that form is kept behind literal_printed_form for auditing.
ad::Var focus_loss(ad::Tape& tape, const std::vector<ad::Var>& attention_maps,
                   const std::vector<std::vector<int>>& visual_masks,
                   bool literal_printed_form = false, double eps = 1e-7);

struct ScoredLoss {
    ad::Var loss;    // 1 x 1
    ad::Var logits;  // 1 x C
};

// Cross-entropy over the per-class global scores s_g = I_g . T_g; the
// denominator ranges over every provided class embedding.
ScoredLoss global_loss(ad::Tape& tape, ad::Var i_g, ad::Var class_embeddings, int label);

// Local score of one image against one class document: cross-attention with
// the image tokens as query and T_l as key/value, residual + MLP, pooled over
// patches, then the linear scorer.
ad::Var local_score(ad::Tape& tape, ad::Var i_l, ad::Var t_l, const TapeBindings& params,
                    const ModelConfig& cfg);

ScoredLoss local_loss(ad::Tape& tape, ad::Var i_l, const std::vector<ad::Var>& class_t_l,
                      int label, const TapeBindings& params, const ModelConfig& cfg);

// L = L_global + lambda_local * L_local + lambda_focus * L_focus.
ad::Var total_loss(ad::Tape& tape, ad::Var global, ad::Var local, ad::Var focus,
                   const LossWeights& weights);

}  // namespace mads::objective
