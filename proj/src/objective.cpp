#include "mads/objective.hpp"

#include <cmath>

namespace mads::objective {

ad::Var focus_loss(ad::Tape& tape, const std::vector<ad::Var>& attention_maps,
                   const std::vector<std::vector<int>>& visual_masks,
                   bool literal_printed_form, double eps) {
    if (attention_maps.empty()) throw ShapeError("focus_loss: no attention maps");
    if (attention_maps.size() != visual_masks.size())
        throw ShapeError("focus_loss: map/mask count mismatch");
    const int v = static_cast<int>(attention_maps.size());
    ad::Var acc;
    for (int i = 0; i < v; ++i) {
        const auto& mask = visual_masks[static_cast<size_t>(i)];
        const int m = static_cast<int>(tape.val(attention_maps[static_cast<size_t>(i)]).cols());
        if (static_cast<int>(mask.size()) != m)
            throw ShapeError("focus_loss: mask length " + std::to_string(mask.size()) +
                             " does not match " + std::to_string(m) + " attention columns");
        Mat psi(1, m);
        for (int j = 0; j < m; ++j) psi(0, j) = mask[static_cast<size_t>(j)] ? 1.0 : 0.0;
        ad::Var psi_v = tape.input(psi, false);
        ad::Var s = tape.clamp(tape.colwise_max(attention_maps[static_cast<size_t>(i)]), eps,
                               1.0 - eps);
        ad::Var log_s = tape.log(s);
        ad::Var phi;
        if (literal_printed_form) {
            // phi = sum_j [psi log s + (1 - psi) log s] = sum_j log s
            phi = tape.sum_all(log_s);
        } else {
            ad::Var log_one_minus = tape.log(tape.rsub_scalar(1.0, s));
            ad::Var term = tape.add(tape.cmul(psi_v, log_s),
                                    tape.cmul(tape.rsub_scalar(1.0, psi_v), log_one_minus));
            phi = tape.sum_all(term);
        }
        acc = (i == 0) ? phi : tape.add(acc, phi);
    }
    const double norm = 1.0 / static_cast<double>(v);
    // The BCE form is negated so that minimization drives visual scores to 1;
    // the printed form stays exactly as written.
    return tape.scale(acc, literal_printed_form ? norm : -norm);
}

ScoredLoss global_loss(ad::Tape& tape, ad::Var i_g, ad::Var class_embeddings, int label) {
    const int classes = static_cast<int>(tape.val(class_embeddings).rows());
    if (label < 0 || label >= classes)
        throw ConfigError("global_loss: label " + std::to_string(label) + " out of range for " +
                          std::to_string(classes) + " classes");
    if (tape.val(i_g).rows() != 1 || tape.val(i_g).cols() != tape.val(class_embeddings).cols())
        throw ShapeError("global_loss: I_g / class embedding width mismatch");
    ScoredLoss out;
    out.logits = tape.matmul(i_g, tape.transpose(class_embeddings));  // 1 x C
    if (!tape.val(out.logits).allFinite())
        throw NumericError("global_loss: non-finite logits");
    ad::Var log_probs = tape.log_softmax_row(out.logits);
    out.loss = tape.scale(tape.pick(log_probs, 0, label), -1.0);
    return out;
}

ad::Var local_score(ad::Tape& tape, ad::Var i_l, ad::Var t_l, const TapeBindings& params,
                    const ModelConfig& cfg) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.r_h));
    ad::Var q = tape.matmul(i_l, params.at("local.wq"));
    ad::Var k = tape.matmul(t_l, params.at("local.wk"));
    ad::Var v = tape.matmul(t_l, params.at("local.wv"));
    ad::Var attn = tape.softmax_rows(tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt));
    ad::Var enhanced = tape.add(i_l, tape.matmul(tape.matmul(attn, v), params.at("local.wo")));
    ad::Var mid = tape.relu(tape.add_row_broadcast(
        tape.matmul(enhanced, params.at("local.mlp_w1")), params.at("local.mlp_b1")));
    ad::Var mlp = tape.add_row_broadcast(tape.matmul(mid, params.at("local.mlp_w2")),
                                         params.at("local.mlp_b2"));
    ad::Var fused = tape.add(enhanced, mlp);  // N x r
    ad::Var pooled =
        cfg.local_pool == "max" ? tape.colwise_max(fused) : tape.mean_rows(fused);  // 1 x r
    return tape.matmul(pooled, params.at("local.scorer"));  // 1 x 1
}

ScoredLoss local_loss(ad::Tape& tape, ad::Var i_l, const std::vector<ad::Var>& class_t_l,
                      int label, const TapeBindings& params, const ModelConfig& cfg) {
    const int classes = static_cast<int>(class_t_l.size());
    if (label < 0 || label >= classes)
        throw ConfigError("local_loss: label " + std::to_string(label) + " out of range for " +
                          std::to_string(classes) + " classes");
    std::vector<ad::Var> scores;
    scores.reserve(class_t_l.size());
    for (ad::Var t_l : class_t_l) scores.push_back(local_score(tape, i_l, t_l, params, cfg));
    ScoredLoss out;
    out.logits = tape.concat_cols(scores);  // 1 x C
    if (!tape.val(out.logits).allFinite())
        throw NumericError("local_loss: non-finite logits");
    ad::Var log_probs = tape.log_softmax_row(out.logits);
    out.loss = tape.scale(tape.pick(log_probs, 0, label), -1.0);
    return out;
}

ad::Var total_loss(ad::Tape& tape, ad::Var global, ad::Var local, ad::Var focus,
                   const LossWeights& weights) {
    weights.validate();
    for (ad::Var part : {global, local, focus})
        if (!tape.val(part).allFinite()) throw NumericError("total_loss: non-finite component");
    return tape.add(global, tape.add(tape.scale(local, weights.lambda_local),
                                     tape.scale(focus, weights.lambda_focus)));
}

}  // namespace mads::objective
