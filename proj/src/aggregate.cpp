#include "mads/aggregate.hpp"

#include <cmath>

namespace mads::aggregate {

Aggregated aggregate_attend(ad::Tape& tape, const std::vector<textenc::ViewFeatures>& views,
                            const TapeBindings& params, const ModelConfig& cfg) {
    if (views.empty()) throw ShapeError("aggregate_attend: no views");
    const int r = cfg.r;
    const int k = cfg.k_queries;
    std::vector<ad::Var> parts;
    parts.reserve(views.size() + 1);
    parts.push_back(params.at("agg.z"));
    for (const auto& vf : views) {
        if (tape.val(vf.e).cols() != r || tape.val(vf.e).rows() != k)
            throw ShapeError("aggregate_attend: view features have mismatched shapes");
        parts.push_back(vf.e);
    }
    ad::Var x = tape.concat_rows(parts);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.r_h));
    for (int layer = 0; layer < cfg.agg_layers; ++layer) {
        const std::string stem = "agg.layer" + std::to_string(layer) + ".";
        ad::Var in = x;
        if (cfg.agg_prenorm)
            in = tape.layer_norm_rows(in, params.at(stem + "ln_gain"), params.at(stem + "ln_bias"));
        ad::Var kk = tape.matmul(in, params.at(stem + "wk"));
        ad::Var qq = tape.matmul(in, params.at(stem + "wq"));
        ad::Var vv = tape.matmul(in, params.at(stem + "wv"));
        ad::Var attn = tape.softmax_rows(tape.scale(tape.matmul(qq, tape.transpose(kk)), inv_sqrt));
        ad::Var tilde = tape.matmul(tape.matmul(attn, vv), params.at(stem + "wo"));
        ad::Var mid = tape.relu(tape.add_row_broadcast(
            tape.matmul(tilde, params.at(stem + "mlp_w1")), params.at(stem + "mlp_b1")));
        ad::Var mlp = tape.add_row_broadcast(tape.matmul(mid, params.at(stem + "mlp_w2")),
                                             params.at(stem + "mlp_b2"));
        x = tape.add(tilde, mlp);
    }
    Aggregated out;
    out.a_g = tape.slice_rows(x, 0, 1);
    out.a_l = tape.slice_rows(x, 1, static_cast<int>(views.size()) * k);
    return out;
}

SemanticEmbeddings fuse(ad::Tape& tape, const std::vector<textenc::ViewFeatures>& views,
                        ad::Var a_g, ad::Var a_l, double beta) {
    if (beta < 0.0 || beta > 1.0) throw ConfigError("fuse: beta must lie in [0, 1]");
    if (views.empty()) throw ShapeError("fuse: no views");
    SemanticEmbeddings out;
    std::vector<ad::Var> locals;
    locals.reserve(views.size());
    // Sequential sum then a single 1/V scaling: the canonical arithmetic the
    // bit-exact fusion identities are stated against.
    ad::Var core_sum;
    for (size_t i = 0; i < views.size(); ++i) {
        core_sum = i == 0 ? views[i].g : tape.add(core_sum, views[i].g);
        locals.push_back(views[i].e);
        out.per_view_core.push_back(views[i].g);
    }
    ad::Var mean_core = tape.scale(core_sum, 1.0 / static_cast<double>(views.size()));
    out.t_g = tape.add(tape.scale(mean_core, beta), tape.scale(a_g, 1.0 - beta));
    out.t_l = tape.add(tape.concat_rows(locals), a_l);
    return out;
}

}  // namespace mads::aggregate
