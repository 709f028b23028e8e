#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mads/ad.hpp"
#include "mads/common.hpp"
#include "mads/rng.hpp"

namespace mads {

// Static shape and hyperparameter description of one MADS network. Persisted
// verbatim inside checkpoints; every field participates in compatibility
// validation on load.
struct ModelConfig {
    int vocab_size = 0;
    int embed_dim = 32;        // width of the frozen word vectors (d)
    int r = 16;                // semantic embedding width
    int r_h = 16;              // attention head width in perceiver/aggregator
    int heads = 4;             // text encoder attention heads
    int text_blocks = 2;       // transformer encoder depth
    int perceiver_layers = 2;  // stacked cross-attention; layer n+1 queries = layer n output
    int agg_layers = 1;
    int k_queries = 2;         // K
    int views = 3;             // V
    int max_len = 64;          // word positions (CLS has its own slot)
    int backbone_blocks = 2;   // B
    int backbone_width = 32;   // D
    int patches = 16;          // N
    double beta = 0.5;         // fuse ratio
    double dropout = 0.0;
    bool shared_view_tokens = false;  // ablation: one CLS/query set for all views
    bool agg_prenorm = false;         // off: aggregation exactly as the equations
    bool literal_focus_form = false;  // audit flag, see objective
    std::string local_pool = "mean";  // "mean" | "max"
    std::vector<std::string> view_names;

    void validate() const;
    int token_sets() const { return shared_view_tokens ? 1 : views; }
};

struct EncoderBlockParams {
    Mat ln1_gain, ln1_bias;
    Mat wq, wk, wv, wo;      // r x r
    Mat bq, bk, bv, bo;      // 1 x r
    Mat ln2_gain, ln2_bias;
    Mat mlp_w1, mlp_b1;      // r x 4r, 1 x 4r
    Mat mlp_w2, mlp_b2;      // 4r x r, 1 x r
};

struct TextEncoderParams {
    Mat embed_w1;  // d x r, the learnable MLP over frozen word vectors
    Mat embed_w2;  // r x r
    Mat cls;       // token_sets x r, per-view [CLS] rows
    Mat pos;       // (max_len + 1) x r, learned positions; row 0 is the CLS slot
    std::vector<EncoderBlockParams> blocks;
};

struct PerceiverLayerParams {
    Mat wk, wq, wv;  // r x r_h
    Mat wo;          // r_h x r
};

struct SemanticPerceiverParams {
    Mat queries;  // (token_sets * K) x r
    std::vector<PerceiverLayerParams> layers;
};

struct AggregatorLayerParams {
    Mat wk, wq, wv;          // r x r_h
    Mat wo;                  // r_h x r
    Mat mlp_w1, mlp_b1;      // r x r, 1 x r
    Mat mlp_w2, mlp_b2;      // r x r, 1 x r
    Mat ln_gain, ln_bias;    // used only with agg_prenorm
};

struct AggregatorParams {
    Mat z;  // 1 x r
    std::vector<AggregatorLayerParams> layers;
};

struct SsfParams {
    Mat scale;  // B x D, ones at init
    Mat shift;  // B x D, zeros at init
};

struct ImageEncoderParams {
    SsfParams ssf;
    Mat proj_w;  // D x r
    Mat proj_b;  // 1 x r
};

struct LocalAlignParams {
    Mat wq, wk, wv;          // r x r_h
    Mat wo;                  // r_h x r
    Mat mlp_w1, mlp_b1;      // r x r, 1 x r
    Mat mlp_w2, mlp_b2;      // r x r, 1 x r
    Mat scorer;              // r x 1
};

struct Model {
    ModelConfig cfg;
    TextEncoderParams text;
    SemanticPerceiverParams perceiver;
    AggregatorParams agg;
    ImageEncoderParams image;
    LocalAlignParams local;
    int64_t version = 0;  // bumped on every optimizer step

    static Model init(const ModelConfig& cfg, Rng& rng);
};

// Stable enumeration of every trainable tensor. Checkpoint layout, optimizer
// state and gradient accumulation all follow this order.
void visit_params(Model& m, const std::function<void(const std::string&, Mat&)>& fn);
void visit_params(const Model& m, const std::function<void(const std::string&, const Mat&)>& fn);

// Parameters registered as inputs on one tape, addressable by name.
struct TapeBindings {
    ad::Tape* tape = nullptr;
    std::unordered_map<std::string, ad::Var> vars;

    ad::Var at(const std::string& name) const;
};

TapeBindings bind_params(ad::Tape& tape, const Model& m, bool needs_grad);

// Inverted-dropout context; inactive when rate == 0 or rng == nullptr.
struct DropoutCtx {
    Rng* rng = nullptr;
    double rate = 0.0;

    bool active() const { return rng != nullptr && rate > 0.0; }
};

ad::Var apply_dropout(ad::Tape& tape, ad::Var x, DropoutCtx* ctx);

}  // namespace mads
