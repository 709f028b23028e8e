#include "mads/model.hpp"

#include <cmath>

namespace mads {

void ModelConfig::validate() const {
    if (vocab_size < 1) throw ConfigError("config: vocab_size must be positive");
    if (r < 1 || r_h < 1 || embed_dim < 1) throw ConfigError("config: widths must be positive");
    if (heads < 1 || r % heads != 0)
        throw ConfigError("config: heads must divide the semantic width r");
    if (k_queries < 1) throw ConfigError("config: K must be >= 1");
    if (views < 1) throw ConfigError("config: V must be >= 1");
    if (perceiver_layers < 1) throw ConfigError("config: perceiver needs at least one layer");
    if (agg_layers < 1) throw ConfigError("config: aggregator needs at least one layer");
    if (max_len < 1) throw ConfigError("config: max_len must be >= 1");
    if (beta < 0.0 || beta > 1.0) throw ConfigError("config: beta must lie in [0, 1]");
    if (local_pool != "mean" && local_pool != "max")
        throw ConfigError("config: local_pool must be 'mean' or 'max'");
    if (static_cast<int>(view_names.size()) != views)
        throw ConfigError("config: view_names must list exactly V views");
}

namespace {

template <typename ModelT, typename Fn>
void visit_impl(ModelT& m, const Fn& fn) {
    auto block_name = [](const char* stem, int i, const char* leaf) {
        return std::string(stem) + std::to_string(i) + "." + leaf;
    };

    fn("text.embed_w1", m.text.embed_w1);
    fn("text.embed_w2", m.text.embed_w2);
    fn("text.cls", m.text.cls);
    fn("text.pos", m.text.pos);
    for (size_t i = 0; i < m.text.blocks.size(); ++i) {
        auto& b = m.text.blocks[i];
        int bi = static_cast<int>(i);
        fn(block_name("text.block", bi, "ln1_gain"), b.ln1_gain);
        fn(block_name("text.block", bi, "ln1_bias"), b.ln1_bias);
        fn(block_name("text.block", bi, "wq"), b.wq);
        fn(block_name("text.block", bi, "wk"), b.wk);
        fn(block_name("text.block", bi, "wv"), b.wv);
        fn(block_name("text.block", bi, "wo"), b.wo);
        fn(block_name("text.block", bi, "bq"), b.bq);
        fn(block_name("text.block", bi, "bk"), b.bk);
        fn(block_name("text.block", bi, "bv"), b.bv);
        fn(block_name("text.block", bi, "bo"), b.bo);
        fn(block_name("text.block", bi, "ln2_gain"), b.ln2_gain);
        fn(block_name("text.block", bi, "ln2_bias"), b.ln2_bias);
        fn(block_name("text.block", bi, "mlp_w1"), b.mlp_w1);
        fn(block_name("text.block", bi, "mlp_b1"), b.mlp_b1);
        fn(block_name("text.block", bi, "mlp_w2"), b.mlp_w2);
        fn(block_name("text.block", bi, "mlp_b2"), b.mlp_b2);
    }
    fn("perceiver.queries", m.perceiver.queries);
    for (size_t i = 0; i < m.perceiver.layers.size(); ++i) {
        auto& l = m.perceiver.layers[i];
        int li = static_cast<int>(i);
        fn(block_name("perceiver.layer", li, "wk"), l.wk);
        fn(block_name("perceiver.layer", li, "wq"), l.wq);
        fn(block_name("perceiver.layer", li, "wv"), l.wv);
        fn(block_name("perceiver.layer", li, "wo"), l.wo);
    }
    fn("agg.z", m.agg.z);
    for (size_t i = 0; i < m.agg.layers.size(); ++i) {
        auto& l = m.agg.layers[i];
        int li = static_cast<int>(i);
        fn(block_name("agg.layer", li, "wk"), l.wk);
        fn(block_name("agg.layer", li, "wq"), l.wq);
        fn(block_name("agg.layer", li, "wv"), l.wv);
        fn(block_name("agg.layer", li, "wo"), l.wo);
        fn(block_name("agg.layer", li, "mlp_w1"), l.mlp_w1);
        fn(block_name("agg.layer", li, "mlp_b1"), l.mlp_b1);
        fn(block_name("agg.layer", li, "mlp_w2"), l.mlp_w2);
        fn(block_name("agg.layer", li, "mlp_b2"), l.mlp_b2);
        fn(block_name("agg.layer", li, "ln_gain"), l.ln_gain);
        fn(block_name("agg.layer", li, "ln_bias"), l.ln_bias);
    }
    fn("image.ssf_scale", m.image.ssf.scale);
    fn("image.ssf_shift", m.image.ssf.shift);
    fn("image.proj_w", m.image.proj_w);
    fn("image.proj_b", m.image.proj_b);
    fn("local.wq", m.local.wq);
    fn("local.wk", m.local.wk);
    fn("local.wv", m.local.wv);
    fn("local.wo", m.local.wo);
    fn("local.mlp_w1", m.local.mlp_w1);
    fn("local.mlp_b1", m.local.mlp_b1);
    fn("local.mlp_w2", m.local.mlp_w2);
    fn("local.mlp_b2", m.local.mlp_b2);
    fn("local.scorer", m.local.scorer);
}

Mat xavier(Rng& rng, int rows, int cols) {
    const double s = std::sqrt(2.0 / static_cast<double>(rows + cols));
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = rng.normal() * s;
    return m;
}

Mat token_init(Rng& rng, int rows, int cols) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = rng.normal() * 0.02;
    return m;
}

}  // namespace

void visit_params(Model& m, const std::function<void(const std::string&, Mat&)>& fn) {
    visit_impl(m, fn);
}

void visit_params(const Model& m,
                  const std::function<void(const std::string&, const Mat&)>& fn) {
    visit_impl(m, fn);
}

Model Model::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const int r = cfg.r, rh = cfg.r_h, d = cfg.embed_dim;
    const int sets = cfg.token_sets();

    m.text.embed_w1 = xavier(rng, d, r);
    m.text.embed_w2 = xavier(rng, r, r);
    m.text.cls = token_init(rng, sets, r);
    m.text.pos = token_init(rng, cfg.max_len + 1, r);
    for (int i = 0; i < cfg.text_blocks; ++i) {
        EncoderBlockParams b;
        b.ln1_gain = Mat::Ones(1, r);
        b.ln1_bias = Mat::Zero(1, r);
        b.wq = xavier(rng, r, r);
        b.wk = xavier(rng, r, r);
        b.wv = xavier(rng, r, r);
        b.wo = xavier(rng, r, r);
        b.bq = Mat::Zero(1, r);
        b.bk = Mat::Zero(1, r);
        b.bv = Mat::Zero(1, r);
        b.bo = Mat::Zero(1, r);
        b.ln2_gain = Mat::Ones(1, r);
        b.ln2_bias = Mat::Zero(1, r);
        b.mlp_w1 = xavier(rng, r, 4 * r);
        b.mlp_b1 = Mat::Zero(1, 4 * r);
        b.mlp_w2 = xavier(rng, 4 * r, r);
        b.mlp_b2 = Mat::Zero(1, r);
        m.text.blocks.push_back(std::move(b));
    }

    m.perceiver.queries = token_init(rng, sets * cfg.k_queries, r);
    for (int i = 0; i < cfg.perceiver_layers; ++i) {
        PerceiverLayerParams l;
        l.wk = xavier(rng, r, rh);
        l.wq = xavier(rng, r, rh);
        l.wv = xavier(rng, r, rh);
        l.wo = xavier(rng, rh, r);
        m.perceiver.layers.push_back(std::move(l));
    }

    m.agg.z = token_init(rng, 1, r);
    for (int i = 0; i < cfg.agg_layers; ++i) {
        AggregatorLayerParams l;
        l.wk = xavier(rng, r, rh);
        l.wq = xavier(rng, r, rh);
        l.wv = xavier(rng, r, rh);
        l.wo = xavier(rng, rh, r);
        l.mlp_w1 = xavier(rng, r, r);
        l.mlp_b1 = Mat::Zero(1, r);
        l.mlp_w2 = xavier(rng, r, r);
        l.mlp_b2 = Mat::Zero(1, r);
        l.ln_gain = Mat::Ones(1, r);
        l.ln_bias = Mat::Zero(1, r);
        m.agg.layers.push_back(std::move(l));
    }

    m.image.ssf.scale = Mat::Ones(cfg.backbone_blocks, cfg.backbone_width);
    m.image.ssf.shift = Mat::Zero(cfg.backbone_blocks, cfg.backbone_width);
    m.image.proj_w = xavier(rng, cfg.backbone_width, r);
    m.image.proj_b = Mat::Zero(1, r);

    m.local.wq = xavier(rng, r, rh);
    m.local.wk = xavier(rng, r, rh);
    m.local.wv = xavier(rng, r, rh);
    m.local.wo = xavier(rng, rh, r);
    m.local.mlp_w1 = xavier(rng, r, r);
    m.local.mlp_b1 = Mat::Zero(1, r);
    m.local.mlp_w2 = xavier(rng, r, r);
    m.local.mlp_b2 = Mat::Zero(1, r);
    m.local.scorer = xavier(rng, r, 1);
    return m;
}

ad::Var TapeBindings::at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ShapeError("no bound parameter named '" + name + "'");
    return it->second;
}

TapeBindings bind_params(ad::Tape& tape, const Model& m, bool needs_grad) {
    TapeBindings b;
    b.tape = &tape;
    visit_params(m, [&](const std::string& name, const Mat& value) {
        b.vars.emplace(name, tape.input(value, needs_grad));
    });
    return b;
}

ad::Var apply_dropout(ad::Tape& tape, ad::Var x, DropoutCtx* ctx) {
    if (ctx == nullptr || !ctx->active()) return x;
    const Mat& v = tape.val(x);
    const double keep = 1.0 - ctx->rate;
    Mat mask(v.rows(), v.cols());
    for (int i = 0; i < v.rows(); ++i)
        for (int j = 0; j < v.cols(); ++j)
            mask(i, j) = ctx->rng->uniform() < keep ? 1.0 / keep : 0.0;
    return tape.cmul(x, tape.input(std::move(mask), false));
}

}  // namespace mads
