#include "mads/textenc.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mads/sha256.hpp"

namespace mads::textenc {

namespace {
constexpr const char* kUnkToken = "<unk>";
}

std::string EmbeddingTable::checksum() const {
    std::string blob;
    blob.reserve(static_cast<size_t>(table.size()) * sizeof(double) + 64);
    blob += std::to_string(table.rows()) + "x" + std::to_string(table.cols()) + ";";
    blob.append(reinterpret_cast<const char*>(table.data()),
                static_cast<size_t>(table.size()) * sizeof(double));
    return sha256_hex(blob);
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embedding table " + path.string());
    std::string header;
    if (!std::getline(in, header)) throw SchemaError(path.string() + ": empty embedding file");
    std::istringstream hs(header);
    long rows = 0, dim = 0;
    if (!(hs >> rows >> dim) || rows < 1 || dim < 1)
        throw SchemaError(path.string() + ": header must be 'vocab_size dim'");

    EmbeddingTable t;
    t.table = Mat::Zero(rows, dim);
    std::string line;
    long filled = 0;
    while (filled < rows && std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        for (long k = 0; k < dim; ++k) {
            if (!(ls >> t.table(filled, k)))
                throw SchemaError(path.string() + ": malformed vector for word '" + word + "'");
        }
        if (!t.vocab.ids.emplace(word, static_cast<int>(filled)).second)
            throw SchemaError(path.string() + ": duplicate word '" + word + "'");
        ++filled;
    }
    if (filled != rows)
        throw SchemaError(path.string() + ": header promises " + std::to_string(rows) +
                          " words, found " + std::to_string(filled));

    auto unk = t.vocab.ids.find(kUnkToken);
    if (unk != t.vocab.ids.end()) {
        t.vocab.unk_id = unk->second;
    } else {
        t.table.conservativeResize(rows + 1, dim);
        t.table.row(rows).setZero();
        t.vocab.unk_id = static_cast<int>(rows);
        t.vocab.ids.emplace(kUnkToken, t.vocab.unk_id);
        t.synthesized_unk = true;
    }
    t.vocab.vocab_size = static_cast<int>(t.table.rows());
    return t;
}

EmbeddingTable EmbeddingTable::from_rows(
    const std::vector<std::pair<std::string, Vec>>& rows) {
    if (rows.empty()) throw SchemaError("embedding table needs at least one row");
    EmbeddingTable t;
    const int dim = static_cast<int>(rows.front().second.size());
    t.table = Mat::Zero(static_cast<int>(rows.size()), dim);
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].second.size() != dim)
            throw SchemaError("embedding rows have inconsistent widths");
        t.table.row(static_cast<int>(i)) = rows[i].second.transpose();
        if (!t.vocab.ids.emplace(rows[i].first, static_cast<int>(i)).second)
            throw SchemaError("duplicate word '" + rows[i].first + "'");
    }
    auto unk = t.vocab.ids.find(kUnkToken);
    if (unk != t.vocab.ids.end()) {
        t.vocab.unk_id = unk->second;
    } else {
        t.table.conservativeResize(t.table.rows() + 1, dim);
        t.table.row(t.table.rows() - 1).setZero();
        t.vocab.unk_id = static_cast<int>(t.table.rows() - 1);
        t.vocab.ids.emplace(kUnkToken, t.vocab.unk_id);
        t.synthesized_unk = true;
    }
    t.vocab.vocab_size = static_cast<int>(t.table.rows());
    return t;
}

void EmbeddingTable::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write embedding table " + path.string());
    std::vector<std::string> words(static_cast<size_t>(table.rows()));
    for (const auto& [word, id] : vocab.ids) words[static_cast<size_t>(id)] = word;
    out << table.rows() << " " << table.cols() << "\n";
    char buf[64];
    for (int i = 0; i < table.rows(); ++i) {
        out << words[static_cast<size_t>(i)];
        for (int k = 0; k < table.cols(); ++k) {
            std::snprintf(buf, sizeof(buf), " %.17g", table(i, k));
            out << buf;
        }
        out << "\n";
    }
    if (!out) throw IoError("short write to " + path.string());
}

ad::Var embed_words(ad::Tape& tape, const corpus::TokenizedParagraph& tokens,
                    const EmbeddingTable& table, const TapeBindings& params,
                    const ModelConfig& cfg) {
    const int m = tokens.size();
    if (m < 1) throw ValidationError("embed_words: empty paragraph");
    if (table.dim() != cfg.embed_dim)
        throw ShapeError("embed_words: table width does not match config embed_dim");
    Mat rows(m, table.dim());
    for (int j = 0; j < m; ++j) {
        const int id = tokens.token_ids[static_cast<size_t>(j)];
        if (id < 0 || id >= table.size())
            throw VocabError("embed_words: token id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(table.size()));
        rows.row(j) = table.table.row(id);
    }
    ad::Var glove = tape.input(std::move(rows), false);  // frozen
    ad::Var hidden = tape.relu(tape.matmul(glove, params.at("text.embed_w1")));
    return tape.matmul(hidden, params.at("text.embed_w2"));
}

namespace {

ad::Var encoder_block(ad::Tape& t, ad::Var x, int block, const TapeBindings& p,
                      const ModelConfig& cfg, DropoutCtx* dropout) {
    const std::string stem = "text.block" + std::to_string(block) + ".";
    const int r = cfg.r;
    const int dh = r / cfg.heads;
    ad::Var h = t.layer_norm_rows(x, p.at(stem + "ln1_gain"), p.at(stem + "ln1_bias"));
    ad::Var q = t.add_row_broadcast(t.matmul(h, p.at(stem + "wq")), p.at(stem + "bq"));
    ad::Var k = t.add_row_broadcast(t.matmul(h, p.at(stem + "wk")), p.at(stem + "bk"));
    ad::Var v = t.add_row_broadcast(t.matmul(h, p.at(stem + "wv")), p.at(stem + "bv"));
    std::vector<ad::Var> heads;
    heads.reserve(static_cast<size_t>(cfg.heads));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int i = 0; i < cfg.heads; ++i) {
        ad::Var qi = t.slice_cols(q, i * dh, dh);
        ad::Var ki = t.slice_cols(k, i * dh, dh);
        ad::Var vi = t.slice_cols(v, i * dh, dh);
        ad::Var scores = t.scale(t.matmul(qi, t.transpose(ki)), inv_sqrt);
        heads.push_back(t.matmul(t.softmax_rows(scores), vi));
    }
    ad::Var attn = t.add_row_broadcast(
        t.matmul(t.concat_cols(heads), p.at(stem + "wo")), p.at(stem + "bo"));
    x = t.add(x, apply_dropout(t, attn, dropout));
    ad::Var h2 = t.layer_norm_rows(x, p.at(stem + "ln2_gain"), p.at(stem + "ln2_bias"));
    ad::Var mid = t.gelu(t.add_row_broadcast(t.matmul(h2, p.at(stem + "mlp_w1")),
                                             p.at(stem + "mlp_b1")));
    ad::Var mlp = t.add_row_broadcast(t.matmul(mid, p.at(stem + "mlp_w2")),
                                      p.at(stem + "mlp_b2"));
    return t.add(x, apply_dropout(t, mlp, dropout));
}

int token_set_index(const ModelConfig& cfg, int view_index) {
    if (view_index < 0 || view_index >= cfg.views)
        throw ShapeError("view index " + std::to_string(view_index) + " out of range");
    return cfg.shared_view_tokens ? 0 : view_index;
}

}  // namespace

EncodedParagraph encode_paragraph(ad::Tape& tape, ad::Var word_embs, int view_index,
                                  const TapeBindings& params, const ModelConfig& cfg,
                                  DropoutCtx* dropout) {
    const int m = static_cast<int>(tape.val(word_embs).rows());
    if (m < 1) throw ValidationError("encode_paragraph: empty sequence");
    if (m > cfg.max_len)
        throw ShapeError("encode_paragraph: " + std::to_string(m) +
                         " tokens exceed the positional table (max " +
                         std::to_string(cfg.max_len) + ")");
    const int set = token_set_index(cfg, view_index);
    ad::Var cls = tape.slice_rows(params.at("text.cls"), set, 1);
    ad::Var seq = tape.concat_rows({cls, word_embs});
    ad::Var pos = tape.slice_rows(params.at("text.pos"), 0, m + 1);
    ad::Var x = tape.add(seq, pos);
    for (int b = 0; b < cfg.text_blocks; ++b)
        x = encoder_block(tape, x, b, params, cfg, dropout);
    EncodedParagraph out;
    out.g = tape.slice_rows(x, 0, 1);
    out.l = tape.slice_rows(x, 1, m);
    return out;
}

Perceived perceive(ad::Tape& tape, ad::Var local_feats, int view_index,
                   const TapeBindings& params, const ModelConfig& cfg) {
    const int m = static_cast<int>(tape.val(local_feats).rows());
    if (m < 1) throw ValidationError("perceive: empty local features");
    const int set = token_set_index(cfg, view_index);
    ad::Var queries =
        tape.slice_rows(params.at("perceiver.queries"), set * cfg.k_queries, cfg.k_queries);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.r_h));
    Perceived out;
    ad::Var q_in = queries;
    for (int layer = 0; layer < cfg.perceiver_layers; ++layer) {
        const std::string stem = "perceiver.layer" + std::to_string(layer) + ".";
        ad::Var k = tape.matmul(local_feats, params.at(stem + "wk"));
        ad::Var q = tape.matmul(q_in, params.at(stem + "wq"));
        ad::Var v = tape.matmul(local_feats, params.at(stem + "wv"));
        ad::Var h = tape.softmax_rows(tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt));
        ad::Var e = tape.matmul(tape.matmul(h, v), params.at(stem + "wo"));
        out.h = h;
        out.e = e;
        q_in = e;
    }
    return out;
}

ViewFeatures view_features(ad::Tape& tape, const corpus::TokenizedParagraph& tokens,
                           int view_index, const EmbeddingTable& table,
                           const TapeBindings& params, const ModelConfig& cfg,
                           DropoutCtx* dropout) {
    ad::Var embs = embed_words(tape, tokens, table, params, cfg);
    EncodedParagraph enc = encode_paragraph(tape, embs, view_index, params, cfg, dropout);
    Perceived per = perceive(tape, enc.l, view_index, params, cfg);
    ViewFeatures out;
    out.g = enc.g;
    out.e = per.e;
    out.h = per.h;
    out.view_index = view_index;
    return out;
}

}  // namespace mads::textenc
