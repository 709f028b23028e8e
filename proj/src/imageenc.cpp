#include "mads/imageenc.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mads/parallel.hpp"
#include "mads/sha256.hpp"

namespace mads::imageenc {

using nlohmann::json;

SyntheticBackbone::SyntheticBackbone(uint64_t seed, int blocks, int patches, int width,
                                     int latent_dim)
    : seed_(seed), blocks_(blocks), patches_(patches), width_(width), latent_dim_(latent_dim) {
    if (blocks < 1 || patches < 1 || width < 1 || latent_dim < 1)
        throw ConfigError("synthetic backbone dimensions must be positive");
    Rng rng = Rng(seed).fork(0x5bb);
    const int tokens = patches_ + 1;
    const double scale = 1.0 / std::sqrt(static_cast<double>(latent_dim));
    mixers_.reserve(static_cast<size_t>(blocks));
    for (int b = 0; b < blocks; ++b) {
        Mat mix(tokens * width_, latent_dim_);
        for (int i = 0; i < mix.rows(); ++i)
            for (int j = 0; j < mix.cols(); ++j) mix(i, j) = rng.normal() * scale;
        mixers_.push_back(std::move(mix));
    }
}

std::vector<MatF> SyntheticBackbone::block_outputs(const std::string& image_ref) const {
    if (latents_ == nullptr)
        throw IoError("synthetic backbone has no latent table attached");
    auto it = latents_->find(image_ref);
    if (it == latents_->end())
        throw IoError("synthetic backbone cannot resolve image_ref '" + image_ref + "'");
    const Vec& z = it->second;
    if (z.size() != latent_dim_)
        throw ShapeError("latent for '" + image_ref + "' has width " +
                         std::to_string(z.size()) + ", backbone expects " +
                         std::to_string(latent_dim_));
    const int tokens = patches_ + 1;
    std::vector<MatF> out;
    out.reserve(mixers_.size());
    for (const Mat& mix : mixers_) {
        Vec flat = mix * z;
        MatF block(tokens, width_);
        for (int t = 0; t < tokens; ++t)
            for (int dcol = 0; dcol < width_; ++dcol)
                block(t, dcol) = static_cast<float>(flat(t * width_ + dcol));
        out.push_back(std::move(block));
    }
    return out;
}

void SyntheticBackbone::save_spec(const std::filesystem::path& path) const {
    json j;
    j["kind"] = "synthetic";
    j["seed"] = seed_;
    j["blocks"] = blocks_;
    j["patches"] = patches_;
    j["width"] = width_;
    j["latent_dim"] = latent_dim_;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write backbone spec " + path.string());
    out << j.dump(2) << "\n";
}

SyntheticBackbone SyntheticBackbone::load_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open backbone spec " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    if (j.value("kind", "") != "synthetic")
        throw SchemaError(path.string() + ": not a synthetic backbone spec");
    return SyntheticBackbone(j.at("seed").get<uint64_t>(), j.at("blocks").get<int>(),
                             j.at("patches").get<int>(), j.at("width").get<int>(),
                             j.at("latent_dim").get<int>());
}

// ---------------------------------------------------------------------------

namespace {

std::string store_file_name(const std::string& image_ref) {
    return sha256_hex(image_ref).substr(0, 24) + ".bin";
}

}  // namespace

FeatureStore FeatureStore::create_or_open(const std::filesystem::path& dir) {
    FeatureStore s;
    s.dir_ = dir;
    std::filesystem::create_directories(dir);
    const auto index_path = dir / "index.json";
    if (std::filesystem::exists(index_path)) {
        std::ifstream in(index_path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw SchemaError(index_path.string() + ": " + e.what());
        }
        for (const auto& [ref, entry] : j.items()) {
            if (entry.value("dtype", "float32") != "float32")
                throw SchemaError(index_path.string() + ": unsupported dtype for '" + ref + "'");
            Entry e;
            e.file = entry.at("file").get<std::string>();
            e.shape = entry.at("shape").get<std::vector<int>>();
            s.index_.emplace(ref, std::move(e));
        }
    }
    return s;
}

bool FeatureStore::contains(const std::string& image_ref) const {
    return index_.count(image_ref) > 0;
}

std::vector<int> FeatureStore::shape_of(const std::string& image_ref) const {
    auto it = index_.find(image_ref);
    if (it == index_.end()) throw IoError("feature store has no entry for '" + image_ref + "'");
    return it->second.shape;
}

std::vector<MatF> FeatureStore::get(const std::string& image_ref) const {
    auto it = index_.find(image_ref);
    if (it == index_.end()) throw IoError("feature store has no entry for '" + image_ref + "'");
    const auto& shape = it->second.shape;
    if (shape.size() != 3) throw SchemaError("feature store entry has malformed shape");
    const int blocks = shape[0], tokens = shape[1], width = shape[2];
    std::ifstream in(dir_ / it->second.file, std::ios::binary);
    if (!in) throw IoError("cannot open feature file for '" + image_ref + "'");
    // Row-major float32 on disk; Eigen matrices are column-major, so stage
    // through a flat buffer.
    std::vector<MatF> out;
    out.reserve(static_cast<size_t>(blocks));
    std::vector<float> buf(static_cast<size_t>(tokens) * static_cast<size_t>(width));
    for (int b = 0; b < blocks; ++b) {
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!in) throw IoError("short read in feature file for '" + image_ref + "'");
        MatF m(tokens, width);
        for (int t = 0; t < tokens; ++t)
            for (int w = 0; w < width; ++w)
                m(t, w) = buf[static_cast<size_t>(t) * static_cast<size_t>(width) +
                              static_cast<size_t>(w)];
        out.push_back(std::move(m));
    }
    return out;
}

void FeatureStore::put(const std::string& image_ref, const std::vector<MatF>& blocks) {
    if (blocks.empty()) throw ShapeError("feature store: empty block list");
    const int tokens = static_cast<int>(blocks.front().rows());
    const int width = static_cast<int>(blocks.front().cols());
    for (const MatF& b : blocks)
        if (b.rows() != tokens || b.cols() != width)
            throw ShapeError("feature store: inconsistent block shapes");
    Entry e;
    e.file = store_file_name(image_ref);
    e.shape = {static_cast<int>(blocks.size()), tokens, width};
    const auto tmp = dir_ / (e.file + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write feature file for '" + image_ref + "'");
        std::vector<float> buf(static_cast<size_t>(tokens) * static_cast<size_t>(width));
        for (const MatF& b : blocks) {
            for (int t = 0; t < tokens; ++t)
                for (int w = 0; w < width; ++w)
                    buf[static_cast<size_t>(t) * static_cast<size_t>(width) +
                        static_cast<size_t>(w)] = b(t, w);
            out.write(reinterpret_cast<const char*>(buf.data()),
                      static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
        if (!out) throw IoError("short write to feature file for '" + image_ref + "'");
    }
    std::filesystem::rename(tmp, dir_ / e.file);
    index_[image_ref] = std::move(e);
    ++writes_;
    dirty_ = true;
}

void FeatureStore::flush() {
    if (!dirty_) return;
    json j = json::object();
    for (const auto& [ref, e] : index_)
        j[ref] = json{{"file", e.file}, {"shape", e.shape}, {"dtype", "float32"}};
    const auto tmp = dir_ / "index.json.tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write feature store index");
        out << j.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, dir_ / "index.json");
    dirty_ = false;
}

int precompute_features(const corpus::DatasetManifest& manifest,
                        const BackboneContract& backbone, FeatureStore& store) {
    std::set<std::string> seen_refs;
    std::vector<std::string> missing;
    for (const corpus::Sample& s : manifest.samples) {
        if (!seen_refs.insert(s.image_ref).second) continue;
        if (!store.contains(s.image_ref)) missing.push_back(s.image_ref);
    }
    std::vector<std::vector<MatF>> computed(missing.size());
    parallel_for(static_cast<int64_t>(missing.size()), [&](int64_t i) {
        computed[static_cast<size_t>(i)] = backbone.block_outputs(missing[static_cast<size_t>(i)]);
    });
    for (size_t i = 0; i < missing.size(); ++i) store.put(missing[i], computed[i]);
    store.flush();
    return static_cast<int>(missing.size());
}

// ---------------------------------------------------------------------------

ImageFeaturesVar encode_image_tokens(ad::Tape& tape, const std::vector<MatF>& blocks,
                                     const TapeBindings& params, const ModelConfig& cfg,
                                     DropoutCtx* dropout) {
    if (static_cast<int>(blocks.size()) != cfg.backbone_blocks)
        throw ShapeError("encode_image: expected " + std::to_string(cfg.backbone_blocks) +
                         " backbone blocks, got " + std::to_string(blocks.size()));
    const int tokens = cfg.patches + 1;
    ad::Var scale_all = params.at("image.ssf_scale");
    ad::Var shift_all = params.at("image.ssf_shift");
    ad::Var combined;
    for (int b = 0; b < cfg.backbone_blocks; ++b) {
        const MatF& raw = blocks[static_cast<size_t>(b)];
        if (raw.rows() != tokens || raw.cols() != cfg.backbone_width)
            throw ShapeError("encode_image: block " + std::to_string(b) + " has shape " +
                             std::to_string(raw.rows()) + "x" + std::to_string(raw.cols()) +
                             ", expected " + std::to_string(tokens) + "x" +
                             std::to_string(cfg.backbone_width));
        ad::Var x = tape.input(raw.cast<double>(), false);  // frozen backbone output
        ad::Var scale = tape.slice_rows(scale_all, b, 1);
        ad::Var shift = tape.slice_rows(shift_all, b, 1);
        ad::Var adapted = tape.add_row_broadcast(tape.cmul_row_broadcast(x, scale), shift);
        combined = (b == 0) ? adapted : tape.add(combined, adapted);
    }
    combined = tape.scale(combined, 1.0 / static_cast<double>(cfg.backbone_blocks));
    ad::Var projected = tape.add_row_broadcast(
        tape.matmul(combined, params.at("image.proj_w")), params.at("image.proj_b"));
    projected = apply_dropout(tape, projected, dropout);
    ImageFeaturesVar out;
    out.i_g = tape.slice_rows(projected, 0, 1);
    out.i_l = tape.slice_rows(projected, 1, cfg.patches);
    return out;
}

namespace {

ImageFeatures extract(const std::vector<MatF>& blocks, const Model& model) {
    ad::Tape tape;
    TapeBindings params = bind_params(tape, model, false);
    ImageFeaturesVar v = encode_image_tokens(tape, blocks, params, model.cfg, nullptr);
    ImageFeatures out;
    out.i_g = tape.val(v.i_g).row(0).transpose();
    out.i_l = tape.val(v.i_l);
    return out;
}

}  // namespace

ImageFeatures encode_image(const std::string& image_ref, const BackboneContract& backbone,
                           const Model& model) {
    return extract(backbone.block_outputs(image_ref), model);
}

ImageFeatures encode_image_from_store(const std::string& image_ref, const FeatureStore& store,
                                      const Model& model) {
    return extract(store.get(image_ref), model);
}

}  // namespace mads::imageenc
