#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mads/corpus.hpp"
#include "mads/model.hpp"

namespace mads::imageenc {

// Frozen feature extractor. block_outputs returns the unadapted per-block
// token matrices, each (N+1) x D with the [CLS] token in row 0. Outputs are
// deterministic per image_ref and float32 so that the on-disk feature store
// round-trips them bit for bit. No gradients ever flow into a backbone.
struct BackboneContract {
    virtual ~BackboneContract() = default;
    virtual int num_blocks() const = 0;   // B
    virtual int patch_count() const = 0;  // N
    virtual int width() const = 0;        // D
    virtual std::vector<MatF> block_outputs(const std::string& image_ref) const = 0;
};

// Desk-scale stand-in for a frozen ViT: each block is a fixed random linear
// mixing of the image's latent attribute vector into token features, so the
// latent signal stays recoverable by a linear probe.
class SyntheticBackbone final : public BackboneContract {
public:
    SyntheticBackbone(uint64_t seed, int blocks, int patches, int width, int latent_dim);

    void set_latents(const std::map<std::string, Vec>* latents) { latents_ = latents; }

    int num_blocks() const override { return blocks_; }
    int patch_count() const override { return patches_; }
    int width() const override { return width_; }
    int latent_dim() const { return latent_dim_; }
    uint64_t seed() const { return seed_; }
    std::vector<MatF> block_outputs(const std::string& image_ref) const override;

    void save_spec(const std::filesystem::path& path) const;
    static SyntheticBackbone load_spec(const std::filesystem::path& path);

private:
    uint64_t seed_;
    int blocks_, patches_, width_, latent_dim_;
    std::vector<Mat> mixers_;  // per block: ((N+1)*D) x A
    const std::map<std::string, Vec>* latents_ = nullptr;
};

// Directory of little-endian float32 tensors plus a JSON index mapping
// image_ref -> {file, shape, dtype}.
class FeatureStore {
public:
    static FeatureStore create_or_open(const std::filesystem::path& dir);

    bool contains(const std::string& image_ref) const;
    std::vector<MatF> get(const std::string& image_ref) const;
    void put(const std::string& image_ref, const std::vector<MatF>& blocks);
    void flush();

    int entry_count() const { return static_cast<int>(index_.size()); }
    std::vector<int> shape_of(const std::string& image_ref) const;  // [B, N+1, D]
    long writes() const { return writes_; }
    const std::filesystem::path& dir() const { return dir_; }

private:
    struct Entry {
        std::string file;
        std::vector<int> shape;
    };
    std::filesystem::path dir_;
    std::map<std::string, Entry> index_;
    long writes_ = 0;
    bool dirty_ = false;
};

// Caches the unadapted per-block outputs for every manifest sample that is
// not already in the store. Returns the number of newly computed refs.
int precompute_features(const corpus::DatasetManifest& manifest,
                        const BackboneContract& backbone, FeatureStore& store);

struct ImageFeatures {
    Vec i_g;  // r
    Mat i_l;  // N x r
};

struct ImageFeaturesVar {
    ad::Var i_g;  // 1 x r
    ad::Var i_l;  // N x r
};

// Scale/shift adaptation of each cached block output, mean over blocks, then
// a linear projection to width r. Row 0 (the [CLS] slot) becomes I_g.
ImageFeaturesVar encode_image_tokens(ad::Tape& tape, const std::vector<MatF>& blocks,
                                     const TapeBindings& params, const ModelConfig& cfg,
                                     DropoutCtx* dropout = nullptr);

ImageFeatures encode_image(const std::string& image_ref, const BackboneContract& backbone,
                           const Model& model);
ImageFeatures encode_image_from_store(const std::string& image_ref, const FeatureStore& store,
                                      const Model& model);

}  // namespace mads::imageenc
