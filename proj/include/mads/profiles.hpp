#pragma once

#include <filesystem>
#include <string>

#include "mads/collect.hpp"
#include "mads/corpus.hpp"
#include "mads/engine.hpp"
#include "mads/model.hpp"

namespace mads::profiles {

// Named bundle of model dimensions, training settings and artifact file
// names. Data-dependent config fields (vocabulary size, view names, backbone
// shape) are filled in from the artifacts when a command runs.
struct RunProfile {
    std::string name = "synthetic";
    ModelConfig model;
    engine::TrainConfig train;
    corpus::SyntheticConfig synthetic;
    collect::CollectionConfig collection;
    std::string notes;

    // Artifact names inside the data directory.
    std::string documents_file = "documents.json";
    std::string manifest_file = "manifest.json";
    std::string lexicon_file = "lexicon.txt";
    std::string embeddings_file = "embeddings.txt";
    std::string views_file = "views.json";
    std::string features_dir = "features";
    std::string images_file = "images.json";
    std::string backbone_file = "backbone.json";

    static RunProfile builtin(const std::string& name);
    static RunProfile load(const std::filesystem::path& file);
    void save(const std::filesystem::path& file) const;
};

}  // namespace mads::profiles
