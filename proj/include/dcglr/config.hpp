#pragma once

#include <map>
#include <string>

#include "dcglr/backbone.hpp"
#include "dcglr/train.hpp"

namespace dcglr::cfg {

// Everything a run needs: model + training hyperparameters, dataset paths,
// output directory, seed. Flags mirror config-file keys; flags win.
struct RunConfig {
    nn::BackboneConfig backbone;
    train::TrainConfig training;
    std::string dataset_path;
    std::string manifest_path;
    std::string out_dir = "out";
    uint64_t seed = 1;

    // Evaluation knobs.
    double probe_reg = 1e-4;
    int probe_epochs = 500;
    double spectrum_threshold = 1e-3;
    int attention_layer = -1;  // -1 = final layer
};

// Flat `key = value` text with optional [section] headers; sections only
// group keys visually, the full key is "section.key". Unknown keys are hard
// errors. '#' starts a comment.
std::map<std::string, std::string> parse_config_text(const std::string& text);

void apply_config(RunConfig& config, const std::map<std::string, std::string>& keys);
RunConfig load_config_file(const std::string& path);

// Resolved key=value dump embedded into output artifacts.
std::string serialize_config(const RunConfig& config);

}  // namespace dcglr::cfg
