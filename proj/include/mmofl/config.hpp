#pragma once

#include <string>
#include <vector>

#include "mmofl/metrics.hpp"
#include "mmofl/protocol.hpp"

namespace mmofl {

// Full experiment description as read from a config file: one spec plus the
// seed list and output location.
struct ExperimentConfig {
    ExperimentSpec spec;
    std::vector<uint64_t> seeds;
    std::string output_dir = "out";
};

// Parses and fully validates; failures throw std::invalid_argument carrying
// the JSON field path. Comments (//, /* */) are allowed in config files.
ExperimentConfig parse_config_text(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

// Resolved-config echo: parsing this text again reproduces the run bit-exactly.
std::string dump_config(const ExperimentConfig& cfg);

// Commented, runnable config template with every default spelled out.
std::string config_template();

// Synthetic generator spec for the gen-data command (its seed is mandatory).
SyntheticSpec parse_synthetic_spec_file(const std::string& path);

RunLabels labels_for(const ExperimentConfig& cfg, uint64_t seed);

}  // namespace mmofl
