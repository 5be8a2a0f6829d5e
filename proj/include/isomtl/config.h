// config.h - pipeline configuration: a single JSON document.
//
// Every key has a default; a user file only lists what it changes. Unknown
// keys (at any depth) are rejected so misspellings fail loudly.

#pragma once

#include "isomtl/label_sr.h"
#include "isomtl/mmseg.h"
#include "isomtl/sr_nlm.h"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace isomtl {

struct LabelSrStage {
    UpsamplerConfig network;
    TrainerParams trainer;
    int crops_per_window = 4;
};

struct SegStage {
    SegConfig network;
    ModAugPolicy augmentation;
    TrainerParams trainer;
};

struct PipelineConfig {
    uint64_t seed = 1;
    int jobs = 1;
    double hyperres_slice_mm = 0.52;
    NlmParams nlm;
    LabelSrStage labelsr;
    SegStage seg;
    double rho_min = -1.0;            // skel.rho_min; <= 0 uses the grid default
    std::vector<std::string> regions; // stats.regions; empty = every foreground label
    std::string manifest;             // paths.manifest
    std::string out;                  // paths.out

    PipelineConfig();
    void validate() const;
};

nlohmann::json to_json(const PipelineConfig &c);
/// Overlay `j` onto the defaults; throws on unknown keys or wrong types.
PipelineConfig config_from_json(const nlohmann::json &j);
PipelineConfig load_config(const std::filesystem::path &path);

/// 64-bit FNV-1a, printed as 16 hex digits.
uint64_t fnv1a64(std::string_view data, uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(uint64_t h);

} // namespace isomtl
