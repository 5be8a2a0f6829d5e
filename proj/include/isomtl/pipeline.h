// pipeline.h - stage orchestration over a cohort manifest.
//
// Stages, in dependency order:
//   upsample        T2 (and T1) of atlas and study rows -> hyper-resolution grid
//   train-label-sr  slice-direction label upsampler from exvivo rows
//   upsample-labels atlas coarse labels -> hyper-resolution labels
//   train-seg       segmentation network on upsampled atlas cases
//   segment         study rows -> hyper-resolution segmentation
//   thickness       per-subject thickness in both spaces
//   stats           cohort tables
//
// Each invocation writes a fresh run-NNN directory under the output root.
// A stage's outputs are keyed by a hash of the config keys it consumes, the
// input files and its upstream hashes; with no explicit stage list, stages
// whose hash matches an earlier run are reused (hard links) instead of rerun.
// With an explicit list, listed stages always run and every unlisted
// dependency must be found in an earlier run.

#pragma once

#include "isomtl/config.h"
#include "isomtl/nn_common.h"
#include "isomtl/skelthick.h"
#include "isomtl/table_io.h"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace isomtl {

enum class Stage { Upsample, TrainLabelSr, UpsampleLabels, TrainSeg, Segment, Thickness, Stats };

const std::vector<Stage> &all_stages();
std::string to_string(Stage s);
Stage parse_stage(const std::string &s);

struct RunOptions {
    std::filesystem::path manifest;
    std::filesystem::path out_root;
    PipelineConfig config;
    std::vector<Stage> stages; // empty = all
    bool use_cache = true;
};

struct StageRecord {
    Stage stage;
    std::string hash;
    bool reused = false;
    double seconds = 0.0;
};

struct RunResult {
    std::filesystem::path run_dir;
    std::vector<StageRecord> stages;
};

RunResult run_pipeline(const RunOptions &opts);

/// Runs the pipeline through thickness, then writes reports/compare_spaces.*:
/// per-band |error| against truth in each space when truth is available, and
/// Std/AbsSum per space when study subjects have two sessions.
RunResult compare_spaces(const RunOptions &opts);

// Building blocks shared with the single-step commands.

/// Label upsampler trained on fine-grid (t2, labels) rows; writes the model,
/// its config echo and train_log.csv into `dir`.
TrainLog train_label_sr_dir(const std::vector<ManifestRow> &rows, const PipelineConfig &cfg,
                            const std::filesystem::path &dir);
/// Segmentation model from rows whose t2, optional t1 and labels share a grid.
TrainLog train_seg_dir(const std::vector<ManifestRow> &rows, const PipelineConfig &cfg,
                       const std::filesystem::path &dir);
/// Segmentation of a t2 (and optional t1, resampled onto the t2 grid when
/// needed) with a saved model.
LabelVolume segment_files(const std::filesystem::path &model_dir, const std::filesystem::path &t2,
                          const std::filesystem::path &t1 = {});

/// Hyper-resolution target of an acquired T2 grid: in-plane kept, slice
/// spacing `slice_mm`.
Grid3 hyperres_target(const Grid3 &t2_grid, double slice_mm);
/// Integer NLM steps then linear resampling onto `target`.
ScalarVolume upsample_to(const ScalarVolume &vol, const Grid3 &target, const NlmParams &nlm);

/// Segmentation mapped back to the acquired slice grid by block majority.
LabelVolume to_anisotropic(const LabelVolume &seg_hr, const Grid3 &coarse);

nlohmann::json thickness_json(const ThicknessReport &r, const LabelTable &table);
/// Region name -> median thickness from a thickness_json document.
std::map<std::string, double> thickness_by_name(const nlohmann::json &j);

/// Table-1 style report of study rows per measurement space.
nlohmann::json cross_sectional_report(const std::vector<std::pair<std::string, std::vector<StudyRow>>> &spaces,
                                      const std::vector<std::string> &regions, std::string *table);
/// Table-2 style report of session pairs per measurement space.
nlohmann::json longitudinal_report(const std::vector<std::pair<std::string, std::vector<LongPairRow>>> &spaces,
                                   const std::vector<std::string> &regions, std::string *table);

} // namespace isomtl
