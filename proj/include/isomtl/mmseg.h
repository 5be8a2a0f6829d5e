// mmseg.h - multi-modality 3D segmentation in the hyper-resolution space.

#pragma once

#include "isomtl/nn_common.h"
#include "isomtl/volgrid.h"

#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace isomtl {

struct SegConfig {
    std::vector<std::string> modalities{"T2w", "T1w"}; // primary first
    std::vector<int> classes{0, 1, 2, 3, 4, 5, 6, 7};  // label ids, background first
    Index3 patch{32, 32, 32};
    int base_channels = 16;
    int levels = 4;

    void validate() const;
};

struct ModAugPolicy {
    std::vector<double> p_drop{0.5}; // one entry per non-primary modality
    std::string replacement = "zeros";

    void validate(size_t modalities) const;
};

/// Channel-major multi-modality volume: values[c * voxels + linear(x,y,z)].
struct ModalityStack {
    Grid3 grid;
    std::vector<std::string> channels;
    std::vector<float> values;

    size_t voxels() const { return static_cast<size_t>(grid.voxel_count()); }
    std::span<float> channel(size_t c) { return {values.data() + c * voxels(), voxels()}; }
    std::span<const float> channel(size_t c) const { return {values.data() + c * voxels(), voxels()}; }
};

/// Stack volumes given in config order (nullptr = missing modality, which
/// becomes a zero channel). Each present channel is z-scored. Throws when the
/// primary is missing or a grid differs from the primary's, naming the modality.
ModalityStack stack_modalities(std::span<const ScalarVolume *const> vols, const SegConfig &cfg);

/// Zero each non-primary channel independently with its drop probability.
void modality_augment(ModalityStack &stack, const ModAugPolicy &policy, std::mt19937_64 &rng);

struct SegCase {
    ModalityStack stack;
    LabelVolume labels;
};

class SegModel {
  public:
    explicit SegModel(const SegConfig &cfg = {}, uint64_t seed = 0);
    ~SegModel();
    SegModel(SegModel &&) noexcept;
    SegModel &operator=(SegModel &&) noexcept;

    const SegConfig &config() const;
    int64_t parameter_count() const;

    /// Softmax probabilities (classes x voxels) of one patch-sized input.
    std::vector<float> forward_patch(const ModalityStack &patch) const;

    void save(const std::filesystem::path &dir) const;
    static SegModel load(const std::filesystem::path &dir);

    struct Impl;
    Impl &impl() const { return *impl_; }

  private:
    std::unique_ptr<Impl> impl_;
};

/// BCE over one-hot classes (background included) plus mean soft Dice loss
/// over the foreground classes. Inputs are (batch, classes, voxels) row-major.
double seg_loss(std::span<const double> prob, std::span<const double> onehot, int64_t batch, int64_t classes,
                int64_t voxels);

struct SegTraining {
    SegModel model;
    TrainLog log;
};

/// Patch training with foreground oversampling and modality augmentation.
/// Cases split into train/validation by params.val_fraction (at least one
/// validation case when there are two or more cases; otherwise the single
/// case validates itself).
SegTraining train_seg(const std::vector<SegCase> &cases, const SegConfig &cfg, const ModAugPolicy &policy,
                      const TrainerParams &params);

/// Sliding-window inference with 50% overlap and Gaussian blending; output on
/// the stack's grid.
LabelVolume segment(const SegModel &model, const ModalityStack &stack, const LabelTable &table = default_mtl_labels());

} // namespace isomtl
