// label_sr.h - learned slice-direction label upsampler.
//
// A 2D residual U-Net sees five consecutive coarse slices of the image and of
// two one-hot label maps (gray matter without DG, DG) and predicts the two
// label maps on the 25 fine slices the window covers. Channel layout is
// class-major, slice-major: input [image x5, GM x5, DG x5], output
// [GM x25, DG x25].

#pragma once

#include "isomtl/nn_common.h"
#include "isomtl/volgrid.h"

#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace isomtl {

struct UpsamplerConfig {
    int in_channels = 15;
    int out_channels = 50;
    int levels = 4;
    std::vector<int> level_channels{16, 32, 64, 128};
    int residual_units_per_level = 2;
    int patch_inplane = 32;
    int slices_per_window = 5;
    int upsample_factor = 5;
    int label_channels = 2;

    void validate() const;
    int fine_slices() const { return slices_per_window * upsample_factor; }
};

struct TrainSample {
    int h = 0, w = 0;
    std::vector<float> image;  // slices_per_window x h x w
    std::vector<float> lores;  // label_channels * slices_per_window x h x w
    std::vector<float> hires;  // label_channels * fine_slices x h x w
};

class LabelUpsampler {
  public:
    explicit LabelUpsampler(const UpsamplerConfig &cfg = {}, uint64_t seed = 0);
    ~LabelUpsampler();
    LabelUpsampler(LabelUpsampler &&) noexcept;
    LabelUpsampler &operator=(LabelUpsampler &&) noexcept;

    const UpsamplerConfig &config() const;
    int64_t parameter_count() const;

    /// Probabilities (out_channels x h x w) for one input (in_channels x h x w).
    /// Sizes that are not multiples of 8 are reflect-padded, then cropped.
    std::vector<float> predict(std::span<const float> input, int h, int w) const;

    /// Directory with config.json and weights.pt.
    void save(const std::filesystem::path &dir) const;
    static LabelUpsampler load(const std::filesystem::path &dir);

    struct Impl;
    Impl &impl() const { return *impl_; }

  private:
    std::unique_ptr<Impl> impl_;
};

/// Dice loss plus lambda times the Dice loss of the slice-pooled prediction
/// against the coarse labels. Tensors are (batch, channels, h, w) row-major.
/// Fills `grad` with d loss / d pred when given.
double loss_total(std::span<const double> pred, std::span<const double> gt, std::span<const double> lores,
                  int64_t batch, int64_t h, int64_t w, double lambda, std::vector<double> *grad = nullptr,
                  const UpsamplerConfig &cfg = {});

/// Collapse a multi-label map to the upsampler's scheme: 1 = gray matter
/// without DG, 2 = DG, 0 = background.
LabelVolume collapse_two_class(const LabelVolume &labels);

/// Pairs from a fine-grid label map and image. The slice count is cropped to
/// a multiple of the factor; coarse labels come from a per-block majority vote
/// of the collapsed map (ties to background) and the coarse image from a block
/// average. Every 5-slice coarse window yields `crops_per_window` crops, half of
/// them centred on foreground. Throws when there is no foreground.
std::vector<TrainSample> make_training_pairs(const LabelVolume &hires_labels, const ScalarVolume &hires_image,
                                             int crops_per_window, std::mt19937_64 &rng,
                                             const UpsamplerConfig &cfg = {});

struct LabelSrTraining {
    LabelUpsampler model;
    TrainLog log;
};

/// Seeded training; the returned model holds the best-validation weights.
/// Throws on an empty split or when the validation loss turns NaN.
LabelSrTraining train_upsampler(const std::vector<TrainSample> &samples, const TrainerParams &params,
                                const UpsamplerConfig &cfg = {});

struct UpsampleDiagnostics {
    double consistency_dice = 1.0; // block majority of the 2-class output vs the 2-class input
};

/// Upsample a coarse multi-label segmentation by the configured factor along
/// the slice axis, restoring subregion identities from the nearest coarse
/// labelled voxel (world distance). DG stays DG.
LabelVolume upsample_labels(const LabelUpsampler &model, const ScalarVolume &image_lores,
                            const LabelVolume &labels_lores, UpsampleDiagnostics *diag = nullptr);

} // namespace isomtl
