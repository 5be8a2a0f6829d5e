// sr_nlm.h - non-local-means super-resolution along one axis.
//
// Reconstruction scheme: linear interpolation onto the refined grid, then
// alternate a 3D non-local-means filter with a projection that restores the
// box-average consistency with the acquired volume, until the projection's
// relative correction drops below tol.

#pragma once

#include "isomtl/volgrid.h"

#include <vector>

namespace isomtl {

struct NlmParams {
    int patch_radius = 1;
    int search_radius = 3;
    // Filter bandwidth = h_scale * robust noise sigma, unless smoothing_h > 0.
    double h_scale = 0.5;
    double smoothing_h = 0.0;
    int max_iters = 5;
    double tol = 1e-3;

    void validate() const;
};

struct NlmStats {
    double bandwidth = 0.0;
    std::vector<double> corrections; // relative mean correction per iteration
};

/// Noise sigma from the median absolute deviation of the 6-neighbour
/// Laplacian pseudo-residual.
double estimate_noise_sigma(const ScalarVolume &vol);

/// One pass of the 3D non-local-means filter with bandwidth h.
ScalarVolume nlm_filter(const ScalarVolume &vol, int patch_radius, int search_radius, double h);

/// Block mean of `factor` consecutive samples along `axis` forced to equal the
/// matching `coarse` voxel. Returns the relative mean correction applied.
double project_block_consistency(ScalarVolume &fine, const ScalarVolume &coarse, int axis, int factor);

/// Box average of `factor` samples along an arbitrary axis.
ScalarVolume block_average_axis(const ScalarVolume &vol, int axis, int factor);

ScalarVolume nlm_upsample_axis(const ScalarVolume &vol, int axis, int factor, const NlmParams &params,
                               NlmStats *stats = nullptr);
ScalarVolume nlm_upsample_slice(const ScalarVolume &vol, int factor, const NlmParams &params,
                                NlmStats *stats = nullptr);

/// Integer factor per axis: max(1, round-half-even(source / target spacing)).
Index3 two_step_factors(const Grid3 &source, const Grid3 &target);

/// Integer NLM upsampling per axis (slice axis first) followed by linear
/// resampling onto `target`.
ScalarVolume two_step_upsample(const ScalarVolume &vol, const Grid3 &target, const NlmParams &params);

} // namespace isomtl
