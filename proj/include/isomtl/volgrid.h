// volgrid.h - volumetric data model for the isomtl pipeline.
//
// Grids map voxel indices to world millimetres through an axis-aligned affine
// transform: world[a] = origin[a] + index[a] * spacing[a]. Every pipeline stage
// works in the canonical axis order (x, y in-plane; z = slice axis), which is
// established when a volume is loaded from disk.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace isomtl {

using Index3 = std::array<int64_t, 3>;
using Vec3 = std::array<double, 3>;

using LabelId = uint16_t;
using LabelTable = std::map<int, std::string>;

/// Axis-aligned sampling grid with physical spacing.
struct Grid3 {
    Index3 dims{1, 1, 1};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};
    // Anatomical direction each voxel axis points to (RAS+ letters: R/L, A/P, S/I).
    std::array<char, 3> axis_codes{'R', 'A', 'S'};
    int slice_axis = 2;

    Grid3() = default;
    Grid3(Index3 d, Vec3 s, Vec3 o = {0.0, 0.0, 0.0});

    /// Throws std::invalid_argument when an invariant is broken.
    void validate() const;

    int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
    size_t linear(int64_t x, int64_t y, int64_t z) const {
        return static_cast<size_t>(x + dims[0] * (y + dims[1] * z));
    }
    Vec3 world(double x, double y, double z) const {
        return {origin[0] + x * spacing[0], origin[1] + y * spacing[1], origin[2] + z * spacing[2]};
    }
    // Continuous voxel coordinate of a world point.
    Vec3 continuous_index(const Vec3 &w) const {
        return {(w[0] - origin[0]) / spacing[0], (w[1] - origin[1]) / spacing[1],
                (w[2] - origin[2]) / spacing[2]};
    }
    // Physical slab covered by the voxels along an axis: [lo, hi).
    double extent_lo(int a) const { return origin[a] - 0.5 * spacing[a]; }
    double extent_hi(int a) const { return origin[a] + (static_cast<double>(dims[a]) - 0.5) * spacing[a]; }

    bool operator==(const Grid3 &o) const = default;
};

/// True when both grids have the same dims and (within tol mm) spacing and origin.
bool same_geometry(const Grid3 &a, const Grid3 &b, double tol = 1e-6);

struct ScalarVolume {
    Grid3 grid;
    std::vector<double> values;

    ScalarVolume() = default;
    explicit ScalarVolume(Grid3 g, double fill = 0.0);
    ScalarVolume(Grid3 g, std::vector<double> v);

    void validate() const;
    double &at(int64_t x, int64_t y, int64_t z) { return values[grid.linear(x, y, z)]; }
    double at(int64_t x, int64_t y, int64_t z) const { return values[grid.linear(x, y, z)]; }
};

struct LabelVolume {
    Grid3 grid;
    std::vector<LabelId> labels;
    LabelTable label_table{{0, "background"}};

    LabelVolume() = default;
    LabelVolume(Grid3 g, LabelTable table);
    LabelVolume(Grid3 g, std::vector<LabelId> l, LabelTable table);

    void validate() const;
    LabelId &at(int64_t x, int64_t y, int64_t z) { return labels[grid.linear(x, y, z)]; }
    LabelId at(int64_t x, int64_t y, int64_t z) const { return labels[grid.linear(x, y, z)]; }
};

/// Channel-major soft label maps: values[c * voxels + linear(x,y,z)].
struct OneHotVolume {
    Grid3 grid;
    std::vector<int> channels;
    std::vector<float> values;

    OneHotVolume() = default;
    OneHotVolume(Grid3 g, std::vector<int> ch);

    void validate() const;
    size_t channel_count() const { return channels.size(); }
    std::span<float> channel(size_t c);
    std::span<const float> channel(size_t c) const;
};

/// Standard MTL subregion table used by the phantoms and every CLI default.
LabelTable default_mtl_labels();
/// Id of the label whose name is `name`; throws when absent.
int label_id(const LabelTable &table, const std::string &name);

enum class HyperresMode { TrainDivide5, InferFixed };

/// Nearly isotropic hyper-resolution grid: in-plane spacing preserved, slice
/// spacing divided by five (training) or fixed (inference). The new slab
/// covers the old one (ceil) with voxel centres placed symmetrically.
Grid3 hyperres_grid(const Grid3 &source, HyperresMode mode, double fixed_slice_mm = 0.52);
/// Same construction for an arbitrary target slice spacing along `axis`.
Grid3 refine_axis(const Grid3 &source, int axis, double new_spacing);

/// Trilinear resampling onto `target`; samples outside the source support
/// take the nearest edge value. Throws when the two grids do not overlap.
ScalarVolume resample_linear(const ScalarVolume &vol, const Grid3 &target);
/// Nearest-neighbour transfer of labels between grids (edge-clamped).
LabelVolume resample_nearest(const LabelVolume &vol, const Grid3 &target);

/// Mean of every `factor` consecutive slices along the slice axis.
ScalarVolume block_average_downsample_slice(const ScalarVolume &vol, int factor);
OneHotVolume block_average_downsample_slice(const OneHotVolume &vol, int factor);
/// Grid produced by block_average_downsample_slice.
Grid3 coarsen_slice_grid(const Grid3 &fine, int factor);

/// Per-block plurality vote along the slice axis; ties go to background (0).
LabelVolume block_majority_downsample_slice(const LabelVolume &vol, int factor);

OneHotVolume one_hot_encode(const LabelVolume &labels, std::span<const int> channel_ids);
/// Channel argmax where the winning value reaches bg_threshold, else 0.
/// Ties resolve to the lowest channel index.
LabelVolume argmax_decode(const OneHotVolume &oh, double bg_threshold = 0.5,
                          const LabelTable &table = {});

/// Dice overlap of one label; 1 when the label is absent from both volumes.
double label_dice(const LabelVolume &a, const LabelVolume &b, int label);
/// Mean of label_dice over `ids`. Throws when the grids differ in dims.
double mean_dice(const LabelVolume &a, const LabelVolume &b, std::span<const int> ids);

/// Throws unless the slice axis is axis 2 (canonical order).
void require_canonical(const Grid3 &g, const char *where);

/// Permute axes so the slice axis becomes axis 2.
ScalarVolume canonicalize(const ScalarVolume &vol);
LabelVolume canonicalize(const LabelVolume &vol);

} // namespace isomtl
