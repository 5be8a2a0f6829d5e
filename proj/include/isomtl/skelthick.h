// skelthick.h - Voronoi skeleton thickness of a cortical mask.
//
// Boundary samples sit at the centres of voxel faces between foreground and
// background (outside the grid counts as background). Their Voronoi vertices
// that fall strictly inside the mask form the skeleton; each carries the
// radius r of its empty sphere and the residual rho, the boundary-geodesic
// distance between its generating samples measured over the face adjacency
// graph. Thickness is 2r.

#pragma once

#include "isomtl/volgrid.h"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace isomtl {

/// Binary mask on a grid.
struct Mask {
    Grid3 grid;
    std::vector<uint8_t> inside;

    bool at(int64_t x, int64_t y, int64_t z) const;
};

/// Voxels whose label is in `foreground`; an empty set means every non-zero label.
Mask make_mask(const LabelVolume &labels, std::span<const int> foreground = {});

struct BoundaryPoints {
    Grid3 grid;
    // Doubled voxel coordinates: voxel centres are even, face centres have one odd component.
    std::vector<Index3> doubled;
    std::vector<Vec3> world;
};

BoundaryPoints extract_boundary(const Mask &mask);

struct SkeletonVertex {
    Vec3 pos{};
    double r = 0.0;
    double rho = 0.0;
    int label = 0;
};

struct SkeletonGraph {
    std::vector<SkeletonVertex> vertices;
    std::vector<std::array<int32_t, 2>> edges;
    double voxel_mm = 0.0; // in-plane spacing of the source grid
    size_t boundary_count = 0;
};

/// Unpruned skeleton. Residuals saturate at residual_cap_mm (default:
/// default_rho_min of the grid), so pruning is exact for thresholds up to the
/// cap. Throws std::invalid_argument for degenerate samples.
SkeletonGraph voronoi_skeleton(const BoundaryPoints &boundary, const Mask &mask, double residual_cap_mm = -1.0);
/// Drop vertices with rho < rho_min and their edges.
SkeletonGraph prune(const SkeletonGraph &skel, double rho_min);
/// Label each vertex by the voxel containing it. Throws if a vertex leaves the grid.
SkeletonGraph assign_subregions(const SkeletonGraph &skel, const LabelVolume &labels);

struct RegionThickness {
    double median_mm = 0.0;            // edge-length-weighted median of 2r
    double unweighted_median_mm = 0.0; // plain median over vertices
    size_t n_vertices = 0;
    double measure_mm = 0.0; // total vertex weight
};

struct ThicknessReport {
    std::map<int, RegionThickness> regions;
    std::vector<int> absent; // requested labels without skeleton vertices
    double rho_min = 0.0;
    size_t boundary_count = 0;
    size_t vertex_count = 0;
    bool low_confidence = false;
};

/// Per-label medians of t = 2r. Throws on an empty skeleton. `expected`
/// lists labels to report as absent when they collect no vertices.
ThicknessReport median_thickness(const SkeletonGraph &skel, std::span<const int> expected = {});

/// Default pruning threshold: ten in-plane voxels. Spokes raised by
/// voxel-scale boundary noise stay below it; medial vertices of a sheet
/// saturate the residual because their generators sit on opposite faces.
double default_rho_min(const Grid3 &grid);

/// Whole chain on a segmentation: mask of all foreground labels, skeleton,
/// prune, assign, medians. An empty pruned skeleton yields a low-confidence
/// report with every label absent instead of an error. rho_min < 0 selects
/// the default.
ThicknessReport measure_thickness(const LabelVolume &seg, double rho_min = -1.0);

} // namespace isomtl
