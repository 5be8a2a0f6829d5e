// delaunay.h - incremental 3D Delaunay triangulation on an integer lattice.
//
// Points are integer triples (|coord| <= 2^16 after translation) so every
// predicate is evaluated exactly in 128-bit arithmetic. Co-spherical input,
// which voxel-face samples produce in bulk, is resolved by symbolic
// perturbation of the lifted coordinate (lower point index = larger
// perturbation), so the triangulation is always a consistent one.

#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace isomtl::geom {

using IPoint = std::array<int64_t, 3>;
using i128 = __int128;

/// Sign of det[a-d; b-d; c-d]; positive for a positively oriented tetrahedron.
int orient3d(const IPoint &a, const IPoint &b, const IPoint &c, const IPoint &d);
/// Raw 4x4 in-sphere determinant det[p-e, |p-e|^2] for p in (a,b,c,d).
/// For a positively oriented (a,b,c,d), e is inside the circumsphere iff > 0.
i128 insphere_det(const IPoint &a, const IPoint &b, const IPoint &c, const IPoint &d, const IPoint &e);

/// Exact circumcentre: centre[k] = num[k] / den, den > 0, reduced by the gcd.
struct RationalPoint {
    std::array<i128, 3> num{};
    i128 den = 1;
    bool operator==(const RationalPoint &o) const = default;
};
RationalPoint circumcenter(const IPoint &a, const IPoint &b, const IPoint &c, const IPoint &d);

struct Tet {
    std::array<int32_t, 4> v{}; // point indices, positively oriented
    std::array<int32_t, 4> n{}; // n[i] shares the face opposite v[i]; -1 = none
};

class Delaunay3 {
  public:
    /// Triangulate distinct points. Throws std::invalid_argument on duplicates,
    /// coordinates out of range or fewer than four non-coplanar points.
    explicit Delaunay3(std::vector<IPoint> points);

    const std::vector<IPoint> &points() const { return pts_; }
    /// Tetrahedra whose vertices are all input points, neighbours reindexed
    /// into this list (-1 across the hull).
    const std::vector<Tet> &tets() const { return out_; }

  private:
    std::vector<IPoint> pts_;
    std::vector<Tet> out_;
};

} // namespace isomtl::geom
