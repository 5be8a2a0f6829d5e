#include "isomtl/skelthick.h"

#include "isomtl/delaunay.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace isomtl {

namespace {

using geom::i128;

constexpr int64_t kLatticeExtent = int64_t{1} << 16;

// Integer lattice for the doubled voxel coordinates. Exact when the spacings
// are commensurate at 0.1 micron resolution (L = (X + 1) * m per axis);
// otherwise a common quantum kappa is used and positions are rounded.
struct Lattice {
    bool exact = true;
    Index3 m{1, 1, 1};
    Vec3 kappa{}; // mm per lattice step
    Vec3 base{};  // world position of lattice 0

    explicit Lattice(const Grid3 &g) {
        constexpr double q = 1e-4;
        Index3 s{};
        for (int a = 0; a < 3; ++a) {
            s[a] = std::llround(g.spacing[a] / q);
            if (s[a] < 1 || std::abs(static_cast<double>(s[a]) * q - g.spacing[a]) > 1e-6 * g.spacing[a]) exact = false;
        }
        if (exact) {
            const int64_t d = std::gcd(std::gcd(s[0], s[1]), s[2]);
            for (int a = 0; a < 3; ++a) {
                m[a] = s[a] / d;
                if (2 * g.dims[a] * m[a] > kLatticeExtent) exact = false;
            }
        }
        double span = 0;
        for (int a = 0; a < 3; ++a) span = std::max(span, static_cast<double>(g.dims[a]) * g.spacing[a]);
        for (int a = 0; a < 3; ++a) {
            base[a] = g.origin[a] - 0.5 * g.spacing[a];
            kappa[a] = exact ? g.spacing[a] / (2.0 * static_cast<double>(m[a])) : span / static_cast<double>(kLatticeExtent);
        }
        if (!exact)
            for (int a = 0; a < 3; ++a)
                if (!(kappa[a] < 0.5 * g.spacing[a])) throw std::invalid_argument("grid too large for the skeleton lattice");
        spacing = g.spacing;
    }

    geom::IPoint point(const Index3 &X) const {
        geom::IPoint p{};
        for (int a = 0; a < 3; ++a)
            p[a] = exact ? (X[a] + 1) * m[a] : std::llround(static_cast<double>(X[a] + 1) * spacing[a] / (2.0 * kappa[a]));
        return p;
    }
    Vec3 world(const geom::IPoint &p) const {
        return {base[0] + static_cast<double>(p[0]) * kappa[0], base[1] + static_cast<double>(p[1]) * kappa[1],
                base[2] + static_cast<double>(p[2]) * kappa[2]};
    }
    Vec3 world(const geom::RationalPoint &c) const {
        Vec3 w{};
        for (int a = 0; a < 3; ++a)
            w[a] = base[a] + static_cast<double>(static_cast<long double>(c.num[a]) / static_cast<long double>(c.den)) * kappa[a];
        return w;
    }

    // Voxel indices along axis a whose closure contains the point; two when
    // the point lies on a face plane.
    void voxels(const geom::RationalPoint &c, int a, int64_t out[2], int &count) const {
        if (exact) {
            // X + 1 = num / (den * m); voxel i spans X+1 in (2i, 2i + 2).
            const i128 d = c.den * 2 * m[a];
            i128 q = c.num[a] / d, r = c.num[a] % d;
            if (r < 0) {
                r += d;
                --q;
            }
            out[0] = static_cast<int64_t>(q);
            count = 1;
            if (r == 0) {
                out[0] = static_cast<int64_t>(q) - 1;
                out[1] = static_cast<int64_t>(q);
                count = 2;
            }
            return;
        }
        const double half = static_cast<double>(static_cast<long double>(c.num[a]) / static_cast<long double>(c.den)) *
                            kappa[a] / spacing[a];
        const double rnd = std::round(half);
        if (std::abs(half - rnd) < 1e-9) {
            out[0] = static_cast<int64_t>(rnd) - 1;
            out[1] = static_cast<int64_t>(rnd);
            count = 2;
        } else {
            out[0] = static_cast<int64_t>(std::floor(half));
            count = 1;
        }
    }

    Vec3 spacing{};
};

struct RationalHash {
    size_t operator()(const geom::RationalPoint &p) const {
        uint64_t h = 1469598103934665603ull;
        auto mix = [&](i128 v) {
            for (int k = 0; k < 2; ++k) {
                h ^= static_cast<uint64_t>(v >> (64 * k));
                h *= 1099511628211ull;
            }
        };
        for (const auto &x : p.num) mix(x);
        mix(p.den);
        return h;
    }
};

// Edge-sharing neighbours among boundary faces: coplanar faces one voxel
// apart, and faces meeting at a convex or concave voxel edge.
struct FaceGraph {
    std::vector<int32_t> offset, target;
    std::vector<double> length;
};

struct IndexHash {
    size_t operator()(const Index3 &x) const {
        return static_cast<size_t>((x[0] * 73856093) ^ (x[1] * 19349663) ^ (x[2] * 83492791));
    }
};

int normal_axis(const Index3 &X) {
    for (int a = 0; a < 3; ++a)
        if (X[a] % 2 != 0) return a;
    return -1;
}

double distance(const Vec3 &a, const Vec3 &b);

FaceGraph face_graph(const std::vector<Index3> &doubled, const std::vector<Vec3> &world) {
    std::unordered_map<Index3, int32_t, IndexHash> at;
    at.reserve(doubled.size() * 2);
    for (size_t i = 0; i < doubled.size(); ++i) at.emplace(doubled[i], static_cast<int32_t>(i));
    FaceGraph fg;
    fg.offset.push_back(0);
    for (size_t i = 0; i < doubled.size(); ++i) {
        const Index3 &X = doubled[i];
        const int a = normal_axis(X);
        auto link = [&](const Index3 &Y) {
            auto it = at.find(Y);
            if (it == at.end()) return;
            fg.target.push_back(it->second);
            fg.length.push_back(distance(world[i], world[it->second]));
        };
        for (int b = 0; b < 3; ++b) {
            if (b == a) continue;
            for (int s : {-2, 2}) {
                Index3 Y = X;
                Y[b] += s;
                link(Y);
            }
            for (int sa : {-1, 1})
                for (int sb : {-1, 1}) {
                    Index3 Y = X;
                    Y[a] += sa;
                    Y[b] += sb;
                    link(Y);
                }
        }
        fg.offset.push_back(static_cast<int32_t>(fg.target.size()));
    }
    return fg;
}

// Largest boundary-geodesic distance from the first generator to the others,
// saturating at cap (also when a generator is not reachable within it).
class GeodesicResidual {
  public:
    explicit GeodesicResidual(const FaceGraph &g) : g_(g), dist_(g.offset.size() - 1, kInf), goal_(dist_.size(), 0) {}

    double operator()(const std::vector<int32_t> &gens, double cap) {
        if (gens.size() < 2) return 0.0;
        size_t remaining = 0;
        for (size_t i = 1; i < gens.size(); ++i)
            if (!goal_[gens[i]]) {
                goal_[gens[i]] = 1;
                ++remaining;
            }
        double far = 0;
        heap_.clear();
        touched_.clear();
        dist_[gens[0]] = 0;
        touched_.push_back(gens[0]);
        heap_.push_back({0.0, gens[0]});
        while (!heap_.empty() && remaining > 0) {
            std::pop_heap(heap_.begin(), heap_.end(), std::greater<>());
            const auto [d, u] = heap_.back();
            heap_.pop_back();
            if (d > dist_[u]) continue;
            if (d > cap) break;
            if (goal_[u]) {
                goal_[u] = 0;
                --remaining;
                far = std::max(far, d);
            }
            for (int32_t e = g_.offset[u]; e < g_.offset[u + 1]; ++e) {
                const int32_t v = g_.target[e];
                const double nd = d + g_.length[e];
                if (nd < dist_[v] && nd <= cap) {
                    if (dist_[v] == kInf) touched_.push_back(v);
                    dist_[v] = nd;
                    heap_.push_back({nd, v});
                    std::push_heap(heap_.begin(), heap_.end(), std::greater<>());
                }
            }
        }
        for (int32_t t : touched_) dist_[t] = kInf;
        for (size_t i = 1; i < gens.size(); ++i) goal_[gens[i]] = 0;
        return remaining > 0 ? cap : std::min(far, cap);
    }

  private:
    static constexpr double kInf = std::numeric_limits<double>::infinity();
    const FaceGraph &g_;
    std::vector<double> dist_;
    std::vector<uint8_t> goal_;
    std::vector<std::pair<double, int32_t>> heap_;
    std::vector<int32_t> touched_;
};

double distance(const Vec3 &a, const Vec3 &b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

double quantile_median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

bool Mask::at(int64_t x, int64_t y, int64_t z) const {
    if (x < 0 || y < 0 || z < 0 || x >= grid.dims[0] || y >= grid.dims[1] || z >= grid.dims[2]) return false;
    return inside[grid.linear(x, y, z)] != 0;
}

Mask make_mask(const LabelVolume &labels, std::span<const int> foreground) {
    Mask m{labels.grid, std::vector<uint8_t>(labels.labels.size(), 0)};
    const std::set<int> fg(foreground.begin(), foreground.end());
    for (size_t i = 0; i < labels.labels.size(); ++i) {
        const int l = labels.labels[i];
        m.inside[i] = fg.empty() ? l != 0 : fg.count(l) != 0;
    }
    return m;
}

BoundaryPoints extract_boundary(const Mask &mask) {
    BoundaryPoints b;
    b.grid = mask.grid;
    const Grid3 &g = mask.grid;
    static constexpr int dirs[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    for (int64_t z = 0; z < g.dims[2]; ++z)
        for (int64_t y = 0; y < g.dims[1]; ++y)
            for (int64_t x = 0; x < g.dims[0]; ++x) {
                if (!mask.inside[g.linear(x, y, z)]) continue;
                for (const auto &d : dirs) {
                    if (mask.at(x + d[0], y + d[1], z + d[2])) continue;
                    const Index3 X{2 * x + d[0], 2 * y + d[1], 2 * z + d[2]};
                    b.doubled.push_back(X);
                    b.world.push_back(g.world(0.5 * static_cast<double>(X[0]), 0.5 * static_cast<double>(X[1]),
                                              0.5 * static_cast<double>(X[2])));
                }
            }
    if (b.doubled.empty()) throw std::invalid_argument("extract_boundary: empty foreground");
    return b;
}

SkeletonGraph voronoi_skeleton(const BoundaryPoints &boundary, const Mask &mask, double residual_cap_mm) {
    if (residual_cap_mm < 0) residual_cap_mm = default_rho_min(mask.grid);
    if (!(boundary.grid == mask.grid)) throw std::invalid_argument("voronoi_skeleton: boundary and mask grids differ");
    const Lattice lat(mask.grid);
    std::vector<geom::IPoint> pts;
    pts.reserve(boundary.doubled.size());
    for (const Index3 &X : boundary.doubled) pts.push_back(lat.point(X));
    const geom::Delaunay3 dt(pts);

    std::vector<Vec3> gen_world(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) gen_world[i] = lat.world(pts[i]);

    // Co-spherical samples give several tetrahedra with one circumcentre;
    // they collapse into a single Voronoi vertex.
    const auto &tets = dt.tets();
    std::unordered_map<geom::RationalPoint, int32_t, RationalHash> index;
    std::vector<geom::RationalPoint> centres;
    std::vector<std::vector<int32_t>> generators;
    std::vector<int32_t> tet_vertex(tets.size());
    for (size_t t = 0; t < tets.size(); ++t) {
        const auto &v = tets[t].v;
        const geom::RationalPoint c = geom::circumcenter(pts[v[0]], pts[v[1]], pts[v[2]], pts[v[3]]);
        auto [it, fresh] = index.emplace(c, static_cast<int32_t>(centres.size()));
        if (fresh) {
            centres.push_back(c);
            generators.emplace_back();
        }
        tet_vertex[t] = it->second;
        auto &gl = generators[it->second];
        gl.insert(gl.end(), v.begin(), v.end());
    }

    const FaceGraph graph = face_graph(boundary.doubled, gen_world);
    GeodesicResidual residual(graph);

    SkeletonGraph skel;
    skel.voxel_mm = std::min(mask.grid.spacing[0], mask.grid.spacing[1]);
    skel.boundary_count = pts.size();
    std::vector<int32_t> kept(centres.size(), -1);
    for (size_t c = 0; c < centres.size(); ++c) {
        int64_t cand[3][2];
        int count[3];
        for (int a = 0; a < 3; ++a) lat.voxels(centres[c], a, cand[a], count[a]);
        bool inside = true;
        for (int i = 0; i < count[0] && inside; ++i)
            for (int j = 0; j < count[1] && inside; ++j)
                for (int k = 0; k < count[2] && inside; ++k) inside = mask.at(cand[0][i], cand[1][j], cand[2][k]);
        if (!inside) continue;

        auto &gl = generators[c];
        std::sort(gl.begin(), gl.end());
        gl.erase(std::unique(gl.begin(), gl.end()), gl.end());
        SkeletonVertex sv;
        sv.pos = lat.world(centres[c]);
        sv.r = distance(sv.pos, gen_world[gl[0]]);
        sv.rho = residual(gl, residual_cap_mm);
        kept[c] = static_cast<int32_t>(skel.vertices.size());
        skel.vertices.push_back(sv);
    }

    for (size_t t = 0; t < tets.size(); ++t)
        for (int32_t nb : tets[t].n) {
            if (nb < static_cast<int32_t>(t)) continue;
            const int32_t a = kept[tet_vertex[t]], b = kept[tet_vertex[nb]];
            if (a < 0 || b < 0 || a == b) continue;
            skel.edges.push_back({std::min(a, b), std::max(a, b)});
        }
    std::sort(skel.edges.begin(), skel.edges.end());
    skel.edges.erase(std::unique(skel.edges.begin(), skel.edges.end()), skel.edges.end());
    return skel;
}

SkeletonGraph prune(const SkeletonGraph &skel, double rho_min) {
    if (!(rho_min >= 0)) throw std::invalid_argument("prune: rho_min must be non-negative");
    SkeletonGraph out;
    out.voxel_mm = skel.voxel_mm;
    out.boundary_count = skel.boundary_count;
    std::vector<int32_t> remap(skel.vertices.size(), -1);
    for (size_t i = 0; i < skel.vertices.size(); ++i) {
        if (skel.vertices[i].rho < rho_min) continue;
        remap[i] = static_cast<int32_t>(out.vertices.size());
        out.vertices.push_back(skel.vertices[i]);
    }
    for (const auto &e : skel.edges)
        if (remap[e[0]] >= 0 && remap[e[1]] >= 0) out.edges.push_back({remap[e[0]], remap[e[1]]});
    return out;
}

SkeletonGraph assign_subregions(const SkeletonGraph &skel, const LabelVolume &labels) {
    SkeletonGraph out = skel;
    const Grid3 &g = labels.grid;
    for (SkeletonVertex &v : out.vertices) {
        const Vec3 c = g.continuous_index(v.pos);
        Index3 i{};
        for (int a = 0; a < 3; ++a) {
            i[a] = std::llround(c[a]);
            if (i[a] < 0 || i[a] >= g.dims[a]) throw std::invalid_argument("assign_subregions: vertex outside the label grid");
        }
        v.label = labels.at(i[0], i[1], i[2]);
    }
    return out;
}

ThicknessReport median_thickness(const SkeletonGraph &skel, std::span<const int> expected) {
    if (skel.vertices.empty()) throw std::invalid_argument("median_thickness: empty skeleton");
    std::vector<double> weight(skel.vertices.size(), 0.0);
    std::vector<uint8_t> touched(skel.vertices.size(), 0);
    for (const auto &e : skel.edges) {
        const double len = distance(skel.vertices[e[0]].pos, skel.vertices[e[1]].pos);
        weight[e[0]] += 0.5 * len;
        weight[e[1]] += 0.5 * len;
        touched[e[0]] = touched[e[1]] = 1;
    }
    std::map<int, std::vector<std::pair<double, double>>> per_label;
    double thickest = 0;
    for (size_t i = 0; i < skel.vertices.size(); ++i) {
        const double t = 2.0 * skel.vertices[i].r;
        thickest = std::max(thickest, t);
        per_label[skel.vertices[i].label].push_back({t, touched[i] ? weight[i] : skel.voxel_mm});
    }

    ThicknessReport rep;
    rep.boundary_count = skel.boundary_count;
    rep.vertex_count = skel.vertices.size();
    rep.low_confidence = thickest < 3.0 * skel.voxel_mm;
    for (auto &[label, tw] : per_label) {
        std::sort(tw.begin(), tw.end());
        RegionThickness rt;
        rt.n_vertices = tw.size();
        for (const auto &p : tw) rt.measure_mm += p.second;
        double cum = 0;
        for (const auto &p : tw) {
            cum += p.second;
            if (cum >= 0.5 * rt.measure_mm) {
                rt.median_mm = p.first;
                break;
            }
        }
        std::vector<double> ts;
        for (const auto &p : tw) ts.push_back(p.first);
        rt.unweighted_median_mm = quantile_median(std::move(ts));
        rep.regions[label] = rt;
    }
    for (int l : expected)
        if (!rep.regions.count(l)) rep.absent.push_back(l);
    return rep;
}

double default_rho_min(const Grid3 &grid) { return 10.0 * std::min(grid.spacing[0], grid.spacing[1]); }

ThicknessReport measure_thickness(const LabelVolume &seg, double rho_min) {
    if (rho_min < 0) rho_min = default_rho_min(seg.grid);
    std::vector<int> expected;
    for (const auto &[id, name] : seg.label_table)
        if (id != 0) expected.push_back(id);

    const Mask mask = make_mask(seg);
    ThicknessReport empty;
    empty.rho_min = rho_min;
    empty.low_confidence = true;
    empty.absent = expected;
    if (std::none_of(mask.inside.begin(), mask.inside.end(), [](uint8_t v) { return v != 0; })) return empty;

    const BoundaryPoints bnd = extract_boundary(mask);
    empty.boundary_count = bnd.doubled.size();
    SkeletonGraph skel;
    try {
        skel = voronoi_skeleton(bnd, mask, rho_min);
    } catch (const std::invalid_argument &) {
        return empty; // too few or coplanar samples
    }
    skel = assign_subregions(prune(skel, rho_min), seg);
    if (skel.vertices.empty()) return empty;
    ThicknessReport rep = median_thickness(skel, expected);
    rep.rho_min = rho_min;
    return rep;
}

} // namespace isomtl
