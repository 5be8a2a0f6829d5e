#include "doctest_main.h"

#include "isomtl/skelthick.h"

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <set>

using namespace isomtl;

namespace {

LabelVolume voxelize(const Grid3 &g, const std::function<int(const Vec3 &)> &label_at) {
    LabelVolume l(g, {{0, "background"}, {1, "a"}, {2, "b"}});
    for (int64_t z = 0; z < g.dims[2]; ++z)
        for (int64_t y = 0; y < g.dims[1]; ++y)
            for (int64_t x = 0; x < g.dims[0]; ++x) l.at(x, y, z) = static_cast<LabelId>(label_at(g.world(x, y, z)));
    return l;
}

// Slab of width w with rounded rims: every point within w/2 of a planar
// rectangle through the box centre, normal tilted by theta from z about y.
// Its medial surface is the rectangle itself, with r = w/2 everywhere.
LabelVolume oblique_slab(double w, double theta_deg, double h, Index3 dims) {
    const Grid3 g(dims, {h, h, h});
    const double th = theta_deg * std::numbers::pi / 180.0;
    const Vec3 n{std::sin(th), 0.0, std::cos(th)}, u{std::cos(th), 0.0, -std::sin(th)}, v{0.0, 1.0, 0.0};
    // Offsets keep voxel centres off the analytic surface.
    const Vec3 c{0.5 * (dims[0] - 1) * h + 0.013, 0.5 * (dims[1] - 1) * h + 0.007, 0.5 * (dims[2] - 1) * h + 0.25 * h};
    const double a = 0.5 * dims[0] * h - w, b = 0.5 * dims[1] * h - w;
    return voxelize(g, [&](const Vec3 &p) {
        const Vec3 d{p[0] - c[0], p[1] - c[1], p[2] - c[2]};
        const double s = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
        const double pu = u[0] * d[0] + u[1] * d[1] + u[2] * d[2], pv = v[0] * d[0] + v[1] * d[1] + v[2] * d[2];
        const double eu = pu - std::clamp(pu, -a, a), ev = pv - std::clamp(pv, -b, b);
        return s * s + eu * eu + ev * ev < 0.25 * w * w ? 1 : 0;
    });
}

double min_distance(const Vec3 &p, const std::vector<Vec3> &pts) {
    double best = 1e300;
    for (const Vec3 &q : pts)
        best = std::min(best, std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                        (p[2] - q[2]) * (p[2] - q[2])));
    return best;
}

} // namespace

TEST_CASE("boundary samples sit on voxel faces") {
    const Grid3 g({5, 5, 5}, {1, 1, 1});
    LabelVolume l(g, {{0, "background"}, {1, "a"}});
    l.at(2, 2, 2) = 1;
    CHECK(extract_boundary(make_mask(l)).doubled.size() == 6);
    l.at(3, 2, 2) = 1;
    CHECK(extract_boundary(make_mask(l)).doubled.size() == 10);
    LabelVolume all(g, std::vector<LabelId>(125, 1), {{0, "background"}, {1, "a"}});
    CHECK(extract_boundary(make_mask(all)).doubled.size() == 150);
    CHECK_THROWS_AS(extract_boundary(make_mask(LabelVolume(g, {{0, "background"}}))), std::invalid_argument);
}

TEST_CASE("ball boundary samples lie within half a voxel diagonal of the sphere") {
    const double h = 0.25, R = 3.0;
    const Grid3 g({32, 32, 32}, {h, h, h});
    const Vec3 c{15.5 * h, 15.5 * h, 15.5 * h};
    const LabelVolume ball = voxelize(g, [&](const Vec3 &p) {
        return std::hypot(p[0] - c[0], p[1] - c[1], p[2] - c[2]) < R ? 1 : 0;
    });
    const BoundaryPoints b = extract_boundary(make_mask(ball));
    for (const Vec3 &p : b.world) CHECK(std::abs(std::hypot(p[0] - c[0], p[1] - c[1], p[2] - c[2]) - R) <= 0.5 * std::sqrt(3.0) * h);

    const SkeletonGraph skel = voronoi_skeleton(b, make_mask(ball), 2 * R);
    const auto widest = std::max_element(skel.vertices.begin(), skel.vertices.end(),
                                         [](const auto &a, const auto &b) { return a.r < b.r; });
    CHECK(std::hypot(widest->pos[0] - c[0], widest->pos[1] - c[1], widest->pos[2] - c[2]) <= h);
    CHECK(std::abs(widest->r - R) <= h);

    const SkeletonGraph core = prune(skel, R);
    REQUIRE(!core.vertices.empty());
    Vec3 mean{};
    for (const auto &v : core.vertices) {
        CHECK(std::hypot(v.pos[0] - c[0], v.pos[1] - c[1], v.pos[2] - c[2]) <= std::sqrt(3.0) * h);
        CHECK(std::abs(v.r - R) <= std::sqrt(3.0) * h);
        for (int a = 0; a < 3; ++a) mean[a] += v.pos[a] / static_cast<double>(core.vertices.size());
    }
    CHECK(std::hypot(mean[0] - c[0], mean[1] - c[1], mean[2] - c[2]) <= h);
}

TEST_CASE("eight cube corners give one vertex at the centre") {
    const Grid3 g({6, 6, 6}, {1, 1, 1});
    Mask m{g, std::vector<uint8_t>(216, 0)};
    for (int z = 1; z < 5; ++z)
        for (int y = 1; y < 5; ++y)
            for (int x = 1; x < 5; ++x) m.inside[g.linear(x, y, z)] = 1;
    BoundaryPoints b;
    b.grid = g;
    for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) {
                const Index3 X{1 + 4 * x, 1 + 4 * y, 1 + 4 * z};
                b.doubled.push_back(X);
                b.world.push_back(g.world(X[0] / 2.0, X[1] / 2.0, X[2] / 2.0));
            }
    const SkeletonGraph s = voronoi_skeleton(b, m);
    REQUIRE(s.vertices.size() == 1);
    CHECK(s.vertices[0].pos == Vec3{1.5, 1.5, 1.5});
    CHECK(s.vertices[0].r == doctest::Approx(std::sqrt(3.0)).epsilon(1e-14));
    // Isolated samples are never joined along the boundary: the residual saturates.
    CHECK(s.vertices[0].rho == default_rho_min(g));
    CHECK(s.edges.empty());
}

TEST_CASE("two parallel sample sheets: vertices on the mid-plane") {
    // Square lattices of pitch h, w apart: every cell's eight samples are
    // co-spherical, centred on the mid-plane with r^2 = w^2/4 + h^2/2.
    const double h = 0.2;
    const Grid3 g({12, 10, 12}, {h, h, h});
    LabelVolume l(g, {{0, "background"}, {1, "a"}});
    for (int64_t z = 3; z < 9; ++z)
        for (int64_t y = 0; y < 10; ++y)
            for (int64_t x = 0; x < 12; ++x) l.at(x, y, z) = 1;
    const Mask m = make_mask(l);
    BoundaryPoints all = extract_boundary(m), sheets;
    sheets.grid = g;
    for (size_t i = 0; i < all.doubled.size(); ++i)
        if (all.doubled[i][2] % 2 != 0) {
            sheets.doubled.push_back(all.doubled[i]);
            sheets.world.push_back(all.world[i]);
        }
    const double w = 6 * h, mid = g.world(0, 0, 5.5)[2];
    const SkeletonGraph s = voronoi_skeleton(sheets, m);
    REQUIRE(s.vertices.size() == 11 * 9);
    for (const auto &v : s.vertices) {
        CHECK(v.pos[2] == doctest::Approx(mid).epsilon(1e-12));
        CHECK(v.r == doctest::Approx(std::sqrt(w * w / 4 + h * h / 2)).epsilon(1e-12));
    }
}

TEST_CASE("vertex radius equals the distance to the nearest boundary sample") {
    std::mt19937_64 rng(3);
    for (const Vec3 sp : {Vec3{1, 1, 1}, Vec3{0.4, 0.4, 0.52}, Vec3{0.4, 0.4, 2.6}}) {
        const Grid3 g({14, 12, 10}, sp);
        LabelVolume l(g, {{0, "background"}, {1, "a"}});
        std::bernoulli_distribution coin(0.55);
        for (int64_t z = 2; z < 8; ++z)
            for (int64_t y = 2; y < 10; ++y)
                for (int64_t x = 2; x < 12; ++x) l.at(x, y, z) = coin(rng) ? 1 : 0;
        const Mask m = make_mask(l);
        const BoundaryPoints b = extract_boundary(m);
        const SkeletonGraph s = voronoi_skeleton(b, m);
        REQUIRE(!s.vertices.empty());
        double worst = 0;
        for (const auto &v : s.vertices) {
            worst = std::max(worst, std::abs(v.r - min_distance(v.pos, b.world)));
            CHECK(v.r > 0);
            // Strictly inside: the containing voxel is foreground.
            const Vec3 ci = g.continuous_index(v.pos);
            CHECK(l.at(std::llround(ci[0]), std::llround(ci[1]), std::llround(ci[2])) == 1);
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("pruning") {
    const LabelVolume slab = oblique_slab(1.0, 30, 0.1, {30, 20, 30});
    const Mask m = make_mask(slab);
    const SkeletonGraph s = voronoi_skeleton(extract_boundary(m), m, 2.0);
    CHECK(prune(s, 0.0).vertices.size() == s.vertices.size());
    CHECK(prune(s, 0.0).edges == s.edges);
    CHECK(prune(s, std::numeric_limits<double>::infinity()).vertices.empty());
    CHECK_THROWS_AS(prune(s, -1.0), std::invalid_argument);

    auto key_set = [](const SkeletonGraph &g) {
        std::set<std::array<double, 3>> k;
        for (const auto &v : g.vertices) k.insert(v.pos);
        return k;
    };
    std::set<std::array<double, 3>> prev = key_set(s);
    for (double rho : {0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0}) {
        const auto cur = key_set(prune(s, rho));
        CHECK(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
        CHECK(cur.size() <= prev.size());
        prev = cur;
    }
}

TEST_CASE("subregion assignment") {
    const Grid3 g({20, 16, 14}, {0.2, 0.2, 0.2});
    const double split = g.world(9.5, 0, 0)[0];
    const LabelVolume halves = voxelize(g, [&](const Vec3 &p) {
        if (p[2] < 0.6 || p[2] > 2.0) return 0;
        return p[0] < split ? 1 : 2;
    });
    const Mask m = make_mask(halves);
    const SkeletonGraph s = prune(voronoi_skeleton(extract_boundary(m), m), default_rho_min(g));
    REQUIRE(!s.vertices.empty());

    LabelVolume single = halves;
    for (auto &x : single.labels) x = x ? 1 : 0;
    for (const auto &v : assign_subregions(s, single).vertices) CHECK(v.label == 1);

    int left = 0, right = 0;
    for (const auto &v : assign_subregions(s, halves).vertices) {
        if (std::abs(v.pos[0] - split) < 1e-9) continue;
        CHECK(v.label == (v.pos[0] < split ? 1 : 2));
        (v.label == 1 ? left : right)++;
    }
    CHECK(left > 0);
    CHECK(right > 0);

    SkeletonGraph far = s;
    far.vertices[0].pos = {100, 0, 0};
    CHECK_THROWS_AS(assign_subregions(far, halves), std::invalid_argument);
}

TEST_CASE("weighted and unweighted medians") {
    SkeletonGraph s;
    s.voxel_mm = 0.1;
    // A chain 0-1-2 (lengths 1 and 3) plus an isolated vertex.
    s.vertices = {{{0, 0, 0}, 0.5, 1, 1}, {{1, 0, 0}, 1.0, 1, 1}, {{4, 0, 0}, 2.0, 1, 1}, {{9, 9, 9}, 0.2, 1, 1}};
    s.edges = {{0, 1}, {1, 2}};
    const std::vector<int> expected{1, 5};
    const ThicknessReport r = median_thickness(s, expected);
    REQUIRE(r.regions.count(1));
    const RegionThickness &t = r.regions.at(1);
    // Weights: 0.5, 2.0, 1.5, 0.1 over thicknesses 1, 2, 4, 0.4; total 4.1.
    CHECK(t.measure_mm == doctest::Approx(4.1));
    CHECK(t.median_mm == doctest::Approx(2.0));
    CHECK(t.unweighted_median_mm == doctest::Approx(1.5));
    CHECK(t.n_vertices == 4);
    CHECK(r.absent == std::vector<int>{5});
    CHECK_THROWS_AS(median_thickness(SkeletonGraph{}), std::invalid_argument);
}

TEST_CASE("slab oracle over orientations") {
    const double h = 0.1, w = 1.2;
    for (double theta : {0.0, 30.0, 45.0}) {
        const ThicknessReport r = measure_thickness(oblique_slab(w, theta, h, {60, 40, 60}));
        REQUIRE(r.regions.count(1));
        const double med = r.regions.at(1).median_mm;
        MESSAGE("theta " << theta << " weighted " << med << " unweighted " << r.regions.at(1).unweighted_median_mm);
        CHECK(std::abs(med - w) <= 0.1);
        CHECK(!r.low_confidence);
    }
}

TEST_CASE("spherical shell oracle") {
    const double h = 0.1, t = 1.0, Rm = 3.0;
    const Grid3 g({74, 74, 74}, {h, h, h});
    const Vec3 c{36.5 * h + 0.011, 36.5 * h + 0.007, 36.5 * h};
    const LabelVolume shell = voxelize(g, [&](const Vec3 &p) {
        const double d = std::hypot(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
        return std::abs(d - Rm) < 0.5 * t ? 1 : 0;
    });
    const ThicknessReport r = measure_thickness(shell);
    REQUIRE(r.regions.count(1));
    MESSAGE("shell weighted " << r.regions.at(1).median_mm << " unweighted " << r.regions.at(1).unweighted_median_mm);
    CHECK(std::abs(r.regions.at(1).median_mm - t) <= 0.1);
}

TEST_CASE("noisy slab: pruned skeleton stays near the mid-plane") {
    const double h = 0.1;
    const Grid3 g({50, 50, 24}, {h, h, h});
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> jitter(-0.6 * h, 0.6 * h);
    const double mid = g.world(0, 0, 11.75)[2];
    LabelVolume l(g, {{0, "background"}, {1, "a"}});
    for (int64_t y = 0; y < 50; ++y)
        for (int64_t x = 0; x < 50; ++x) {
            const double lo = mid - 0.6 + jitter(rng), hi = mid + 0.6 + jitter(rng);
            for (int64_t z = 0; z < 24; ++z) {
                const double wz = g.world(x, y, z)[2];
                l.at(x, y, z) = wz > lo && wz < hi ? 1 : 0;
            }
        }
    const Mask m = make_mask(l);
    const SkeletonGraph s = prune(voronoi_skeleton(extract_boundary(m), m), default_rho_min(g));
    size_t interior = 0;
    for (const auto &v : s.vertices) {
        // Away from the box sides, whose edges carry genuine medial wedges.
        const Vec3 ci = g.continuous_index(v.pos);
        if (ci[0] < 15 || ci[0] > 34 || ci[1] < 15 || ci[1] > 34) continue;
        ++interior;
        CHECK(std::abs(v.pos[2] - mid) <= h);
    }
    CHECK(interior > 100);
}

TEST_CASE("uniform scaling scales every thickness") {
    const LabelVolume base = oblique_slab(0.8, 30, 0.1, {30, 20, 30});
    const ThicknessReport r0 = measure_thickness(base, 0.2);
    for (double s : {2.0, 0.5, 4.0}) {
        LabelVolume scaled = base;
        for (int a = 0; a < 3; ++a) {
            scaled.grid.spacing[a] *= s;
            scaled.grid.origin[a] *= s;
        }
        const ThicknessReport r = measure_thickness(scaled, 0.2 * s);
        REQUIRE(r.regions.size() == r0.regions.size());
        CHECK(r.regions.at(1).median_mm == s * r0.regions.at(1).median_mm);
        CHECK(r.regions.at(1).unweighted_median_mm == s * r0.regions.at(1).unweighted_median_mm);
        CHECK(r.regions.at(1).n_vertices == r0.regions.at(1).n_vertices);
    }
    LabelVolume odd = base;
    for (int a = 0; a < 3; ++a) odd.grid.spacing[a] *= 1.5;
    const ThicknessReport r15 = measure_thickness(odd, 0.3);
    CHECK(r15.regions.at(1).median_mm == doctest::Approx(1.5 * r0.regions.at(1).median_mm).epsilon(1e-12));
}

TEST_CASE("thin masks are flagged, empty ones reported absent") {
    const Grid3 g({20, 20, 8}, {0.1, 0.1, 0.1});
    LabelVolume l(g, {{0, "background"}, {1, "a"}, {2, "b"}});
    for (int64_t y = 0; y < 20; ++y)
        for (int64_t x = 0; x < 20; ++x) l.at(x, y, 3) = l.at(x, y, 4) = 1;
    const ThicknessReport thin = measure_thickness(l);
    CHECK(thin.low_confidence);
    CHECK(thin.absent == std::vector<int>{2});
    const ThicknessReport none = measure_thickness(LabelVolume(g, {{0, "background"}, {1, "a"}}));
    CHECK(none.low_confidence);
    CHECK(none.regions.empty());
    CHECK(none.absent == std::vector<int>{1});
}
