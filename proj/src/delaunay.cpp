#include "isomtl/delaunay.h"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace isomtl::geom {

namespace {

constexpr int64_t kMaxExtent = int64_t{1} << 16;

i128 det3(i128 a0, i128 a1, i128 a2, i128 b0, i128 b1, i128 b2, i128 c0, i128 c1, i128 c2) {
    return a0 * (b1 * c2 - b2 * c1) - a1 * (b0 * c2 - b2 * c0) + a2 * (b0 * c1 - b1 * c0);
}

i128 babs(i128 x) { return x < 0 ? -x : x; }

i128 gcd128(i128 a, i128 b) {
    a = babs(a);
    b = babs(b);
    while (b != 0) {
        const i128 t = a % b;
        a = b;
        b = t;
    }
    return a;
}

uint64_t spread_bits(uint64_t x) {
    uint64_t r = 0;
    for (int b = 0; b < 21; ++b) r |= ((x >> b) & 1u) << (3 * b);
    return r;
}

} // namespace

int orient3d(const IPoint &a, const IPoint &b, const IPoint &c, const IPoint &d) {
    const i128 v = det3(a[0] - d[0], a[1] - d[1], a[2] - d[2], b[0] - d[0], b[1] - d[1], b[2] - d[2], c[0] - d[0],
                        c[1] - d[1], c[2] - d[2]);
    return (v > 0) - (v < 0);
}

i128 insphere_det(const IPoint &a, const IPoint &b, const IPoint &c, const IPoint &d, const IPoint &e) {
    const IPoint *rows[4] = {&a, &b, &c, &d};
    i128 m[4][4];
    for (int r = 0; r < 4; ++r) {
        const i128 x = (*rows[r])[0] - e[0], y = (*rows[r])[1] - e[1], z = (*rows[r])[2] - e[2];
        m[r][0] = x;
        m[r][1] = y;
        m[r][2] = z;
        m[r][3] = x * x + y * y + z * z;
    }
    // Laplace expansion over the first two columns.
    auto lo = [&](int i, int j) { return m[i][0] * m[j][1] - m[j][0] * m[i][1]; };
    auto hi = [&](int i, int j) { return m[i][2] * m[j][3] - m[j][2] * m[i][3]; };
    return lo(0, 1) * hi(2, 3) - lo(0, 2) * hi(1, 3) + lo(0, 3) * hi(1, 2) + lo(1, 2) * hi(0, 3) -
           lo(1, 3) * hi(0, 2) + lo(2, 3) * hi(0, 1);
}

RationalPoint circumcenter(const IPoint &a, const IPoint &b, const IPoint &c, const IPoint &d) {
    const i128 u[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    const i128 v[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
    const i128 w[3] = {d[0] - a[0], d[1] - a[1], d[2] - a[2]};
    auto cross = [](const i128 *p, const i128 *q, i128 *o) {
        o[0] = p[1] * q[2] - p[2] * q[1];
        o[1] = p[2] * q[0] - p[0] * q[2];
        o[2] = p[0] * q[1] - p[1] * q[0];
    };
    i128 vw[3], wu[3], uv[3];
    cross(v, w, vw);
    cross(w, u, wu);
    cross(u, v, uv);
    const i128 uu = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    const i128 vv = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    const i128 ww = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    i128 den = 2 * (u[0] * vw[0] + u[1] * vw[1] + u[2] * vw[2]);
    if (den == 0) throw std::invalid_argument("circumcenter of a flat tetrahedron");
    RationalPoint r;
    for (int k = 0; k < 3; ++k) r.num[k] = a[k] * den + uu * vw[k] + vv * wu[k] + ww * uv[k];
    if (den < 0) {
        den = -den;
        for (auto &x : r.num) x = -x;
    }
    i128 g = den;
    for (const auto &x : r.num) g = gcd128(g, x);
    r.den = den / g;
    for (auto &x : r.num) x /= g;
    return r;
}

Delaunay3::Delaunay3(std::vector<IPoint> points) : pts_(std::move(points)) {
    const int32_t n = static_cast<int32_t>(pts_.size());
    if (n < 4) throw std::invalid_argument("Delaunay3 needs at least four points");

    IPoint lo = pts_[0], hi = pts_[0];
    for (const IPoint &p : pts_)
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], p[k]);
            hi[k] = std::max(hi[k], p[k]);
        }
    int64_t extent = 1;
    for (int k = 0; k < 3; ++k) extent = std::max(extent, hi[k] - lo[k]);
    if (extent > kMaxExtent)
        throw std::invalid_argument("Delaunay3 point extent " + std::to_string(extent) + " exceeds 2^16");

    // Work on translated copies plus four enclosing vertices. A regular
    // tetrahedron inscribed in a cube of half-size R has inradius R/sqrt(3),
    // so R = 12 * extent leaves ample clearance around the points.
    std::vector<IPoint> P(static_cast<size_t>(n) + 4);
    for (int32_t i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) P[i][k] = pts_[i][k] - lo[k];
    const int64_t c = extent / 2, R = 12 * extent;
    P[n + 0] = {c + R, c + R, c + R};
    P[n + 1] = {c + R, c - R, c - R};
    P[n + 2] = {c - R, c + R, c - R};
    P[n + 3] = {c - R, c - R, c + R};

    std::vector<int32_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<uint64_t> key(static_cast<size_t>(n));
    for (int32_t i = 0; i < n; ++i)
        key[i] = spread_bits(static_cast<uint64_t>(P[i][0])) | spread_bits(static_cast<uint64_t>(P[i][1])) << 1 |
                 spread_bits(static_cast<uint64_t>(P[i][2])) << 2;
    std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) { return key[a] != key[b] ? key[a] < key[b] : a < b; });
    for (size_t i = 1; i < order.size(); ++i)
        if (P[order[i]] == P[order[i - 1]]) throw std::invalid_argument("Delaunay3 input contains duplicate points");

    std::vector<Tet> T;
    std::vector<int32_t> free_list;
    std::vector<uint32_t> mark;
    T.reserve(static_cast<size_t>(n) * 7 + 16);

    auto orient = [&](const std::array<int32_t, 4> &v) { return orient3d(P[v[0]], P[v[1]], P[v[2]], P[v[3]]); };
    {
        Tet t0;
        t0.v = {n, n + 1, n + 2, n + 3};
        if (orient(t0.v) < 0) std::swap(t0.v[0], t0.v[1]);
        t0.n = {-1, -1, -1, -1};
        T.push_back(t0);
        mark.push_back(0);
    }

    // Perturbed in-sphere test: the point with the lowest index carries the
    // largest lift perturbation, so its cofactor decides a zero determinant.
    auto in_conflict = [&](const Tet &t, int32_t p) {
        const i128 D = insphere_det(P[t.v[0]], P[t.v[1]], P[t.v[2]], P[t.v[3]], P[p]);
        if (D != 0) return D > 0;
        const int32_t ids[5] = {t.v[0], t.v[1], t.v[2], t.v[3], p};
        int rows[5] = {0, 1, 2, 3, 4};
        std::sort(rows, rows + 5, [&](int a, int b) { return ids[a] < ids[b]; });
        for (int r : rows) {
            const IPoint *q[4];
            int m = 0;
            for (int k = 0; k < 5; ++k)
                if (k != r) q[m++] = &P[ids[k]];
            const int o = orient3d(*q[0], *q[1], *q[2], *q[3]);
            if (o == 0) continue;
            const int sign = (r % 2 == 1) ? 1 : -1; // (-1)^(r+3)
            return sign * o > 0;
        }
        throw std::logic_error("Delaunay3: unresolved degenerate in-sphere test");
    };

    struct Boundary {
        std::array<int32_t, 4> v;
        int face;
        int32_t outside;
        int outside_face;
    };
    std::vector<int32_t> cavity;
    std::vector<Boundary> boundary;
    std::unordered_map<uint64_t, std::pair<int32_t, int>> edge_faces;
    uint32_t epoch = 0;
    uint64_t walk_state = 0x9e3779b97f4a7c15ull;
    int32_t last = 0;

    for (int32_t p : order) {
        // Visibility walk to a tetrahedron containing p.
        int32_t t = last;
        for (size_t steps = 0;; ++steps) {
            if (steps > 4 * T.size() + 64) throw std::logic_error("Delaunay3: point location did not terminate");
            walk_state = walk_state * 6364136223846793005ull + 1442695040888963407ull;
            const int k0 = static_cast<int>(walk_state >> 62);
            bool moved = false;
            for (int j = 0; j < 4; ++j) {
                const int i = (k0 + j) & 3;
                std::array<int32_t, 4> q = T[t].v;
                q[i] = p;
                if (orient(q) < 0) {
                    t = T[t].n[i];
                    moved = true;
                    break;
                }
            }
            if (!moved) break;
        }

        // Conflict region by breadth-first search from the containing cell.
        epoch += 2;
        const uint32_t IN = epoch, OUT = epoch + 1;
        cavity.clear();
        boundary.clear();
        cavity.push_back(t);
        mark[t] = IN;
        for (size_t qi = 0; qi < cavity.size(); ++qi) {
            const int32_t ct = cavity[qi];
            for (int i = 0; i < 4; ++i) {
                const int32_t nb = T[ct].n[i];
                if (nb >= 0 && mark[nb] == IN) continue;
                if (nb >= 0 && mark[nb] != OUT) {
                    if (in_conflict(T[nb], p)) {
                        mark[nb] = IN;
                        cavity.push_back(nb);
                        continue;
                    }
                    mark[nb] = OUT;
                }
                Boundary b{T[ct].v, i, nb, -1};
                if (nb >= 0)
                    for (int j = 0; j < 4; ++j)
                        if (T[nb].n[j] == ct) b.outside_face = j;
                boundary.push_back(b);
            }
        }
        for (int32_t ct : cavity) {
            T[ct].v = {-1, -1, -1, -1};
            free_list.push_back(ct);
        }

        edge_faces.clear();
        for (const Boundary &b : boundary) {
            int32_t nt;
            if (!free_list.empty()) {
                nt = free_list.back();
                free_list.pop_back();
            } else {
                nt = static_cast<int32_t>(T.size());
                T.emplace_back();
                mark.push_back(0);
            }
            Tet &tt = T[nt];
            tt.v = b.v;
            tt.v[b.face] = p;
            tt.n = {-1, -1, -1, -1};
            tt.n[b.face] = b.outside;
            if (orient(tt.v) <= 0) throw std::logic_error("Delaunay3: cavity is not star-shaped");
            if (b.outside >= 0) T[b.outside].n[b.outside_face] = nt;
            for (int j = 0; j < 4; ++j) {
                if (j == b.face) continue;
                int32_t e0 = -1, e1 = -1;
                for (int k = 0; k < 4; ++k) {
                    if (k == j || k == b.face) continue;
                    (e0 < 0 ? e0 : e1) = tt.v[k];
                }
                if (e0 > e1) std::swap(e0, e1);
                const uint64_t ek = static_cast<uint64_t>(e0) << 32 | static_cast<uint32_t>(e1);
                auto it = edge_faces.find(ek);
                if (it == edge_faces.end()) {
                    edge_faces.emplace(ek, std::make_pair(nt, j));
                } else {
                    tt.n[j] = it->second.first;
                    T[it->second.first].n[it->second.second] = nt;
                    edge_faces.erase(it);
                }
            }
            last = nt;
        }
    }

    std::vector<int32_t> remap(T.size(), -1);
    for (size_t i = 0; i < T.size(); ++i) {
        const auto &v = T[i].v;
        if (v[0] < 0) continue;
        if (v[0] >= n || v[1] >= n || v[2] >= n || v[3] >= n) continue;
        remap[i] = static_cast<int32_t>(out_.size());
        out_.push_back(T[i]);
    }
    for (Tet &t : out_)
        for (auto &nb : t.n) nb = nb >= 0 ? remap[nb] : -1;
    if (out_.empty()) throw std::invalid_argument("Delaunay3: points are coplanar");
}

} // namespace isomtl::geom
