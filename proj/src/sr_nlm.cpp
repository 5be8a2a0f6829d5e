#include "isomtl/sr_nlm.h"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <stdexcept>

namespace isomtl {

void NlmParams::validate() const {
    if (patch_radius < 1 || search_radius < 1) throw std::invalid_argument("NLM radii must be >= 1");
    if (max_iters < 1) throw std::invalid_argument("NLM max_iters must be >= 1");
    if (!(tol > 0.0)) throw std::invalid_argument("NLM tol must be positive");
    if (!(h_scale > 0.0) && !(smoothing_h > 0.0)) throw std::invalid_argument("NLM bandwidth must be positive");
}

double estimate_noise_sigma(const ScalarVolume &vol) {
    const Grid3 &g = vol.grid;
    const auto [nx, ny, nz] = g.dims;
    std::vector<double> eps;
    eps.reserve(vol.values.size());
    const double k = std::sqrt(6.0 / 7.0);
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                double sum = 0;
                int n = 0;
                auto add = [&](int64_t i, int64_t j, int64_t l) {
                    if (i < 0 || j < 0 || l < 0 || i >= nx || j >= ny || l >= nz) return;
                    sum += vol.at(i, j, l);
                    ++n;
                };
                add(x - 1, y, z); add(x + 1, y, z);
                add(x, y - 1, z); add(x, y + 1, z);
                add(x, y, z - 1); add(x, y, z + 1);
                if (n == 6) eps.push_back(k * (vol.at(x, y, z) - sum / 6.0));
            }
    if (eps.empty()) return 0.0;
    auto median = [](std::vector<double> v) {
        auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
        std::nth_element(v.begin(), mid, v.end());
        return *mid;
    };
    const double m = median(eps);
    for (double &e : eps) e = std::abs(e - m);
    return 1.4826 * median(eps);
}

namespace {

// Squared difference between a plane and its offset partner, blurred in-plane.
struct PlaneDistance {
    const float *img;
    int64_t nx, ny, nz;
    int dx, dy, dz;
    const std::vector<float> &taps;
    std::vector<float> diff, blur_x;

    PlaneDistance(const float *image, const Index3 &d, int ox, int oy, int oz, const std::vector<float> &t)
        : img(image), nx(d[0]), ny(d[1]), nz(d[2]), dx(ox), dy(oy), dz(oz), taps(t),
          diff(static_cast<size_t>(d[0] * d[1])), blur_x(static_cast<size_t>(d[0] * d[1])) {}

    void operator()(int64_t z, float *out) {
        const int r = static_cast<int>(taps.size() / 2);
        const int64_t zz = std::min<int64_t>(z + dz, nz - 1);
        const int64_t xlo = std::max(0, -dx), xhi = nx - std::max(0, dx);
        for (int64_t y = 0; y < ny; ++y) {
            const int64_t yy = std::clamp<int64_t>(y + dy, 0, ny - 1);
            const float *a = img + (z * ny + y) * nx;
            const float *b = img + (zz * ny + yy) * nx;
            float *d = diff.data() + y * nx;
            for (int64_t x = 0; x < xlo; ++x) { const float t = a[x] - b[0]; d[x] = t * t; }
            for (int64_t x = xlo; x < xhi; ++x) { const float t = a[x] - b[x + dx]; d[x] = t * t; }
            for (int64_t x = std::max(xlo, xhi); x < nx; ++x) { const float t = a[x] - b[nx - 1]; d[x] = t * t; }
        }
        for (int64_t y = 0; y < ny; ++y) {
            const float *d = diff.data() + y * nx;
            float *o = blur_x.data() + y * nx;
            for (int64_t x = 0; x < nx; ++x) o[x] = 0;
            for (int k = -r; k <= r; ++k) {
                const float w = taps[static_cast<size_t>(k + r)];
                const int64_t lo = std::max<int64_t>(0, -k), hi = std::min<int64_t>(nx, nx - k);
                for (int64_t x = 0; x < lo; ++x) o[x] += w * d[0];
                for (int64_t x = lo; x < hi; ++x) o[x] += w * d[x + k];
                for (int64_t x = std::max(lo, hi); x < nx; ++x) o[x] += w * d[nx - 1];
            }
        }
        for (int64_t y = 0; y < ny; ++y) {
            float *o = out + y * nx;
            for (int64_t x = 0; x < nx; ++x) o[x] = 0;
            for (int k = -r; k <= r; ++k) {
                const float w = taps[static_cast<size_t>(k + r)];
                const float *s = blur_x.data() + std::clamp<int64_t>(y + k, 0, ny - 1) * nx;
                for (int64_t x = 0; x < nx; ++x) o[x] += w * s[x];
            }
        }
    }
};

} // namespace

ScalarVolume nlm_filter(const ScalarVolume &vol, int patch_radius, int search_radius, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("NLM bandwidth must be positive");
    const Grid3 &g = vol.grid;
    const auto [nx, ny, nz] = g.dims;
    const size_t n = vol.values.size();
    const size_t plane = static_cast<size_t>(nx * ny);
    std::vector<float> img(vol.values.begin(), vol.values.end());
    std::vector<float> acc(n, 0.0f), wsum(n, 0.0f), wmax(n, 0.0f);

    const int r = patch_radius;
    std::vector<float> taps(static_cast<size_t>(2 * r + 1));
    float tsum = 0;
    for (int k = -r; k <= r; ++k) {
        const float w = std::exp(-0.5f * static_cast<float>(k * k) / static_cast<float>(r * r));
        taps[static_cast<size_t>(k + r)] = w;
        tsum += w;
    }
    for (float &t : taps) t /= tsum;
    const float inv_h2 = static_cast<float>(1.0 / (h * h));
    const int sr = search_radius;
    const int ring_size = 2 * r + 1;
    std::vector<float> ring(static_cast<size_t>(ring_size) * plane), dist(plane);

    for (int dz = 0; dz <= sr; ++dz)
        for (int dy = -sr; dy <= sr; ++dy)
            for (int dx = -sr; dx <= sr; ++dx) {
                // Half of the window; the symmetric partner reuses the same weight.
                if (dz == 0 && (dy < 0 || (dy == 0 && dx <= 0))) continue;
                if (dz >= nz || std::abs(dy) >= ny || std::abs(dx) >= nx) continue;
                PlaneDistance planes(img.data(), g.dims, dx, dy, dz, taps);
                auto slot = [&](int64_t z) { return ring.data() + static_cast<size_t>(z % ring_size) * plane; };
                int64_t computed = -1;
                const int64_t z1 = nz - dz, y0 = std::max(0, -dy), y1 = ny - std::max(0, dy);
                const int64_t x0 = std::max(0, -dx), x1 = nx - std::max(0, dx);
                const int64_t off = (static_cast<int64_t>(dz) * ny + dy) * nx + dx;
                for (int64_t z = 0; z < z1; ++z) {
                    const int64_t need = std::min<int64_t>(z + r, nz - 1);
                    while (computed < need) {
                        ++computed;
                        planes(computed, slot(computed));
                    }
                    std::fill(dist.begin(), dist.end(), 0.0f);
                    for (int k = -r; k <= r; ++k) {
                        const float w = taps[static_cast<size_t>(k + r)];
                        const float *s = slot(std::clamp<int64_t>(z + k, 0, nz - 1));
                        for (size_t i = 0; i < plane; ++i) dist[i] += w * s[i];
                    }
                    for (int64_t y = y0; y < y1; ++y) {
                        const int64_t row = (z * ny + y) * nx;
                        const float *s = dist.data() + y * nx;
                        const float *ia = img.data() + row;
                        const float *ib = img.data() + row + off;
                        float *aa = acc.data() + row, *ab = acc.data() + row + off;
                        float *wa = wsum.data() + row, *wb = wsum.data() + row + off;
                        float *ma = wmax.data() + row, *mb = wmax.data() + row + off;
                        for (int64_t x = x0; x < x1; ++x) {
                            const float w = std::exp(-s[x] * inv_h2);
                            aa[x] += w * ib[x];
                            wa[x] += w;
                            ma[x] = std::max(ma[x], w);
                            ab[x] += w * ia[x];
                            wb[x] += w;
                            mb[x] = std::max(mb[x], w);
                        }
                    }
                }
            }

    ScalarVolume out(g);
    for (size_t i = 0; i < n; ++i) {
        // The centre patch gets the largest weight seen among its neighbours.
        const double self = wmax[i];
        const double den = static_cast<double>(wsum[i]) + self;
        out.values[i] = den > 0 ? (static_cast<double>(acc[i]) + self * img[i]) / den : vol.values[i];
    }
    return out;
}

ScalarVolume block_average_axis(const ScalarVolume &vol, int axis, int factor) {
    const Grid3 &g = vol.grid;
    if (factor < 1 || g.dims[axis] % factor != 0)
        throw std::invalid_argument("axis length not divisible by block factor");
    Grid3 cg = g;
    cg.dims[axis] = g.dims[axis] / factor;
    cg.spacing[axis] = g.spacing[axis] * factor;
    cg.origin[axis] = g.origin[axis] + 0.5 * (factor - 1) * g.spacing[axis];
    ScalarVolume out(cg);
    Index3 i{};
    for (i[2] = 0; i[2] < g.dims[2]; ++i[2])
        for (i[1] = 0; i[1] < g.dims[1]; ++i[1])
            for (i[0] = 0; i[0] < g.dims[0]; ++i[0]) {
                Index3 c = i;
                c[axis] /= factor;
                out.values[cg.linear(c[0], c[1], c[2])] += vol.values[g.linear(i[0], i[1], i[2])];
            }
    for (double &v : out.values) v /= factor;
    return out;
}

double project_block_consistency(ScalarVolume &fine, const ScalarVolume &coarse, int axis, int factor) {
    const ScalarVolume mean = block_average_axis(fine, axis, factor);
    if (mean.grid.dims != coarse.grid.dims) throw std::invalid_argument("coarse grid does not match fine blocks");
    std::vector<double> resid(coarse.values.size());
    double corr = 0, mag = 0;
    for (size_t i = 0; i < resid.size(); ++i) {
        resid[i] = coarse.values[i] - mean.values[i];
        corr += std::abs(resid[i]);
        mag += std::abs(coarse.values[i]);
    }
    const Grid3 &g = fine.grid;
    const Grid3 &cg = coarse.grid;
    Index3 i{};
    for (i[2] = 0; i[2] < g.dims[2]; ++i[2])
        for (i[1] = 0; i[1] < g.dims[1]; ++i[1])
            for (i[0] = 0; i[0] < g.dims[0]; ++i[0]) {
                Index3 c = i;
                c[axis] /= factor;
                fine.values[g.linear(i[0], i[1], i[2])] += resid[cg.linear(c[0], c[1], c[2])];
            }
    return mag > 0 ? corr / mag : corr / static_cast<double>(std::max<size_t>(1, resid.size()));
}

ScalarVolume nlm_upsample_axis(const ScalarVolume &vol, int axis, int factor, const NlmParams &params,
                               NlmStats *stats) {
    params.validate();
    if (factor < 2) throw std::invalid_argument("NLM upsampling factor must be >= 2");
    if (axis < 0 || axis > 2) throw std::invalid_argument("bad axis");
    vol.validate();
    const Grid3 fine_grid = refine_axis(vol.grid, axis, vol.grid.spacing[axis] / factor);
    ScalarVolume x = resample_linear(vol, fine_grid);
    double h = params.smoothing_h;
    if (!(h > 0.0)) {
        h = params.h_scale * estimate_noise_sigma(vol);
        if (!(h > 0.0)) {
            // Noise-free input: fall back to a bandwidth tied to the dynamic range.
            const auto [mn, mx] = std::minmax_element(vol.values.begin(), vol.values.end());
            h = 1e-3 * std::max(1e-12, *mx - *mn);
        }
    }
    if (stats) {
        stats->bandwidth = h;
        stats->corrections.clear();
    }
    for (int it = 0; it < params.max_iters; ++it) {
        x = nlm_filter(x, params.patch_radius, params.search_radius, h);
        const double corr = project_block_consistency(x, vol, axis, factor);
        if (stats) stats->corrections.push_back(corr);
        if (corr < params.tol) break;
    }
    return x;
}

ScalarVolume nlm_upsample_slice(const ScalarVolume &vol, int factor, const NlmParams &params, NlmStats *stats) {
    require_canonical(vol.grid, "nlm_upsample_slice");
    return nlm_upsample_axis(vol, vol.grid.slice_axis, factor, params, stats);
}

Index3 two_step_factors(const Grid3 &source, const Grid3 &target) {
    Index3 f{};
    const int saved = std::fegetround();
    std::fesetround(FE_TONEAREST);
    for (int a = 0; a < 3; ++a) {
        const double r = source.spacing[a] / target.spacing[a];
        f[a] = std::max<int64_t>(1, static_cast<int64_t>(std::nearbyint(r)));
    }
    std::fesetround(saved);
    return f;
}

ScalarVolume two_step_upsample(const ScalarVolume &vol, const Grid3 &target, const NlmParams &params) {
    target.validate();
    const Index3 f = two_step_factors(vol.grid, target);
    ScalarVolume cur = vol;
    const int s = vol.grid.slice_axis;
    const std::array<int, 3> order{s, s == 0 ? 1 : 0, s == 2 ? 1 : 2};
    for (int a : order)
        if (f[a] >= 2) cur = nlm_upsample_axis(cur, a, static_cast<int>(f[a]), params);
    if (same_geometry(cur.grid, target, 1e-9)) return cur;
    return resample_linear(cur, target);
}

} // namespace isomtl
