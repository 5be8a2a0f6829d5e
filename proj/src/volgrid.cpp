#include "isomtl/volgrid.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace isomtl {

Grid3::Grid3(Index3 d, Vec3 s, Vec3 o) : dims(d), spacing(s), origin(o) { validate(); }

void Grid3::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw std::invalid_argument("grid dims must be >= 1");
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
            throw std::invalid_argument("grid spacing must be positive and finite");
        if (!std::isfinite(origin[a])) throw std::invalid_argument("grid origin must be finite");
    }
    if (slice_axis < 0 || slice_axis > 2) throw std::invalid_argument("grid needs exactly one slice axis");
}

bool same_geometry(const Grid3 &a, const Grid3 &b, double tol) {
    if (a.dims != b.dims || a.slice_axis != b.slice_axis) return false;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(a.spacing[i] - b.spacing[i]) > tol) return false;
        if (std::abs(a.origin[i] - b.origin[i]) > tol) return false;
    }
    return true;
}

ScalarVolume::ScalarVolume(Grid3 g, double fill)
    : grid(g), values(static_cast<size_t>(g.voxel_count()), fill) {
    grid.validate();
}

ScalarVolume::ScalarVolume(Grid3 g, std::vector<double> v) : grid(g), values(std::move(v)) { validate(); }

void ScalarVolume::validate() const {
    grid.validate();
    if (values.size() != static_cast<size_t>(grid.voxel_count()))
        throw std::invalid_argument("scalar volume size does not match grid");
    for (double v : values)
        if (!std::isfinite(v)) throw std::invalid_argument("scalar volume contains non-finite values");
}

LabelVolume::LabelVolume(Grid3 g, LabelTable table)
    : grid(g), labels(static_cast<size_t>(g.voxel_count()), 0), label_table(std::move(table)) {
    label_table.try_emplace(0, "background");
    grid.validate();
}

LabelVolume::LabelVolume(Grid3 g, std::vector<LabelId> l, LabelTable table)
    : grid(g), labels(std::move(l)), label_table(std::move(table)) {
    label_table.try_emplace(0, "background");
    validate();
}

void LabelVolume::validate() const {
    grid.validate();
    if (labels.size() != static_cast<size_t>(grid.voxel_count()))
        throw std::invalid_argument("label volume size does not match grid");
    std::vector<bool> seen(65536, false);
    for (LabelId l : labels) seen[l] = true;
    for (size_t id = 0; id < seen.size(); ++id)
        if (seen[id] && !label_table.count(static_cast<int>(id)))
            throw std::invalid_argument("label " + std::to_string(id) + " missing from label table");
}

OneHotVolume::OneHotVolume(Grid3 g, std::vector<int> ch)
    : grid(g), channels(std::move(ch)), values(channels.size() * static_cast<size_t>(g.voxel_count()), 0.0f) {
    grid.validate();
}

void OneHotVolume::validate() const {
    grid.validate();
    if (values.size() != channels.size() * static_cast<size_t>(grid.voxel_count()))
        throw std::invalid_argument("one-hot volume size does not match grid");
    for (float v : values)
        if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("one-hot values must lie in [0,1]");
}

std::span<float> OneHotVolume::channel(size_t c) {
    const auto n = static_cast<size_t>(grid.voxel_count());
    return {values.data() + c * n, n};
}

std::span<const float> OneHotVolume::channel(size_t c) const {
    const auto n = static_cast<size_t>(grid.voxel_count());
    return {values.data() + c * n, n};
}

LabelTable default_mtl_labels() {
    return {{0, "background"}, {1, "CA1-3"}, {2, "DG"}, {3, "SUB"},
            {4, "ERC"},        {5, "BA35"},  {6, "BA36"}, {7, "PHC"}};
}

int label_id(const LabelTable &table, const std::string &name) {
    for (const auto &[id, n] : table)
        if (n == name) return id;
    throw std::invalid_argument("label '" + name + "' not in label table");
}

void require_canonical(const Grid3 &g, const char *where) {
    if (g.slice_axis != 2)
        throw std::invalid_argument(std::string(where) + ": volume is not in canonical axis order");
}

Grid3 refine_axis(const Grid3 &source, int axis, double new_spacing) {
    source.validate();
    if (!(new_spacing > 0.0)) throw std::invalid_argument("target spacing must be positive");
    Grid3 out = source;
    const double extent = static_cast<double>(source.dims[axis]) * source.spacing[axis];
    const double ratio = extent / new_spacing;
    const auto n = static_cast<int64_t>(std::ceil(ratio - 1e-9 * std::max(1.0, ratio)));
    out.dims[axis] = std::max<int64_t>(1, n);
    out.spacing[axis] = new_spacing;
    const double covered = static_cast<double>(out.dims[axis]) * new_spacing;
    out.origin[axis] = source.extent_lo(axis) + 0.5 * (extent - covered) + 0.5 * new_spacing;
    return out;
}

Grid3 hyperres_grid(const Grid3 &source, HyperresMode mode, double fixed_slice_mm) {
    source.validate();
    const int s = source.slice_axis;
    if (mode == HyperresMode::InferFixed) {
        if (!(fixed_slice_mm > 0.0)) throw std::invalid_argument("fixed slice spacing must be positive");
        return refine_axis(source, s, fixed_slice_mm);
    }
    return refine_axis(source, s, source.spacing[s] / 5.0);
}

namespace {

struct LinearTap {
    int64_t i0, i1;
    double w1;
};

std::vector<LinearTap> linear_taps(const Grid3 &src, const Grid3 &dst, int a) {
    std::vector<LinearTap> taps(static_cast<size_t>(dst.dims[a]));
    const double n = static_cast<double>(src.dims[a]);
    for (int64_t i = 0; i < dst.dims[a]; ++i) {
        const double w = dst.origin[a] + static_cast<double>(i) * dst.spacing[a];
        double c = (w - src.origin[a]) / src.spacing[a];
        c = std::clamp(c, 0.0, n - 1.0);
        if (std::abs(c - std::round(c)) < 1e-9) c = std::round(c);
        auto i0 = static_cast<int64_t>(std::floor(c));
        i0 = std::min<int64_t>(i0, src.dims[a] - 1);
        const int64_t i1 = std::min<int64_t>(i0 + 1, src.dims[a] - 1);
        taps[static_cast<size_t>(i)] = {i0, i1, c - static_cast<double>(i0)};
    }
    return taps;
}

void require_overlap(const Grid3 &a, const Grid3 &b) {
    for (int k = 0; k < 3; ++k) {
        const double lo = std::max(a.extent_lo(k), b.extent_lo(k));
        const double hi = std::min(a.extent_hi(k), b.extent_hi(k));
        if (!(hi > lo)) throw std::invalid_argument("source and target grids do not overlap");
    }
}

} // namespace

ScalarVolume resample_linear(const ScalarVolume &vol, const Grid3 &target) {
    target.validate();
    require_overlap(vol.grid, target);
    const auto tx = linear_taps(vol.grid, target, 0);
    const auto ty = linear_taps(vol.grid, target, 1);
    const auto tz = linear_taps(vol.grid, target, 2);
    ScalarVolume out(target);
    const Grid3 &g = vol.grid;
    for (int64_t z = 0; z < target.dims[2]; ++z) {
        const auto &cz = tz[static_cast<size_t>(z)];
        for (int64_t y = 0; y < target.dims[1]; ++y) {
            const auto &cy = ty[static_cast<size_t>(y)];
            for (int64_t x = 0; x < target.dims[0]; ++x) {
                const auto &cx = tx[static_cast<size_t>(x)];
                auto v = [&](int64_t i, int64_t j, int64_t k) { return vol.values[g.linear(i, j, k)]; };
                const double c00 = v(cx.i0, cy.i0, cz.i0) * (1 - cx.w1) + v(cx.i1, cy.i0, cz.i0) * cx.w1;
                const double c10 = v(cx.i0, cy.i1, cz.i0) * (1 - cx.w1) + v(cx.i1, cy.i1, cz.i0) * cx.w1;
                const double c01 = v(cx.i0, cy.i0, cz.i1) * (1 - cx.w1) + v(cx.i1, cy.i0, cz.i1) * cx.w1;
                const double c11 = v(cx.i0, cy.i1, cz.i1) * (1 - cx.w1) + v(cx.i1, cy.i1, cz.i1) * cx.w1;
                const double c0 = c00 * (1 - cy.w1) + c10 * cy.w1;
                const double c1 = c01 * (1 - cy.w1) + c11 * cy.w1;
                out.at(x, y, z) = c0 * (1 - cz.w1) + c1 * cz.w1;
            }
        }
    }
    return out;
}

LabelVolume resample_nearest(const LabelVolume &vol, const Grid3 &target) {
    target.validate();
    require_overlap(vol.grid, target);
    std::array<std::vector<int64_t>, 3> idx;
    for (int a = 0; a < 3; ++a) {
        idx[a].resize(static_cast<size_t>(target.dims[a]));
        for (int64_t i = 0; i < target.dims[a]; ++i) {
            const double w = target.origin[a] + static_cast<double>(i) * target.spacing[a];
            const double c = (w - vol.grid.origin[a]) / vol.grid.spacing[a];
            idx[a][static_cast<size_t>(i)] = std::clamp<int64_t>(std::llround(c), 0, vol.grid.dims[a] - 1);
        }
    }
    LabelVolume out(target, vol.label_table);
    for (int64_t z = 0; z < target.dims[2]; ++z)
        for (int64_t y = 0; y < target.dims[1]; ++y)
            for (int64_t x = 0; x < target.dims[0]; ++x)
                out.at(x, y, z) = vol.at(idx[0][static_cast<size_t>(x)], idx[1][static_cast<size_t>(y)],
                                         idx[2][static_cast<size_t>(z)]);
    return out;
}

Grid3 coarsen_slice_grid(const Grid3 &fine, int factor) {
    require_canonical(fine, "block average");
    if (factor < 1) throw std::invalid_argument("downsampling factor must be >= 1");
    if (fine.dims[2] % factor != 0)
        throw std::invalid_argument("slice count " + std::to_string(fine.dims[2]) + " not divisible by " +
                                    std::to_string(factor));
    Grid3 g = fine;
    g.dims[2] = fine.dims[2] / factor;
    g.spacing[2] = fine.spacing[2] * factor;
    g.origin[2] = fine.origin[2] + 0.5 * (factor - 1) * fine.spacing[2];
    return g;
}

ScalarVolume block_average_downsample_slice(const ScalarVolume &vol, int factor) {
    const Grid3 g = coarsen_slice_grid(vol.grid, factor);
    ScalarVolume out(g);
    const size_t plane = static_cast<size_t>(g.dims[0] * g.dims[1]);
    for (int64_t z = 0; z < g.dims[2]; ++z) {
        double *dst = out.values.data() + static_cast<size_t>(z) * plane;
        for (int k = 0; k < factor; ++k) {
            const double *src = vol.values.data() + static_cast<size_t>(z * factor + k) * plane;
            for (size_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
        for (size_t i = 0; i < plane; ++i) dst[i] /= factor;
    }
    return out;
}

OneHotVolume block_average_downsample_slice(const OneHotVolume &vol, int factor) {
    const Grid3 g = coarsen_slice_grid(vol.grid, factor);
    OneHotVolume out(g, vol.channels);
    const size_t plane = static_cast<size_t>(g.dims[0] * g.dims[1]);
    std::vector<double> acc(plane);
    for (size_t c = 0; c < vol.channel_count(); ++c) {
        auto src = vol.channel(c);
        auto dst = out.channel(c);
        for (int64_t z = 0; z < g.dims[2]; ++z) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int k = 0; k < factor; ++k) {
                const float *s = src.data() + static_cast<size_t>(z * factor + k) * plane;
                for (size_t i = 0; i < plane; ++i) acc[i] += s[i];
            }
            float *d = dst.data() + static_cast<size_t>(z) * plane;
            for (size_t i = 0; i < plane; ++i) d[i] = static_cast<float>(acc[i] / factor);
        }
    }
    return out;
}

LabelVolume block_majority_downsample_slice(const LabelVolume &vol, int factor) {
    const Grid3 g = coarsen_slice_grid(vol.grid, factor);
    LabelVolume out(g, vol.label_table);
    const size_t plane = static_cast<size_t>(g.dims[0] * g.dims[1]);
    std::vector<std::pair<LabelId, int>> counts;
    for (int64_t z = 0; z < g.dims[2]; ++z) {
        for (size_t i = 0; i < plane; ++i) {
            counts.clear();
            for (int k = 0; k < factor; ++k) {
                const LabelId l = vol.labels[static_cast<size_t>(z * factor + k) * plane + i];
                auto it = std::find_if(counts.begin(), counts.end(), [l](auto &p) { return p.first == l; });
                if (it == counts.end()) counts.emplace_back(l, 1);
                else ++it->second;
            }
            int best = 0, nbest = 0;
            LabelId winner = 0;
            for (auto &[l, c] : counts) {
                if (c > best) { best = c; winner = l; nbest = 1; }
                else if (c == best) ++nbest;
            }
            out.labels[static_cast<size_t>(z) * plane + i] = nbest == 1 ? winner : 0;
        }
    }
    return out;
}

OneHotVolume one_hot_encode(const LabelVolume &labels, std::span<const int> channel_ids) {
    for (int id : channel_ids)
        if (!labels.label_table.count(id))
            throw std::invalid_argument("one-hot channel id " + std::to_string(id) + " not in label table");
    OneHotVolume out(labels.grid, std::vector<int>(channel_ids.begin(), channel_ids.end()));
    for (size_t c = 0; c < channel_ids.size(); ++c) {
        auto ch = out.channel(c);
        const auto id = static_cast<LabelId>(channel_ids[c]);
        for (size_t i = 0; i < labels.labels.size(); ++i) ch[i] = labels.labels[i] == id ? 1.0f : 0.0f;
    }
    return out;
}

LabelVolume argmax_decode(const OneHotVolume &oh, double bg_threshold, const LabelTable &table) {
    LabelTable t = table;
    if (t.empty()) {
        t[0] = "background";
        for (int id : oh.channels) t.try_emplace(id, "label_" + std::to_string(id));
    }
    LabelVolume out(oh.grid, t);
    const auto n = static_cast<size_t>(oh.grid.voxel_count());
    const size_t nc = oh.channel_count();
    for (size_t i = 0; i < n; ++i) {
        float best = -1.0f;
        size_t arg = 0;
        for (size_t c = 0; c < nc; ++c) {
            const float v = oh.values[c * n + i];
            if (v > best) { best = v; arg = c; }
        }
        if (nc > 0 && best >= bg_threshold) out.labels[i] = static_cast<LabelId>(oh.channels[arg]);
    }
    return out;
}

namespace {

template <typename T>
std::vector<T> permute_to_canonical(const std::vector<T> &src, const Grid3 &g, const std::array<int, 3> &perm,
                                    Grid3 &out) {
    // out axis k takes source axis perm[k].
    out = g;
    for (int k = 0; k < 3; ++k) {
        out.dims[k] = g.dims[perm[k]];
        out.spacing[k] = g.spacing[perm[k]];
        out.origin[k] = g.origin[perm[k]];
        out.axis_codes[k] = g.axis_codes[perm[k]];
    }
    out.slice_axis = 2;
    std::vector<T> dst(src.size());
    Index3 i{};
    for (i[2] = 0; i[2] < g.dims[2]; ++i[2])
        for (i[1] = 0; i[1] < g.dims[1]; ++i[1])
            for (i[0] = 0; i[0] < g.dims[0]; ++i[0])
                dst[out.linear(i[perm[0]], i[perm[1]], i[perm[2]])] = src[g.linear(i[0], i[1], i[2])];
    return dst;
}

std::array<int, 3> canonical_perm(int slice_axis) {
    std::array<int, 3> p{};
    int k = 0;
    for (int a = 0; a < 3; ++a)
        if (a != slice_axis) p[k++] = a;
    p[2] = slice_axis;
    return p;
}

} // namespace

ScalarVolume canonicalize(const ScalarVolume &vol) {
    if (vol.grid.slice_axis == 2) return vol;
    ScalarVolume out;
    out.values = permute_to_canonical(vol.values, vol.grid, canonical_perm(vol.grid.slice_axis), out.grid);
    return out;
}

LabelVolume canonicalize(const LabelVolume &vol) {
    if (vol.grid.slice_axis == 2) return vol;
    LabelVolume out;
    out.label_table = vol.label_table;
    out.labels = permute_to_canonical(vol.labels, vol.grid, canonical_perm(vol.grid.slice_axis), out.grid);
    return out;
}

} // namespace isomtl

namespace isomtl {

double label_dice(const LabelVolume &a, const LabelVolume &b, int label) {
    if (a.grid.dims != b.grid.dims) throw std::invalid_argument("dice: grid dims differ");
    size_t na = 0, nb = 0, both = 0;
    for (size_t i = 0; i < a.labels.size(); ++i) {
        const bool x = a.labels[i] == label, y = b.labels[i] == label;
        na += x;
        nb += y;
        both += x && y;
    }
    return na + nb == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double mean_dice(const LabelVolume &a, const LabelVolume &b, std::span<const int> ids) {
    if (ids.empty()) throw std::invalid_argument("dice: no labels");
    double s = 0;
    for (int id : ids) s += label_dice(a, b, id);
    return s / static_cast<double>(ids.size());
}

} // namespace isomtl
