#include "isomtl/phantoms.h"

#include "isomtl/nifti_io.h"
#include "isomtl/table_io.h"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace isomtl {

using nlohmann::json;

PhantomKind parse_phantom_kind(const std::string &s) {
    if (s == "slab") return PhantomKind::Slab;
    if (s == "spherical_shell" || s == "shell") return PhantomKind::SphericalShell;
    if (s == "folded_sheet") return PhantomKind::FoldedSheet;
    throw std::invalid_argument("unknown phantom kind '" + s + "'");
}

std::string to_string(PhantomKind k) {
    switch (k) {
    case PhantomKind::Slab: return "slab";
    case PhantomKind::SphericalShell: return "spherical_shell";
    case PhantomKind::FoldedSheet: return "folded_sheet";
    }
    return "?";
}

ContrastTable t2_contrast() { return {{0, 30}, {1, 100}, {2, 100}, {3, 80}, {4, 80}, {5, 60}, {6, 60}, {7, 45}}; }
ContrastTable t1_contrast() { return {{0, 20}, {1, 70}, {2, 40}, {3, 70}, {4, 40}, {5, 70}, {6, 40}, {7, 70}}; }

void PhantomSpec::validate() const {
    if (!(spacing_mm > 0)) throw std::invalid_argument("phantom: spacing must be positive");
    for (int a = 0; a < 3; ++a) {
        const double n = fov_mm[a] / spacing_mm;
        if (!(fov_mm[a] > 0) || std::abs(n - std::round(n)) > 1e-6)
            throw std::invalid_argument("phantom: field of view must be a whole number of voxels");
    }
    if (band_labels.empty() || band_labels.size() > 8 || band_labels.size() != band_thickness_mm.size())
        throw std::invalid_argument("phantom: need 1..8 bands with one thickness each");
    std::vector<int> sorted = band_labels;
    std::sort(sorted.begin(), sorted.end());
    if (sorted.front() <= 0 || std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw std::invalid_argument("phantom: band labels must be distinct and non-zero");
    for (double t : band_thickness_mm)
        if (!(t >= 2 * spacing_mm))
            throw std::invalid_argument("phantom: band thickness " + std::to_string(t) +
                                        " mm is below two voxels and not representable");
    const double tmax = *std::max_element(band_thickness_mm.begin(), band_thickness_mm.end());
    if (kind == PhantomKind::SphericalShell) {
        if (!(shell_radius_mm > tmax / 2)) throw std::invalid_argument("phantom: shell radius below half-thickness");
    } else {
        if (!(sheet_length_mm > 0) || !(sheet_width_mm > 0))
            throw std::invalid_argument("phantom: sheet extents must be positive");
        if (kind == PhantomKind::FoldedSheet && fold_amplitude_mm != 0) {
            if (!(fold_period_mm > 0)) throw std::invalid_argument("phantom: fold period must be positive");
            const double k = 2 * std::numbers::pi / fold_period_mm;
            // The mid-surface stays medial only while its curvature radius exceeds t/2.
            if (std::abs(fold_amplitude_mm) * k * k * tmax / 2 >= 0.9)
                throw std::invalid_argument("phantom: fold too tight for the band thickness");
        }
    }
    if (bias_amplitude < 0 || bias_amplitude >= 1) throw std::invalid_argument("phantom: bias amplitude in [0,1)");
}

Grid3 phantom_grid(const PhantomSpec &spec) {
    spec.validate();
    Index3 dims{};
    Vec3 origin{};
    for (int a = 0; a < 3; ++a) {
        dims[a] = static_cast<int64_t>(std::llround(spec.fov_mm[a] / spec.spacing_mm));
        origin[a] = -spec.fov_mm[a] / 2 + spec.spacing_mm / 2;
    }
    return Grid3(dims, {spec.spacing_mm, spec.spacing_mm, spec.spacing_mm}, origin);
}

namespace {

struct Frame {
    Vec3 u, v, w;
};

Frame sheet_frame(const PhantomSpec &s) {
    const double t = s.tilt_deg * std::numbers::pi / 180, p = s.azimuth_deg * std::numbers::pi / 180;
    auto rz = [&](Vec3 a) { return Vec3{std::cos(p) * a[0] - std::sin(p) * a[1], std::sin(p) * a[0] + std::cos(p) * a[1], a[2]}; };
    return {rz({0, std::cos(t), std::sin(t)}), rz({1, 0, 0}), rz({0, -std::sin(t), std::cos(t)})};
}

double dot(const Vec3 &a, const Vec3 &b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

// Distance from (u, w) to the curve {(s, A sin(k s + phase)) : |s| <= half}.
double curve_distance(double u, double w, double A, double k, double phase, double half) {
    if (A == 0) {
        const double du = std::max(0.0, std::abs(u) - half);
        return std::sqrt(du * du + w * w);
    }
    auto f = [&](double s) {
        const double dw = w - A * std::sin(k * s + phase);
        return (u - s) * (u - s) + dw * dw;
    };
    const double sc = std::clamp(u, -half, half);
    const double bound = std::sqrt(f(sc));
    const double lo = std::max(-half, u - bound), hi = std::min(half, u + bound);
    const double step = std::min(0.1, 2 * std::numbers::pi / k / 64);
    double best_s = sc, best = f(sc);
    const int n = std::max(1, static_cast<int>(std::ceil((hi - lo) / step)));
    for (int i = 0; i <= n; ++i) {
        const double s = lo + (hi - lo) * i / n;
        const double v = f(s);
        if (v < best) best = v, best_s = s;
    }
    // Golden-section refinement inside one sampling step on either side.
    double a = std::max(lo, best_s - step), b = std::min(hi, best_s + step);
    const double g = (std::sqrt(5.0) - 1) / 2;
    double c = b - g * (b - a), d = a + g * (b - a), fc = f(c), fd = f(d);
    for (int it = 0; it < 48 && b - a > 1e-12; ++it) {
        if (fc < fd) {
            b = d, d = c, fd = fc;
            c = b - g * (b - a), fc = f(c);
        } else {
            a = c, c = d, fc = fd;
            d = a + g * (b - a), fd = f(d);
        }
    }
    return std::sqrt(std::min({best, fc, fd}));
}

class Geometry {
  public:
    explicit Geometry(const PhantomSpec &s) : s_(s), frame_(sheet_frame(s)) {
        s.validate();
        hmax_ = *std::max_element(s.band_thickness_mm.begin(), s.band_thickness_mm.end()) / 2;
        amp_ = s.kind == PhantomKind::FoldedSheet ? s.fold_amplitude_mm : 0.0;
        k_ = 2 * std::numbers::pi / s.fold_period_mm;
    }

    LabelId label(const Vec3 &world) const {
        const Vec3 p{world[0] - s_.center_offset_mm[0], world[1] - s_.center_offset_mm[1],
                     world[2] - s_.center_offset_mm[2]};
        const size_t nb = s_.band_labels.size();
        if (s_.kind == PhantomKind::SphericalShell) {
            const double r = std::sqrt(dot(p, p));
            if (std::abs(r - s_.shell_radius_mm) > hmax_) return 0;
            const double phi = std::atan2(p[1], p[0]);
            const size_t b = std::min(nb - 1, static_cast<size_t>((phi + std::numbers::pi) / (2 * std::numbers::pi) * nb));
            return std::abs(r - s_.shell_radius_mm) <= s_.band_thickness_mm[b] / 2 ? static_cast<LabelId>(s_.band_labels[b]) : 0;
        }
        const double u = dot(p, frame_.u), v = dot(p, frame_.v), w = dot(p, frame_.w);
        const double half_w = s_.sheet_width_mm / 2;
        if (std::abs(w) > std::abs(amp_) + hmax_ || std::abs(v) > half_w + hmax_ ||
            std::abs(u) > s_.sheet_length_mm / 2 + hmax_)
            return 0;
        const double dc = curve_distance(u, w, amp_, k_, s_.fold_phase, s_.sheet_length_mm / 2);
        if (dc > hmax_) return 0;
        const double bw = s_.sheet_width_mm / static_cast<double>(nb);
        LabelId best = 0;
        double best_dv = 1e300;
        for (size_t b = 0; b < nb; ++b) {
            const double v0 = -half_w + bw * static_cast<double>(b), v1 = v0 + bw;
            const double dv = std::max({0.0, v0 - v, v - v1});
            const double h = s_.band_thickness_mm[b] / 2;
            if (dc * dc + dv * dv <= h * h && dv < best_dv) best_dv = dv, best = static_cast<LabelId>(s_.band_labels[b]);
        }
        return best;
    }

  private:
    const PhantomSpec &s_;
    Frame frame_;
    double hmax_ = 0, amp_ = 0, k_ = 1;
};

class BiasField {
  public:
    explicit BiasField(const PhantomSpec &s) : amp_(s.bias_amplitude) {
        std::mt19937_64 rng(s.bias_seed);
        std::normal_distribution<double> n(0, 1);
        std::uniform_real_distribution<double> ph(0, 2 * std::numbers::pi);
        for (auto &wave : waves_) {
            Vec3 d{n(rng), n(rng), n(rng)};
            const double len = std::sqrt(dot(d, d));
            for (double &c : d) c *= 2 * std::numbers::pi / (30.0 * len); // 30 mm wavelength
            wave = {d, ph(rng)};
        }
    }

    double at(const Vec3 &p) const {
        double s = 0;
        for (const auto &[d, phase] : waves_) s += std::sin(dot(d, p) + phase);
        return 1 + amp_ * s / 3;
    }

  private:
    double amp_;
    std::array<std::pair<Vec3, double>, 3> waves_{};
};

} // namespace

LabelVolume rasterize_labels(const PhantomSpec &spec, const Grid3 &grid) {
    const Geometry geo(spec);
    LabelVolume out(grid, default_mtl_labels());
    for (int id : spec.band_labels)
        if (!out.label_table.count(id)) out.label_table[id] = "band" + std::to_string(id);
    for (int64_t z = 0; z < grid.dims[2]; ++z)
        for (int64_t y = 0; y < grid.dims[1]; ++y)
            for (int64_t x = 0; x < grid.dims[0]; ++x)
                out.at(x, y, z) = geo.label(grid.world(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)));
    return out;
}

ScalarVolume render_image(const PhantomSpec &spec, const LabelVolume &labels, const ContrastTable &contrast) {
    const BiasField bias(spec);
    const Grid3 &g = labels.grid;
    ScalarVolume out(g);
    for (int64_t z = 0; z < g.dims[2]; ++z)
        for (int64_t y = 0; y < g.dims[1]; ++y)
            for (int64_t x = 0; x < g.dims[0]; ++x) {
                auto it = contrast.find(labels.at(x, y, z));
                if (it == contrast.end())
                    throw std::invalid_argument("render: no contrast for label " + std::to_string(labels.at(x, y, z)));
                out.at(x, y, z) = it->second * bias.at(g.world(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)));
            }
    return out;
}

std::vector<BandTruth> band_truth(const PhantomSpec &spec) {
    spec.validate();
    const LabelTable names = default_mtl_labels();
    std::vector<BandTruth> out;
    for (size_t b = 0; b < spec.band_labels.size(); ++b) {
        auto it = names.find(spec.band_labels[b]);
        out.push_back({spec.band_labels[b], it == names.end() ? "band" + std::to_string(spec.band_labels[b]) : it->second,
                       spec.band_thickness_mm[b]});
    }
    return out;
}

Phantom make_phantom(const PhantomSpec &spec) {
    Phantom p;
    p.labels = rasterize_labels(spec, phantom_grid(spec));
    p.image = render_image(spec, p.labels, spec.contrast);
    p.truth = band_truth(spec);
    return p;
}

void AcquisitionSpec::validate() const {
    if (!(in_plane_mm > 0) || !(slice_mm > 0)) throw std::invalid_argument("acquisition: spacings must be positive");
    if (!(noise_sigma >= 0)) throw std::invalid_argument("acquisition: noise sigma must be >= 0");
}

double AcquisitionSpec::noise_std() const {
    if (contrast.empty()) return noise_sigma;
    auto [lo, hi] = std::minmax_element(contrast.begin(), contrast.end(),
                                        [](const auto &a, const auto &b) { return a.second < b.second; });
    const double range = hi->second - lo->second;
    return noise_sigma * (range > 0 ? range : 1.0);
}

Grid3 acquisition_grid(const Grid3 &hires, double in_plane_mm, double slice_mm) {
    const Vec3 sp{in_plane_mm, in_plane_mm, slice_mm};
    Index3 dims{};
    Vec3 origin{};
    for (int a = 0; a < 3; ++a) {
        const double extent = hires.extent_hi(a) - hires.extent_lo(a);
        dims[a] = static_cast<int64_t>(std::floor(extent / sp[a] + 1e-9));
        if (dims[a] < 1) throw std::invalid_argument("acquisition voxel larger than the field of view");
        origin[a] = hires.extent_lo(a) + sp[a] / 2;
    }
    Grid3 g(dims, sp, origin);
    g.axis_codes = hires.axis_codes;
    return g;
}

namespace {

struct Tap {
    int64_t src;
    double w;
};

// Overlap weights of target voxels with source voxels along one axis.
std::vector<std::vector<Tap>> overlap_taps(const Grid3 &src, const Grid3 &dst, int a) {
    if (dst.spacing[a] < src.spacing[a] * (1 - 1e-9))
        throw std::invalid_argument("box_average: target spacing finer than source");
    const double tol = 1e-9 * src.spacing[a];
    if (dst.extent_lo(a) < src.extent_lo(a) - tol || dst.extent_hi(a) > src.extent_hi(a) + tol)
        throw std::invalid_argument("box_average: target extent leaves the source");
    std::vector<std::vector<Tap>> taps(static_cast<size_t>(dst.dims[a]));
    for (int64_t i = 0; i < dst.dims[a]; ++i) {
        const double lo = dst.extent_lo(a) + static_cast<double>(i) * dst.spacing[a], hi = lo + dst.spacing[a];
        const double j0 = (lo - src.extent_lo(a)) / src.spacing[a], j1 = (hi - src.extent_lo(a)) / src.spacing[a];
        const int64_t jb = std::max<int64_t>(0, static_cast<int64_t>(std::floor(j0 + 1e-9)));
        const int64_t je = std::min<int64_t>(src.dims[a], static_cast<int64_t>(std::ceil(j1 - 1e-9)));
        double total = 0;
        for (int64_t j = jb; j < je; ++j) {
            const double ov = std::min(j1, static_cast<double>(j + 1)) - std::max(j0, static_cast<double>(j));
            if (ov > 1e-12) {
                taps[static_cast<size_t>(i)].push_back({j, ov});
                total += ov;
            }
        }
        for (Tap &t : taps[static_cast<size_t>(i)]) t.w /= total;
    }
    return taps;
}

} // namespace

ScalarVolume box_average(const ScalarVolume &src, const Grid3 &target) {
    std::array<std::vector<std::vector<Tap>>, 3> taps;
    for (int a = 0; a < 3; ++a) taps[a] = overlap_taps(src.grid, target, a);
    const Index3 sd = src.grid.dims, td = target.dims;
    // x pass: (tx, sy, sz)
    std::vector<double> ax(static_cast<size_t>(td[0] * sd[1] * sd[2]));
    for (int64_t z = 0; z < sd[2]; ++z)
        for (int64_t y = 0; y < sd[1]; ++y) {
            const double *row = &src.values[src.grid.linear(0, y, z)];
            double *o = &ax[static_cast<size_t>(td[0] * (y + sd[1] * z))];
            for (int64_t x = 0; x < td[0]; ++x) {
                double s = 0;
                for (const Tap &t : taps[0][static_cast<size_t>(x)]) s += t.w * row[t.src];
                o[x] = s;
            }
        }
    // y pass: (tx, ty, sz)
    std::vector<double> ay(static_cast<size_t>(td[0] * td[1] * sd[2]), 0.0);
    for (int64_t z = 0; z < sd[2]; ++z)
        for (int64_t y = 0; y < td[1]; ++y) {
            double *o = &ay[static_cast<size_t>(td[0] * (y + td[1] * z))];
            for (const Tap &t : taps[1][static_cast<size_t>(y)]) {
                const double *row = &ax[static_cast<size_t>(td[0] * (t.src + sd[1] * z))];
                for (int64_t x = 0; x < td[0]; ++x) o[x] += t.w * row[x];
            }
        }
    ScalarVolume out(target);
    const size_t plane = static_cast<size_t>(td[0] * td[1]);
    for (int64_t z = 0; z < td[2]; ++z) {
        double *o = &out.values[static_cast<size_t>(z) * plane];
        for (const Tap &t : taps[2][static_cast<size_t>(z)]) {
            const double *pl = &ay[static_cast<size_t>(t.src) * plane];
            for (size_t i = 0; i < plane; ++i) o[i] += t.w * pl[i];
        }
    }
    return out;
}

ScalarVolume simulate_acquisition(const ScalarVolume &hires, const AcquisitionSpec &acq, std::mt19937_64 &rng) {
    acq.validate();
    ScalarVolume out = box_average(hires, acquisition_grid(hires.grid, acq.in_plane_mm, acq.slice_mm));
    const double sd = acq.noise_std();
    if (sd > 0) {
        std::normal_distribution<double> n(0.0, sd);
        for (double &v : out.values) v += n(rng);
    }
    return out;
}

void CohortSpec::validate() const {
    if (n_subjects < 2) throw std::invalid_argument("cohort: need at least 2 subjects");
    if (n_sessions < 1 || n_sessions > 2) throw std::invalid_argument("cohort: sessions must be 1 or 2");
    if (n_atlas < 0 || n_exvivo < 0) throw std::invalid_argument("cohort: negative counts");
    if (!(age_max >= age_min) || !(age_min > 0)) throw std::invalid_argument("cohort: bad age range");
    if (!(tilt_max_deg >= tilt_min_deg) || !(amplitude_max_mm >= amplitude_min_mm))
        throw std::invalid_argument("cohort: bad geometry ranges");
    if (interval_min_days < 1 || interval_max_days < interval_min_days)
        throw std::invalid_argument("cohort: bad interval range");
    t2.validate();
    t1.validate();
    const double r = t2.slice_mm / hyperres_slice_mm;
    if (std::abs(r - std::round(r)) > 1e-9 || std::round(r) < 1)
        throw std::invalid_argument("cohort: T2 slice must be a whole multiple of the hyper-resolution slice");
    const LabelTable names = default_mtl_labels();
    for (const auto &[band, eff] : effect_mm) label_id(names, band);
}

namespace {

uint64_t mix(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

uint64_t stream_seed(uint64_t seed, const std::string &role, int index, int session) {
    uint64_t h = 1469598103934665603ull;
    for (char c : role) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    return mix(mix(mix(seed ^ h) + static_cast<uint64_t>(index)) + static_cast<uint64_t>(session));
}

json spec_json(const PhantomSpec &s) {
    return {{"kind", to_string(s.kind)},
            {"spacing_mm", s.spacing_mm},
            {"fov_mm", s.fov_mm},
            {"center_offset_mm", s.center_offset_mm},
            {"tilt_deg", s.tilt_deg},
            {"azimuth_deg", s.azimuth_deg},
            {"sheet_length_mm", s.sheet_length_mm},
            {"sheet_width_mm", s.sheet_width_mm},
            {"fold_amplitude_mm", s.fold_amplitude_mm},
            {"fold_period_mm", s.fold_period_mm},
            {"fold_phase", s.fold_phase},
            {"band_labels", s.band_labels},
            {"band_thickness_mm", s.band_thickness_mm},
            {"bias_amplitude", s.bias_amplitude},
            {"bias_seed", s.bias_seed}};
}

} // namespace

PhantomSpec cohort_subject_spec(const CohortSpec &c, const std::string &role, int index, double *age_out,
                                bool *patient_out) {
    std::mt19937_64 rng(stream_seed(c.seed, role, index, 0));
    std::uniform_real_distribution<double> U(0, 1);
    std::normal_distribution<double> N(0, 1);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * U(rng); };

    PhantomSpec s;
    s.kind = PhantomKind::FoldedSheet;
    s.tilt_deg = uni(c.tilt_min_deg, c.tilt_max_deg);
    s.azimuth_deg = uni(-c.azimuth_max_deg, c.azimuth_max_deg);
    s.fold_amplitude_mm = uni(c.amplitude_min_mm, c.amplitude_max_mm);
    s.fold_phase = uni(0, 2 * std::numbers::pi);
    s.center_offset_mm = {uni(-0.5, 0.5), uni(-0.5, 0.5), uni(-0.5, 0.5)};
    s.bias_seed = rng();
    const double age = uni(c.age_min, c.age_max);
    const bool patient = role == "study" && index % 2 == 1;
    const double subject = c.subject_sd_mm * N(rng);
    const LabelTable names = default_mtl_labels();
    for (size_t b = 0; b < s.band_labels.size(); ++b) {
        double t = c.base_thickness_mm + subject + c.age_slope_mm_per_year * (age - 70) + c.band_sd_mm * N(rng);
        if (patient) {
            auto it = c.effect_mm.find(names.at(s.band_labels[b]));
            if (it != c.effect_mm.end()) t += it->second;
        }
        s.band_thickness_mm[b] = t;
    }
    if (age_out) *age_out = age;
    if (patient_out) *patient_out = patient;
    return s;
}

CohortOutput make_cohort(const CohortSpec &c, const std::filesystem::path &out_dir) {
    c.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<ManifestRow> manifest;
    std::vector<StudyRow> truth_rows;
    std::vector<std::string> regions;
    const int factor = static_cast<int>(std::llround(c.t2.slice_mm / c.hyperres_slice_mm));

    auto emit = [&](const std::string &role, int index) {
        double age = 0;
        bool patient = false;
        const PhantomSpec base = cohort_subject_spec(c, role, index, &age, &patient);
        char id[32];
        std::snprintf(id, sizeof id, "%s%03d", role == "study" ? "sub" : role.c_str(), index);
        const int sessions = role == "study" ? c.n_sessions : 1;
        std::mt19937_64 date_rng(stream_seed(c.seed, role + "/date", index, 0));
        std::string date = add_days("2020-01-01", static_cast<int64_t>(date_rng() % 365));
        for (int ses = 1; ses <= sessions; ++ses) {
            PhantomSpec s = base;
            std::mt19937_64 rng(stream_seed(c.seed, role, index, ses));
            if (ses > 1) {
                std::uniform_real_distribution<double> sh(-c.shift_max_mm, c.shift_max_mm);
                for (double &o : s.center_offset_mm) o += sh(rng);
                std::uniform_int_distribution<int> iv(c.interval_min_days, c.interval_max_days);
                date = add_days(date, iv(rng));
            }
            const fs::path dir = out_dir / role / id / ("ses-" + std::to_string(ses));
            fs::create_directories(dir);

            const Grid3 hires = phantom_grid(s);
            const LabelVolume truth_hires = rasterize_labels(s, hires);
            const Grid3 coarse = acquisition_grid(hires, c.t2.in_plane_mm, c.t2.slice_mm);
            const Grid3 fine = acquisition_grid(hires, c.t2.in_plane_mm, c.hyperres_slice_mm);
            const LabelVolume truth_fine = rasterize_labels(s, fine);
            const ScalarVolume t2_hires = render_image(s, truth_hires, c.t2.contrast);

            ManifestRow m;
            m.subject_id = id;
            m.session = ses;
            m.role = role;
            if (role == "exvivo") {
                ScalarVolume img = box_average(t2_hires, fine);
                std::normal_distribution<double> n(0.0, c.t2.noise_std());
                for (double &v : img.values) v += n(rng);
                save_volume(img, dir / "t2.nii.gz");
                save_volume(truth_fine, dir / "labels.nii.gz");
                m.t2 = dir / "t2.nii.gz";
                m.labels = dir / "labels.nii.gz";
                manifest.push_back(m);
                continue;
            }
            save_volume(simulate_acquisition(t2_hires, c.t2, rng), dir / "t2.nii.gz");
            const ScalarVolume t1_hires = render_image(s, truth_hires, c.t1.contrast);
            save_volume(simulate_acquisition(t1_hires, c.t1, rng), dir / "t1.nii.gz");
            save_volume(truth_fine, dir / "truth_labels.nii.gz");
            m.t2 = dir / "t2.nii.gz";
            m.t1 = dir / "t1.nii.gz";
            json truth{{"subject_id", id}, {"session", ses}, {"truth_labels", "truth_labels.nii.gz"},
                       {"spec", spec_json(s)}, {"bands", json::array()}};
            for (const BandTruth &b : band_truth(s))
                truth["bands"].push_back({{"label", b.label}, {"name", b.name}, {"thickness_mm", b.thickness_mm}});
            std::ofstream(dir / "truth.json") << truth.dump(2) << '\n';
            m.truth = dir / "truth.json";
            if (role == "atlas") {
                LabelVolume manual = block_majority_downsample_slice(truth_fine, factor);
                manual.grid = coarse;
                save_volume(manual, dir / "labels.nii.gz");
                m.labels = dir / "labels.nii.gz";
            } else {
                m.group = patient ? "A+MCI" : "A-CN";
                m.age = age;
                m.scan_date = date;
                if (ses == 1) {
                    StudyRow row{id, patient ? Group::APlusMCI : Group::ACN, age, {}};
                    for (const BandTruth &b : band_truth(s)) {
                        row.thickness[b.name] = b.thickness_mm;
                        if (truth_rows.empty()) regions.push_back(b.name);
                    }
                    truth_rows.push_back(std::move(row));
                }
            }
            manifest.push_back(m);
        }
    };
    for (int i = 0; i < c.n_exvivo; ++i) emit("exvivo", i);
    for (int i = 0; i < c.n_atlas; ++i) emit("atlas", i);
    for (int i = 0; i < c.n_subjects; ++i) emit("study", i);

    CohortOutput out{out_dir / "manifest.csv", out_dir / "truth_thickness.csv", out_dir / "labels.json"};
    write_manifest(manifest, out.manifest);
    write_study_csv(truth_rows, regions, out.truth_csv);
    write_label_table(default_mtl_labels(), out.labels_json);
    return out;
}

} // namespace isomtl
