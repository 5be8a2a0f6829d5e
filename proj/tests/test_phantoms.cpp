#include "doctest_main.h"

#include "isomtl/phantoms.h"
#include "isomtl/skelthick.h"
#include "isomtl/table_io.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

using namespace isomtl;
namespace fs = std::filesystem;

namespace {

PhantomSpec slab_spec(double width, double spacing) {
    PhantomSpec s;
    s.kind = PhantomKind::Slab;
    s.spacing_mm = spacing;
    s.fov_mm = {6.0, 6.0, 4.0};
    s.sheet_length_mm = 4.0;
    s.sheet_width_mm = 4.0;
    s.band_labels = {4};
    s.band_thickness_mm = {width};
    s.bias_amplitude = 0;
    return s;
}

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("slab labels are the analytic indicator") {
    const PhantomSpec s = slab_spec(1.2, 0.1);
    const Phantom p = make_phantom(s);
    CHECK(p.labels.grid.dims == Index3{60, 60, 40});
    REQUIRE(p.truth.size() == 1);
    CHECK(p.truth[0].thickness_mm == 1.2);
    CHECK(p.truth[0].name == "ERC");
    // Central column: |z| <= 0.6 holds for 12 voxel centres (z = +-0.05 ... +-0.55).
    int count = 0;
    for (int64_t z = 0; z < 40; ++z) count += p.labels.at(30, 30, z) == 4;
    CHECK(count == 12);
    CHECK(p.image.at(30, 30, 20) == 80.0);
    CHECK(p.image.at(30, 30, 0) == 30.0);
}

TEST_CASE("phantom validation") {
    PhantomSpec s = slab_spec(0.15, 0.1);
    CHECK_THROWS_AS(make_phantom(s), std::invalid_argument);
    s = slab_spec(1.2, 0.1);
    s.fov_mm[0] = 6.05;
    CHECK_THROWS_AS(phantom_grid(s), std::invalid_argument);
    s = slab_spec(2.0, 0.1);
    s.kind = PhantomKind::FoldedSheet;
    s.fold_amplitude_mm = 2.0;
    s.fold_period_mm = 3.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = slab_spec(1.2, 0.1);
    s.band_labels = {4, 4};
    s.band_thickness_mm = {1.2, 1.2};
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    CHECK_THROWS_AS(parse_phantom_kind("torus"), std::invalid_argument);
    CHECK(parse_phantom_kind("spherical_shell") == PhantomKind::SphericalShell);
}

TEST_CASE("folded sheet with zero amplitude is the slab") {
    PhantomSpec s = slab_spec(1.0, 0.1);
    s.tilt_deg = 35;
    s.azimuth_deg = 10;
    const LabelVolume a = rasterize_labels(s, phantom_grid(s));
    s.kind = PhantomKind::FoldedSheet;
    s.fold_amplitude_mm = 0;
    const LabelVolume b = rasterize_labels(s, phantom_grid(s));
    CHECK(a.labels == b.labels);
    CHECK(std::count(a.labels.begin(), a.labels.end(), 4) > 1000);
}

TEST_CASE("shell truth and banding") {
    PhantomSpec s;
    s.kind = PhantomKind::SphericalShell;
    s.spacing_mm = 0.2;
    s.fov_mm = {12, 12, 12};
    s.shell_radius_mm = 4;
    s.band_labels = {4, 5, 6, 7};
    s.band_thickness_mm = {1.0, 1.0, 1.0, 1.0};
    const Phantom p = make_phantom(s);
    for (const BandTruth &b : p.truth) CHECK(b.thickness_mm == 1.0);
    for (int l : s.band_labels) CHECK(std::count(p.labels.labels.begin(), p.labels.labels.end(), l) > 100);
}

TEST_CASE("bias field is smooth and seeded") {
    PhantomSpec s = slab_spec(1.2, 0.1);
    s.bias_amplitude = 0.1;
    s.bias_seed = 7;
    const Phantom a = make_phantom(s), b = make_phantom(s);
    CHECK(a.image.values == b.image.values);
    double lo = 1e9, hi = 0;
    for (size_t i = 0; i < a.image.values.size(); ++i)
        if (a.labels.labels[i] == 0) lo = std::min(lo, a.image.values[i]), hi = std::max(hi, a.image.values[i]);
    CHECK(lo >= 30 * 0.9 - 1e-9);
    CHECK(hi <= 30 * 1.1 + 1e-9);
    CHECK(hi - lo > 0.1);
}

TEST_CASE("acquisition with slice = hires spacing is an in-plane block average") {
    const Phantom p = make_phantom(slab_spec(1.2, 0.1));
    std::mt19937_64 rng(1);
    const AcquisitionSpec acq{0.2, 0.1, 0.0, t2_contrast()};
    const ScalarVolume a = simulate_acquisition(p.image, acq, rng);
    CHECK(a.grid.dims == Index3{30, 30, 40});
    double worst = 0;
    for (int64_t z = 0; z < 40; ++z)
        for (int64_t y = 0; y < 30; ++y)
            for (int64_t x = 0; x < 30; ++x) {
                const double m = (p.image.at(2 * x, 2 * y, z) + p.image.at(2 * x + 1, 2 * y, z) +
                                  p.image.at(2 * x, 2 * y + 1, z) + p.image.at(2 * x + 1, 2 * y + 1, z)) /
                                 4;
                worst = std::max(worst, std::abs(a.at(x, y, z) - m));
            }
    CHECK(worst < 1e-12);
    CHECK(a.grid.world(0, 0, 0)[0] == doctest::Approx(p.image.grid.world(0.5, 0, 0)[0]));
}

TEST_CASE("acquisition noise level") {
    const Grid3 g({100, 100, 20}, {0.2, 0.2, 0.2});
    const ScalarVolume c(g, 50.0);
    std::mt19937_64 rng(3);
    const AcquisitionSpec acq{0.2, 0.2, 0.05, t2_contrast()};
    const ScalarVolume a = simulate_acquisition(c, acq, rng);
    REQUIRE(a.values.size() >= 100000);
    const double n = static_cast<double>(a.values.size());
    const double mean = std::accumulate(a.values.begin(), a.values.end(), 0.0) / n;
    double ss = 0;
    for (double v : a.values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1));
    CHECK(acq.noise_std() == doctest::Approx(0.05 * 70));
    CHECK(std::abs(sd - 3.5) / 3.5 < 0.05);
    CHECK(std::abs(mean - 50) < 0.05);
}

TEST_CASE("box average of labels reproduces occupancy fractions") {
    PhantomSpec s = slab_spec(1.2, 0.2);
    s.fov_mm = {6.0, 6.0, 5.2};
    s.tilt_deg = 40;
    const Phantom p = make_phantom(s);
    ScalarVolume ind(p.labels.grid);
    for (size_t i = 0; i < ind.values.size(); ++i) ind.values[i] = p.labels.labels[i] == 4;
    std::mt19937_64 rng(0);
    const AcquisitionSpec acq{0.4, 2.6, 0.0, {}};
    const ScalarVolume a = simulate_acquisition(ind, acq, rng);
    CHECK(a.grid.dims == Index3{15, 15, 2});
    double worst = 0;
    for (int64_t z = 0; z < 2; ++z)
        for (int64_t y = 0; y < 15; ++y)
            for (int64_t x = 0; x < 15; ++x) {
                int count = 0;
                for (int dz = 0; dz < 13; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) count += p.labels.at(2 * x + dx, 2 * y + dy, 13 * z + dz) == 4;
                worst = std::max(worst, std::abs(a.at(x, y, z) - count / 52.0));
            }
    CHECK(worst < 1e-12);
    // Through-plane profile widens: partial occupancy appears in whole 2.6 mm slices.
    int partial = 0;
    for (double v : a.values) partial += v > 0.01 && v < 0.99;
    CHECK(partial > 50);
}

TEST_CASE("box average with a non-integer ratio preserves the mean") {
    const Grid3 g({20, 20, 26}, {0.2, 0.2, 0.2});
    ScalarVolume v(g);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    for (double &x : v.values) x = u(rng);
    const Grid3 t = acquisition_grid(g, 0.4, 0.52);
    CHECK(t.dims == Index3{10, 10, 10});
    const ScalarVolume a = box_average(v, t);
    const double ma = std::accumulate(a.values.begin(), a.values.end(), 0.0) / a.values.size();
    const double mv = std::accumulate(v.values.begin(), v.values.end(), 0.0) / v.values.size();
    CHECK(ma == doctest::Approx(mv).epsilon(1e-12));
    const Grid3 finer({40, 40, 52}, {0.1, 0.1, 0.1}, {-0.05, -0.05, -0.05});
    CHECK_THROWS_AS(box_average(v, finer), std::invalid_argument);
}

TEST_CASE("skelthick recovers folded-sheet truth within one voxel") {
    PhantomSpec s;
    s.spacing_mm = 0.2;
    s.fov_mm = {12.0, 12.0, 12.0};
    s.sheet_length_mm = 8.0;
    s.sheet_width_mm = 8.0;
    s.tilt_deg = 30;
    s.fold_amplitude_mm = 0.8;
    s.fold_period_mm = 8.0;
    s.band_labels = {4, 5};
    s.band_thickness_mm = {2.0, 2.4};
    const Phantom p = make_phantom(s);
    const ThicknessReport r = measure_thickness(p.labels);
    CHECK_FALSE(r.low_confidence);
    for (const BandTruth &b : p.truth) {
        REQUIRE(r.regions.count(b.label));
        const double m = r.regions.at(b.label).median_mm;
        MESSAGE(b.name << " truth " << b.thickness_mm << " measured " << m);
        CHECK(std::abs(m - b.thickness_mm) <= s.spacing_mm);
    }
}

TEST_CASE("cohort effect is applied by construction") {
    CohortSpec c;
    c.subject_sd_mm = 0;
    c.band_sd_mm = 0;
    c.age_slope_mm_per_year = 0;
    c.effect_mm = {{"ERC", -0.2}};
    bool p0 = true, p1 = false;
    const PhantomSpec cn = cohort_subject_spec(c, "study", 0, nullptr, &p0);
    const PhantomSpec mci = cohort_subject_spec(c, "study", 1, nullptr, &p1);
    CHECK_FALSE(p0);
    CHECK(p1);
    CHECK(mci.band_thickness_mm[3] - cn.band_thickness_mm[3] == doctest::Approx(-0.2));
    CHECK(mci.band_thickness_mm[4] == cn.band_thickness_mm[4]);
    c.effect_mm.clear();
    CHECK(cohort_subject_spec(c, "study", 1).band_thickness_mm == cn.band_thickness_mm);
    c.effect_mm = {{"XYZ", -0.2}};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("cohort files are deterministic under the seed") {
    CohortSpec c;
    c.n_subjects = 2;
    c.n_sessions = 2;
    c.n_atlas = 1;
    c.n_exvivo = 1;
    c.seed = 42;
    const fs::path root = fs::temp_directory_path() / "isomtl_test_cohort";
    fs::remove_all(root);
    const CohortOutput a = make_cohort(c, root / "a");
    const CohortOutput b = make_cohort(c, root / "b");
    CHECK(slurp(a.manifest) == slurp(b.manifest));
    CHECK(slurp(a.truth_csv) == slurp(b.truth_csv));
    const auto rows = read_manifest(a.manifest);
    CHECK(rows.size() == 6);
    for (const ManifestRow &m : rows) {
        const fs::path rel = fs::relative(m.t2, root / "a");
        CHECK(slurp(m.t2) == slurp(root / "b" / rel));
    }
    const auto study = read_study_csv(a.truth_csv);
    REQUIRE(study.size() == 2);
    CHECK(study[0].group == Group::ACN);
    CHECK(study[1].group == Group::APlusMCI);
    CHECK(study[0].thickness.size() == 7);
    int sessions2 = 0;
    for (const ManifestRow &m : rows) sessions2 += m.session == 2;
    CHECK(sessions2 == 2);
    fs::remove_all(root);
}

TEST_CASE("csv and date helpers") {
    const CsvTable t = parse_csv("a,b\n\"x,1\",\"say \"\"hi\"\"\"\n2,\n");
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0][0] == "x,1");
    CHECK(t.rows[0][1] == "say \"hi\"");
    CHECK(t.rows[1][1].empty());
    CHECK(parse_csv(format_csv(t)).rows == t.rows);
    CHECK_THROWS_AS(parse_csv("a,b\n1\n"), std::invalid_argument);
    CHECK(days_between("2020-01-01", "2021-01-01") == 366);
    CHECK(add_days("2020-02-27", 3) == "2020-03-01");
    CHECK_THROWS_AS(days_between("2020-13-01", "2021-01-01"), std::invalid_argument);
    CHECK(parse_double(format_double(0.1 + 0.2), "x") == 0.1 + 0.2);
}
