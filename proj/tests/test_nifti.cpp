#include "doctest_main.h"

#include "isomtl/nifti_io.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace isomtl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string &name) {
    const fs::path dir = fs::temp_directory_path() / "isomtl_test_nifti";
    fs::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_CASE("scalar volume round trip keeps grid metadata to the bit") {
    Grid3 g({7, 6, 5}, {0.4, 0.4, 0.52}, {-12.3456789, 7.25, 0.1 + 0.2});
    g.axis_codes = {'L', 'P', 'S'};
    ScalarVolume v(g);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd(100.0, 20.0);
    for (double &x : v.values) x = nd(rng);

    for (const char *name : {"a.nii", "a.nii.gz"}) {
        const fs::path p = scratch(name);
        save_volume(v, p);
        const ScalarVolume r = load_scalar(p);
        CHECK(r.grid == v.grid);
        for (size_t i = 0; i < v.values.size(); ++i)
            CHECK(r.values[i] == static_cast<double>(static_cast<float>(v.values[i])));
    }
    const fs::path p64 = scratch("b.nii.gz");
    save_volume(v, p64, ScalarStorage::Float64);
    CHECK(load_scalar(p64).values == v.values);
}

TEST_CASE("label volume with ids 0..8 survives the round trip with its sidecar") {
    Grid3 g({5, 5, 3}, {0.4, 0.4, 2.6});
    LabelTable t;
    for (int i = 0; i <= 8; ++i) t[i] = i == 0 ? "background" : "region_" + std::to_string(i);
    LabelVolume l(g, t);
    for (size_t i = 0; i < l.labels.size(); ++i) l.labels[i] = static_cast<LabelId>(i % 9);
    const fs::path p = scratch("seg.nii.gz");
    save_volume(l, p);
    CHECK(fs::exists(scratch("seg.labels.json")));
    const LabelVolume r = load_labels(p);
    CHECK(r.grid == l.grid);
    CHECK(r.labels == l.labels);
    CHECK(r.label_table == l.label_table);
    CHECK(std::holds_alternative<LabelVolume>(load_volume(p)));
}

TEST_CASE("loading canonicalizes the thick-slice axis to z") {
    Grid3 g({6, 3, 4}, {0.4, 2.6, 0.4});
    g.slice_axis = 1;
    ScalarVolume v(g);
    for (size_t i = 0; i < v.values.size(); ++i) v.values[i] = static_cast<double>(i);
    const fs::path p = scratch("coronal.nii");
    save_volume(v, p);
    // Drop the metadata extension so the loader falls back to the header spacing rule.
    {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(348);
        const char none[4] = {0, 0, 0, 0};
        f.write(none, 4);
    }
    const ScalarVolume r = load_scalar(p);
    CHECK(r.grid.slice_axis == 2);
    CHECK(r.grid.dims == Index3{6, 4, 3});
    CHECK(r.grid.spacing[2] == doctest::Approx(2.6));
    CHECK(r.at(5, 3, 2) == v.at(5, 2, 3));
}

TEST_CASE("non-positive spacing is rejected on load") {
    Grid3 g({2, 2, 2}, {1, 1, 1});
    const fs::path p = scratch("bad.nii");
    save_volume(ScalarVolume(g, 1.0), p);
    {
        std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
        const float neg = -1.0f;
        f.seekp(76 + 4 * 2); // pixdim[2]
        f.write(reinterpret_cast<const char *>(&neg), 4);
    }
    CHECK_THROWS(load_scalar(p));
}

TEST_CASE("unreadable and unsupported files") {
    CHECK_THROWS(load_scalar(scratch("missing.nii.gz")));
    const fs::path p = scratch("junk.nii");
    std::ofstream(p) << "this is not a nifti file, just some text padding it out to a header length "
                        "........................................................................."
                        "........................................................................."
                        "........................................................................."
                        ".........................................................................";
    CHECK_THROWS(load_scalar(p));
}
