#include "doctest_main.h"

#include "isomtl/nifti_io.h"
#include "isomtl/phantoms.h"
#include "isomtl/pipeline.h"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace isomtl;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Networks small enough for a unit test; quality is irrelevant here.
PipelineConfig tiny_config() {
    PipelineConfig c = config_from_json(json::parse(R"({
        "nlm": {"max_iters": 1},
        "labelsr": {"level_channels": [8, 16], "residual_units_per_level": 1, "crops_per_window": 1,
                    "trainer": {"epochs": 1, "batch_size": 4, "steps_per_epoch": 2}},
        "seg": {"patch": [16, 16, 16], "base_channels": 4, "levels": 2,
                "trainer": {"epochs": 1, "steps_per_epoch": 2}}})"));
    return c;
}

struct Fixture {
    fs::path root = fs::temp_directory_path() / "isomtl_pipeline_test";
    fs::path manifest;

    Fixture() {
        fs::remove_all(root);
        CohortSpec s;
        s.n_subjects = 6;
        s.n_sessions = 2;
        s.n_atlas = 2;
        s.n_exvivo = 2;
        manifest = make_cohort(s, root / "cohort").manifest;
    }
    ~Fixture() { if (!std::getenv("ISOMTL_KEEP")) fs::remove_all(root); }

    RunOptions options(const std::string &out = "runs") const {
        RunOptions o;
        o.manifest = manifest;
        o.out_root = root / out;
        o.config = tiny_config();
        return o;
    }
};

std::map<Stage, StageRecord> by_stage(const RunResult &r) {
    std::map<Stage, StageRecord> m;
    for (const StageRecord &s : r.stages) m[s.stage] = s;
    return m;
}

} // namespace

TEST_CASE("stage names") {
    for (Stage s : all_stages()) CHECK(parse_stage(to_string(s)) == s);
    CHECK(to_string(Stage::TrainLabelSr) == "train-label-sr");
    CHECK_THROWS_AS(parse_stage("segmentation"), std::invalid_argument);
}

TEST_CASE("anisotropic decoding is a block majority onto the acquired grid") {
    const Grid3 coarse({4, 3, 2}, {0.4, 0.4, 2.6}, {0.2, 0.2, 1.3});
    const Grid3 fine = hyperres_target(coarse, 0.52);
    REQUIRE(fine.dims[2] == 10);
    LabelVolume seg(fine, default_mtl_labels());
    for (int64_t z = 0; z < 10; ++z)
        for (int64_t y = 0; y < 3; ++y)
            for (int64_t x = 0; x < 4; ++x) seg.at(x, y, z) = z < 3 ? 1 : (z < 5 ? 0 : 2); // block 0: 1,1,1,0,0
    const LabelVolume a = to_anisotropic(seg, coarse);
    CHECK(a.grid == coarse);
    CHECK(a.at(0, 0, 0) == 1);
    CHECK(a.at(3, 2, 1) == 2);
}

TEST_CASE("thickness report format") {
    ThicknessReport r;
    r.regions[1] = {2.0, 1.9, 10, 5.0};
    r.absent = {2};
    r.rho_min = 4.0;
    const json j = thickness_json(r, default_mtl_labels());
    CHECK(j.at("CA1-3").at("median_mm") == 2.0);
    CHECK(j.at("CA1-3").at("n_vertices") == 10);
    CHECK(j.at("params").at("absent") == json::array({"DG"}));
    CHECK(thickness_by_name(j) == std::map<std::string, double>{{"CA1-3", 2.0}});
}

TEST_CASE("pipeline runs, caches and filters stages") {
    Fixture f;
    const RunOptions o = f.options();

    // Missing upstream output is an error and leaves no run behind.
    RunOptions t = o;
    t.stages = {Stage::Thickness};
    CHECK_THROWS_WITH(run_pipeline(t), doctest::Contains("missing dependency: stage segment"));
    CHECK(!fs::exists(o.out_root / "run-001"));

    const RunResult first = run_pipeline(o);
    REQUIRE(first.run_dir == o.out_root / "run-001");
    REQUIRE(first.stages.size() == all_stages().size());
    for (const StageRecord &s : first.stages) CHECK_FALSE(s.reused);
    for (const char *f : {"config.json", "run.json", "reports/cross_sectional.json", "reports/cross_sectional.tsv",
                          "reports/longitudinal.json", "reports/longitudinal.tsv", "models/seg/labels.json",
                          "sub000/ses-2/thickness_hyperres.json", "sub000/ses-1/seg_hr.nii.gz",
                          "atlas001/ses-1/labels_hr.nii.gz", "sub003/ses-1/t1_hr.nii.gz"})
        CHECK_MESSAGE(fs::exists(first.run_dir / f), f);
    const LabelVolume seg = load_labels(first.run_dir / "sub000/ses-1/seg_hr.nii.gz");
    CHECK(seg.grid.spacing[2] == doctest::Approx(0.52));
    CHECK(seg.grid.spacing[0] == doctest::Approx(0.4));

    // Identical config and seed: byte-identical reports.
    RunOptions fresh = o;
    fresh.use_cache = false;
    const RunResult second = run_pipeline(fresh);
    CHECK(second.run_dir == o.out_root / "run-002");
    for (const char *f : {"reports/cross_sectional.json", "reports/longitudinal.json", "reports/study_hyperres.csv",
                          "sub004/ses-1/thickness_anisotropic.json", "models/seg/train_log.csv"})
        CHECK_MESSAGE(slurp(first.run_dir / f) == slurp(second.run_dir / f), f);

    // Default invocation reuses every stage.
    const RunResult cached = run_pipeline(o);
    for (const StageRecord &s : cached.stages) CHECK(s.reused);
    CHECK(slurp(cached.run_dir / "reports/cross_sectional.tsv") == slurp(first.run_dir / "reports/cross_sectional.tsv"));

    // Requested stages run, their direct inputs are reused, nothing else appears.
    RunOptions part = o;
    part.stages = {Stage::Thickness, Stage::Stats};
    const RunResult p = run_pipeline(part);
    auto ps = by_stage(p);
    CHECK(ps.size() == 3);
    CHECK(ps.at(Stage::Segment).reused);
    CHECK_FALSE(ps.at(Stage::Thickness).reused);
    CHECK_FALSE(ps.at(Stage::Stats).reused);
    CHECK(!fs::exists(p.run_dir / "models"));
    CHECK(slurp(p.run_dir / "reports/cross_sectional.json") == slurp(first.run_dir / "reports/cross_sectional.json"));

    // An unconsumed key keeps every hash; a consumed one invalidates it and downstream only.
    RunOptions jobs = o;
    jobs.config.jobs = 2;
    jobs.config.out = "elsewhere";
    const RunResult j = run_pipeline(jobs);
    auto js = by_stage(j), fs0 = by_stage(first);
    for (Stage s : all_stages()) {
        CHECK(js.at(s).hash == fs0.at(s).hash);
        CHECK(js.at(s).reused);
    }

    RunOptions rho = o;
    rho.config.rho_min = 3.0;
    const RunResult r = run_pipeline(rho);
    auto rs = by_stage(r);
    for (Stage s : {Stage::Upsample, Stage::TrainLabelSr, Stage::UpsampleLabels, Stage::TrainSeg, Stage::Segment}) {
        CHECK(rs.at(s).hash == fs0.at(s).hash);
        CHECK(rs.at(s).reused);
    }
    for (Stage s : {Stage::Thickness, Stage::Stats}) {
        CHECK(rs.at(s).hash != fs0.at(s).hash);
        CHECK_FALSE(rs.at(s).reused);
    }
    RunOptions seed = o;
    seed.config.seed = 2;
    seed.stages = {Stage::Segment};
    CHECK_THROWS_WITH(run_pipeline(seed), doctest::Contains("missing dependency: stage train-seg"));

    // Reused outputs are links to the newest matching run, not rewrites.
    CHECK(fs::equivalent(cached.run_dir / "models/seg/weights.pt", second.run_dir / "models/seg/weights.pt"));

    const RunResult cmp = compare_spaces(o);
    const json c = json::parse(slurp(cmp.run_dir / "reports/compare_spaces.json"));
    REQUIRE(c.contains("phantom"));
    REQUIRE(c.contains("longitudinal"));
    CHECK(c.at("phantom").at("bands").size() == 7);
    for (const auto &b : c.at("phantom").at("bands")) {
        CHECK(b.at("n") == 12);
        CHECK(b.contains("aniso_err"));
        CHECK(b.contains("iso_err"));
    }
    CHECK(c.at("longitudinal").at("columns").size() == 2);
}

TEST_CASE("module errors carry the subject") {
    Fixture f;
    const std::vector<ManifestRow> rows = read_manifest(f.manifest);
    std::vector<ManifestRow> broken = rows;
    for (ManifestRow &r : broken)
        if (r.subject_id == "atlas001") r.t2 = f.root / "cohort/study/sub002/ses-1/t1.nii.gz";
    write_manifest(broken, f.root / "cohort/broken.csv");
    RunOptions o = f.options();
    o.manifest = f.root / "cohort/broken.csv";
    o.stages = {Stage::Upsample, Stage::TrainLabelSr, Stage::UpsampleLabels};
    CHECK_THROWS_WITH(run_pipeline(o), doctest::Contains("subject atlas001 session 1"));

    broken = rows;
    broken.push_back(rows.back());
    write_manifest(broken, f.root / "cohort/dup.csv");
    o.manifest = f.root / "cohort/dup.csv";
    CHECK_THROWS_WITH(run_pipeline(o), doctest::Contains("duplicate"));
}
