// isomtl - command-line front end for every pipeline step.
//
// Errors go to stderr as one JSON object {"error": ..., "command": ...} and
// the exit code is 1 (2 for usage errors).

#include "isomtl/biostats.h"
#include "isomtl/config.h"
#include "isomtl/label_sr.h"
#include "isomtl/mmseg.h"
#include "isomtl/nifti_io.h"
#include "isomtl/phantoms.h"
#include "isomtl/pipeline.h"
#include "isomtl/skelthick.h"
#include "isomtl/sr_nlm.h"
#include "isomtl/table_io.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace isomtl;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Common {
    std::string config;
    int64_t seed = -1;
    int jobs = 0;

    PipelineConfig resolve() const {
        PipelineConfig c = config.empty() ? PipelineConfig{} : load_config(config);
        if (seed >= 0) c.seed = static_cast<uint64_t>(seed);
        if (jobs > 0) c.jobs = jobs;
        c.validate();
        return c;
    }
};

void add_common(CLI::App *cmd, Common &c) {
    cmd->add_option("--config", c.config, "JSON config overlay")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "override the config seed");
    cmd->add_option("--jobs", c.jobs, "subjects processed concurrently");
}

void write_json(const fs::path &p, const json &j) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream(p) << j.dump(2) << '\n';
}

void print_run(const RunResult &r) {
    json j{{"run_dir", r.run_dir.string()}, {"stages", json::array()}};
    for (const StageRecord &s : r.stages)
        j["stages"].push_back({{"stage", to_string(s.stage)}, {"hash", s.hash}, {"reused", s.reused}});
    std::cout << j.dump(2) << '\n';
}

std::vector<std::string> split_list(const std::string &s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<std::string> thickness_columns(const std::vector<StudyRow> &rows) {
    std::vector<std::string> out;
    if (!rows.empty())
        for (const auto &[k, v] : rows.front().thickness) out.push_back(k);
    return out;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"isomtl: nearly isotropic MTL subregion segmentation and thickness"};
    app.require_subcommand(1);
    std::string command;

    // phantom
    Common c_ph;
    std::string ph_kind = "folded_sheet", ph_out;
    CohortSpec cohort;
    bool ph_single = false;
    double ph_spacing = 0.1;
    auto *ph = app.add_subcommand("phantom", "synthetic phantom or phantom cohort");
    add_common(ph, c_ph);
    ph->add_option("--kind", ph_kind, "slab | spherical_shell | folded_sheet");
    ph->add_option("--out", ph_out)->required();
    ph->add_flag("--single", ph_single, "one folded sheet instead of a cohort");
    ph->add_option("--spacing", ph_spacing, "voxel size of a single phantom (mm)");
    ph->add_option("--subjects", cohort.n_subjects);
    ph->add_option("--sessions", cohort.n_sessions);
    ph->add_option("--atlas", cohort.n_atlas);
    ph->add_option("--exvivo", cohort.n_exvivo);

    // upsample
    Common c_up;
    std::string up_in, up_out, up_ref;
    int up_factor = 0;
    auto *up = app.add_subcommand("upsample", "NLM super-resolution along the slice axis");
    add_common(up, c_up);
    up->add_option("--in", up_in)->required()->check(CLI::ExistingFile);
    up->add_option("--out", up_out)->required();
    up->add_option("--factor", up_factor, "integer slice factor");
    up->add_option("--target-grid", up_ref, "reference volume defining the output grid")->check(CLI::ExistingFile);

    // train-label-sr
    Common c_tl;
    std::string tl_manifest, tl_out;
    auto *tl = app.add_subcommand("train-label-sr", "train the slice-direction label upsampler");
    add_common(tl, c_tl);
    tl->add_option("--manifest", tl_manifest)->required()->check(CLI::ExistingFile);
    tl->add_option("--out", tl_out)->required();

    // upsample-labels
    Common c_ul;
    std::string ul_image, ul_labels, ul_model, ul_out;
    auto *ul = app.add_subcommand("upsample-labels", "5x label upsampling of a coarse segmentation");
    add_common(ul, c_ul);
    ul->add_option("--image", ul_image)->required()->check(CLI::ExistingFile);
    ul->add_option("--labels", ul_labels)->required()->check(CLI::ExistingFile);
    ul->add_option("--model", ul_model)->required()->check(CLI::ExistingDirectory);
    ul->add_option("--out", ul_out)->required();

    // train-seg
    Common c_ts;
    std::string ts_manifest, ts_out;
    auto *ts = app.add_subcommand("train-seg", "train the multi-modality segmentation network");
    add_common(ts, c_ts);
    ts->add_option("--manifest", ts_manifest)->required()->check(CLI::ExistingFile);
    ts->add_option("--out", ts_out)->required();

    // segment
    Common c_sg;
    std::string sg_t2, sg_t1, sg_model, sg_out;
    auto *sg = app.add_subcommand("segment", "segment a T2w (+ optional T1w) volume");
    add_common(sg, c_sg);
    sg->add_option("--t2", sg_t2)->required()->check(CLI::ExistingFile);
    sg->add_option("--t1", sg_t1)->check(CLI::ExistingFile);
    sg->add_option("--model", sg_model)->required()->check(CLI::ExistingDirectory);
    sg->add_option("--out", sg_out)->required();

    // thickness
    Common c_th;
    std::string th_seg, th_labels, th_out, th_skel;
    double th_rho = -1.0;
    auto *th = app.add_subcommand("thickness", "Voronoi skeleton thickness per subregion");
    add_common(th, c_th);
    th->add_option("--seg", th_seg)->required()->check(CLI::ExistingFile);
    th->add_option("--labels-json", th_labels)->check(CLI::ExistingFile);
    th->add_option("--out", th_out)->required();
    th->add_option("--rho-min", th_rho, "pruning threshold (mm)");
    th->add_option("--skeleton-csv", th_skel, "export pruned skeleton vertices");

    // stats-cross / stats-long
    Common c_sc, c_sl;
    std::string sc_table, sc_out, sc_regions, sl_table, sl_out, sl_regions;
    auto *sc = app.add_subcommand("stats-cross", "group GLM and AUC per region");
    add_common(sc, c_sc);
    sc->add_option("--table", sc_table, "subject_id, group, age, region columns")->required()->check(CLI::ExistingFile);
    sc->add_option("--out", sc_out)->required();
    sc->add_option("--regions", sc_regions, "comma-separated subset");
    auto *sl = app.add_subcommand("stats-long", "Std and AbsSum of annualized change per region");
    add_common(sl, c_sl);
    sl->add_option("--table", sl_table, "subject_id, scan_date_1, scan_date_2, <region>_1, <region>_2")
        ->required()
        ->check(CLI::ExistingFile);
    sl->add_option("--out", sl_out)->required();
    sl->add_option("--regions", sl_regions, "comma-separated subset");

    // run / compare-spaces
    Common c_run, c_cmp;
    std::string run_manifest, run_out, run_stages, cmp_manifest, cmp_out;
    bool run_nocache = false, cmp_nocache = false;
    auto *run = app.add_subcommand("run", "full pipeline over a manifest");
    add_common(run, c_run);
    run->add_option("--manifest", run_manifest);
    run->add_option("--out", run_out, "output root; each invocation adds run-NNN");
    run->add_option("--stages", run_stages, "comma-separated subset of stages");
    run->add_flag("--no-cache", run_nocache, "recompute every stage");
    auto *cmp = app.add_subcommand("compare-spaces", "thickness in the anisotropic vs hyper-resolution space");
    add_common(cmp, c_cmp);
    cmp->add_option("--manifest", cmp_manifest);
    cmp->add_option("--out", cmp_out);
    cmp->add_flag("--no-cache", cmp_nocache);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        return app.exit(e);
    }

    for (auto *s : app.get_subcommands()) command = s->get_name();
    try {
        if (*ph) {
            const PipelineConfig cfg = c_ph.resolve();
            const PhantomKind kind = parse_phantom_kind(ph_kind);
            if (kind == PhantomKind::FoldedSheet && !ph_single) {
                cohort.seed = cfg.seed;
                cohort.hyperres_slice_mm = cfg.hyperres_slice_mm;
                const CohortOutput o = make_cohort(cohort, ph_out);
                std::cout << json{{"manifest", o.manifest}, {"truth_csv", o.truth_csv}, {"labels_json", o.labels_json}}
                                 .dump(2)
                          << '\n';
            } else {
                PhantomSpec s;
                s.kind = kind;
                s.spacing_mm = ph_spacing;
                s.bias_seed = cfg.seed;
                if (kind == PhantomKind::Slab) {
                    s.band_labels = {1};
                    s.band_thickness_mm = {1.2};
                } else if (kind == PhantomKind::SphericalShell) {
                    s.band_labels = {1};
                    s.band_thickness_mm = {1.0};
                }
                const Phantom p = make_phantom(s);
                const fs::path dir(ph_out);
                fs::create_directories(dir);
                save_volume(p.image, dir / "image.nii.gz");
                save_volume(p.labels, dir / "labels.nii.gz");
                json truth{{"kind", to_string(kind)}, {"bands", json::array()}};
                for (const BandTruth &b : p.truth)
                    truth["bands"].push_back({{"label", b.label}, {"name", b.name}, {"thickness_mm", b.thickness_mm}});
                write_json(dir / "truth.json", truth);
                ManifestRow m;
                m.subject_id = "phantom";
                m.role = "exvivo";
                m.t2 = dir / "image.nii.gz";
                m.labels = dir / "labels.nii.gz";
                m.truth = dir / "truth.json";
                write_manifest({m}, dir / "manifest.csv");
            }
        } else if (*up) {
            const PipelineConfig cfg = c_up.resolve();
            const ScalarVolume v = load_scalar(up_in);
            ScalarVolume out;
            if (!up_ref.empty()) {
                const auto ref = load_volume(up_ref);
                const Grid3 g = std::visit([](const auto &x) { return x.grid; }, ref);
                out = upsample_to(v, g, cfg.nlm);
            } else if (up_factor > 0) {
                out = nlm_upsample_slice(v, up_factor, cfg.nlm);
            } else {
                out = upsample_to(v, hyperres_target(v.grid, cfg.hyperres_slice_mm), cfg.nlm);
            }
            save_volume(out, up_out);
        } else if (*tl) {
            const PipelineConfig cfg = c_tl.resolve();
            std::vector<ManifestRow> rows = read_manifest(tl_manifest), pick;
            for (const ManifestRow &r : rows)
                if (r.role == "exvivo") pick.push_back(r);
            if (pick.empty())
                for (const ManifestRow &r : rows)
                    if (!r.labels.empty()) pick.push_back(r);
            set_nn_threads(1);
            const TrainLog log = train_label_sr_dir(pick, cfg, tl_out);
            const EpochRecord &b = log.epochs[static_cast<size_t>(log.best_epoch)];
            std::cout << json{{"best_epoch", log.best_epoch}, {"val_dice", b.val_dice},
                              {"val_consistency_dice", b.val_consistency_dice}}
                             .dump(2)
                      << '\n';
        } else if (*ul) {
            c_ul.resolve();
            set_nn_threads(1);
            UpsampleDiagnostics d;
            const LabelVolume out =
                upsample_labels(LabelUpsampler::load(ul_model), load_scalar(ul_image), load_labels(ul_labels), &d);
            save_volume(out, ul_out);
            std::cout << json{{"consistency_dice", d.consistency_dice}}.dump(2) << '\n';
        } else if (*ts) {
            const PipelineConfig cfg = c_ts.resolve();
            std::vector<ManifestRow> rows;
            for (const ManifestRow &r : read_manifest(ts_manifest))
                if (!r.labels.empty()) rows.push_back(r);
            set_nn_threads(1);
            const TrainLog log = train_seg_dir(rows, cfg, ts_out);
            std::cout << json{{"best_epoch", log.best_epoch},
                              {"val_dice", log.epochs[static_cast<size_t>(log.best_epoch)].val_dice}}
                             .dump(2)
                      << '\n';
        } else if (*sg) {
            c_sg.resolve();
            set_nn_threads(1);
            save_volume(segment_files(sg_model, sg_t2, sg_t1), sg_out);
        } else if (*th) {
            const PipelineConfig cfg = c_th.resolve();
            LabelVolume seg = load_labels(th_seg);
            if (!th_labels.empty()) seg.label_table = read_label_table(th_labels);
            const double rho = th_rho > 0 ? th_rho : cfg.rho_min;
            const ThicknessReport r = measure_thickness(seg, rho);
            write_json(th_out, thickness_json(r, seg.label_table));
            if (!th_skel.empty()) {
                const Mask m = make_mask(seg);
                SkeletonGraph g = voronoi_skeleton(extract_boundary(m), m);
                g = assign_subregions(prune(g, r.rho_min), seg);
                std::ofstream os(th_skel);
                os << "x,y,z,radius_mm,rho_mm,label\n";
                for (const SkeletonVertex &v : g.vertices)
                    os << format_double(v.pos[0]) << ',' << format_double(v.pos[1]) << ',' << format_double(v.pos[2])
                       << ',' << format_double(v.r) << ',' << format_double(v.rho) << ',' << v.label << '\n';
            }
        } else if (*sc) {
            const PipelineConfig cfg = c_sc.resolve();
            const std::vector<StudyRow> rows = read_study_csv(sc_table);
            std::vector<std::string> regions = split_list(sc_regions);
            if (regions.empty()) regions = cfg.regions.empty() ? thickness_columns(rows) : cfg.regions;
            std::string tsv;
            write_json(sc_out, cross_sectional_report({{"table", rows}}, regions, &tsv));
            std::cout << tsv;
        } else if (*sl) {
            const PipelineConfig cfg = c_sl.resolve();
            const std::vector<LongPairRow> pairs = to_pairs(read_long_csv(sl_table));
            std::vector<std::string> regions = split_list(sl_regions);
            if (regions.empty() && !cfg.regions.empty()) regions = cfg.regions;
            if (regions.empty() && !pairs.empty())
                for (const auto &[k, v] : pairs.front().delta) regions.push_back(k);
            std::string tsv;
            write_json(sl_out, longitudinal_report({{"table", pairs}}, regions, &tsv));
            std::cout << tsv;
        } else if (*run || *cmp) {
            Common &c = *run ? c_run : c_cmp;
            RunOptions o;
            o.config = c.resolve();
            const std::string m = *run ? run_manifest : cmp_manifest, out = *run ? run_out : cmp_out;
            o.manifest = m.empty() ? o.config.manifest : m;
            o.out_root = out.empty() ? o.config.out : out;
            if (o.manifest.empty() || o.out_root.empty())
                throw std::invalid_argument("--manifest and --out are required (or paths.manifest / paths.out)");
            o.use_cache = !(*run ? run_nocache : cmp_nocache);
            for (const std::string &s : split_list(run_stages)) o.stages.push_back(parse_stage(s));
            print_run(*run ? run_pipeline(o) : compare_spaces(o));
        }
    } catch (const std::exception &e) {
        std::cerr << json{{"error", e.what()}, {"command", command}}.dump() << '\n';
        return 1;
    }
    return 0;
}
