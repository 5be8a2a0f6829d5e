#include "isomtl/pipeline.h"

#include "isomtl/label_sr.h"
#include "isomtl/mmseg.h"
#include "isomtl/nifti_io.h"
#include "isomtl/sr_nlm.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace isomtl {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct StageInfo {
    Stage stage;
    const char *name;
    std::vector<Stage> inputs; // stages whose files this one reads
    std::vector<const char *> keys; // consumed top-level config keys
};

const std::vector<StageInfo> &stage_table() {
    static const std::vector<StageInfo> t{
        {Stage::Upsample, "upsample", {}, {"hyperres_slice_mm", "nlm"}},
        {Stage::TrainLabelSr, "train-label-sr", {}, {"seed", "labelsr"}},
        {Stage::UpsampleLabels, "upsample-labels", {Stage::TrainLabelSr}, {}},
        {Stage::TrainSeg, "train-seg", {Stage::Upsample, Stage::UpsampleLabels}, {"seed", "seg"}},
        {Stage::Segment, "segment", {Stage::Upsample, Stage::TrainSeg}, {}},
        {Stage::Thickness, "thickness", {Stage::Segment}, {"skel"}},
        {Stage::Stats, "stats", {Stage::Thickness}, {"stats"}},
    };
    return t;
}

const StageInfo &info(Stage s) { return stage_table()[static_cast<size_t>(s)]; }

std::string read_text(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text(const fs::path &p, const std::string &s) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << s;
    if (!out) throw std::runtime_error("cannot write " + p.string());
}

void write_json(const fs::path &p, const json &j) { write_text(p, j.dump(2) + "\n"); }

json read_json(const fs::path &p) {
    try {
        return json::parse(read_text(p));
    } catch (const json::parse_error &e) {
        throw std::runtime_error(p.string() + ": " + e.what());
    }
}

std::string session_dir(const ManifestRow &r) { return r.subject_id + "/ses-" + std::to_string(r.session); }

std::string row_context(const ManifestRow &r) {
    return "subject " + r.subject_id + " session " + std::to_string(r.session);
}

// Runs f over rows on `jobs` threads. The first failing row in manifest order
// is reported, with its subject context.
template <class F> void for_rows(const std::vector<const ManifestRow *> &rows, int jobs, F f) {
    std::vector<std::exception_ptr> errors(rows.size());
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (size_t i; (i = next++) < rows.size();) {
            try {
                f(*rows[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const size_t width = std::min<size_t>(static_cast<size_t>(std::max(jobs, 1)), rows.size());
    for (size_t t = 1; t < width; ++t) pool.emplace_back(worker);
    worker();
    for (auto &t : pool) t.join();
    for (size_t i = 0; i < rows.size(); ++i) {
        if (!errors[i]) continue;
        try {
            std::rethrow_exception(errors[i]);
        } catch (const std::exception &e) {
            throw std::runtime_error(row_context(*rows[i]) + ": " + e.what());
        }
    }
}

std::vector<const ManifestRow *> with_role(const std::vector<ManifestRow> &rows, const std::string &role) {
    std::vector<const ManifestRow *> out;
    for (const ManifestRow &r : rows)
        if (r.role == role) out.push_back(&r);
    return out;
}

std::vector<std::string> files_under(const fs::path &root, const fs::path &dir) {
    std::vector<std::string> out;
    for (const auto &e : fs::recursive_directory_iterator(root / dir))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

void link_or_copy(const fs::path &from, const fs::path &to) {
    fs::create_directories(to.parent_path());
    std::error_code ec;
    fs::create_hard_link(from, to, ec);
    if (ec) fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

// Region names in label-id order, or the configured subset.
std::vector<std::string> report_regions(const PipelineConfig &cfg, const LabelTable &table) {
    if (!cfg.regions.empty()) return cfg.regions;
    std::vector<std::string> out;
    for (const auto &[id, name] : table)
        if (id != 0) out.push_back(name);
    return out;
}

std::map<std::string, double> thickness_file(const fs::path &p) { return thickness_by_name(read_json(p)); }

class Runner {
  public:
    Runner(const RunOptions &o) : opts_(o), cfg_(o.config) {
        cfg_.validate();
        rows_ = read_manifest(o.manifest);
        if (rows_.empty()) throw std::invalid_argument("manifest " + o.manifest.string() + " has no rows");
        std::set<std::pair<std::string, int>> seen;
        for (const ManifestRow &r : rows_) {
            if (!seen.insert({r.subject_id, r.session}).second)
                throw std::invalid_argument("manifest: duplicate " + row_context(r));
            if (r.t2.empty()) throw std::invalid_argument("manifest: " + row_context(r) + " has no t2");
            if ((r.role == "exvivo" || r.role == "atlas") && r.labels.empty())
                throw std::invalid_argument("manifest: " + row_context(r) + " (" + r.role + ") has no labels");
        }
        inputs_hash_ = hash_inputs();
        const json cj = to_json(cfg_);
        for (const StageInfo &s : stage_table()) {
            uint64_t h = fnv1a64(s.name);
            json consumed = json::object();
            for (const char *k : s.keys) consumed[k] = cj.at(k);
            h = fnv1a64(consumed.dump(), h);
            h = fnv1a64(inputs_hash_, h);
            for (Stage u : upstream(s.stage)) h = fnv1a64(hashes_.at(u), h);
            hashes_[s.stage] = hex64(h);
        }
    }

    RunResult run() {
        set_nn_threads(1);
        std::set<Stage> execute, reuse;
        if (opts_.stages.empty()) {
            for (Stage s : all_stages()) {
                if (opts_.use_cache && find_cached(s))
                    reuse.insert(s);
                else
                    execute.insert(s);
            }
        } else {
            execute.insert(opts_.stages.begin(), opts_.stages.end());
            for (Stage s : execute)
                for (Stage u : info(s).inputs)
                    if (!execute.count(u)) reuse.insert(u);
            for (Stage u : reuse)
                if (!find_cached(u))
                    throw std::runtime_error("missing dependency: stage " + to_string(u) + " (hash " + hashes_.at(u) +
                                             ") has no cached output under " + opts_.out_root.string());
        }
        fs::create_directories(opts_.out_root);
        run_dir_ = next_run_dir();
        fs::create_directories(run_dir_);
        write_json(run_dir_ / "config.json", to_json(cfg_));

        RunResult result{run_dir_, {}};
        json log{{"run", run_dir_.filename().string()},
                 {"config_hash", hex64(fnv1a64(to_json(cfg_).dump()))},
                 {"inputs_hash", inputs_hash_},
                 {"stages", json::array()}};
        for (Stage s : all_stages()) {
            if (!execute.count(s) && !reuse.count(s)) continue;
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<std::string> files;
            if (reuse.count(s))
                files = link_cached(s);
            else
                files = execute_stage(s);
            const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            write_json(run_dir_ / "stages" / (to_string(s) + ".json"),
                       {{"stage", to_string(s)}, {"hash", hashes_.at(s)}, {"files", files}});
            StageRecord rec{s, hashes_.at(s), reuse.count(s) > 0, sec};
            result.stages.push_back(rec);
            log["stages"].push_back(
                {{"stage", to_string(s)}, {"hash", rec.hash}, {"reused", rec.reused}, {"seconds", rec.seconds}});
            write_json(run_dir_ / "run.json", log);
        }
        write_json(run_dir_ / "run.json", log);
        return result;
    }

    const std::vector<ManifestRow> &rows() const { return rows_; }
    const PipelineConfig &config() const { return cfg_; }

  private:
    const RunOptions &opts_;
    PipelineConfig cfg_;
    std::vector<ManifestRow> rows_;
    std::string inputs_hash_;
    std::map<Stage, std::string> hashes_;
    fs::path run_dir_;
    std::map<Stage, fs::path> cached_;

    static std::vector<Stage> upstream(Stage s) {
        std::set<Stage> all;
        std::vector<Stage> todo = info(s).inputs;
        while (!todo.empty()) {
            Stage u = todo.back();
            todo.pop_back();
            if (all.insert(u).second)
                for (Stage v : info(u).inputs) todo.push_back(v);
        }
        return {all.begin(), all.end()};
    }

    std::string hash_inputs() const {
        uint64_t h = fnv1a64(read_text(opts_.manifest));
        for (const ManifestRow &r : rows_)
            for (const fs::path *p : {&r.t2, &r.t1, &r.labels, &r.truth}) {
                if (p->empty()) continue;
                h = fnv1a64(read_text(*p), h);
                const fs::path side = label_sidecar_path(*p);
                if (fs::exists(side)) h = fnv1a64(read_text(side), h);
            }
        return hex64(h);
    }

    std::vector<std::pair<int, fs::path>> previous_runs() const {
        static const std::regex pat("run-([0-9]+)");
        std::vector<std::pair<int, fs::path>> out;
        if (!fs::is_directory(opts_.out_root)) return out;
        for (const auto &e : fs::directory_iterator(opts_.out_root)) {
            std::smatch m;
            const std::string name = e.path().filename().string();
            if (e.is_directory() && std::regex_match(name, m, pat)) out.emplace_back(std::stoi(m[1]), e.path());
        }
        std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.first > b.first; });
        return out;
    }

    fs::path next_run_dir() const {
        const auto prev = previous_runs();
        const int n = prev.empty() ? 1 : prev.front().first + 1;
        char name[32];
        std::snprintf(name, sizeof name, "run-%03d", n);
        return opts_.out_root / name;
    }

    // Most recent earlier run holding complete outputs of `s` under its current hash.
    bool find_cached(Stage s) {
        for (const auto &[n, dir] : previous_runs()) {
            if (dir == run_dir_) continue;
            const fs::path rec = dir / "stages" / (to_string(s) + ".json");
            if (!fs::exists(rec)) continue;
            json j;
            try {
                j = read_json(rec);
            } catch (const std::exception &) {
                continue;
            }
            if (j.value("hash", "") != hashes_.at(s)) continue;
            bool complete = true;
            for (const auto &f : j.at("files"))
                if (!fs::exists(dir / f.get<std::string>())) complete = false;
            if (complete) {
                cached_[s] = dir;
                return true;
            }
        }
        return false;
    }

    std::vector<std::string> link_cached(Stage s) {
        const fs::path src = cached_.at(s);
        const json j = read_json(src / "stages" / (to_string(s) + ".json"));
        std::vector<std::string> files = j.at("files").get<std::vector<std::string>>();
        for (const std::string &f : files) link_or_copy(src / f, run_dir_ / f);
        return files;
    }

    fs::path at(const ManifestRow &r, const char *file) const { return run_dir_ / session_dir(r) / file; }
    // Output path; creates the session directory.
    fs::path dest(const ManifestRow &r, const char *file) const {
        fs::create_directories(run_dir_ / session_dir(r));
        return at(r, file);
    }
    std::string rel(const ManifestRow &r, const char *file) const { return session_dir(r) + "/" + file; }

    std::vector<std::string> execute_stage(Stage s) {
        switch (s) {
        case Stage::Upsample: return do_upsample();
        case Stage::TrainLabelSr: return do_train_label_sr();
        case Stage::UpsampleLabels: return do_upsample_labels();
        case Stage::TrainSeg: return do_train_seg();
        case Stage::Segment: return do_segment();
        case Stage::Thickness: return do_thickness();
        case Stage::Stats: return do_stats();
        }
        throw std::logic_error("unknown stage");
    }

    std::vector<const ManifestRow *> imaging_rows() const {
        std::vector<const ManifestRow *> out;
        for (const ManifestRow &r : rows_)
            if (r.role != "exvivo") out.push_back(&r);
        return out;
    }

    std::vector<std::string> do_upsample() {
        const auto rows = imaging_rows();
        std::vector<std::vector<std::string>> files(rows.size());
        std::map<const ManifestRow *, size_t> slot;
        for (size_t i = 0; i < rows.size(); ++i) slot[rows[i]] = i;
        for_rows(rows, cfg_.jobs, [&](const ManifestRow &r) {
            auto &out = files[slot.at(&r)];
            const ScalarVolume t2 = load_scalar(r.t2);
            const Grid3 target = hyperres_target(t2.grid, cfg_.hyperres_slice_mm);
            save_volume(upsample_to(t2, target, cfg_.nlm), dest(r, "t2_hr.nii.gz"));
            out.push_back(rel(r, "t2_hr.nii.gz"));
            if (!r.t1.empty()) {
                save_volume(upsample_to(load_scalar(r.t1), target, cfg_.nlm), dest(r, "t1_hr.nii.gz"));
                out.push_back(rel(r, "t1_hr.nii.gz"));
            }
        });
        std::vector<std::string> all;
        for (auto &f : files) all.insert(all.end(), f.begin(), f.end());
        return all;
    }

    std::vector<std::string> do_train_label_sr() {
        std::vector<ManifestRow> rows;
        for (const ManifestRow *r : with_role(rows_, "exvivo")) rows.push_back(*r);
        if (rows.empty()) throw std::runtime_error("train-label-sr: manifest has no exvivo rows");
        train_label_sr_dir(rows, cfg_, run_dir_ / "models/label_sr");
        return files_under(run_dir_, "models/label_sr");
    }

    std::vector<std::string> do_upsample_labels() {
        const auto rows = with_role(rows_, "atlas");
        if (rows.empty()) throw std::runtime_error("upsample-labels: manifest has no atlas rows");
        const LabelUpsampler model = LabelUpsampler::load(run_dir_ / "models/label_sr");
        std::vector<std::string> files;
        for (const ManifestRow *r : rows) {
            files.push_back(rel(*r, "labels_hr.nii.gz"));
            files.push_back(rel(*r, "labels_hr.labels.json"));
            files.push_back(rel(*r, "labels_hr.json"));
        }
        for_rows(rows, cfg_.jobs, [&](const ManifestRow &r) {
            const ScalarVolume t2 = load_scalar(r.t2);
            const LabelVolume coarse = load_labels(r.labels);
            UpsampleDiagnostics diag;
            LabelVolume fine = upsample_labels(model, t2, coarse, &diag);
            const Grid3 target = hyperres_target(t2.grid, cfg_.hyperres_slice_mm);
            if (!same_geometry(fine.grid, target)) fine = resample_nearest(fine, target);
            save_volume(fine, dest(r, "labels_hr.nii.gz"));
            write_json(dest(r, "labels_hr.json"), {{"consistency_dice", diag.consistency_dice}});
        });
        return files;
    }

    std::vector<std::string> do_train_seg() {
        std::vector<ManifestRow> rows;
        for (const ManifestRow *r : with_role(rows_, "atlas")) {
            ManifestRow c = *r;
            c.t2 = at(*r, "t2_hr.nii.gz");
            c.t1 = r->t1.empty() ? fs::path() : at(*r, "t1_hr.nii.gz");
            c.labels = at(*r, "labels_hr.nii.gz");
            rows.push_back(c);
        }
        if (rows.empty()) throw std::runtime_error("train-seg: manifest has no atlas rows");
        train_seg_dir(rows, cfg_, run_dir_ / "models/seg");
        return files_under(run_dir_, "models/seg");
    }

    std::vector<std::string> do_segment() {
        const auto rows = with_role(rows_, "study");
        if (rows.empty()) throw std::runtime_error("segment: manifest has no study rows");
        std::vector<std::string> files;
        for (const ManifestRow *r : rows) {
            files.push_back(rel(*r, "seg_hr.nii.gz"));
            files.push_back(rel(*r, "seg_hr.labels.json"));
        }
        const fs::path model = run_dir_ / "models/seg";
        const SegModel m = SegModel::load(model);
        const LabelTable table = read_label_table(model / "labels.json");
        for_rows(rows, cfg_.jobs, [&](const ManifestRow &r) {
            std::vector<ScalarVolume> v{load_scalar(at(r, "t2_hr.nii.gz"))};
            if (!r.t1.empty()) v.push_back(load_scalar(at(r, "t1_hr.nii.gz")));
            const ScalarVolume *ptr[] = {&v[0], v.size() > 1 ? &v[1] : nullptr};
            save_volume(segment(m, stack_modalities(ptr, m.config()), table), dest(r, "seg_hr.nii.gz"));
        });
        return files;
    }

    std::vector<std::string> do_thickness() {
        const auto rows = with_role(rows_, "study");
        std::vector<std::string> files;
        for (const ManifestRow *r : rows)
            for (const char *f : {"seg_aniso.nii.gz", "seg_aniso.labels.json", "thickness_hyperres.json",
                                  "thickness_anisotropic.json"})
                files.push_back(rel(*r, f));
        for_rows(rows, cfg_.jobs, [&](const ManifestRow &r) {
            const LabelVolume seg = load_labels(at(r, "seg_hr.nii.gz"));
            const LabelVolume aniso = to_anisotropic(seg, load_scalar(r.t2).grid);
            save_volume(aniso, dest(r, "seg_aniso.nii.gz"));
            write_json(dest(r, "thickness_hyperres.json"),
                       thickness_json(measure_thickness(seg, cfg_.rho_min), seg.label_table));
            write_json(dest(r, "thickness_anisotropic.json"),
                       thickness_json(measure_thickness(aniso, cfg_.rho_min), aniso.label_table));
        });
        return files;
    }

    std::vector<std::string> do_stats() {
        const auto rows = with_role(rows_, "study");
        const LabelTable table = load_labels(at(*rows.front(), "seg_hr.nii.gz")).label_table;
        const std::vector<std::string> regions = report_regions(cfg_, table);
        const std::pair<const char *, const char *> spaces[] = {{"anisotropic", "Anisotropic T2w"},
                                                                {"hyperres", "Hyper-resolution"}};
        fs::create_directories(run_dir_ / "reports");
        std::vector<std::string> files;
        std::vector<std::pair<std::string, std::vector<StudyRow>>> cross;
        std::vector<std::pair<std::string, std::vector<LongPairRow>>> longi;
        for (const auto &[key, title] : spaces) {
            const std::string fname = std::string("thickness_") + key + ".json";
            std::vector<StudyRow> study;
            std::map<std::string, std::map<int, const ManifestRow *>> sessions;
            for (const ManifestRow *r : rows) {
                sessions[r->subject_id][r->session] = r;
                if (r->session != 1) continue;
                if (r->group.empty()) throw std::runtime_error("stats: " + row_context(*r) + " has no group");
                study.push_back({r->subject_id, parse_group(r->group), r->age,
                                 thickness_file(at(*r, fname.c_str()))});
            }
            std::vector<LongPairRow> pairs;
            for (const auto &[id, ses] : sessions) {
                if (!ses.count(1) || !ses.count(2)) continue;
                const ManifestRow &a = *ses.at(1), &b = *ses.at(2);
                if (a.scan_date.empty() || b.scan_date.empty())
                    throw std::runtime_error("stats: subject " + id + " lacks scan dates");
                pairs.push_back(make_long_pair(id, days_between(a.scan_date, b.scan_date),
                                               thickness_file(at(a, fname.c_str())),
                                               thickness_file(at(b, fname.c_str()))));
            }
            write_study_csv(study, regions, run_dir_ / "reports" / (std::string("study_") + key + ".csv"));
            files.push_back(std::string("reports/study_") + key + ".csv");
            cross.emplace_back(title, std::move(study));
            if (!pairs.empty()) longi.emplace_back(title, std::move(pairs));
        }
        std::string tsv;
        write_json(run_dir_ / "reports/cross_sectional.json", cross_sectional_report(cross, regions, &tsv));
        write_text(run_dir_ / "reports/cross_sectional.tsv", tsv);
        files.push_back("reports/cross_sectional.json");
        files.push_back("reports/cross_sectional.tsv");
        if (!longi.empty()) {
            write_json(run_dir_ / "reports/longitudinal.json", longitudinal_report(longi, regions, &tsv));
            write_text(run_dir_ / "reports/longitudinal.tsv", tsv);
            files.push_back("reports/longitudinal.json");
            files.push_back("reports/longitudinal.tsv");
        }
        return files;
    }
};

std::string fmt6(double v) {
    if (!std::isfinite(v)) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

} // namespace

const std::vector<Stage> &all_stages() {
    static const std::vector<Stage> s{Stage::Upsample, Stage::TrainLabelSr, Stage::UpsampleLabels, Stage::TrainSeg,
                                      Stage::Segment,  Stage::Thickness,    Stage::Stats};
    return s;
}

std::string to_string(Stage s) { return info(s).name; }

Stage parse_stage(const std::string &s) {
    for (const StageInfo &i : stage_table())
        if (s == i.name) return i.stage;
    throw std::invalid_argument("unknown stage '" + s + "'");
}

Grid3 hyperres_target(const Grid3 &t2_grid, double slice_mm) {
    return hyperres_grid(t2_grid, HyperresMode::InferFixed, slice_mm);
}

ScalarVolume upsample_to(const ScalarVolume &vol, const Grid3 &target, const NlmParams &nlm) {
    return two_step_upsample(vol, target, nlm);
}

LabelVolume to_anisotropic(const LabelVolume &seg_hr, const Grid3 &coarse) {
    const Grid3 &f = seg_hr.grid;
    const int factor = static_cast<int>(std::lround(coarse.spacing[2] / f.spacing[2]));
    if (factor >= 1 && f.dims[0] == coarse.dims[0] && f.dims[1] == coarse.dims[1] &&
        f.dims[2] == coarse.dims[2] * factor) {
        LabelVolume out = block_majority_downsample_slice(seg_hr, factor);
        if (same_geometry(out.grid, coarse, 1e-4)) {
            out.grid = coarse;
            return out;
        }
    }
    return resample_nearest(seg_hr, coarse);
}

TrainLog train_label_sr_dir(const std::vector<ManifestRow> &rows, const PipelineConfig &cfg, const fs::path &dir) {
    std::mt19937_64 rng(cfg.seed);
    std::vector<TrainSample> samples;
    for (const ManifestRow &r : rows) {
        if (r.labels.empty()) throw std::invalid_argument(row_context(r) + ": no labels");
        try {
            const LabelVolume labels = load_labels(r.labels);
            const ScalarVolume image = load_scalar(r.t2);
            auto s = make_training_pairs(labels, image, cfg.labelsr.crops_per_window, rng, cfg.labelsr.network);
            samples.insert(samples.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
        } catch (const std::exception &e) {
            throw std::runtime_error(row_context(r) + ": " + e.what());
        }
    }
    TrainerParams p = cfg.labelsr.trainer;
    p.seed = cfg.seed;
    LabelSrTraining t = train_upsampler(samples, p, cfg.labelsr.network);
    t.model.save(dir);
    write_text(dir / "train_log.csv", t.log.to_csv(true));
    return t.log;
}

TrainLog train_seg_dir(const std::vector<ManifestRow> &rows, const PipelineConfig &cfg, const fs::path &dir) {
    std::vector<SegCase> cases;
    LabelTable table;
    for (const ManifestRow &r : rows) {
        if (r.labels.empty()) throw std::invalid_argument(row_context(r) + ": no labels");
        try {
            std::vector<ScalarVolume> v{load_scalar(r.t2)};
            if (!r.t1.empty()) v.push_back(load_scalar(r.t1));
            const ScalarVolume *ptr[] = {&v[0], v.size() > 1 ? &v[1] : nullptr};
            LabelVolume labels = load_labels(r.labels);
            if (table.empty()) table = labels.label_table;
            ModalityStack stack = stack_modalities(std::span(ptr, cfg.seg.network.modalities.size() > 1 ? 2 : 1),
                                                   cfg.seg.network);
            cases.push_back({std::move(stack), std::move(labels)});
        } catch (const std::exception &e) {
            throw std::runtime_error(row_context(r) + ": " + e.what());
        }
    }
    TrainerParams p = cfg.seg.trainer;
    p.seed = cfg.seed;
    SegTraining t = train_seg(cases, cfg.seg.network, cfg.seg.augmentation, p);
    t.model.save(dir);
    write_label_table(table, dir / "labels.json");
    write_text(dir / "train_log.csv", t.log.to_csv(false));
    return t.log;
}

LabelVolume segment_files(const fs::path &model_dir, const fs::path &t2, const fs::path &t1) {
    const SegModel m = SegModel::load(model_dir);
    LabelTable table = default_mtl_labels();
    if (fs::exists(model_dir / "labels.json")) table = read_label_table(model_dir / "labels.json");
    std::vector<ScalarVolume> v{load_scalar(t2)};
    if (!t1.empty()) {
        ScalarVolume b = load_scalar(t1);
        if (!same_geometry(b.grid, v[0].grid)) b = resample_linear(b, v[0].grid);
        v.push_back(std::move(b));
    }
    const ScalarVolume *ptr[] = {&v[0], v.size() > 1 ? &v[1] : nullptr};
    return segment(m, stack_modalities(std::span(ptr, m.config().modalities.size() > 1 ? 2 : 1), m.config()), table);
}

json thickness_json(const ThicknessReport &r, const LabelTable &table) {
    auto name = [&](int id) {
        auto it = table.find(id);
        return it == table.end() ? std::to_string(id) : it->second;
    };
    json j = json::object();
    for (const auto &[id, t] : r.regions) {
        if (id == 0) continue;
        j[name(id)] = {{"median_mm", t.median_mm},
                       {"unweighted_median_mm", t.unweighted_median_mm},
                       {"n_vertices", t.n_vertices},
                       {"measure_mm", t.measure_mm},
                       {"weighted", true}};
    }
    json absent = json::array();
    for (int id : r.absent) absent.push_back(name(id));
    j["params"] = {{"rho_min", r.rho_min},
                   {"boundary_count", r.boundary_count},
                   {"vertex_count", r.vertex_count},
                   {"low_confidence", r.low_confidence},
                   {"absent", absent}};
    return j;
}

std::map<std::string, double> thickness_by_name(const json &j) {
    std::map<std::string, double> out;
    for (const auto &[k, v] : j.items())
        if (k != "params") out[k] = v.at("median_mm").get<double>();
    return out;
}

json cross_sectional_report(const std::vector<std::pair<std::string, std::vector<StudyRow>>> &spaces,
                            const std::vector<std::string> &regions, std::string *table) {
    std::vector<CrossColumn> cols;
    json j{{"regions", regions}, {"columns", json::array()}};
    for (const auto &[title, rows] : spaces) {
        CrossColumn c{title, {}};
        json col{{"title", title}, {"n", rows.size()}, {"by_region", json::object()}};
        for (const std::string &r : regions) {
            try {
                const GLMResult g = glm_group_difference(rows, r);
                c.by_region[r] = g;
                col["by_region"][r] = {{"beta_group", g.beta_group}, {"t_stat", g.t_stat},
                                       {"p_one_sided", g.p_one_sided}, {"auc", g.auc},
                                       {"df", g.df},               {"n_cn", g.n_cn},
                                       {"n_mci", g.n_mci}};
            } catch (const std::exception &e) {
                col["by_region"][r] = {{"error", e.what()}};
            }
        }
        cols.push_back(std::move(c));
        j["columns"].push_back(std::move(col));
    }
    if (table) *table = render_cross_table(cols, regions);
    return j;
}

json longitudinal_report(const std::vector<std::pair<std::string, std::vector<LongPairRow>>> &spaces,
                         const std::vector<std::string> &regions, std::string *table) {
    std::vector<LongColumn> cols;
    json j{{"regions", regions}, {"columns", json::array()}};
    for (const auto &[title, pairs] : spaces) {
        LongColumn c{title, {}};
        json col{{"title", title}, {"n_pairs", pairs.size()}, {"by_region", json::object()}};
        for (const std::string &r : regions) {
            try {
                const Consistency k = longitudinal_consistency(pairs, r);
                c.by_region[r] = k;
                col["by_region"][r] = {{"std", k.std}, {"abs_sum", k.abs_sum}, {"n", k.n}};
            } catch (const std::exception &e) {
                col["by_region"][r] = {{"error", e.what()}};
            }
        }
        cols.push_back(std::move(c));
        j["columns"].push_back(std::move(col));
    }
    if (table) *table = render_long_table(cols, regions);
    return j;
}

RunResult run_pipeline(const RunOptions &opts) { return Runner(opts).run(); }

RunResult compare_spaces(const RunOptions &opts) {
    Runner runner(opts);
    RunResult res = runner.run();
    const fs::path &run = res.run_dir;
    const auto &rows = runner.rows();
    json report = json::object();
    std::ostringstream tsv;

    // Phantom mode: per band, mean |measured - truth| in each space.
    struct Acc {
        double aniso = 0, iso = 0;
        size_t n_aniso = 0, n_iso = 0, n = 0;
    };
    std::map<int, std::pair<std::string, Acc>> bands;
    json per_subject = json::array();
    for (const ManifestRow &r : rows) {
        if (r.role != "study" || r.truth.empty()) continue;
        const json truth = read_json(r.truth);
        const fs::path dir = run / session_dir(r);
        const auto aniso = thickness_file(dir / "thickness_anisotropic.json");
        const auto iso = thickness_file(dir / "thickness_hyperres.json");
        for (const auto &b : truth.at("bands")) {
            const std::string name = b.at("name").get<std::string>();
            const double t = b.at("thickness_mm").get<double>();
            auto &[bname, acc] = bands[b.at("label").get<int>()];
            bname = name;
            ++acc.n;
            json row{{"subject_id", r.subject_id}, {"session", r.session}, {"band", name}, {"truth_mm", t}};
            if (auto it = aniso.find(name); it != aniso.end()) {
                const double e = std::abs(it->second - t);
                acc.aniso += e, ++acc.n_aniso;
                row["aniso_err"] = e;
            } else {
                row["aniso_err"] = nullptr;
            }
            if (auto it = iso.find(name); it != iso.end()) {
                const double e = std::abs(it->second - t);
                acc.iso += e, ++acc.n_iso;
                row["iso_err"] = e;
            } else {
                row["iso_err"] = nullptr;
            }
            per_subject.push_back(std::move(row));
        }
    }
    if (!bands.empty()) {
        json table = json::array();
        tsv << "band\taniso_err\tiso_err\tn\n";
        for (const auto &[label, v] : bands) {
            const auto &[name, a] = v;
            // A band missing from a space's measurement counts against that space.
            const double ae = a.n_aniso == a.n ? a.aniso / static_cast<double>(a.n) : NAN;
            const double ie = a.n_iso == a.n ? a.iso / static_cast<double>(a.n) : NAN;
            table.push_back({{"band", name},
                             {"label", label},
                             {"aniso_err", std::isfinite(ae) ? json(ae) : json(nullptr)},
                             {"iso_err", std::isfinite(ie) ? json(ie) : json(nullptr)},
                             {"n", a.n}});
            tsv << name << '\t' << fmt6(ae) << '\t' << fmt6(ie) << '\t' << a.n << '\n';
        }
        report["phantom"] = {{"bands", table}, {"per_subject", per_subject}};
    }

    // Longitudinal mode: Std / AbsSum of annualized deltas per space.
    std::map<std::string, std::map<int, const ManifestRow *>> sessions;
    for (const ManifestRow &r : rows)
        if (r.role == "study") sessions[r.subject_id][r.session] = &r;
    std::vector<std::pair<std::string, std::vector<LongPairRow>>> spaces{{"Anisotropic T2w", {}},
                                                                         {"Hyper-resolution", {}}};
    for (const auto &[id, ses] : sessions) {
        if (!ses.count(1) || !ses.count(2)) continue;
        const ManifestRow &a = *ses.at(1), &b = *ses.at(2);
        if (a.scan_date.empty() || b.scan_date.empty()) continue;
        const int64_t days = days_between(a.scan_date, b.scan_date);
        const char *files[] = {"thickness_anisotropic.json", "thickness_hyperres.json"};
        for (size_t k = 0; k < 2; ++k)
            spaces[k].second.push_back(make_long_pair(id, days, thickness_file(run / session_dir(a) / files[k]),
                                                      thickness_file(run / session_dir(b) / files[k])));
    }
    if (spaces[0].second.size() >= 2) {
        LabelTable table;
        for (const ManifestRow &r : rows)
            if (r.role == "study") {
                table = load_labels(run / session_dir(r) / "seg_hr.nii.gz").label_table;
                break;
            }
        std::string t;
        report["longitudinal"] = longitudinal_report(spaces, report_regions(runner.config(), table), &t);
        if (!bands.empty()) tsv << '\n';
        tsv << t;
    }
    if (report.empty())
        throw std::runtime_error("compare-spaces: study rows carry neither truth nor two dated sessions");
    write_json(run / "reports/compare_spaces.json", report);
    write_text(run / "reports/compare_spaces.tsv", tsv.str());
    return res;
}

} // namespace isomtl
