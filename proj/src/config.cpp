#include "isomtl/config.h"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace isomtl {

using nlohmann::json;

PipelineConfig::PipelineConfig() {
    labelsr.crops_per_window = 8;
    labelsr.trainer.batch_size = 16;
    labelsr.trainer.epochs = 20;
    labelsr.trainer.lambda = 0.2;
    labelsr.trainer.learning_rate = 3e-3;
    labelsr.trainer.steps_per_epoch = 50;
    seg.trainer.batch_size = 2;
    seg.trainer.epochs = 40;
    seg.trainer.learning_rate = 3e-3;
    seg.trainer.steps_per_epoch = 50;
}

void PipelineConfig::validate() const {
    if (jobs < 1) throw std::invalid_argument("config: jobs must be >= 1");
    if (!(hyperres_slice_mm > 0)) throw std::invalid_argument("config: hyperres_slice_mm must be positive");
    nlm.validate();
    labelsr.network.validate();
    labelsr.trainer.validate();
    if (labelsr.crops_per_window < 1) throw std::invalid_argument("config: labelsr.crops_per_window must be >= 1");
    seg.network.validate();
    seg.augmentation.validate(seg.network.modalities.size());
    seg.trainer.validate();
}

namespace {

json trainer_json(const TrainerParams &t, bool with_lambda) {
    json j{{"optimizer", t.optimizer},   {"learning_rate", t.learning_rate},     {"lr_decay", t.lr_decay},
           {"batch_size", t.batch_size}, {"epochs", t.epochs},                   {"steps_per_epoch", t.steps_per_epoch},
           {"val_fraction", t.val_fraction}};
    if (with_lambda) j["lambda"] = t.lambda;
    return j;
}

void trainer_from(const json &j, TrainerParams &t, bool with_lambda) {
    t.optimizer = j.at("optimizer").get<std::string>();
    t.learning_rate = j.at("learning_rate").get<double>();
    t.lr_decay = j.at("lr_decay").get<double>();
    t.batch_size = j.at("batch_size").get<int>();
    t.epochs = j.at("epochs").get<int>();
    t.steps_per_epoch = j.at("steps_per_epoch").get<int>();
    t.val_fraction = j.at("val_fraction").get<double>();
    if (with_lambda) t.lambda = j.at("lambda").get<double>();
}

void reject_unknown(const json &defaults, const json &user, const std::string &where) {
    if (!user.is_object()) throw std::invalid_argument("config: " + (where.empty() ? "document" : where) + " must be an object");
    for (const auto &[k, v] : user.items()) {
        const std::string path = where.empty() ? k : where + "." + k;
        if (!defaults.contains(k)) throw std::invalid_argument("config: unknown key " + path);
        if (defaults[k].is_object()) reject_unknown(defaults[k], v, path);
    }
}

} // namespace

json to_json(const PipelineConfig &c) {
    const UpsamplerConfig &u = c.labelsr.network;
    const SegConfig &s = c.seg.network;
    return {
        {"seed", c.seed},
        {"jobs", c.jobs},
        {"hyperres_slice_mm", c.hyperres_slice_mm},
        {"nlm",
         {{"patch_radius", c.nlm.patch_radius},
          {"search_radius", c.nlm.search_radius},
          {"h_scale", c.nlm.h_scale},
          {"smoothing_h", c.nlm.smoothing_h},
          {"max_iters", c.nlm.max_iters},
          {"tol", c.nlm.tol}}},
        {"labelsr",
         {{"level_channels", u.level_channels},
          {"residual_units_per_level", u.residual_units_per_level},
          {"crops_per_window", c.labelsr.crops_per_window},
          {"trainer", trainer_json(c.labelsr.trainer, true)}}},
        {"seg",
         {{"modalities", s.modalities},
          {"classes", s.classes},
          {"patch", s.patch},
          {"base_channels", s.base_channels},
          {"levels", s.levels},
          {"p_drop", c.seg.augmentation.p_drop},
          {"trainer", trainer_json(c.seg.trainer, false)}}},
        {"skel", {{"rho_min", c.rho_min}}},
        {"stats", {{"regions", c.regions}}},
        {"paths", {{"manifest", c.manifest}, {"out", c.out}}},
    };
}

PipelineConfig config_from_json(const json &user) {
    const json defaults = to_json(PipelineConfig{});
    reject_unknown(defaults, user, "");
    json j = defaults;
    j.merge_patch(user);
    PipelineConfig c;
    try {
        c.seed = j.at("seed").get<uint64_t>();
        c.jobs = j.at("jobs").get<int>();
        c.hyperres_slice_mm = j.at("hyperres_slice_mm").get<double>();
        const json &n = j.at("nlm");
        c.nlm.patch_radius = n.at("patch_radius").get<int>();
        c.nlm.search_radius = n.at("search_radius").get<int>();
        c.nlm.h_scale = n.at("h_scale").get<double>();
        c.nlm.smoothing_h = n.at("smoothing_h").get<double>();
        c.nlm.max_iters = n.at("max_iters").get<int>();
        c.nlm.tol = n.at("tol").get<double>();
        const json &l = j.at("labelsr");
        c.labelsr.network.level_channels = l.at("level_channels").get<std::vector<int>>();
        c.labelsr.network.levels = static_cast<int>(c.labelsr.network.level_channels.size());
        c.labelsr.network.residual_units_per_level = l.at("residual_units_per_level").get<int>();
        c.labelsr.crops_per_window = l.at("crops_per_window").get<int>();
        trainer_from(l.at("trainer"), c.labelsr.trainer, true);
        const json &s = j.at("seg");
        c.seg.network.modalities = s.at("modalities").get<std::vector<std::string>>();
        c.seg.network.classes = s.at("classes").get<std::vector<int>>();
        c.seg.network.patch = s.at("patch").get<Index3>();
        c.seg.network.base_channels = s.at("base_channels").get<int>();
        c.seg.network.levels = s.at("levels").get<int>();
        c.seg.augmentation.p_drop = s.at("p_drop").get<std::vector<double>>();
        trainer_from(s.at("trainer"), c.seg.trainer, false);
        c.rho_min = j.at("skel").at("rho_min").get<double>();
        c.regions = j.at("stats").at("regions").get<std::vector<std::string>>();
        c.manifest = j.at("paths").at("manifest").get<std::string>();
        c.out = j.at("paths").at("out").get<std::string>();
    } catch (const json::exception &e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

PipelineConfig load_config(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error &e) {
        throw std::invalid_argument("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

uint64_t fnv1a64(std::string_view data, uint64_t h) {
    for (unsigned char ch : data) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace isomtl
