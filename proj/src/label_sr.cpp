#include "isomtl/label_sr.h"

#include "nn_internal.h"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace isomtl {

using nlohmann::json;
namespace F = torch::nn::functional;

void UpsamplerConfig::validate() const {
    if (levels < 1 || static_cast<int>(level_channels.size()) != levels)
        throw std::invalid_argument("upsampler: need one channel width per level");
    for (int c : level_channels)
        if (c < 1) throw std::invalid_argument("upsampler: channel widths must be positive");
    if (residual_units_per_level < 1) throw std::invalid_argument("upsampler: need at least one residual unit");
    if (slices_per_window < 1 || upsample_factor < 1 || label_channels < 1 || patch_inplane < 8)
        throw std::invalid_argument("upsampler: bad window geometry");
    if (in_channels != slices_per_window * (1 + label_channels))
        throw std::invalid_argument("upsampler: in_channels must be slices x (1 + label channels)");
    if (out_channels != label_channels * slices_per_window * upsample_factor)
        throw std::invalid_argument("upsampler: out_channels must be label channels x slices x factor");
}

namespace {

json config_json(const UpsamplerConfig &c) {
    return {{"in_channels", c.in_channels},
            {"out_channels", c.out_channels},
            {"levels", c.levels},
            {"level_channels", c.level_channels},
            {"residual_units_per_level", c.residual_units_per_level},
            {"patch_inplane", c.patch_inplane},
            {"slices_per_window", c.slices_per_window},
            {"upsample_factor", c.upsample_factor},
            {"label_channels", c.label_channels}};
}

UpsamplerConfig config_from_json(const json &j) {
    UpsamplerConfig c;
    c.in_channels = j.at("in_channels");
    c.out_channels = j.at("out_channels");
    c.levels = j.at("levels");
    c.level_channels = j.at("level_channels").get<std::vector<int>>();
    c.residual_units_per_level = j.at("residual_units_per_level");
    c.patch_inplane = j.at("patch_inplane");
    c.slices_per_window = j.at("slices_per_window");
    c.upsample_factor = j.at("upsample_factor");
    c.label_channels = j.at("label_channels");
    c.validate();
    return c;
}

struct ResUnitImpl : torch::nn::Module {
    ResUnitImpl(int in, int out, int stride) {
        c1 = register_module("c1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1)));
        b1 = register_module("b1", torch::nn::BatchNorm2d(out));
        a1 = register_module("a1", torch::nn::PReLU());
        c2 = register_module("c2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
        b2 = register_module("b2", torch::nn::BatchNorm2d(out));
        a2 = register_module("a2", torch::nn::PReLU());
        if (in != out || stride != 1) {
            const int k = stride == 1 ? 1 : 3;
            skip = register_module(
                "skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2)));
        }
    }
    torch::Tensor forward(const torch::Tensor &x) {
        torch::Tensor y = a2(b2(c2(a1(b1(c1(x))))));
        return y + (skip ? skip(x) : x);
    }
    torch::nn::Conv2d c1{nullptr}, c2{nullptr}, skip{nullptr};
    torch::nn::BatchNorm2d b1{nullptr}, b2{nullptr};
    torch::nn::PReLU a1{nullptr}, a2{nullptr};
};
TORCH_MODULE(ResUnit);

struct UNet2dImpl : torch::nn::Module {
    explicit UNet2dImpl(const UpsamplerConfig &c) {
        const auto &ch = c.level_channels;
        int in = c.in_channels;
        for (int l = 0; l < c.levels; ++l) {
            torch::nn::Sequential s;
            for (int u = 0; u < c.residual_units_per_level; ++u)
                s->push_back(ResUnit(u == 0 ? in : ch[l], ch[l], u == 0 && l > 0 ? 2 : 1));
            enc.push_back(register_module("enc" + std::to_string(l), s));
            in = ch[l];
        }
        for (int l = c.levels - 1; l > 0; --l) {
            up.push_back(register_module(
                "up" + std::to_string(l),
                torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(ch[l], ch[l - 1], 2).stride(2))));
            torch::nn::Sequential s;
            for (int u = 0; u < c.residual_units_per_level; ++u)
                s->push_back(ResUnit(u == 0 ? 2 * ch[l - 1] : ch[l - 1], ch[l - 1], 1));
            dec.push_back(register_module("dec" + std::to_string(l), s));
        }
        head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch[0], c.out_channels, 1)));
    }
    torch::Tensor forward(torch::Tensor x) {
        std::vector<torch::Tensor> skips;
        for (auto &e : enc) {
            x = e->forward(x);
            skips.push_back(x);
        }
        skips.pop_back();
        for (size_t i = 0; i < up.size(); ++i) {
            x = up[i]->forward(x);
            x = dec[i]->forward(torch::cat({x, skips.back()}, 1));
            skips.pop_back();
        }
        return torch::sigmoid(head(x));
    }
    std::vector<torch::nn::Sequential> enc, dec;
    std::vector<torch::nn::ConvTranspose2d> up;
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(UNet2d);

} // namespace

struct LabelUpsampler::Impl {
    UpsamplerConfig cfg;
    UNet2d net{nullptr};

    int multiple() const { return 1 << (cfg.levels - 1); }

    // (B, in, h, w) -> (B, out, h, w); pads to a multiple of 2^(levels-1).
    torch::Tensor run(const torch::Tensor &x) {
        const int64_t h = x.size(2), w = x.size(3), m = multiple();
        const int64_t ph = (m - h % m) % m, pw = (m - w % m) % m;
        torch::Tensor in = x;
        if (ph || pw) {
            const bool reflect = ph < h && pw < w;
            F::PadFuncOptions o({0, pw, 0, ph});
            if (reflect) o.mode(torch::kReflect);
            else o.mode(torch::kReplicate);
            in = F::pad(x, o);
        }
        torch::Tensor y = net->forward(in);
        if (ph || pw) y = y.slice(2, 0, h).slice(3, 0, w);
        return y;
    }
};

LabelUpsampler::LabelUpsampler(const UpsamplerConfig &cfg, uint64_t seed) : impl_(std::make_unique<Impl>()) {
    cfg.validate();
    impl_->cfg = cfg;
    torch::manual_seed(seed);
    impl_->net = UNet2d(cfg);
    impl_->net->to(torch::kFloat32);
}

LabelUpsampler::~LabelUpsampler() = default;
LabelUpsampler::LabelUpsampler(LabelUpsampler &&) noexcept = default;
LabelUpsampler &LabelUpsampler::operator=(LabelUpsampler &&) noexcept = default;

const UpsamplerConfig &LabelUpsampler::config() const { return impl_->cfg; }
int64_t LabelUpsampler::parameter_count() const { return nnx::parameter_count(*impl_->net); }

std::vector<float> LabelUpsampler::predict(std::span<const float> input, int h, int w) const {
    const UpsamplerConfig &c = impl_->cfg;
    if (input.size() != static_cast<size_t>(c.in_channels) * h * w)
        throw std::invalid_argument("upsampler: input must be in_channels x h x w");
    torch::NoGradGuard ng;
    impl_->net->eval();
    torch::Tensor x = torch::from_blob(const_cast<float *>(input.data()), {1, c.in_channels, h, w}, torch::kFloat32);
    torch::Tensor y = impl_->run(x).contiguous();
    return std::vector<float>(y.data_ptr<float>(), y.data_ptr<float>() + y.numel());
}

void LabelUpsampler::save(const std::filesystem::path &dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << config_json(impl_->cfg).dump(2) << '\n';
    nnx::save_module(*impl_->net, dir / "weights.pt");
}

LabelUpsampler LabelUpsampler::load(const std::filesystem::path &dir) {
    std::ifstream in(dir / "config.json");
    if (!in) throw std::runtime_error("label upsampler: missing " + (dir / "config.json").string());
    const UpsamplerConfig cfg = config_from_json(json::parse(in));
    LabelUpsampler m(cfg, 0);
    nnx::load_module(*m.impl_->net, dir / "weights.pt");
    return m;
}

namespace {

torch::Tensor pool_slices(const torch::Tensor &pred, const UpsamplerConfig &c) {
    const int64_t b = pred.size(0), h = pred.size(2), w = pred.size(3);
    return pred.view({b, c.label_channels, c.slices_per_window, c.upsample_factor, h, w}).mean(3);
}

torch::Tensor loss_tensor(const torch::Tensor &pred, const torch::Tensor &gt, const torch::Tensor &lores, double lambda,
                          const UpsamplerConfig &c) {
    const int64_t b = pred.size(0), h = pred.size(2), w = pred.size(3);
    const int L = c.label_channels;
    torch::Tensor main = nnx::dice_loss(pred.view({b, L, -1, h, w}), gt.view({b, L, -1, h, w}));
    if (lambda == 0) return main;
    torch::Tensor cons = nnx::dice_loss(pool_slices(pred, c), lores.view({b, L, c.slices_per_window, h, w}));
    return main + lambda * cons;
}

} // namespace

double loss_total(std::span<const double> pred, std::span<const double> gt, std::span<const double> lores,
                  int64_t batch, int64_t h, int64_t w, double lambda, std::vector<double> *grad,
                  const UpsamplerConfig &cfg) {
    cfg.validate();
    const size_t fine = static_cast<size_t>(batch * cfg.out_channels * h * w);
    const size_t coarse = static_cast<size_t>(batch * cfg.label_channels * cfg.slices_per_window * h * w);
    if (pred.size() != fine || gt.size() != fine || lores.size() != coarse)
        throw std::invalid_argument("loss_total: shape mismatch");
    if (lambda < 0) throw std::invalid_argument("loss_total: lambda must be >= 0");
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    torch::Tensor p = torch::from_blob(const_cast<double *>(pred.data()), {batch, cfg.out_channels, h, w}, opts)
                          .clone()
                          .requires_grad_(grad != nullptr);
    torch::Tensor g = torch::from_blob(const_cast<double *>(gt.data()), {batch, cfg.out_channels, h, w}, opts);
    torch::Tensor l = torch::from_blob(const_cast<double *>(lores.data()),
                                       {batch, cfg.label_channels * cfg.slices_per_window, h, w}, opts);
    torch::Tensor loss = loss_tensor(p, g, l, lambda, cfg);
    if (grad) {
        loss.backward();
        torch::Tensor gr = p.grad().contiguous();
        grad->assign(gr.data_ptr<double>(), gr.data_ptr<double>() + gr.numel());
    }
    return loss.item<double>();
}

LabelVolume collapse_two_class(const LabelVolume &labels) {
    int dg = -1;
    for (const auto &[id, name] : labels.label_table)
        if (name == "DG") dg = id;
    LabelVolume out(labels.grid, {{0, "background"}, {1, "GM"}, {2, "DG"}});
    for (size_t i = 0; i < labels.labels.size(); ++i) {
        const LabelId l = labels.labels[i];
        out.labels[i] = l == 0 ? 0 : (static_cast<int>(l) == dg ? 2 : 1);
    }
    return out;
}

namespace {

// Voxel-index bounding box of non-zero labels; false when none.
bool foreground_bbox(const LabelVolume &l, Index3 &lo, Index3 &hi) {
    lo = {INT64_MAX, INT64_MAX, INT64_MAX};
    hi = {-1, -1, -1};
    const Index3 d = l.grid.dims;
    for (int64_t z = 0; z < d[2]; ++z)
        for (int64_t y = 0; y < d[1]; ++y)
            for (int64_t x = 0; x < d[0]; ++x)
                if (l.at(x, y, z)) {
                    const Index3 p{x, y, z};
                    for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], p[a]), hi[a] = std::max(hi[a], p[a]);
                }
    return hi[0] >= 0;
}

// Z-score with statistics from the foreground bounding box of `labels`.
std::vector<float> zscore_fg_bbox(const ScalarVolume &img, const LabelVolume &labels) {
    Index3 lo, hi;
    if (!foreground_bbox(labels, lo, hi)) lo = {0, 0, 0}, hi = {img.grid.dims[0] - 1, img.grid.dims[1] - 1, img.grid.dims[2] - 1};
    double s = 0, ss = 0, n = 0;
    for (int64_t z = lo[2]; z <= hi[2]; ++z)
        for (int64_t y = lo[1]; y <= hi[1]; ++y)
            for (int64_t x = lo[0]; x <= hi[0]; ++x) {
                const double v = img.at(x, y, z);
                s += v, ss += v * v, n += 1;
            }
    const double mean = s / n, var = std::max(0.0, ss / n - mean * mean);
    const double sd = var > 0 ? std::sqrt(var) : 1.0;
    std::vector<float> out(img.values.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((img.values[i] - mean) / sd);
    return out;
}

LabelVolume crop_slices(const LabelVolume &v, int64_t nz) {
    Grid3 g = v.grid;
    g.dims[2] = nz;
    const size_t n = static_cast<size_t>(g.voxel_count());
    return LabelVolume(g, std::vector<LabelId>(v.labels.begin(), v.labels.begin() + static_cast<std::ptrdiff_t>(n)),
                       v.label_table);
}

ScalarVolume crop_slices(const ScalarVolume &v, int64_t nz) {
    Grid3 g = v.grid;
    g.dims[2] = nz;
    const size_t n = static_cast<size_t>(g.voxel_count());
    return ScalarVolume(g, std::vector<double>(v.values.begin(), v.values.begin() + static_cast<std::ptrdiff_t>(n)));
}

} // namespace

std::vector<TrainSample> make_training_pairs(const LabelVolume &hires_labels, const ScalarVolume &hires_image,
                                             int crops_per_window, std::mt19937_64 &rng, const UpsamplerConfig &cfg) {
    cfg.validate();
    require_canonical(hires_labels.grid, "make_training_pairs");
    if (hires_labels.grid.dims != hires_image.grid.dims)
        throw std::invalid_argument("make_training_pairs: image and labels differ in dims");
    if (crops_per_window < 1) throw std::invalid_argument("make_training_pairs: need at least one crop per window");
    const int f = cfg.upsample_factor, S = cfg.slices_per_window, P = cfg.patch_inplane, L = cfg.label_channels;
    if (L != 2) throw std::invalid_argument("make_training_pairs: the two-class scheme needs label_channels = 2");
    const Index3 d = hires_labels.grid.dims;
    const int64_t nz = d[2] / f * f;
    if (nz / f < S) throw std::invalid_argument("make_training_pairs: fewer fine slices than one window covers");
    if (d[0] < P || d[1] < P) throw std::invalid_argument("make_training_pairs: in-plane size below the patch");

    const LabelVolume fine = collapse_two_class(crop_slices(hires_labels, nz));
    const LabelVolume coarse = block_majority_downsample_slice(fine, f);
    const ScalarVolume coarse_img = block_average_downsample_slice(crop_slices(hires_image, nz), f);
    const std::vector<float> img = zscore_fg_bbox(coarse_img, coarse);
    if (std::none_of(fine.labels.begin(), fine.labels.end(), [](LabelId l) { return l != 0; }))
        throw std::invalid_argument("make_training_pairs: no foreground");

    const int64_t zc = nz / f, plane = d[0] * d[1];
    std::vector<TrainSample> out;
    for (int64_t k = 0; k + S <= zc; ++k) {
        std::vector<int64_t> fg; // in-plane positions with foreground anywhere in the window
        for (int64_t z = k * f; z < (k + S) * f; ++z)
            for (int64_t i = 0; i < plane; ++i)
                if (fine.labels[static_cast<size_t>(z * plane + i)]) fg.push_back(i);
        std::sort(fg.begin(), fg.end());
        fg.erase(std::unique(fg.begin(), fg.end()), fg.end());
        for (int c = 0; c < crops_per_window; ++c) {
            int64_t x0, y0;
            if (!fg.empty() && rng() % 2 == 0) {
                const int64_t i = fg[rng() % fg.size()];
                x0 = std::clamp<int64_t>(i % d[0] - P / 2, 0, d[0] - P);
                y0 = std::clamp<int64_t>(i / d[0] - P / 2, 0, d[1] - P);
            } else {
                x0 = static_cast<int64_t>(rng() % static_cast<uint64_t>(d[0] - P + 1));
                y0 = static_cast<int64_t>(rng() % static_cast<uint64_t>(d[1] - P + 1));
            }
            TrainSample s;
            s.h = P, s.w = P;
            s.image.resize(static_cast<size_t>(S * P * P));
            s.lores.resize(static_cast<size_t>(L * S * P * P));
            s.hires.resize(static_cast<size_t>(L * S * f * P * P));
            for (int64_t y = 0; y < P; ++y)
                for (int64_t x = 0; x < P; ++x) {
                    const int64_t px = (y * P + x);
                    for (int j = 0; j < S; ++j) {
                        const size_t src = coarse.grid.linear(x0 + x, y0 + y, k + j);
                        s.image[static_cast<size_t>(j * P * P + px)] = img[src];
                        const LabelId l = coarse.labels[src];
                        for (int cl = 0; cl < L; ++cl)
                            s.lores[static_cast<size_t>((cl * S + j) * P * P + px)] = l == cl + 1 ? 1.f : 0.f;
                    }
                    for (int j = 0; j < S * f; ++j) {
                        const LabelId l = fine.at(x0 + x, y0 + y, k * f + j);
                        for (int cl = 0; cl < L; ++cl)
                            s.hires[static_cast<size_t>((cl * S * f + j) * P * P + px)] = l == cl + 1 ? 1.f : 0.f;
                    }
                }
            out.push_back(std::move(s));
        }
    }
    return out;
}

namespace {

struct Batch {
    torch::Tensor input, hires, lores;
};

Batch make_batch(const std::vector<TrainSample> &samples, const std::vector<size_t> &idx, size_t begin, size_t end,
                 const UpsamplerConfig &c) {
    const int64_t n = static_cast<int64_t>(end - begin), h = samples[idx[begin]].h, w = samples[idx[begin]].w;
    const int64_t S = c.slices_per_window, L = c.label_channels;
    Batch b{torch::empty({n, c.in_channels, h, w}), torch::empty({n, c.out_channels, h, w}),
            torch::empty({n, L * S, h, w})};
    for (int64_t i = 0; i < n; ++i) {
        const TrainSample &s = samples[idx[begin + static_cast<size_t>(i)]];
        if (s.h != h || s.w != w) throw std::invalid_argument("upsampler: samples in a batch differ in size");
        float *in = b.input[i].data_ptr<float>();
        std::copy(s.image.begin(), s.image.end(), in);
        std::copy(s.lores.begin(), s.lores.end(), in + s.image.size());
        std::copy(s.hires.begin(), s.hires.end(), b.hires[i].data_ptr<float>());
        std::copy(s.lores.begin(), s.lores.end(), b.lores[i].data_ptr<float>());
    }
    return b;
}

// Hard decode of a (B, L*F, h, w) probability block: class index per fine slice, 0 = background.
torch::Tensor decode_classes(const torch::Tensor &prob, int64_t L) {
    const int64_t b = prob.size(0), h = prob.size(2), w = prob.size(3);
    torch::Tensor p = prob.view({b, L, -1, h, w});
    auto [mx, arg] = p.max(1); // first maximum wins: GM before DG
    return torch::where(mx >= 0.5, arg + 1, torch::zeros_like(arg));
}

struct DiceAcc {
    std::vector<double> inter, total;
    explicit DiceAcc(int64_t L) : inter(static_cast<size_t>(L), 0), total(static_cast<size_t>(L), 0) {}
    void add(const torch::Tensor &a, const torch::Tensor &b) {
        for (size_t c = 0; c < inter.size(); ++c) {
            const torch::Tensor x = a == static_cast<int64_t>(c + 1), y = b == static_cast<int64_t>(c + 1);
            inter[c] += (x & y).sum().item<double>();
            total[c] += x.sum().item<double>() + y.sum().item<double>();
        }
    }
    double mean() const {
        double s = 0;
        int n = 0;
        for (size_t c = 0; c < inter.size(); ++c)
            if (total[c] > 0) s += 2 * inter[c] / total[c], ++n;
        return n ? s / n : 1.0;
    }
};

// Per-block plurality over groups of `f` fine slices; ties go to background.
torch::Tensor block_majority(const torch::Tensor &cls, int64_t L, int64_t f) {
    const int64_t b = cls.size(0), F0 = cls.size(1), h = cls.size(2), w = cls.size(3);
    torch::Tensor blocks = cls.view({b, F0 / f, f, h, w});
    std::vector<torch::Tensor> counts;
    for (int64_t c = 0; c <= L; ++c) counts.push_back((blocks == c).sum(2));
    torch::Tensor cnt = torch::stack(counts, 0); // (L+1, b, S, h, w)
    auto [mx, arg] = cnt.max(0);
    torch::Tensor ties = (cnt == mx.unsqueeze(0)).sum(0) > 1;
    return torch::where(ties, torch::zeros_like(arg), arg);
}

} // namespace

LabelSrTraining train_upsampler(const std::vector<TrainSample> &samples, const TrainerParams &params,
                                const UpsamplerConfig &cfg) {
    params.validate();
    cfg.validate();
    if (samples.size() < 2) throw std::invalid_argument("train_upsampler: need at least two samples");
    std::mt19937_64 rng(params.seed);
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    size_t n_val = static_cast<size_t>(std::llround(params.val_fraction * static_cast<double>(samples.size())));
    n_val = std::clamp<size_t>(n_val, 1, samples.size() - 1);
    std::vector<size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

    LabelSrTraining out{LabelUpsampler(cfg, params.seed), {}};
    LabelUpsampler::Impl &m = out.model.impl();
    auto opt = nnx::make_optimizer(*m.net, params);
    const size_t bs = static_cast<size_t>(params.batch_size);
    double lr = params.learning_rate, best = std::numeric_limits<double>::infinity();
    std::vector<torch::Tensor> best_state = nnx::snapshot(*m.net);

    for (int epoch = 0; epoch < params.epochs; ++epoch) {
        std::shuffle(train.begin(), train.end(), rng);
        m.net->train();
        const size_t steps = params.steps_per_epoch > 0 ? static_cast<size_t>(params.steps_per_epoch)
                                                        : (train.size() + bs - 1) / bs;
        double tl = 0;
        for (size_t s = 0; s < steps; ++s) {
            const size_t begin = (s * bs) % train.size();
            const size_t end = std::min(train.size(), begin + bs);
            Batch b = make_batch(samples, train, begin, end, cfg);
            opt->zero_grad();
            torch::Tensor loss = loss_tensor(m.net->forward(b.input), b.hires, b.lores, params.lambda, cfg);
            loss.backward();
            opt->step();
            tl += loss.item<double>();
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = tl / static_cast<double>(steps);

        torch::NoGradGuard ng;
        m.net->eval();
        DiceAcc fine(cfg.label_channels), cons(cfg.label_channels);
        double vl = 0;
        for (size_t begin = 0; begin < val.size(); begin += bs) {
            const size_t end = std::min(val.size(), begin + bs);
            Batch b = make_batch(samples, val, begin, end, cfg);
            torch::Tensor p = m.net->forward(b.input);
            vl += loss_tensor(p, b.hires, b.lores, params.lambda, cfg).item<double>() * static_cast<double>(end - begin);
            const torch::Tensor pc = decode_classes(p, cfg.label_channels);
            fine.add(pc, decode_classes(b.hires, cfg.label_channels));
            cons.add(block_majority(pc, cfg.label_channels, cfg.upsample_factor), decode_classes(b.lores, cfg.label_channels));
        }
        rec.val_loss = vl / static_cast<double>(val.size());
        rec.val_dice = fine.mean();
        rec.val_consistency_dice = cons.mean();
        out.log.epochs.push_back(rec);
        if (!std::isfinite(rec.val_loss) || !std::isfinite(rec.train_loss))
            throw std::runtime_error("train_upsampler: loss diverged (NaN) at epoch " + std::to_string(epoch));
        if (rec.val_loss < best) {
            best = rec.val_loss;
            best_state = nnx::snapshot(*m.net);
            out.log.best_epoch = epoch;
        }
        lr *= params.lr_decay;
        nnx::set_learning_rate(*opt, lr);
    }
    nnx::restore(*m.net, best_state);
    m.net->eval();
    return out;
}

namespace {

// Exact squared-distance transform along one line (lower envelope of
// parabolas). f[i] is +inf where no site exists; arg gets the nearest site.
void edt_line(const std::vector<double> &f, double spacing, std::vector<double> &d, std::vector<int64_t> &arg) {
    const int64_t n = static_cast<int64_t>(f.size());
    std::vector<int64_t> v;
    std::vector<double> zb;
    for (int64_t q = 0; q < n; ++q) {
        if (!std::isfinite(f[static_cast<size_t>(q)])) continue;
        const double pq = q * spacing, fq = f[static_cast<size_t>(q)];
        while (!v.empty()) {
            const double pv = v.back() * spacing, fv = f[static_cast<size_t>(v.back())];
            const double s = ((fq + pq * pq) - (fv + pv * pv)) / (2 * (pq - pv));
            if (s <= zb.back()) {
                v.pop_back();
                zb.pop_back();
            } else {
                zb.push_back(s);
                break;
            }
        }
        if (v.empty()) zb.assign(1, -std::numeric_limits<double>::infinity());
        v.push_back(q);
    }
    d.assign(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
    arg.assign(static_cast<size_t>(n), -1);
    if (v.empty()) return;
    size_t k = 0;
    for (int64_t q = 0; q < n; ++q) {
        const double x = q * spacing;
        while (k + 1 < v.size() && zb[k + 1] < x) ++k;
        const double dx = x - v[k] * spacing;
        d[static_cast<size_t>(q)] = dx * dx + f[static_cast<size_t>(v[k])];
        arg[static_cast<size_t>(q)] = v[k];
    }
}

// Nearest-seed label per voxel of each coarse slice (in-plane).
struct SliceNearest {
    std::vector<double> d2;
    std::vector<LabelId> label;
};

SliceNearest slice_nearest(const LabelVolume &lab, int64_t z, int dg) {
    const Index3 d = lab.grid.dims;
    const double sx = lab.grid.spacing[0], sy = lab.grid.spacing[1];
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dx(static_cast<size_t>(d[0] * d[1]));
    std::vector<int64_t> ax(dx.size());
    std::vector<double> f, o;
    std::vector<int64_t> a;
    for (int64_t y = 0; y < d[1]; ++y) {
        f.assign(static_cast<size_t>(d[0]), inf);
        for (int64_t x = 0; x < d[0]; ++x) {
            const LabelId l = lab.at(x, y, z);
            if (l != 0 && static_cast<int>(l) != dg) f[static_cast<size_t>(x)] = 0;
        }
        edt_line(f, sx, o, a);
        for (int64_t x = 0; x < d[0]; ++x) {
            dx[static_cast<size_t>(y * d[0] + x)] = o[static_cast<size_t>(x)];
            ax[static_cast<size_t>(y * d[0] + x)] = a[static_cast<size_t>(x)];
        }
    }
    SliceNearest s{std::vector<double>(dx.size(), inf), std::vector<LabelId>(dx.size(), 0)};
    for (int64_t x = 0; x < d[0]; ++x) {
        f.resize(static_cast<size_t>(d[1]));
        for (int64_t y = 0; y < d[1]; ++y) f[static_cast<size_t>(y)] = dx[static_cast<size_t>(y * d[0] + x)];
        edt_line(f, sy, o, a);
        for (int64_t y = 0; y < d[1]; ++y) {
            const int64_t yy = a[static_cast<size_t>(y)];
            if (yy < 0) continue;
            const int64_t xx = ax[static_cast<size_t>(yy * d[0] + x)];
            s.d2[static_cast<size_t>(y * d[0] + x)] = o[static_cast<size_t>(y)];
            s.label[static_cast<size_t>(y * d[0] + x)] = lab.at(xx, yy, z);
        }
    }
    return s;
}

} // namespace

LabelVolume upsample_labels(const LabelUpsampler &model, const ScalarVolume &image_lores, const LabelVolume &labels_lores,
                            UpsampleDiagnostics *diag) {
    const UpsamplerConfig &c = model.config();
    require_canonical(labels_lores.grid, "upsample_labels");
    if (!same_geometry(image_lores.grid, labels_lores.grid))
        throw std::invalid_argument("upsample_labels: image and labels are on different grids");
    const int f = c.upsample_factor, S = c.slices_per_window, L = c.label_channels, P = c.patch_inplane;
    if (L != 2) throw std::invalid_argument("upsample_labels: model is not a two-class upsampler");
    const Index3 d = labels_lores.grid.dims;
    const Grid3 fine_grid = refine_axis(labels_lores.grid, 2, labels_lores.grid.spacing[2] / f);
    LabelVolume out(fine_grid, labels_lores.label_table);
    const LabelVolume two = collapse_two_class(labels_lores);
    if (std::none_of(two.labels.begin(), two.labels.end(), [](LabelId l) { return l != 0; })) {
        if (diag) diag->consistency_dice = 1.0;
        return out;
    }
    const std::vector<float> img = zscore_fg_bbox(image_lores, two);
    const int64_t zc = d[2], zp = std::max<int64_t>(zc, S), plane = d[0] * d[1];

    // Coarse input planes, edge-replicated along z when the volume is shorter than a window.
    auto coarse_index = [&](int64_t z) { return std::min(z, zc - 1); };
    std::vector<int64_t> xs, ys;
    auto starts = [P](int64_t n, std::vector<int64_t> &v) {
        v.clear();
        if (n <= P) {
            v.push_back(0);
            return;
        }
        for (int64_t s = 0; s + P < n; s += P / 2) v.push_back(s);
        v.push_back(n - P);
    };
    starts(d[0], xs);
    starts(d[1], ys);
    const int64_t tw = std::min<int64_t>(P, d[0]), th = std::min<int64_t>(P, d[1]);
    const int64_t nf = zp * f;
    std::vector<float> acc(static_cast<size_t>(L * nf * plane), 0.f), cnt(static_cast<size_t>(nf * plane), 0.f);
    std::vector<float> in(static_cast<size_t>(c.in_channels * th * tw));

    for (int64_t k = 0; k + S <= zp; ++k)
        for (int64_t y0 : ys)
            for (int64_t x0 : xs) {
                for (int j = 0; j < S; ++j) {
                    const int64_t z = coarse_index(k + j);
                    for (int64_t y = 0; y < th; ++y)
                        for (int64_t x = 0; x < tw; ++x) {
                            const size_t src = static_cast<size_t>(z * plane + (y0 + y) * d[0] + x0 + x);
                            const size_t px = static_cast<size_t>(y * tw + x);
                            in[static_cast<size_t>(j * th * tw) + px] = img[src];
                            for (int cl = 0; cl < L; ++cl)
                                in[static_cast<size_t>(((1 + cl) * S + j) * th * tw) + px] =
                                    two.labels[src] == cl + 1 ? 1.f : 0.f;
                        }
                }
                const std::vector<float> p = model.predict(in, static_cast<int>(th), static_cast<int>(tw));
                for (int j = 0; j < S * f; ++j) {
                    const int64_t zf = k * f + j;
                    for (int64_t y = 0; y < th; ++y)
                        for (int64_t x = 0; x < tw; ++x) {
                            const size_t dst = static_cast<size_t>(zf * plane + (y0 + y) * d[0] + x0 + x);
                            const size_t px = static_cast<size_t>(y * tw + x);
                            cnt[dst] += 1;
                            for (int cl = 0; cl < L; ++cl)
                                acc[static_cast<size_t>(cl) * static_cast<size_t>(nf * plane) + dst] +=
                                    p[static_cast<size_t>((cl * S * f + j) * th * tw) + px];
                        }
                }
            }

    // Decode on the fine grid (only the first zc*f slices exist).
    LabelVolume fine_two(fine_grid, two.label_table);
    const size_t nfine = static_cast<size_t>(fine_grid.voxel_count());
    for (size_t i = 0; i < nfine; ++i) {
        float best = -1;
        int arg = 0;
        for (int cl = 0; cl < L; ++cl) {
            const float v = acc[static_cast<size_t>(cl) * static_cast<size_t>(nf * plane) + i] / cnt[i];
            if (v > best) best = v, arg = cl;
        }
        fine_two.labels[i] = best >= 0.5f ? static_cast<LabelId>(arg + 1) : 0;
    }

    if (diag) {
        const LabelVolume back = block_majority_downsample_slice(fine_two, f);
        double s = 0;
        int n = 0;
        for (int cl = 1; cl <= L; ++cl) {
            const bool present = std::any_of(back.labels.begin(), back.labels.end(), [cl](LabelId l) { return l == cl; }) ||
                                 std::any_of(two.labels.begin(), two.labels.end(), [cl](LabelId l) { return l == cl; });
            if (present) s += label_dice(back, two, cl), ++n;
        }
        diag->consistency_dice = n ? s / n : 1.0;
    }

    // Restore subregion labels from the nearest labelled coarse voxel.
    int dg = -1;
    for (const auto &[id, name] : labels_lores.label_table)
        if (name == "DG") dg = id;
    std::vector<SliceNearest> near;
    for (int64_t z = 0; z < zc; ++z) near.push_back(slice_nearest(labels_lores, z, dg));
    for (int64_t zf = 0; zf < fine_grid.dims[2]; ++zf) {
        const double wz = fine_grid.world(0, 0, static_cast<double>(zf))[2];
        std::vector<std::pair<double, int64_t>> order;
        for (int64_t z = 0; z < zc; ++z) {
            const double dz = labels_lores.grid.world(0, 0, static_cast<double>(z))[2] - wz;
            order.push_back({dz * dz, z});
        }
        std::stable_sort(order.begin(), order.end(), [](auto &a, auto &b) { return a.first < b.first; });
        for (int64_t i = 0; i < plane; ++i) {
            const size_t idx = static_cast<size_t>(zf * plane + i);
            const LabelId t = fine_two.labels[idx];
            if (t == 0) continue;
            if (t == 2) {
                out.labels[idx] = static_cast<LabelId>(dg);
                continue;
            }
            double best = std::numeric_limits<double>::infinity();
            LabelId lab = 0;
            for (const auto &[dz2, z] : order) {
                if (dz2 >= best) break;
                const double cand = dz2 + near[static_cast<size_t>(z)].d2[static_cast<size_t>(i)];
                if (cand < best) best = cand, lab = near[static_cast<size_t>(z)].label[static_cast<size_t>(i)];
            }
            if (lab == 0) {
                // Only DG was labelled: no gray-matter subregion to inherit.
                lab = static_cast<LabelId>(dg > 0 ? dg : 1);
            }
            out.labels[idx] = lab;
        }
    }
    return out;
}

} // namespace isomtl
