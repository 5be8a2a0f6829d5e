#include "isomtl/mmseg.h"

#include "nn_internal.h"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace isomtl {

using nlohmann::json;

void SegConfig::validate() const {
    if (modalities.empty()) throw std::invalid_argument("seg config: need at least one modality");
    if (classes.size() < 2 || classes[0] != 0) throw std::invalid_argument("seg config: classes must start with background 0");
    if (std::set<int>(classes.begin(), classes.end()).size() != classes.size())
        throw std::invalid_argument("seg config: duplicate class id");
    if (levels < 1 || base_channels < 1) throw std::invalid_argument("seg config: bad network size");
    const int64_t m = int64_t{1} << (levels - 1);
    for (int64_t p : patch)
        if (p < m || p % m) throw std::invalid_argument("seg config: patch must be a multiple of 2^(levels-1)");
}

void ModAugPolicy::validate(size_t modalities) const {
    if (modalities < 1) throw std::invalid_argument("modality augmentation: no modalities");
    if (p_drop.size() != modalities - 1)
        throw std::invalid_argument("modality augmentation: need one drop probability per non-primary modality");
    for (double p : p_drop)
        if (!(p >= 0 && p <= 1)) throw std::invalid_argument("modality augmentation: p_drop must be in [0, 1]");
    if (replacement != "zeros") throw std::invalid_argument("modality augmentation: only zeros replacement is supported");
}

ModalityStack stack_modalities(std::span<const ScalarVolume *const> vols, const SegConfig &cfg) {
    cfg.validate();
    if (vols.size() != cfg.modalities.size())
        throw std::invalid_argument("stack_modalities: expected " + std::to_string(cfg.modalities.size()) + " volumes");
    if (!vols[0]) throw std::invalid_argument("stack_modalities: primary modality " + cfg.modalities[0] + " missing");
    ModalityStack s;
    s.grid = vols[0]->grid;
    s.channels = cfg.modalities;
    const size_t n = s.voxels();
    s.values.assign(n * vols.size(), 0.f);
    for (size_t c = 0; c < vols.size(); ++c) {
        if (!vols[c]) continue;
        if (!same_geometry(vols[c]->grid, s.grid))
            throw std::invalid_argument("stack_modalities: " + cfg.modalities[c] + " is not on the " + cfg.modalities[0] +
                                        " grid");
        double sum = 0, ss = 0;
        for (double v : vols[c]->values) sum += v, ss += v * v;
        const double mean = sum / static_cast<double>(n);
        const double var = std::max(0.0, ss / static_cast<double>(n) - mean * mean);
        const double sd = var > 0 ? std::sqrt(var) : 1.0;
        auto ch = s.channel(c);
        for (size_t i = 0; i < n; ++i) ch[i] = static_cast<float>((vols[c]->values[i] - mean) / sd);
    }
    return s;
}

void modality_augment(ModalityStack &stack, const ModAugPolicy &policy, std::mt19937_64 &rng) {
    policy.validate(stack.channels.size());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (size_t c = 1; c < stack.channels.size(); ++c)
        if (u(rng) < policy.p_drop[c - 1]) {
            auto ch = stack.channel(c);
            std::fill(ch.begin(), ch.end(), 0.f);
        }
}

namespace {

json config_json(const SegConfig &c) {
    return {{"modalities", c.modalities}, {"classes", c.classes},        {"patch", c.patch},
            {"base_channels", c.base_channels}, {"levels", c.levels}};
}

SegConfig config_from_json(const json &j) {
    SegConfig c;
    c.modalities = j.at("modalities").get<std::vector<std::string>>();
    c.classes = j.at("classes").get<std::vector<int>>();
    c.patch = j.at("patch").get<Index3>();
    c.base_channels = j.at("base_channels");
    c.levels = j.at("levels");
    c.validate();
    return c;
}

torch::nn::Sequential conv_block(int in, int out, int stride) {
    auto unit = [](int i, int o, int s) {
        torch::nn::Sequential q;
        q->push_back(torch::nn::Conv3d(torch::nn::Conv3dOptions(i, o, 3).stride(s).padding(1)));
        q->push_back(torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(o).affine(true)));
        q->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.01)));
        return q;
    };
    torch::nn::Sequential s;
    s->extend(*unit(in, out, stride));
    s->extend(*unit(out, out, 1));
    return s;
}

struct UNet3dImpl : torch::nn::Module {
    explicit UNet3dImpl(const SegConfig &c) {
        std::vector<int> ch;
        for (int l = 0; l < c.levels; ++l) ch.push_back(std::min(320, c.base_channels << l));
        int in = static_cast<int>(c.modalities.size());
        for (int l = 0; l < c.levels; ++l) {
            enc.push_back(register_module("enc" + std::to_string(l), conv_block(in, ch[l], l == 0 ? 1 : 2)));
            in = ch[l];
        }
        for (int l = c.levels - 1; l > 0; --l) {
            up.push_back(register_module(
                "up" + std::to_string(l),
                torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(ch[l], ch[l - 1], 2).stride(2))));
            dec.push_back(register_module("dec" + std::to_string(l), conv_block(2 * ch[l - 1], ch[l - 1], 1)));
        }
        head = register_module("head",
                               torch::nn::Conv3d(torch::nn::Conv3dOptions(ch[0], static_cast<int>(c.classes.size()), 1)));
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
        return head(x); // logits
    }
    std::vector<torch::nn::Sequential> enc, dec;
    std::vector<torch::nn::ConvTranspose3d> up;
    torch::nn::Conv3d head{nullptr};
};
TORCH_MODULE(UNet3d);

} // namespace

struct SegModel::Impl {
    SegConfig cfg;
    UNet3d net{nullptr};
};

SegModel::SegModel(const SegConfig &cfg, uint64_t seed) : impl_(std::make_unique<Impl>()) {
    cfg.validate();
    impl_->cfg = cfg;
    torch::manual_seed(seed);
    impl_->net = UNet3d(cfg);
}

SegModel::~SegModel() = default;
SegModel::SegModel(SegModel &&) noexcept = default;
SegModel &SegModel::operator=(SegModel &&) noexcept = default;

const SegConfig &SegModel::config() const { return impl_->cfg; }
int64_t SegModel::parameter_count() const { return nnx::parameter_count(*impl_->net); }

namespace {

// (C, z, y, x) tensor view over a stack's channel-major storage.
torch::Tensor stack_tensor(const ModalityStack &s) {
    const Index3 d = s.grid.dims;
    return torch::from_blob(const_cast<float *>(s.values.data()),
                            {static_cast<int64_t>(s.channels.size()), d[2], d[1], d[0]}, torch::kFloat32);
}

} // namespace

std::vector<float> SegModel::forward_patch(const ModalityStack &patch) const {
    const SegConfig &c = impl_->cfg;
    if (patch.channels.size() != c.modalities.size()) throw std::invalid_argument("forward_patch: channel count mismatch");
    if (patch.grid.dims != c.patch) throw std::invalid_argument("forward_patch: input is not patch-sized");
    torch::NoGradGuard ng;
    impl_->net->eval();
    torch::Tensor y = torch::softmax(impl_->net->forward(stack_tensor(patch).unsqueeze(0)), 1).contiguous();
    return std::vector<float>(y.data_ptr<float>(), y.data_ptr<float>() + y.numel());
}

void SegModel::save(const std::filesystem::path &dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << config_json(impl_->cfg).dump(2) << '\n';
    nnx::save_module(*impl_->net, dir / "weights.pt");
}

SegModel SegModel::load(const std::filesystem::path &dir) {
    std::ifstream in(dir / "config.json");
    if (!in) throw std::runtime_error("seg model: missing " + (dir / "config.json").string());
    SegModel m(config_from_json(json::parse(in)), 0);
    nnx::load_module(*m.impl_->net, dir / "weights.pt");
    return m;
}

namespace {

// prob, onehot: (B, C, ...). BCE over every class, soft Dice over classes >= 1
// with sums over batch and voxels.
torch::Tensor loss_tensor(const torch::Tensor &prob, const torch::Tensor &onehot) {
    const double eps = 1e-7;
    const torch::Tensor p = prob.clamp(eps, 1 - eps);
    const torch::Tensor bce = -(onehot * torch::log(p) + (1 - onehot) * torch::log(1 - p)).mean();
    const torch::Tensor dice = nnx::dice_loss(prob.slice(1, 1), onehot.slice(1, 1));
    return bce + dice;
}

} // namespace

double seg_loss(std::span<const double> prob, std::span<const double> onehot, int64_t batch, int64_t classes,
                int64_t voxels) {
    if (classes < 2) throw std::invalid_argument("seg_loss: need background and one foreground class");
    const size_t n = static_cast<size_t>(batch * classes * voxels);
    if (prob.size() != n || onehot.size() != n) throw std::invalid_argument("seg_loss: shape mismatch");
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    torch::Tensor p = torch::from_blob(const_cast<double *>(prob.data()), {batch, classes, voxels}, opts);
    torch::Tensor y = torch::from_blob(const_cast<double *>(onehot.data()), {batch, classes, voxels}, opts);
    return loss_tensor(p, y).item<double>();
}

namespace {

// Copy a patch starting at `lo` (may reach outside the volume; outside = 0).
void extract(const ModalityStack &s, const LabelVolume *labels, const Index3 &lo, const Index3 &p, float *img,
             float *onehot, const std::vector<int> &class_index) {
    const Index3 d = s.grid.dims;
    const size_t C = s.channels.size(), V = s.voxels();
    const int64_t pv = p[0] * p[1] * p[2];
    std::fill(img, img + C * static_cast<size_t>(pv), 0.f);
    for (int64_t z = 0; z < p[2]; ++z)
        for (int64_t y = 0; y < p[1]; ++y)
            for (int64_t x = 0; x < p[0]; ++x) {
                const int64_t sx = lo[0] + x, sy = lo[1] + y, sz = lo[2] + z;
                const int64_t dst = (z * p[1] + y) * p[0] + x;
                const bool inside = sx >= 0 && sy >= 0 && sz >= 0 && sx < d[0] && sy < d[1] && sz < d[2];
                if (inside) {
                    const size_t src = s.grid.linear(sx, sy, sz);
                    for (size_t c = 0; c < C; ++c) img[c * static_cast<size_t>(pv) + static_cast<size_t>(dst)] = s.values[c * V + src];
                }
                if (onehot) {
                    const int k = inside ? class_index[labels->labels[s.grid.linear(sx, sy, sz)]] : 0;
                    onehot[static_cast<size_t>(k) * static_cast<size_t>(pv) + static_cast<size_t>(dst)] = 1.f;
                }
            }
}

std::vector<int64_t> window_starts(int64_t n, int64_t p) {
    if (n <= p) return {0};
    std::vector<int64_t> v;
    for (int64_t s = 0; s + p < n; s += std::max<int64_t>(1, p / 2)) v.push_back(s);
    v.push_back(n - p);
    return v;
}

std::vector<float> gaussian_weights(const Index3 &p) {
    std::vector<float> w(static_cast<size_t>(p[0] * p[1] * p[2]));
    std::array<std::vector<double>, 3> ax;
    for (int a = 0; a < 3; ++a) {
        const double sigma = static_cast<double>(p[a]) / 8.0, c = (static_cast<double>(p[a]) - 1) / 2;
        for (int64_t i = 0; i < p[a]; ++i) ax[a].push_back(std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma)));
    }
    for (int64_t z = 0; z < p[2]; ++z)
        for (int64_t y = 0; y < p[1]; ++y)
            for (int64_t x = 0; x < p[0]; ++x)
                w[static_cast<size_t>((z * p[1] + y) * p[0] + x)] =
                    static_cast<float>(std::max(1e-6, ax[0][static_cast<size_t>(x)] * ax[1][static_cast<size_t>(y)] *
                                                          ax[2][static_cast<size_t>(z)]));
    return w;
}

} // namespace

LabelVolume segment(const SegModel &model, const ModalityStack &stack, const LabelTable &table) {
    const SegConfig &c = model.config();
    if (stack.channels.size() != c.modalities.size())
        throw std::invalid_argument("segment: stack has " + std::to_string(stack.channels.size()) + " channels, model expects " +
                                    std::to_string(c.modalities.size()));
    if (stack.values.size() != stack.voxels() * stack.channels.size())
        throw std::invalid_argument("segment: stack storage does not match its grid");
    const Index3 d = stack.grid.dims, p = c.patch;
    const size_t K = c.classes.size(), V = stack.voxels(), pv = static_cast<size_t>(p[0] * p[1] * p[2]);
    const std::vector<float> gw = gaussian_weights(p);
    std::vector<float> acc(K * V, 0.f), wsum(V, 0.f);
    ModalityStack patch;
    patch.grid = Grid3(p, stack.grid.spacing);
    patch.channels = stack.channels;
    patch.values.resize(stack.channels.size() * pv);
    for (int64_t z0 : window_starts(d[2], p[2]))
        for (int64_t y0 : window_starts(d[1], p[1]))
            for (int64_t x0 : window_starts(d[0], p[0])) {
                extract(stack, nullptr, {x0, y0, z0}, p, patch.values.data(), nullptr, {});
                const std::vector<float> prob = model.forward_patch(patch);
                for (int64_t z = 0; z < p[2] && z0 + z < d[2]; ++z)
                    for (int64_t y = 0; y < p[1] && y0 + y < d[1]; ++y)
                        for (int64_t x = 0; x < p[0] && x0 + x < d[0]; ++x) {
                            const size_t src = static_cast<size_t>((z * p[1] + y) * p[0] + x);
                            const size_t dst = stack.grid.linear(x0 + x, y0 + y, z0 + z);
                            wsum[dst] += gw[src];
                            for (size_t k = 0; k < K; ++k) acc[k * V + dst] += gw[src] * prob[k * pv + src];
                        }
            }
    LabelVolume out(stack.grid, table);
    for (size_t i = 0; i < V; ++i) {
        size_t best = 0;
        for (size_t k = 1; k < K; ++k)
            if (acc[k * V + i] > acc[best * V + i]) best = k;
        out.labels[i] = static_cast<LabelId>(c.classes[best]);
    }
    return out;
}

SegTraining train_seg(const std::vector<SegCase> &cases, const SegConfig &cfg, const ModAugPolicy &policy,
                      const TrainerParams &params) {
    cfg.validate();
    policy.validate(cfg.modalities.size());
    params.validate();
    if (cases.empty()) throw std::invalid_argument("train_seg: no cases");
    const int max_label = 1 << (8 * sizeof(LabelId));
    std::vector<int> class_index(static_cast<size_t>(max_label), -1);
    for (size_t k = 0; k < cfg.classes.size(); ++k) class_index[static_cast<size_t>(cfg.classes[k])] = static_cast<int>(k);
    for (const SegCase &sc : cases) {
        if (sc.stack.channels.size() != cfg.modalities.size())
            throw std::invalid_argument("train_seg: case channel count differs from the config");
        if (!same_geometry(sc.stack.grid, sc.labels.grid))
            throw std::invalid_argument("train_seg: labels are not on the image grid");
        for (LabelId l : sc.labels.labels)
            if (class_index[l] < 0) throw std::invalid_argument("train_seg: label " + std::to_string(l) + " is not a class");
    }

    std::mt19937_64 rng(params.seed);
    std::vector<size_t> order(cases.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<size_t> train = order, val = order;
    if (cases.size() >= 2) {
        size_t n_val = static_cast<size_t>(std::llround(params.val_fraction * static_cast<double>(cases.size())));
        n_val = std::clamp<size_t>(n_val, 1, cases.size() - 1);
        val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
        train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    }
    // Foreground voxel lists for oversampling.
    std::vector<std::vector<uint32_t>> fg(cases.size());
    for (size_t i = 0; i < cases.size(); ++i)
        for (size_t v = 0; v < cases[i].labels.labels.size(); ++v)
            if (cases[i].labels.labels[v]) fg[i].push_back(static_cast<uint32_t>(v));

    SegTraining out{SegModel(cfg, params.seed), {}};
    auto &net = out.model.impl().net;
    auto opt = nnx::make_optimizer(*net, params);
    const Index3 p = cfg.patch;
    const int64_t C = static_cast<int64_t>(cfg.modalities.size()), K = static_cast<int64_t>(cfg.classes.size());
    const int64_t pv = p[0] * p[1] * p[2], B = params.batch_size;
    const int steps = params.steps_per_epoch > 0 ? params.steps_per_epoch : 50;
    std::vector<int> fg_classes(cfg.classes.begin() + 1, cfg.classes.end());
    double lr = params.learning_rate, best = -1;
    std::vector<torch::Tensor> best_state = nnx::snapshot(*net);

    for (int epoch = 0; epoch < params.epochs; ++epoch) {
        net->train();
        double tl = 0;
        for (int s = 0; s < steps; ++s) {
            torch::Tensor img = torch::empty({B, C, p[2], p[1], p[0]});
            torch::Tensor oh = torch::zeros({B, K, p[2], p[1], p[0]});
            for (int64_t b = 0; b < B; ++b) {
                const size_t ci = train[rng() % train.size()];
                const SegCase &sc = cases[ci];
                const Index3 d = sc.stack.grid.dims;
                Index3 lo;
                if (!fg[ci].empty() && rng() % 3 == 0) {
                    const uint32_t v = fg[ci][rng() % fg[ci].size()];
                    const Index3 at{static_cast<int64_t>(v) % d[0], static_cast<int64_t>(v) / d[0] % d[1],
                                    static_cast<int64_t>(v) / (d[0] * d[1])};
                    for (int a = 0; a < 3; ++a)
                        lo[a] = d[a] <= p[a] ? 0 : std::clamp<int64_t>(at[a] - p[a] / 2, 0, d[a] - p[a]);
                } else {
                    for (int a = 0; a < 3; ++a)
                        lo[a] = d[a] <= p[a] ? 0 : static_cast<int64_t>(rng() % static_cast<uint64_t>(d[a] - p[a] + 1));
                }
                ModalityStack ps;
                ps.grid = Grid3(p, sc.stack.grid.spacing);
                ps.channels = sc.stack.channels;
                ps.values.resize(static_cast<size_t>(C * pv));
                extract(sc.stack, &sc.labels, lo, p, ps.values.data(), oh[b].data_ptr<float>(), class_index);
                modality_augment(ps, policy, rng);
                std::copy(ps.values.begin(), ps.values.end(), img[b].data_ptr<float>());
            }
            opt->zero_grad();
            torch::Tensor loss = loss_tensor(torch::softmax(net->forward(img), 1), oh);
            loss.backward();
            opt->step();
            tl += loss.item<double>();
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = tl / steps;
        if (!std::isfinite(rec.train_loss))
            throw std::runtime_error("train_seg: loss diverged (NaN) at epoch " + std::to_string(epoch));
        double vd = 0;
        for (size_t vi : val) vd += mean_dice(segment(out.model, cases[vi].stack, cases[vi].labels.label_table),
                                               cases[vi].labels, fg_classes);
        rec.val_dice = vd / static_cast<double>(val.size());
        rec.val_loss = 1 - rec.val_dice;
        out.log.epochs.push_back(rec);
        if (rec.val_dice > best) {
            best = rec.val_dice;
            best_state = nnx::snapshot(*net);
            out.log.best_epoch = epoch;
        }
        lr *= params.lr_decay;
        nnx::set_learning_rate(*opt, lr);
    }
    nnx::restore(*net, best_state);
    net->eval();
    return out;
}

} // namespace isomtl
