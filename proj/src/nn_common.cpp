#include "nn_internal.h"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace isomtl {

void TrainerParams::validate() const {
    if (optimizer != "adam" && optimizer != "sgd") throw std::invalid_argument("trainer: optimizer must be adam or sgd");
    if (!(learning_rate > 0)) throw std::invalid_argument("trainer: learning rate must be positive");
    if (!(lr_decay > 0) || lr_decay > 1) throw std::invalid_argument("trainer: lr_decay must be in (0, 1]");
    if (batch_size < 1 || epochs < 1 || steps_per_epoch < 0)
        throw std::invalid_argument("trainer: batch size and epochs must be positive");
    if (!(lambda >= 0)) throw std::invalid_argument("trainer: lambda must be >= 0");
    if (!(val_fraction >= 0) || val_fraction >= 1) throw std::invalid_argument("trainer: val_fraction in [0, 1)");
}

std::string TrainLog::to_csv(bool consistency) const {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,train_loss,val_loss,val_dice" << (consistency ? ",val_consistency_dice" : "") << '\n';
    for (const EpochRecord &e : epochs) {
        os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_dice;
        if (consistency) os << ',' << e.val_consistency_dice;
        os << '\n';
    }
    return os.str();
}

void set_nn_threads(int n) {
    if (n < 1) throw std::invalid_argument("nn threads must be >= 1");
    at::set_num_threads(n);
}

namespace nnx {

std::vector<torch::Tensor> snapshot(const torch::nn::Module &m) {
    torch::NoGradGuard ng;
    std::vector<torch::Tensor> out;
    for (const auto &p : m.parameters()) out.push_back(p.detach().clone());
    for (const auto &b : m.buffers()) out.push_back(b.detach().clone());
    return out;
}

void restore(torch::nn::Module &m, const std::vector<torch::Tensor> &state) {
    torch::NoGradGuard ng;
    size_t i = 0;
    for (auto &p : m.parameters()) p.copy_(state.at(i++));
    for (auto &b : m.buffers()) b.copy_(state.at(i++));
}

int64_t parameter_count(const torch::nn::Module &m) {
    int64_t n = 0;
    for (const auto &p : m.parameters()) n += p.numel();
    return n;
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(torch::nn::Module &m, const TrainerParams &p) {
    if (p.optimizer == "sgd")
        return std::make_unique<torch::optim::SGD>(
            m.parameters(), torch::optim::SGDOptions(p.learning_rate).momentum(0.99).nesterov(true));
    return std::make_unique<torch::optim::Adam>(m.parameters(), torch::optim::AdamOptions(p.learning_rate));
}

void set_learning_rate(torch::optim::Optimizer &opt, double lr) {
    for (auto &g : opt.param_groups()) g.options().set_lr(lr);
}

torch::Tensor dice_loss(const torch::Tensor &x, const torch::Tensor &y, double eps) {
    std::vector<int64_t> dims{0};
    for (int64_t d = 2; d < x.dim(); ++d) dims.push_back(d);
    const torch::Tensor inter = (x * y).sum(dims);
    const torch::Tensor denom = x.sum(dims) + y.sum(dims);
    return 1 - ((2 * inter + eps) / (denom + eps)).mean();
}

void save_module(const torch::nn::Module &m, const std::filesystem::path &file) {
    torch::serialize::OutputArchive ar;
    m.save(ar);
    ar.save_to(file.string());
}

void load_module(torch::nn::Module &m, const std::filesystem::path &file) {
    if (!std::filesystem::exists(file)) throw std::runtime_error("missing weights " + file.string());
    torch::serialize::InputArchive ar;
    ar.load_from(file.string());
    m.load(ar);
}

} // namespace nnx
} // namespace isomtl
