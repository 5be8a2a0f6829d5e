// Torch helpers shared by the label upsampler and the segmentation network.
// Private to the library: public headers stay free of torch includes.

#pragma once

#include "isomtl/nn_common.h"

#include <torch/torch.h>

#include <memory>
#include <vector>

namespace isomtl::nnx {

/// Copies of every parameter and buffer, in registration order.
std::vector<torch::Tensor> snapshot(const torch::nn::Module &m);
void restore(torch::nn::Module &m, const std::vector<torch::Tensor> &state);

int64_t parameter_count(const torch::nn::Module &m);

std::unique_ptr<torch::optim::Optimizer> make_optimizer(torch::nn::Module &m, const TrainerParams &p);
void set_learning_rate(torch::optim::Optimizer &opt, double lr);

/// 1 - soft Dice per group, averaged over groups. `x` and `y` are
/// (batch, groups, ...); sums run over the batch and all trailing dims.
torch::Tensor dice_loss(const torch::Tensor &x, const torch::Tensor &y, double eps = 1e-5);

void save_module(const torch::nn::Module &m, const std::filesystem::path &file);
void load_module(torch::nn::Module &m, const std::filesystem::path &file);

} // namespace isomtl::nnx
