// nn_common.h - training parameters and logs shared by the two networks.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace isomtl {

struct TrainerParams {
    std::string optimizer = "adam"; // adam | sgd
    double learning_rate = 1e-3;
    double lr_decay = 1.0; // multiplicative per epoch
    int batch_size = 16;
    int epochs = 20;
    // Batches per epoch; 0 means one pass over the training samples.
    int steps_per_epoch = 0;
    double lambda = 1.0; // consistency weight (label upsampler only)
    double val_fraction = 0.2;
    uint64_t seed = 0;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_dice = 0.0;
    double val_consistency_dice = 0.0; // label upsampler only
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;

    /// CSV with header epoch,train_loss,val_loss,val_dice[,val_consistency_dice].
    std::string to_csv(bool consistency) const;
};

/// Intra-op threads for every network; 1 keeps results independent of the machine.
void set_nn_threads(int n);

} // namespace isomtl
