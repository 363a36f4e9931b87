#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "atta/checkpoint.hpp"
#include "atta/scene.hpp"

namespace atta {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    int epochs = 30;  // upper bound; early stop below
    int batch_size = 1;
    double learning_rate = 1e-3;
    uint64_t seed = 0;
    double bn_momentum = 0.1;
    // Label smoothing and decoupled weight decay keep the logit scale
    // bounded on this easily separable task; without them the net drives
    // novel colors to arbitrarily confident logits and the outlier score
    // loses its meaning.
    double label_smoothing = 0.05;
    double weight_decay = 1e-4;       // conv weights
    double head_weight_decay = 1e-2;  // keeps the head small so test-time
                                      // steps are meaningful relative to it
    // The task saturates quickly; stop once training pixel accuracy clears
    // this bar, but never before min_epochs so the loss curve stays long
    // enough to be meaningful.
    double early_stop_accuracy = 0.995;
    int min_epochs = 6;
};

struct TrainResult {
    ModelCheckpoint checkpoint;
    std::vector<double> loss_per_epoch;
    double train_accuracy = 0.0;
    int epochs_run = 0;
};

// Supervised training with per-pixel cross entropy on seen classes. BN runs
// in training mode (per-image spatial statistics) and accumulates running
// stats by EMA; gradients are exact for the fixed conv/BN/ReLU architecture.
TrainResult train(const std::vector<LabeledScene>& scenes, const TrainConfig& cfg);

struct KlStatSummary {
    double mean_kl_sum = 0.0;
    double std_kl_sum = 0.0;
};

// Fits the domain detector from the spread of training-image KL statistics:
// a = -(mean + 3*std), b = std (floored). Needs at least 10 images.
KlStatSummary calibrate_domain_detector(ModelCheckpoint& ckpt,
                                        const std::vector<const Tensor*>& images);

// Training-mode forward loss and full parameter gradient, exposed for the
// finite-difference tests. Gradient layout: per block [conv.weight,
// conv.bias, bn.gamma, bn.beta], then [head.weight, head.bias].
double train_mode_loss(const SegmentationNet& net, const Tensor& image,
                       const std::vector<int>& labels);
std::vector<double> train_mode_gradient(const SegmentationNet& net, const Tensor& image,
                                        const std::vector<int>& labels);
size_t trainable_param_count(const SegmentationNet& net);

}  // namespace atta
