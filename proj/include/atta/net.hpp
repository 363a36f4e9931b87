#pragma once

#include <cstdint>
#include <vector>

#include "atta/tensor.hpp"

namespace atta {

struct Conv3x3 {
    int cin = 0, cout = 0;
    std::vector<float> weight;  // [cout][cin][3][3]
    std::vector<float> bias;    // [cout]
};

struct Conv1x1 {
    int cin = 0, cout = 0;
    std::vector<float> weight;  // [cout][cin]
    std::vector<float> bias;    // [cout]
};

struct BatchNormLayer {
    std::vector<float> gamma, beta;
    std::vector<float> mu_train, sigma_train;  // running stats, sigma as std dev
    float epsilon = 1e-5f;
    int channels() const { return static_cast<int>(gamma.size()); }
};

struct Block {
    Conv3x3 conv;
    BatchNormLayer bn;
};

// Stride-1 fully convolutional net: [conv3x3 -> BN -> ReLU] blocks plus a
// 1x1 classification head. Logits keep the input resolution.
struct SegmentationNet {
    std::vector<Block> blocks;
    Conv1x1 head;
    int classes() const { return head.cout; }
    int bn_layers() const { return static_cast<int>(blocks.size()); }
    int input_channels() const { return blocks.empty() ? 0 : blocks.front().conv.cin; }
};

// Reference architecture: 3 blocks, channels 3->16->32->32, head 32->classes.
SegmentationNet make_default_net(int classes = 4, uint64_t init_seed = 0);

struct ChannelStats {
    std::vector<float> mean, stdd;
};
using BnStats = std::vector<ChannelStats>;  // one entry per BN layer

BnStats training_stats(const SegmentationNet& net);

struct BackboneResult {
    Tensor features;      // [c_out][h][w]
    BnStats batch_stats;  // observed pre-normalization stats of this image
};

// Forward pass through the backbone. Normalization always uses the supplied
// stats; batch_stats reports what this image's activations looked like before
// normalization. conv_capture, when non-null, receives each block's raw conv
// output (used by tests and the trainer).
BackboneResult forward_backbone(const SegmentationNet& net, const Tensor& image,
                                const BnStats& stats,
                                std::vector<Tensor>* conv_capture = nullptr);

// Transductive forward: each BN layer normalizes by the statistics of its
// own current input, layer by layer. The returned batch_stats are therefore
// self-consistent: a fixed-stats forward_backbone pass with them reproduces
// this pass exactly.
BackboneResult forward_transductive(const SegmentationNet& net, const Tensor& image);

Tensor forward_head(const Conv1x1& head, const Tensor& features);

// Per-pixel softmax over the channel axis, max-subtracted, double internals.
Tensor softmax_per_pixel(const Tensor& logits);

struct HeadGradient {
    std::vector<double> dweight;  // [cout][cin]
    std::vector<double> dbias;    // [cout]
};

// Exact gradient of a scalar loss w.r.t. the 1x1 head parameters given the
// upstream per-pixel logit gradients (row-major [cout][d]).
HeadGradient head_gradient(const Tensor& features, const Conv1x1& head,
                           const std::vector<double>& dloss_dlogits);

}  // namespace atta
