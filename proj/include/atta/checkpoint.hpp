#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "atta/net.hpp"

namespace atta {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
    int classes = 4;
    std::vector<int> widths;  // input width followed by per-block output widths
    uint64_t train_seed = 0;
    int epochs_run = 0;
    double train_accuracy = 0.0;
    std::vector<double> loss_per_epoch;
    uint64_t feature_hash = 0;  // hash of features for the probe image
    bool has_calibration = false;
};

struct ModelCheckpoint {
    SegmentationNet net;
    float calib_a = 0.0f;  // domain detector shift
    float calib_b = 1.0f;  // domain detector scale
    CheckpointMeta meta;
};

// Checkpoint files: <prefix>.json manifest (shapes, names, hyperparameters,
// float offsets) plus <prefix>.bin, a single little-endian float32 blob.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& prefix);
ModelCheckpoint load_checkpoint(const std::string& prefix);

// Canonical in-memory serialization, used for bit-exactness checks.
std::string checkpoint_bytes(const ModelCheckpoint& ckpt);

// Deterministic probe image and the hash of the backbone features it
// produces under training statistics. Recorded at save time so a reload on
// the same toolchain can verify the arithmetic end to end.
Tensor make_probe_image(int channels, int h, int w);
uint64_t feature_probe_hash(const SegmentationNet& net);

}  // namespace atta
