#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "atta/tensor.hpp"

namespace atta {

struct CorruptionSpec {
    bool enabled = true;
    float fog_prob = 0.5f, color_prob = 0.5f, blur_prob = 0.5f;
    float fog_strength_lo = 0.5f, fog_strength_hi = 0.8f;
    float color_scale_lo = 0.6f, color_scale_hi = 1.4f;
    float blur_sigma_lo = 1.0f, blur_sigma_hi = 2.0f;
};

struct SceneSpec {
    int width = 64, height = 64;
    int num_seen_classes = 4;
    bool ood_enabled = true;
    float ood_frac_lo = 0.06f, ood_frac_hi = 0.15f;
    CorruptionSpec corruption;
    uint64_t seed = 0;
};

// Labels: 1..C seen classes, C+1 novel class, 0 ignore (never generated).
struct LabeledScene {
    Tensor image;             // [3][h][w], values in [0,1]
    std::vector<int> labels;  // h*w
    int width = 0, height = 0;
    int classes = 0;
    bool is_ood(int i) const { return labels[static_cast<size_t>(i)] == classes + 1; }
    int ood_pixels() const;
};

void validate_spec(const SceneSpec& spec);

// Seen-class base colors and the reserved novel-object palette. Disjoint by
// construction: Chebyshev distance between any pair >= 0.25.
const std::vector<std::array<float, 3>>& seen_palette();
const std::vector<std::array<float, 3>>& ood_palette();

// Background of C horizontal bands with sinusoidal boundaries, per-class base
// color plus Gaussian texture noise; optional elliptical novel-class blobs.
LabeledScene generate_scene(const SceneSpec& spec);

struct CorruptionResult {
    Tensor image;
    std::vector<std::string> applied;
};

// Fog, color jitter and Gaussian blur, each applied independently with its
// configured probability, in that order. Label-preserving by construction.
CorruptionResult apply_corruptions(const Tensor& image, const CorruptionSpec& spec, uint64_t seed);

uint64_t corruption_seed_for(uint64_t scene_seed);

// Scene files use the same manifest + float32 blob scheme as checkpoints.
void save_scene(const LabeledScene& scene, const std::vector<std::string>& applied,
                const std::string& prefix);
struct LoadedScene {
    LabeledScene scene;
    std::vector<std::string> applied;
};
LoadedScene load_scene(const std::string& prefix);

struct DatasetSpec {
    int n_train = 200;
    int n_test = 50;
    SceneSpec scene;  // carries size, classes, OOD range, corruption, base seed
};

struct DatasetManifest {
    DatasetSpec spec;
    std::vector<std::string> train, test_clean, test_corrupt;  // path prefixes
};

// Writes train (no novel objects, no corruption), test_clean (novel objects)
// and test_corrupt (same scenes re-rendered under corruption, labels shared),
// plus manifest.json. Returns the manifest.
DatasetManifest build_dataset(const DatasetSpec& spec, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& dir);

}  // namespace atta
