#include "atta/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "atta/checkpoint.hpp"
#include "atta/rng.hpp"

namespace atta {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr float kTextureNoise = 0.03f;
// Novel objects carry heavier texture than the background classes. Besides
// looking object-like, the extra variance is what pollutes single-image
// statistics when an anomaly is present.
constexpr float kNovelTextureNoise = 0.12f;
}  // namespace

int LabeledScene::ood_pixels() const {
    int n = 0;
    for (int v : labels) n += (v == classes + 1);
    return n;
}

void validate_spec(const SceneSpec& spec) {
    require(spec.width >= 16 && spec.height >= 16, "scene size must be at least 16x16");
    require(spec.num_seen_classes >= 1 &&
                spec.num_seen_classes <= static_cast<int>(seen_palette().size()),
            "num_seen_classes out of palette range");
    require(0.0f <= spec.ood_frac_lo && spec.ood_frac_lo <= spec.ood_frac_hi &&
                spec.ood_frac_hi <= 0.5f,
            "ood area fraction range must satisfy 0 <= lo <= hi <= 0.5");
    const auto& c = spec.corruption;
    for (float p : {c.fog_prob, c.color_prob, c.blur_prob})
        require(p >= 0.0f && p <= 1.0f, "corruption probability must be in [0,1]");
}

// Seen classes sit at tetrahedral corners of the color cube. The hull
// interior is then far (>= 0.35 per channel) from every class color, which
// leaves room for novel colors that are genuinely ambiguous: on a piecewise
// linear net the energy score peaks between class colors, not beyond them.
const std::vector<std::array<float, 3>>& seen_palette() {
    static const std::vector<std::array<float, 3>> p = {
        {0.15f, 0.15f, 0.15f}, {0.85f, 0.85f, 0.15f}, {0.85f, 0.15f, 0.85f},
        {0.15f, 0.85f, 0.85f}, {0.85f, 0.15f, 0.15f}, {0.15f, 0.85f, 0.15f},
    };
    return p;
}

// Near-centroid novel colors: nearly equidistant from all seen classes, so
// a residual distortion after statistics correction cannot tip them into a
// single class's confident region.
const std::vector<std::array<float, 3>>& ood_palette() {
    static const std::vector<std::array<float, 3>> p = {
        {0.50f, 0.50f, 0.50f},
        {0.42f, 0.58f, 0.50f},
        {0.58f, 0.45f, 0.42f},
        {0.47f, 0.44f, 0.58f},
    };
    return p;
}

LabeledScene generate_scene(const SceneSpec& spec) {
    validate_spec(spec);
    Rng rng(spec.seed ^ 0x5CE4E5EEDull);
    const int w = spec.width, h = spec.height, C = spec.num_seen_classes;
    const int d = w * h;

    LabeledScene scene;
    scene.width = w;
    scene.height = h;
    scene.classes = C;
    scene.image = Tensor({3, h, w});
    scene.labels.assign(static_cast<size_t>(d), 1);

    // Horizontal bands with per-scene random proportions, separated by
    // sinusoidal boundaries. Varying the class mix across scenes gives the
    // in-domain image statistics a healthy spread (scene composition varies,
    // the domain does not); amplitudes stay below a quarter of the narrower
    // neighboring band so adjacent boundaries never cross.
    std::vector<double> frac(static_cast<size_t>(C));
    double frac_total = 0.0;
    for (auto& f : frac) {
        f = rng.uniform(0.5, 1.5);
        frac_total += f;
    }
    for (auto& f : frac) f /= frac_total;
    std::vector<double> base(C > 1 ? C - 1 : 0), amp(base.size()), freq(base.size()),
        phase(base.size());
    double cum = 0.0;
    for (size_t k = 0; k < base.size(); ++k) {
        cum += frac[k];
        base[k] = cum * h;
        const double narrower = std::min(frac[k], frac[k + 1]) * h;
        amp[k] = rng.uniform(0.3, 0.9) * narrower / 4.0;
        freq[k] = rng.uniform(1.0, 3.0);
        phase[k] = rng.uniform(0.0, 2.0 * kPi);
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int lbl = 1;
            for (size_t k = 0; k < base.size(); ++k) {
                const double boundary =
                    base[k] + amp[k] * std::sin(2.0 * kPi * freq[k] * x / w + phase[k]);
                if (y >= boundary) ++lbl;
            }
            scene.labels[static_cast<size_t>(y) * w + x] = lbl;
        }
    }

    // paint[i] set for pixels drawn in the novel color. It extends 2px past
    // the labeled ellipse: labeled pixels keep their color identity under
    // blur instead of degrading into class mixtures at the rim, matching the
    // conservative inside-the-object annotations of real benchmarks.
    std::vector<uint8_t> paint(static_cast<size_t>(d), 0);
    if (spec.ood_enabled && spec.ood_frac_hi > 0.0f) {
        const double target = rng.uniform(spec.ood_frac_lo, spec.ood_frac_hi);
        if (target > 0.0) {
            const int blobs = 1 + static_cast<int>(rng.below(2));
            std::vector<double> parts(static_cast<size_t>(blobs));
            double total = 0.0;
            for (auto& p : parts) {
                p = rng.uniform(0.5, 1.0);
                total += p;
            }
            for (auto& p : parts) p = p / total * target * d;
            const double halo = 2.0;
            for (double area : parts) {
                const double aspect = rng.uniform(0.5, 2.0);
                const double ra = std::max(1.0, std::sqrt(area / kPi * aspect));
                const double rb = std::max(1.0, std::sqrt(area / kPi / aspect));
                const double theta = rng.uniform(0.0, kPi);
                const double margin = std::max(ra, rb) + halo;
                const double cx = (2.0 * margin < w - 1)
                                      ? rng.uniform(margin, w - 1 - margin)
                                      : (w - 1) / 2.0;
                const double cy = (2.0 * margin < h - 1)
                                      ? rng.uniform(margin, h - 1 - margin)
                                      : (h - 1) / 2.0;
                const double ct = std::cos(theta), st = std::sin(theta);
                const int x0 = std::max(0, static_cast<int>(std::floor(cx - margin)));
                const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + margin)));
                const int y0 = std::max(0, static_cast<int>(std::floor(cy - margin)));
                const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + margin)));
                for (int y = y0; y <= y1; ++y) {
                    for (int x = x0; x <= x1; ++x) {
                        const double dx = x - cx, dy = y - cy;
                        const double pu = dx * ct + dy * st;
                        const double pv = -dx * st + dy * ct;
                        const size_t i = static_cast<size_t>(y) * w + x;
                        if ((pu / (ra + halo)) * (pu / (ra + halo)) +
                                (pv / (rb + halo)) * (pv / (rb + halo)) <=
                            1.0)
                            paint[i] = 1;
                        if ((pu / ra) * (pu / ra) + (pv / rb) * (pv / rb) <= 1.0)
                            scene.labels[i] = C + 1;
                    }
                }
            }
        }
    }

    // Colors drawn per blob would couple blob count to pixel colors; instead
    // a single novel color per scene region keeps the draw order simple.
    std::vector<std::array<float, 3>> colors(static_cast<size_t>(C) + 2);
    for (int c = 1; c <= C; ++c) colors[static_cast<size_t>(c)] = seen_palette()[c - 1];
    colors[static_cast<size_t>(C) + 1] =
        ood_palette()[static_cast<size_t>(rng.below(ood_palette().size()))];
    // Per-scene appearance jitter: a touch of global brightness plus
    // independent per-class color offsets. Training and clean test scenes
    // share this variation, so the domain detector's calibration spread
    // covers benign novelty (such as the blobs' effect on image statistics)
    // instead of degenerating to a step function at the training mean. The
    // per-class offsets dominate on purpose: they are not correctable by a
    // global affine, so single-image statistics gain nothing from them.
    const float brightness = static_cast<float>(rng.uniform(0.95, 1.05));
    for (auto& color : colors)
        for (int c = 0; c < 3; ++c)
            color[static_cast<size_t>(c)] =
                brightness * color[static_cast<size_t>(c)] +
                static_cast<float>(rng.uniform(-0.03, 0.03));
    for (int i = 0; i < d; ++i) {
        const bool novel = paint[static_cast<size_t>(i)] != 0;
        const int color_class = novel ? C + 1 : scene.labels[static_cast<size_t>(i)];
        const auto& base = colors[static_cast<size_t>(color_class)];
        const float noise = novel ? kNovelTextureNoise : kTextureNoise;
        for (int c = 0; c < 3; ++c) {
            const float v =
                base[static_cast<size_t>(c)] + noise * static_cast<float>(rng.normal());
            scene.image.data[static_cast<size_t>(c) * d + i] = std::clamp(v, 0.0f, 1.0f);
        }
    }
    return scene;
}

namespace {

void apply_fog(Tensor& img, float strength) {
    const int h = img.dim(1), w = img.dim(2);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            // Densest at the top row (gradient 1), tapering to 0.7 at the
            // bottom: fog covers the whole frame, it does not vanish. The
            // nearly uniform profile keeps the shift close to a global
            // affine, the regime batch-statistic correction can undo.
            const float g =
                0.7f + 0.3f * static_cast<float>(h - 1 - y) / static_cast<float>(h - 1);
            const float a = strength * g;
            for (int x = 0; x < w; ++x) {
                float& v = img.at(c, y, x);
                v = (1.0f - a) * v + a * 0.7f;
            }
        }
    }
}

void apply_color(Tensor& img, Rng& rng, const CorruptionSpec& spec) {
    // Brightness-dominant jitter: one global scale drawn from the range with
    // small per-channel deviations on top. Only isotropic scale and shift
    // are exactly invertible by per-channel statistic correction; strongly
    // anisotropic channel scales or rotations destroy hue identity in a way
    // no normalization can undo.
    const float global =
        static_cast<float>(rng.uniform(spec.color_scale_lo, spec.color_scale_hi));
    float scale[3];
    for (auto& s : scale) {
        s = global * static_cast<float>(rng.uniform(0.98, 1.02));
        s = std::clamp(s, spec.color_scale_lo, spec.color_scale_hi);
    }
    const float t = static_cast<float>(rng.uniform(0.0, 0.10));  // hue-like channel rotation
    const int d = img.dim(1) * img.dim(2);
    for (int i = 0; i < d; ++i) {
        float in[3];
        for (int c = 0; c < 3; ++c) in[c] = img.data[static_cast<size_t>(c) * d + i];
        for (int c = 0; c < 3; ++c) {
            const float mixed = (1.0f - t) * in[c] + t * in[(c + 1) % 3];
            img.data[static_cast<size_t>(c) * d + i] = std::clamp(scale[c] * mixed, 0.0f, 1.0f);
        }
    }
}

void apply_blur(Tensor& img, float sigma) {
    const int h = img.dim(1), w = img.dim(2);
    const int radius = static_cast<int>(std::ceil(3.0f * sigma));
    std::vector<float> kernel(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (static_cast<double>(i) * i) / (sigma * sigma));
        kernel[static_cast<size_t>(i + radius)] = static_cast<float>(v);
        sum += v;
    }
    for (auto& k : kernel) k = static_cast<float>(k / sum);

    std::vector<float> tmp(static_cast<size_t>(h) * w);
    for (int c = 0; c < 3; ++c) {
        float* chan = img.ptr() + static_cast<size_t>(c) * h * w;
        for (int y = 0; y < h; ++y) {  // horizontal pass, clamp-to-edge
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int xx = std::clamp(x + k, 0, w - 1);
                    acc += kernel[static_cast<size_t>(k + radius)] * chan[y * w + xx];
                }
                tmp[static_cast<size_t>(y) * w + x] = static_cast<float>(acc);
            }
        }
        for (int y = 0; y < h; ++y) {  // vertical pass
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int yy = std::clamp(y + k, 0, h - 1);
                    acc += kernel[static_cast<size_t>(k + radius)] *
                           tmp[static_cast<size_t>(yy) * w + x];
                }
                chan[y * w + x] = std::clamp(static_cast<float>(acc), 0.0f, 1.0f);
            }
        }
    }
}

}  // namespace

CorruptionResult apply_corruptions(const Tensor& image, const CorruptionSpec& spec,
                                   uint64_t seed) {
    require(image.rank() == 3 && image.dim(0) == 3, "apply_corruptions: image must be 3xHxW");
    CorruptionResult res;
    res.image = image;
    if (!spec.enabled) return res;
    Rng rng(seed ^ 0xC044FF7ull);
    if (rng.uniform() < spec.fog_prob) {
        const float s = static_cast<float>(rng.uniform(spec.fog_strength_lo, spec.fog_strength_hi));
        apply_fog(res.image, s);
        res.applied.push_back("fog");
    }
    if (rng.uniform() < spec.color_prob) {
        apply_color(res.image, rng, spec);
        res.applied.push_back("color");
    }
    if (rng.uniform() < spec.blur_prob) {
        const float s = static_cast<float>(rng.uniform(spec.blur_sigma_lo, spec.blur_sigma_hi));
        apply_blur(res.image, s);
        res.applied.push_back("blur");
    }
    return res;
}

uint64_t corruption_seed_for(uint64_t scene_seed) {
    uint64_t s = scene_seed ^ 0xD011A1D5ull;
    return splitmix64(s);
}

void save_scene(const LabeledScene& scene, const std::vector<std::string>& applied,
                const std::string& prefix) {
    const int d = scene.width * scene.height;
    json m;
    m["format"] = "atta-scene";
    m["width"] = scene.width;
    m["height"] = scene.height;
    m["classes"] = scene.classes;
    m["applied"] = applied;
    json secs = json::array();
    secs.push_back({{"name", "image"}, {"shape", {3, scene.height, scene.width}}, {"offset", 0}});
    secs.push_back(
        {{"name", "labels"}, {"shape", {scene.height, scene.width}}, {"offset", 3 * d}});
    m["sections"] = secs;
    m["blob_floats"] = 4 * d;

    std::ofstream bin(prefix + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw FormatError("cannot open " + prefix + ".bin for writing");
    bin.write(reinterpret_cast<const char*>(scene.image.ptr()),
              static_cast<std::streamsize>(sizeof(float) * 3 * d));
    std::vector<float> lbl(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) lbl[static_cast<size_t>(i)] = static_cast<float>(scene.labels[i]);
    bin.write(reinterpret_cast<const char*>(lbl.data()),
              static_cast<std::streamsize>(sizeof(float) * d));
    bin.close();
    if (!bin) throw FormatError("write failed for " + prefix + ".bin");

    std::ofstream js(prefix + ".json", std::ios::trunc);
    if (!js) throw FormatError("cannot open " + prefix + ".json for writing");
    js << m.dump() << "\n";
}

LoadedScene load_scene(const std::string& prefix) {
    std::ifstream js(prefix + ".json");
    if (!js) throw FormatError("cannot open " + prefix + ".json");
    json m;
    try {
        js >> m;
    } catch (const json::exception& e) {
        throw FormatError("malformed scene manifest " + prefix + ".json: " + e.what());
    }
    if (m.value("format", "") != "atta-scene")
        throw FormatError("not an atta scene manifest: " + prefix + ".json");
    LoadedScene out;
    auto& s = out.scene;
    s.width = m.at("width").get<int>();
    s.height = m.at("height").get<int>();
    s.classes = m.at("classes").get<int>();
    out.applied = m.at("applied").get<std::vector<std::string>>();
    const int d = s.width * s.height;
    const size_t floats = m.at("blob_floats").get<size_t>();
    if (floats != static_cast<size_t>(4 * d))
        throw FormatError("scene blob_floats mismatch in " + prefix + ".json");

    std::ifstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw FormatError("cannot open " + prefix + ".bin");
    bin.seekg(0, std::ios::end);
    if (static_cast<size_t>(bin.tellg()) != floats * sizeof(float))
        throw FormatError("scene blob length mismatch for " + prefix + ".bin");
    bin.seekg(0);
    s.image = Tensor({3, s.height, s.width});
    bin.read(reinterpret_cast<char*>(s.image.ptr()),
             static_cast<std::streamsize>(sizeof(float) * 3 * d));
    std::vector<float> lbl(static_cast<size_t>(d));
    bin.read(reinterpret_cast<char*>(lbl.data()), static_cast<std::streamsize>(sizeof(float) * d));
    if (!bin) throw FormatError("read failed for " + prefix + ".bin");
    s.labels.resize(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) s.labels[static_cast<size_t>(i)] = static_cast<int>(lbl[i]);
    return out;
}

DatasetManifest build_dataset(const DatasetSpec& spec, const std::string& out_dir) {
    validate_spec(spec.scene);
    require(spec.n_train >= 1 && spec.n_test >= 1, "dataset needs at least one scene per split");
    DatasetManifest manifest;
    manifest.spec = spec;

    for (const char* sub : {"train", "test_clean", "test_corrupt"}) {
        std::error_code ec;
        fs::create_directories(fs::path(out_dir) / sub, ec);
        if (ec)
            throw FormatError("cannot create directory " + (fs::path(out_dir) / sub).string() +
                              ": " + ec.message());
    }

    json applied_map = json::object();
    char name[32];

    for (int i = 0; i < spec.n_train; ++i) {
        SceneSpec sp = spec.scene;
        sp.ood_enabled = false;
        sp.seed = spec.scene.seed + static_cast<uint64_t>(i);
        LabeledScene scene = generate_scene(sp);
        std::snprintf(name, sizeof(name), "train/scene_%04d", i);
        save_scene(scene, {}, (fs::path(out_dir) / name).string());
        manifest.train.push_back(name);
    }
    for (int i = 0; i < spec.n_test; ++i) {
        SceneSpec sp = spec.scene;
        sp.ood_enabled = true;
        sp.seed = spec.scene.seed + static_cast<uint64_t>(spec.n_train + i);
        LabeledScene scene = generate_scene(sp);
        std::snprintf(name, sizeof(name), "test_clean/scene_%04d", i);
        save_scene(scene, {}, (fs::path(out_dir) / name).string());
        manifest.test_clean.push_back(name);

        CorruptionResult corr =
            apply_corruptions(scene.image, spec.scene.corruption, corruption_seed_for(sp.seed));
        LabeledScene corrupted = scene;  // labels shared with the clean twin
        corrupted.image = std::move(corr.image);
        std::snprintf(name, sizeof(name), "test_corrupt/scene_%04d", i);
        save_scene(corrupted, corr.applied, (fs::path(out_dir) / name).string());
        manifest.test_corrupt.push_back(name);
        applied_map[name] = corr.applied;
    }

    json m;
    m["format"] = "atta-dataset";
    m["n_train"] = spec.n_train;
    m["n_test"] = spec.n_test;
    m["width"] = spec.scene.width;
    m["height"] = spec.scene.height;
    m["classes"] = spec.scene.num_seen_classes;
    m["seed"] = spec.scene.seed;
    m["ood_frac"] = {spec.scene.ood_frac_lo, spec.scene.ood_frac_hi};
    const auto& c = spec.scene.corruption;
    m["corruption"] = {{"fog_prob", c.fog_prob},
                       {"color_prob", c.color_prob},
                       {"blur_prob", c.blur_prob},
                       {"fog_strength", {c.fog_strength_lo, c.fog_strength_hi}},
                       {"color_scale", {c.color_scale_lo, c.color_scale_hi}},
                       {"blur_sigma", {c.blur_sigma_lo, c.blur_sigma_hi}}};
    m["train"] = manifest.train;
    m["test_clean"] = manifest.test_clean;
    m["test_corrupt"] = manifest.test_corrupt;
    m["applied"] = applied_map;
    std::ofstream js((fs::path(out_dir) / "manifest.json").string(), std::ios::trunc);
    if (!js) throw FormatError("cannot open " + out_dir + "/manifest.json for writing");
    js << m.dump(2) << "\n";
    return manifest;
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream js((fs::path(dir) / "manifest.json").string());
    if (!js) throw FormatError("cannot open " + dir + "/manifest.json");
    json m;
    try {
        js >> m;
    } catch (const json::exception& e) {
        throw FormatError("malformed dataset manifest in " + dir + ": " + e.what());
    }
    if (m.value("format", "") != "atta-dataset")
        throw FormatError("not an atta dataset manifest: " + dir);
    DatasetManifest out;
    out.spec.n_train = m.at("n_train").get<int>();
    out.spec.n_test = m.at("n_test").get<int>();
    out.spec.scene.width = m.at("width").get<int>();
    out.spec.scene.height = m.at("height").get<int>();
    out.spec.scene.num_seen_classes = m.at("classes").get<int>();
    out.spec.scene.seed = m.at("seed").get<uint64_t>();
    auto join = [&](const std::string& rel) { return (fs::path(dir) / rel).string(); };
    for (const auto& r : m.at("train")) out.train.push_back(join(r.get<std::string>()));
    for (const auto& r : m.at("test_clean")) out.test_clean.push_back(join(r.get<std::string>()));
    for (const auto& r : m.at("test_corrupt"))
        out.test_corrupt.push_back(join(r.get<std::string>()));
    return out;
}

}  // namespace atta
