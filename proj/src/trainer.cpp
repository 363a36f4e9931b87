#include "atta/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "atta/kernels.hpp"
#include "atta/optimizer.hpp"
#include "atta/rng.hpp"
#include "atta/selective_bn.hpp"

namespace atta {

namespace {

struct BlockCache {
    Tensor conv;   // raw conv output
    Tensor xhat;   // normalized, pre-affine
    Tensor act;    // post-ReLU block output
    std::vector<double> mean, var;
};

struct RunningStats {
    std::vector<std::vector<double>> mean, var;  // per layer, per channel
};

RunningStats init_running(const SegmentationNet& net) {
    RunningStats rs;
    for (const auto& b : net.blocks) {
        rs.mean.emplace_back(static_cast<size_t>(b.conv.cout), 0.0);
        rs.var.emplace_back(static_cast<size_t>(b.conv.cout), 1.0);
    }
    return rs;
}

// Training-mode forward: each block normalizes by its own spatial batch
// statistics (biased variance over the image's pixels).
void forward_train(const SegmentationNet& net, const Tensor& image,
                   std::vector<BlockCache>& caches) {
    const int h = image.dim(1), w = image.dim(2), d = h * w;
    caches.resize(net.blocks.size());
    const Tensor* cur = &image;
    for (size_t l = 0; l < net.blocks.size(); ++l) {
        const auto& blk = net.blocks[l];
        auto& cache = caches[l];
        const int c = blk.conv.cout;
        cache.conv = Tensor({c, h, w});
        kernels::conv3x3_forward(cur->ptr(), blk.conv.cin, h, w, blk.conv.weight.data(),
                                 blk.conv.bias.data(), c, cache.conv.ptr());
        cache.mean.assign(static_cast<size_t>(c), 0.0);
        cache.var.assign(static_cast<size_t>(c), 0.0);
        cache.xhat = Tensor({c, h, w});
        cache.act = Tensor({c, h, w});
        const float eps = blk.bn.epsilon;
#pragma omp parallel for schedule(static)
        for (int ch = 0; ch < c; ++ch) {
            const float* src = cache.conv.ptr() + static_cast<size_t>(ch) * d;
            double sum = 0.0;
            for (int i = 0; i < d; ++i) sum += src[i];
            const double m = sum / d;
            double sq = 0.0;
            for (int i = 0; i < d; ++i) {
                const double delta = src[i] - m;
                sq += delta * delta;
            }
            const double v = sq / d;
            cache.mean[static_cast<size_t>(ch)] = m;
            cache.var[static_cast<size_t>(ch)] = v;
            const float inv = static_cast<float>(1.0 / std::sqrt(v + eps));
            const float mf = static_cast<float>(m);
            const float g = blk.bn.gamma[static_cast<size_t>(ch)];
            const float beta = blk.bn.beta[static_cast<size_t>(ch)];
            float* xh = cache.xhat.ptr() + static_cast<size_t>(ch) * d;
            float* out = cache.act.ptr() + static_cast<size_t>(ch) * d;
            for (int i = 0; i < d; ++i) {
                const float xn = (src[i] - mf) * inv;
                xh[i] = xn;
                const float a = g * xn + beta;
                out[i] = a > 0.0f ? a : 0.0f;
            }
        }
        cur = &cache.act;
    }
}

struct ParamLayout {
    // flat offsets for Adam moment storage
    struct Group {
        float* ptr;
        size_t size, offset;
    };
    std::vector<Group> groups;
    size_t total = 0;
};

ParamLayout layout_params(SegmentationNet& net) {
    ParamLayout lay;
    auto add = [&](std::vector<float>& v) {
        lay.groups.push_back({v.data(), v.size(), lay.total});
        lay.total += v.size();
    };
    for (auto& b : net.blocks) {
        add(b.conv.weight);
        add(b.conv.bias);
        add(b.bn.gamma);
        add(b.bn.beta);
    }
    add(net.head.weight);
    add(net.head.bias);
    return lay;
}

struct GradBuffer {
    std::vector<std::vector<double>> groups;
    void init(const ParamLayout& lay) {
        groups.clear();
        for (const auto& g : lay.groups) groups.emplace_back(g.size, 0.0);
    }
    void zero() {
        for (auto& g : groups) std::fill(g.begin(), g.end(), 0.0);
    }
};

// Cross-entropy with label smoothing on seen classes, mean over pixels.
// Returns loss; fills per-pixel logit gradients and (optionally) counts
// correct argmax pixels.
double softmax_ce(const Tensor& logits, const std::vector<int>& labels, int classes,
                  double smoothing, std::vector<float>& dlogits, long* correct) {
    const int d = logits.dim(1) * logits.dim(2);
    dlogits.assign(static_cast<size_t>(classes) * d, 0.0f);
    const float* in = logits.ptr();
    const double off = smoothing / classes;
    const double on = 1.0 - smoothing + off;
    double loss = 0.0;
    long ok = 0;
    for (int i = 0; i < d; ++i) {
        const int y = labels[static_cast<size_t>(i)] - 1;
        double mx = in[i];
        int arg = 0;
        for (int c = 1; c < classes; ++c) {
            const double v = in[c * d + i];
            if (v > mx) {
                mx = v;
                arg = c;
            }
        }
        double sum = 0.0;
        for (int c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(in[c * d + i]) - mx);
        for (int c = 0; c < classes; ++c) {
            const double p = std::exp(static_cast<double>(in[c * d + i]) - mx) / sum;
            const double target = c == y ? on : off;
            loss -= target * std::log(std::max(p, 1e-300));
            dlogits[static_cast<size_t>(c) * d + i] = static_cast<float>((p - target) / d);
        }
        if (arg == y) ++ok;
    }
    if (correct) *correct += ok;
    return loss / d;
}

// Full backward through head, ReLU, training-mode BN and convs.
void backward_train(const SegmentationNet& net, const Tensor& image,
                    const std::vector<BlockCache>& caches, const std::vector<float>& dlogits,
                    GradBuffer& grads) {
    const int h = image.dim(1), w = image.dim(2), d = h * w;
    const auto& head = net.head;
    const Tensor& feat = caches.back().act;

    const size_t gh = grads.groups.size();
    auto& ghw = grads.groups[gh - 2];
    auto& ghb = grads.groups[gh - 1];
    for (int c = 0; c < head.cout; ++c) {
        const float* gl = dlogits.data() + static_cast<size_t>(c) * d;
        double gb = 0.0;
        for (int i = 0; i < d; ++i) gb += gl[i];
        ghb[static_cast<size_t>(c)] += gb;
        for (int k = 0; k < head.cin; ++k) {
            const float* f = feat.ptr() + static_cast<size_t>(k) * d;
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += static_cast<double>(gl[i]) * f[i];
            ghw[static_cast<size_t>(c) * head.cin + k] += acc;
        }
    }

    Tensor dcur({head.cin, h, w});
#pragma omp parallel for schedule(static)
    for (int k = 0; k < head.cin; ++k) {
        float* dst = dcur.ptr() + static_cast<size_t>(k) * d;
        for (int i = 0; i < d; ++i) dst[i] = 0.0f;
        for (int c = 0; c < head.cout; ++c) {
            const float wv = head.weight[static_cast<size_t>(c) * head.cin + k];
            const float* gl = dlogits.data() + static_cast<size_t>(c) * d;
            for (int i = 0; i < d; ++i) dst[i] += wv * gl[i];
        }
    }

    for (int l = static_cast<int>(net.blocks.size()) - 1; l >= 0; --l) {
        const auto& blk = net.blocks[static_cast<size_t>(l)];
        const auto& cache = caches[static_cast<size_t>(l)];
        const int c = blk.conv.cout;
        const float eps = blk.bn.epsilon;
        auto& gw = grads.groups[static_cast<size_t>(l) * 4 + 0];
        auto& gb = grads.groups[static_cast<size_t>(l) * 4 + 1];
        auto& gg = grads.groups[static_cast<size_t>(l) * 4 + 2];
        auto& gbeta = grads.groups[static_cast<size_t>(l) * 4 + 3];

        Tensor dconv({c, h, w});
#pragma omp parallel for schedule(static)
        for (int ch = 0; ch < c; ++ch) {
            const float* dact = dcur.ptr() + static_cast<size_t>(ch) * d;
            const float* act = cache.act.ptr() + static_cast<size_t>(ch) * d;
            const float* xh = cache.xhat.ptr() + static_cast<size_t>(ch) * d;
            float* dc = dconv.ptr() + static_cast<size_t>(ch) * d;
            const double gamma = blk.bn.gamma[static_cast<size_t>(ch)];
            const double inv = 1.0 / std::sqrt(cache.var[static_cast<size_t>(ch)] + eps);
            double s1 = 0.0, s2 = 0.0;  // sums of da and da*xhat over pixels
            for (int i = 0; i < d; ++i) {
                const double da = act[i] > 0.0f ? dact[i] : 0.0;
                s1 += da;
                s2 += da * xh[i];
            }
            gbeta[static_cast<size_t>(ch)] += s1;
            gg[static_cast<size_t>(ch)] += s2;
            const double k1 = s1 / d, k2 = s2 / d;
            for (int i = 0; i < d; ++i) {
                const double da = act[i] > 0.0f ? dact[i] : 0.0;
                dc[i] = static_cast<float>(gamma * inv * (da - k1 - xh[i] * k2));
            }
        }

        const Tensor& input = l == 0 ? image : caches[static_cast<size_t>(l) - 1].act;
        std::vector<float> gwf(gw.size()), gbf(gb.size());
        kernels::conv3x3_grad_params(dconv.ptr(), input.ptr(), blk.conv.cin, h, w, c, gwf.data(),
                                     gbf.data());
        for (size_t i = 0; i < gw.size(); ++i) gw[i] += gwf[i];
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += gbf[i];

        if (l > 0) {
            Tensor dprev({blk.conv.cin, h, w});
            kernels::conv3x3_grad_input(dconv.ptr(), c, h, w, blk.conv.weight.data(),
                                        blk.conv.cin, dprev.ptr());
            dcur = std::move(dprev);
        }
    }
}

}  // namespace

size_t trainable_param_count(const SegmentationNet& net) {
    size_t n = 0;
    for (const auto& b : net.blocks)
        n += b.conv.weight.size() + b.conv.bias.size() + b.bn.gamma.size() + b.bn.beta.size();
    return n + net.head.weight.size() + net.head.bias.size();
}

double train_mode_loss(const SegmentationNet& net, const Tensor& image,
                       const std::vector<int>& labels) {
    std::vector<BlockCache> caches;
    forward_train(net, image, caches);
    Tensor logits = forward_head(net.head, caches.back().act);
    std::vector<float> dlogits;
    return softmax_ce(logits, labels, net.classes(), 0.0, dlogits, nullptr);
}

std::vector<double> train_mode_gradient(const SegmentationNet& net, const Tensor& image,
                                        const std::vector<int>& labels) {
    SegmentationNet& mut = const_cast<SegmentationNet&>(net);  // layout only, not modified
    ParamLayout lay = layout_params(mut);
    GradBuffer grads;
    grads.init(lay);
    std::vector<BlockCache> caches;
    forward_train(net, image, caches);
    Tensor logits = forward_head(net.head, caches.back().act);
    std::vector<float> dlogits;
    softmax_ce(logits, labels, net.classes(), 0.0, dlogits, nullptr);
    backward_train(net, image, caches, dlogits, grads);
    std::vector<double> flat;
    flat.reserve(lay.total);
    for (const auto& g : grads.groups) flat.insert(flat.end(), g.begin(), g.end());
    return flat;
}

TrainResult train(const std::vector<LabeledScene>& scenes, const TrainConfig& cfg) {
    require(!scenes.empty(), "train: no scenes");
    require(cfg.learning_rate > 0.0, "train: learning_rate must be positive");
    require(cfg.bn_momentum > 0.0 && cfg.bn_momentum <= 1.0, "train: bn_momentum must be in (0,1]");
    require(cfg.batch_size >= 1, "train: batch_size must be >= 1");
    const int C = scenes.front().classes;
    for (const auto& s : scenes) {
        require(s.classes == C, "train: inconsistent class counts");
        for (int v : s.labels)
            require(v >= 1 && v <= C, "train: training scenes must contain no novel pixels");
    }

    TrainResult result;
    SegmentationNet net = make_default_net(C, cfg.seed);
    ParamLayout lay = layout_params(net);
    AdamState adam;
    adam.lr = cfg.learning_rate;
    adam.reset(lay.total);
    GradBuffer grads;
    grads.init(lay);
    RunningStats running = init_running(net);

    Rng shuffle_rng(cfg.seed ^ 0x7241A1EEull);
    std::vector<size_t> order(scenes.size());
    std::iota(order.begin(), order.end(), 0);

    const int d = scenes.front().width * scenes.front().height;
    std::vector<BlockCache> caches;
    std::vector<float> dlogits;
    double epoch_acc = 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i) {
            const size_t j = shuffle_rng.below(i);
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        long correct = 0;
        int in_batch = 0;
        grads.zero();
        for (size_t n = 0; n < order.size(); ++n) {
            const auto& scene = scenes[order[n]];
            forward_train(net, scene.image, caches);
            for (size_t l = 0; l < net.blocks.size(); ++l) {
                for (size_t ch = 0; ch < caches[l].mean.size(); ++ch) {
                    running.mean[l][ch] = (1.0 - cfg.bn_momentum) * running.mean[l][ch] +
                                          cfg.bn_momentum * caches[l].mean[ch];
                    running.var[l][ch] = (1.0 - cfg.bn_momentum) * running.var[l][ch] +
                                         cfg.bn_momentum * caches[l].var[ch];
                }
            }
            Tensor logits = forward_head(net.head, caches.back().act);
            const double loss =
                softmax_ce(logits, scene.labels, C, cfg.label_smoothing, dlogits, &correct);
            if (!std::isfinite(loss))
                throw TrainingError("training diverged: non-finite loss at epoch " +
                                    std::to_string(epoch));
            epoch_loss += loss;
            backward_train(net, scene.image, caches, dlogits, grads);
            ++in_batch;
            if (in_batch == cfg.batch_size || n + 1 == order.size()) {
                adam.step_begin();
                for (size_t g = 0; g < lay.groups.size(); ++g) {
                    auto& buf = grads.groups[g];
                    if (in_batch > 1)
                        for (auto& v : buf) v /= in_batch;
                    adam.apply(lay.groups[g].offset, lay.groups[g].ptr, buf.data(),
                               lay.groups[g].size);
                    // Decoupled weight decay on conv and head weights only.
                    double wd = 0.0;
                    if (g < lay.groups.size() - 2 && g % 4 == 0) wd = cfg.weight_decay;
                    if (g == lay.groups.size() - 2) wd = cfg.head_weight_decay;
                    if (wd > 0.0) {
                        const float decay = static_cast<float>(1.0 - cfg.learning_rate * wd);
                        for (size_t i = 0; i < lay.groups[g].size; ++i)
                            lay.groups[g].ptr[i] *= decay;
                    }
                }
                grads.zero();
                in_batch = 0;
            }
        }
        result.loss_per_epoch.push_back(epoch_loss / static_cast<double>(scenes.size()));
        epoch_acc = static_cast<double>(correct) /
                    (static_cast<double>(scenes.size()) * static_cast<double>(d));
        result.epochs_run = epoch + 1;
        if (epoch + 1 >= cfg.min_epochs && epoch_acc >= cfg.early_stop_accuracy) break;
    }

    for (size_t l = 0; l < net.blocks.size(); ++l) {
        auto& bn = net.blocks[l].bn;
        for (size_t ch = 0; ch < bn.mu_train.size(); ++ch) {
            bn.mu_train[ch] = static_cast<float>(running.mean[l][ch]);
            bn.sigma_train[ch] =
                std::max(static_cast<float>(std::sqrt(running.var[l][ch])), 1e-6f);
        }
    }

    result.train_accuracy = epoch_acc;
    result.checkpoint.net = std::move(net);
    result.checkpoint.meta.classes = C;
    result.checkpoint.meta.widths = {3};
    for (const auto& b : result.checkpoint.net.blocks)
        result.checkpoint.meta.widths.push_back(b.conv.cout);
    result.checkpoint.meta.train_seed = cfg.seed;
    result.checkpoint.meta.epochs_run = result.epochs_run;
    result.checkpoint.meta.train_accuracy = result.train_accuracy;
    result.checkpoint.meta.loss_per_epoch = result.loss_per_epoch;
    result.checkpoint.meta.feature_hash = feature_probe_hash(result.checkpoint.net);
    return result;
}

KlStatSummary calibrate_domain_detector(ModelCheckpoint& ckpt,
                                        const std::vector<const Tensor*>& images) {
    require(images.size() >= 10, "calibrate_domain_detector: need at least 10 images");
    const BnStats train_stats = training_stats(ckpt.net);
    std::vector<double> kls(images.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(images.size()); ++i) {
        BackboneResult r = forward_transductive(ckpt.net, *images[static_cast<size_t>(i)]);
        kls[static_cast<size_t>(i)] = kl_sum(r.batch_stats, train_stats);
    }
    double mean = std::accumulate(kls.begin(), kls.end(), 0.0) / static_cast<double>(kls.size());
    double var = 0.0;
    for (double k : kls) var += (k - mean) * (k - mean);
    var /= static_cast<double>(kls.size());
    KlStatSummary summary;
    summary.mean_kl_sum = mean;
    summary.std_kl_sum = std::sqrt(var);
    ckpt.calib_a = static_cast<float>(-(summary.mean_kl_sum + 3.0 * summary.std_kl_sum));
    ckpt.calib_b = static_cast<float>(std::max(summary.std_kl_sum, 1e-6));
    ckpt.meta.has_calibration = true;
    return summary;
}

}  // namespace atta
