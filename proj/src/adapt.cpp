#include "atta/adapt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "atta/optimizer.hpp"

namespace atta {

namespace {

constexpr double kProbEps = 1e-10;

double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

// Head forward in double precision for loss and gradient work; the exported
// maps still go through the regular float path.
struct HeadEval {
    std::vector<double> logits;   // [C][d]
    std::vector<double> probs;    // [C][d] softmax
    std::vector<double> scores;   // [d]
    std::vector<int> argmax;      // [d]
};

HeadEval eval_head_double(const Tensor& features, const Conv1x1& head, ScoreKind kind) {
    const int d = features.dim(1) * features.dim(2);
    const int C = head.cout, K = head.cin;
    HeadEval ev;
    ev.logits.assign(static_cast<size_t>(C) * d, 0.0);
    for (int c = 0; c < C; ++c) {
        double* row = ev.logits.data() + static_cast<size_t>(c) * d;
        for (int i = 0; i < d; ++i) row[i] = head.bias[static_cast<size_t>(c)];
        for (int k = 0; k < K; ++k) {
            const double w = head.weight[static_cast<size_t>(c) * K + k];
            const float* f = features.ptr() + static_cast<size_t>(k) * d;
            for (int i = 0; i < d; ++i) row[i] += w * f[i];
        }
    }
    ev.probs.resize(ev.logits.size());
    ev.scores.resize(static_cast<size_t>(d));
    ev.argmax.resize(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        double mx = ev.logits[static_cast<size_t>(i)];
        int arg = 0;
        for (int c = 1; c < C; ++c) {
            const double v = ev.logits[static_cast<size_t>(c) * d + i];
            if (v > mx) {
                mx = v;
                arg = c;
            }
        }
        double sum = 0.0;
        for (int c = 0; c < C; ++c)
            sum += std::exp(ev.logits[static_cast<size_t>(c) * d + i] - mx);
        for (int c = 0; c < C; ++c)
            ev.probs[static_cast<size_t>(c) * d + i] =
                std::exp(ev.logits[static_cast<size_t>(c) * d + i] - mx) / sum;
        ev.argmax[static_cast<size_t>(i)] = arg;
        ev.scores[static_cast<size_t>(i)] =
            kind == ScoreKind::energy ? -(mx + std::log(sum)) : -mx;
    }
    return ev;
}

// dL/dlogits from dL/dprobs through the per-pixel softmax.
void softmax_backward_pixel(const double* probs, const double* dprobs, int C, int d, int i,
                            double* dlogits) {
    double common = 0.0;
    for (int c = 0; c < C; ++c) common += dprobs[static_cast<size_t>(c) * d + i] * probs[static_cast<size_t>(c) * d + i];
    for (int c = 0; c < C; ++c) {
        const size_t idx = static_cast<size_t>(c) * d + i;
        dlogits[idx] += probs[idx] * (dprobs[idx] - common);
    }
}

}  // namespace

void validate_config(const AdaptConfig& cfg) {
    require(cfg.iterations >= 1, "adapt config: iterations must be >= 1");
    require(cfg.learning_rate > 0.0, "adapt config: learning_rate must be positive");
    require(0.0 < cfg.tau1 && cfg.tau1 < cfg.tau2 && cfg.tau2 < 1.0,
            "adapt config: need 0 < tau1 < tau2 < 1");
}

PseudoLabels build_pseudo_labels(const std::vector<double>& gbar, double tau1, double tau2,
                                 ClassWeightMode mode) {
    PseudoLabels out;
    out.tau1 = tau1;
    out.tau2 = tau2;
    const size_t d = gbar.size();
    out.in_region.assign(d, 0);
    out.outlier.assign(d, 0);
    for (size_t i = 0; i < d; ++i) {
        const double g = gbar[i];
        if (g < tau1) {
            out.in_region[i] = 1;
            ++out.n_t0;
        } else if (g > tau2) {
            out.in_region[i] = 1;
            out.outlier[i] = 1;
            ++out.n_t1;
        } else {
            ++out.n_excluded;
        }
    }
    if (mode == ClassWeightMode::one || out.n_t1 == 0) {
        out.lambda_weight = 1.0;
    } else {
        out.lambda_weight =
            std::max(1.0, static_cast<double>(out.n_t0) / static_cast<double>(out.n_t1));
    }
    return out;
}

LossResult anomaly_entropy_loss(const std::vector<double>& probs, int classes, int pixels,
                                const std::vector<double>& gbar, const PseudoLabels& labels,
                                const ScoreGradContext& ctx) {
    const int C = classes, d = pixels;
    require(static_cast<int>(probs.size()) == C * d, "anomaly_entropy_loss: probs shape");
    require(static_cast<int>(gbar.size()) == d, "anomaly_entropy_loss: gbar shape");
    require(static_cast<int>(labels.in_region.size()) == d, "anomaly_entropy_loss: labels shape");
    require(ctx.b_x > 0.0, "anomaly_entropy_loss: b_x must be positive");

    LossResult res;
    res.dlogits.assign(static_cast<size_t>(C) * d, 0.0);
    std::vector<double> dprobs(static_cast<size_t>(C) * d, 0.0);
    const double lambda = labels.lambda_weight;

    double loss = 0.0;
    for (int i = 0; i < d; ++i) {
        if (!labels.in_region[static_cast<size_t>(i)]) continue;
        const double g = gbar[static_cast<size_t>(i)];
        const double gc = clamp_prob(g);
        double dgbar = 0.0;
        if (labels.outlier[static_cast<size_t>(i)]) {
            loss -= lambda * std::log(gc);
            dgbar = -lambda / gc;
        } else {
            double sum_p = 0.0;
            for (int c = 0; c < C; ++c) {
                const size_t idx = static_cast<size_t>(c) * d + i;
                const double p = probs[idx];
                const double arg = clamp_prob(p * (1.0 - g));
                loss -= p * std::log(arg);
                dprobs[idx] = -(std::log(arg) + 1.0);
                sum_p += p;
            }
            dgbar = sum_p / (1.0 - gc);
        }
        softmax_backward_pixel(probs.data(), dprobs.data(), C, d, i, res.dlogits.data());
        // Chain through the frozen Platt map: dgbar/dscore = g(1-g)/b.
        const double factor = dgbar * g * (1.0 - g) / ctx.b_x;
        if (factor != 0.0) {
            if (ctx.kind == ScoreKind::energy) {
                for (int c = 0; c < C; ++c) {
                    const size_t idx = static_cast<size_t>(c) * d + i;
                    res.dlogits[idx] += factor * (-probs[idx]);
                }
            } else {
                require(ctx.argmax != nullptr, "anomaly_entropy_loss: max_logit needs argmax");
                const int arg = (*ctx.argmax)[static_cast<size_t>(i)];
                res.dlogits[static_cast<size_t>(arg) * d + i] += factor * (-1.0);
            }
        }
        // dprobs is reused across pixels; clear the touched entries.
        for (int c = 0; c < C; ++c) dprobs[static_cast<size_t>(c) * d + i] = 0.0;
    }
    res.loss = loss;
    return res;
}

LossResult seen_only_entropy_loss(const std::vector<double>& probs, int classes, int pixels) {
    const int C = classes, d = pixels;
    require(static_cast<int>(probs.size()) == C * d, "seen_only_entropy_loss: probs shape");
    LossResult res;
    res.dlogits.assign(static_cast<size_t>(C) * d, 0.0);
    std::vector<double> dprobs(static_cast<size_t>(C) * d, 0.0);
    double loss = 0.0;
    for (int i = 0; i < d; ++i) {
        for (int c = 0; c < C; ++c) {
            const size_t idx = static_cast<size_t>(c) * d + i;
            const double p = probs[idx];
            const double pc = clamp_prob(p);
            loss -= p * std::log(pc);
            dprobs[idx] = -(std::log(pc) + 1.0);
        }
        softmax_backward_pixel(probs.data(), dprobs.data(), C, d, i, res.dlogits.data());
    }
    res.loss = loss;
    return res;
}

namespace {

struct HeadWorkspace {
    Conv1x1 head;
    AdamState adam;
    bool initialized = false;
};

AdaptResult adapt_one(const ModelCheckpoint& ckpt, const Tensor& image, const AdaptConfig& cfg,
                      HeadWorkspace& ws) {
    const auto& net = ckpt.net;
    const BnStats train_stats = training_stats(net);

    // Stage 1: observe this image's self-consistent layer statistics and
    // infer the domain-shift probability from their divergence.
    BackboneResult first = forward_transductive(net, image);
    AdaptResult res;
    res.domain = estimate_domain_shift(first.batch_stats, train_stats,
                                       static_cast<double>(ckpt.calib_a),
                                       static_cast<double>(ckpt.calib_b));

    const BnMode mode = cfg.use_sbn ? cfg.bn_mode : BnMode::train_only;
    Tensor features;
    if (mode == BnMode::train_only) {
        features = forward_backbone(net, image, train_stats).features;
    } else {
        const double p = mode == BnMode::batch_only ? 1.0 : res.domain.probability;
        const BnStats mixed = mix_bn_statistics(train_stats, first.batch_stats, p);
        features = forward_backbone(net, image, mixed).features;
    }

    if (!ws.initialized) {
        ws.head = net.head;
        ws.adam.lr = cfg.learning_rate;
        ws.adam.reset(ws.head.weight.size() + ws.head.bias.size());
        ws.initialized = true;
    }
    Conv1x1& head = ws.head;
    const int d = image.dim(1) * image.dim(2);
    const int C = head.cout;

    // Stage 2: anomaly-aware self-training of the head.
    if (cfg.use_ast) {
        for (int it = 0; it < cfg.iterations; ++it) {
            HeadEval ev = eval_head_double(features, head, cfg.score_kind);
            LossResult lr;
            if (cfg.entropy_mode == EntropyMode::anomaly_aware) {
                CalibrationResult calib = calibrate_image(ev.scores, cfg.calib_mode);
                PseudoLabels labels =
                    build_pseudo_labels(calib.gbar, cfg.tau1, cfg.tau2, cfg.class_weight);
                res.pl_stats = {labels.n_t0, labels.n_t1, labels.n_excluded};
                if (labels.n_t0 + labels.n_t1 == 0) {
                    res.loss_trace.push_back(0.0);
                    continue;  // empty region: provably zero loss, skip the step
                }
                ScoreGradContext ctx{calib.params.b_x, cfg.score_kind, &ev.argmax};
                lr = anomaly_entropy_loss(ev.probs, C, d, calib.gbar, labels, ctx);
            } else {
                lr = seen_only_entropy_loss(ev.probs, C, d);
                res.pl_stats = {0, 0, d};
            }
            if (!std::isfinite(lr.loss)) {
                AdaptResult frozen = frozen_inference(ckpt, image, cfg.score_kind);
                frozen.failed = true;
                frozen.domain = res.domain;
                return frozen;
            }
            HeadGradient hg = head_gradient(features, head, lr.dlogits);
            ws.adam.step_begin();
            ws.adam.apply(0, head.weight.data(), hg.dweight.data(), head.weight.size());
            ws.adam.apply(head.weight.size(), head.bias.data(), hg.dbias.data(),
                          head.bias.size());
            res.adapted = true;
            res.loss_trace.push_back(lr.loss);
        }
    }

    // Final inference through the regular float path.
    Tensor logits = forward_head(head, features);
    res.F_out = softmax_per_pixel(logits);
    res.G_out = score_logits(logits, cfg.score_kind).scores;
    CalibrationResult final_calib = calibrate_image(res.G_out, cfg.calib_mode);
    res.Gbar_out = std::move(final_calib.gbar);
    res.calib = final_calib.params;
    return res;
}

}  // namespace

AdaptResult frozen_inference(const ModelCheckpoint& ckpt, const Tensor& image, ScoreKind kind) {
    const BnStats train_stats = training_stats(ckpt.net);
    BackboneResult r = forward_backbone(ckpt.net, image, train_stats);
    AdaptResult res;
    res.domain = estimate_domain_shift(forward_transductive(ckpt.net, image).batch_stats,
                                       train_stats, static_cast<double>(ckpt.calib_a),
                                       static_cast<double>(ckpt.calib_b));
    Tensor logits = forward_head(ckpt.net.head, r.features);
    res.F_out = softmax_per_pixel(logits);
    res.G_out = score_logits(logits, kind).scores;
    CalibrationResult calib = calibrate_image(res.G_out, CalibMode::gmm);
    res.Gbar_out = std::move(calib.gbar);
    res.calib = calib.params;
    return res;
}

AdaptResult adapt_image(const ModelCheckpoint& ckpt, const Tensor& image, const AdaptConfig& cfg) {
    validate_config(cfg);
    HeadWorkspace ws;
    return adapt_one(ckpt, image, cfg, ws);
}

std::vector<AdaptResult> adapt_stream(const ModelCheckpoint& ckpt,
                                      const std::vector<const Tensor*>& images,
                                      const AdaptConfig& cfg) {
    validate_config(cfg);
    require(!images.empty(), "adapt_stream: stream must be nonempty");
    std::vector<AdaptResult> results(images.size());
    using clock = std::chrono::steady_clock;
    auto run_one = [&](size_t i, HeadWorkspace& ws) {
        const auto t0 = clock::now();
        try {
            results[i] = adapt_one(ckpt, *images[i], cfg, ws);
        } catch (const std::exception&) {
            try {
                results[i] = frozen_inference(ckpt, *images[i], cfg.score_kind);
            } catch (const std::exception&) {
                results[i] = AdaptResult{};  // checkpoint itself is unusable
            }
            results[i].failed = true;
        }
        results[i].wall_ms =
            std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    };
    if (cfg.stream_mode == StreamMode::episodic) {
#pragma omp parallel for schedule(dynamic)
        for (long i = 0; i < static_cast<long>(images.size()); ++i) {
            HeadWorkspace ws;
            run_one(static_cast<size_t>(i), ws);
        }
    } else {
        HeadWorkspace ws;  // parameters and optimizer state carry across images
        for (size_t i = 0; i < images.size(); ++i) run_one(i, ws);
    }
    return results;
}

}  // namespace atta
