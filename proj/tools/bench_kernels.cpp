// Times each OpenMP kernel against its serial reference and reports the
// speedup, plus end-to-end forward and adaptation timings.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "atta/adapt.hpp"
#include "atta/kernels.hpp"
#include "atta/rng.hpp"
#include "atta/scene.hpp"
#include "atta/trainer.hpp"

using namespace atta;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms) {
    std::printf("%-24s %10.3f ms %10.3f ms %8.2fx\n", name, serial_ms, parallel_ms,
                serial_ms / parallel_ms);
}

}  // namespace

int main() {
    kernels::set_threads_from_env();
    std::printf("threads: %d\n\n", kernels::max_threads());
    std::printf("%-24s %13s %13s %9s\n", "kernel", "serial", "parallel", "speedup");

    const int h = 64, w = 64, cin = 32, cout = 32, d = h * w;
    Rng rng(7);
    std::vector<float> in(static_cast<size_t>(cin) * d), out(static_cast<size_t>(cout) * d);
    std::vector<float> weight(static_cast<size_t>(cout) * cin * 9), bias(cout);
    std::vector<float> gw(weight.size()), gb(bias.size()), gin(in.size());
    for (auto& v : in) v = static_cast<float>(rng.normal());
    for (auto& v : weight) v = static_cast<float>(rng.normal() * 0.05);
    for (auto& v : bias) v = static_cast<float>(rng.normal() * 0.1);

    const int reps = 50;
    report("conv3x3_forward",
           time_ms([&] { kernels::conv3x3_forward_serial(in.data(), cin, h, w, weight.data(),
                                                         bias.data(), cout, out.data()); },
                   reps),
           time_ms([&] { kernels::conv3x3_forward(in.data(), cin, h, w, weight.data(),
                                                  bias.data(), cout, out.data()); },
                   reps));
    report("conv3x3_grad_input",
           time_ms([&] { kernels::conv3x3_grad_input_serial(out.data(), cout, h, w,
                                                            weight.data(), cin, gin.data()); },
                   reps),
           time_ms([&] { kernels::conv3x3_grad_input(out.data(), cout, h, w, weight.data(), cin,
                                                     gin.data()); },
                   reps));
    report("conv3x3_grad_params",
           time_ms([&] { kernels::conv3x3_grad_params_serial(out.data(), in.data(), cin, h, w,
                                                             cout, gw.data(), gb.data()); },
                   reps),
           time_ms([&] { kernels::conv3x3_grad_params(out.data(), in.data(), cin, h, w, cout,
                                                      gw.data(), gb.data()); },
                   reps));

    std::vector<float> mean(cout), stdd(cout);
    report("channel_mean_std",
           time_ms([&] { kernels::channel_mean_std_serial(out.data(), cout, d, mean.data(),
                                                          stdd.data()); },
                   reps),
           time_ms([&] { kernels::channel_mean_std(out.data(), cout, d, mean.data(),
                                                   stdd.data()); },
                   reps));

    std::vector<float> gamma(cout, 1.0f), beta(cout, 0.0f), act(out.size());
    for (auto& s : stdd) s = std::max(s, 1e-3f);
    report("bn_relu_forward",
           time_ms([&] { kernels::bn_relu_forward_serial(out.data(), cout, d, mean.data(),
                                                         stdd.data(), gamma.data(), beta.data(),
                                                         1e-5f, act.data()); },
                   reps),
           time_ms([&] { kernels::bn_relu_forward(out.data(), cout, d, mean.data(), stdd.data(),
                                                  gamma.data(), beta.data(), 1e-5f, act.data()); },
                   reps));

    // End to end: one backbone forward and one adapted image on a quickly
    // trained checkpoint.
    std::printf("\nend to end (64x64):\n");
    SceneSpec sp;
    sp.seed = 3;
    std::vector<LabeledScene> scenes;
    for (int i = 0; i < 24; ++i) {
        SceneSpec s2 = sp;
        s2.ood_enabled = false;
        s2.seed = 100 + static_cast<uint64_t>(i);
        scenes.push_back(generate_scene(s2));
    }
    TrainConfig tc;
    tc.epochs = 2;
    tc.min_epochs = 1;
    TrainResult tr = train(scenes, tc);
    std::vector<const Tensor*> imgs;
    for (const auto& s : scenes) imgs.push_back(&s.image);
    calibrate_domain_detector(tr.checkpoint, imgs);

    LabeledScene probe = generate_scene(sp);
    const BnStats stats = training_stats(tr.checkpoint.net);
    std::printf("  backbone forward      %10.3f ms\n",
                time_ms([&] { forward_backbone(tr.checkpoint.net, probe.image, stats); }, 20));
    AdaptConfig cfg;
    std::printf("  adapt_image (full)    %10.3f ms\n",
                time_ms([&] { adapt_image(tr.checkpoint, probe.image, cfg); }, 10));
    return 0;
}
