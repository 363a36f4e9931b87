#include "atta/net.hpp"

#include <cmath>

#include "atta/kernels.hpp"
#include "atta/rng.hpp"

namespace atta {

namespace {

Conv3x3 make_conv3x3(int cin, int cout, Rng& rng) {
    Conv3x3 c;
    c.cin = cin;
    c.cout = cout;
    c.weight.resize(static_cast<size_t>(cout) * cin * 9);
    c.bias.assign(cout, 0.0f);
    const double scale = std::sqrt(2.0 / (cin * 9));
    for (auto& w : c.weight) w = static_cast<float>(rng.normal() * scale);
    return c;
}

BatchNormLayer make_bn(int channels) {
    BatchNormLayer bn;
    bn.gamma.assign(channels, 1.0f);
    bn.beta.assign(channels, 0.0f);
    bn.mu_train.assign(channels, 0.0f);
    bn.sigma_train.assign(channels, 1.0f);
    return bn;
}

}  // namespace

SegmentationNet make_default_net(int classes, uint64_t init_seed) {
    Rng rng(init_seed ^ 0x6E65745F696E6974ull);
    SegmentationNet net;
    const int widths[4] = {3, 16, 32, 32};
    for (int l = 0; l < 3; ++l) {
        Block b;
        b.conv = make_conv3x3(widths[l], widths[l + 1], rng);
        b.bn = make_bn(widths[l + 1]);
        net.blocks.push_back(std::move(b));
    }
    net.head.cin = widths[3];
    net.head.cout = classes;
    net.head.weight.resize(static_cast<size_t>(classes) * widths[3]);
    net.head.bias.assign(classes, 0.0f);
    const double scale = std::sqrt(1.0 / widths[3]);
    for (auto& w : net.head.weight) w = static_cast<float>(rng.normal() * scale);
    return net;
}

BnStats training_stats(const SegmentationNet& net) {
    BnStats stats;
    stats.reserve(net.blocks.size());
    for (const auto& b : net.blocks) stats.push_back({b.bn.mu_train, b.bn.sigma_train});
    return stats;
}

BackboneResult forward_backbone(const SegmentationNet& net, const Tensor& image,
                                const BnStats& stats, std::vector<Tensor>* conv_capture) {
    require(image.rank() == 3, "forward_backbone: image must be CHW");
    require(!image.data.empty() && image.all_finite(), "forward_backbone: image must be finite");
    require(image.dim(0) == net.input_channels(),
            "forward_backbone: image channels do not match first conv");
    require(stats.size() == net.blocks.size(),
            "forward_backbone: need one (mean, std) pair per BN layer");
    const int h = image.dim(1), w = image.dim(2), d = h * w;

    BackboneResult res;
    res.batch_stats.resize(net.blocks.size());
    Tensor cur = image;
    for (size_t l = 0; l < net.blocks.size(); ++l) {
        const auto& blk = net.blocks[l];
        const auto& st = stats[l];
        require(static_cast<int>(st.mean.size()) == blk.conv.cout &&
                    static_cast<int>(st.stdd.size()) == blk.conv.cout,
                "forward_backbone: stats shape mismatch");
        for (float s : st.stdd) require(s > 0.0f, "forward_backbone: supplied std must be > 0");

        Tensor conv({blk.conv.cout, h, w});
        kernels::conv3x3_forward(cur.ptr(), blk.conv.cin, h, w, blk.conv.weight.data(),
                                 blk.conv.bias.data(), blk.conv.cout, conv.ptr());

        auto& bs = res.batch_stats[l];
        bs.mean.resize(blk.conv.cout);
        bs.stdd.resize(blk.conv.cout);
        kernels::channel_mean_std(conv.ptr(), blk.conv.cout, d, bs.mean.data(), bs.stdd.data());

        Tensor act({blk.conv.cout, h, w});
        kernels::bn_relu_forward(conv.ptr(), blk.conv.cout, d, st.mean.data(), st.stdd.data(),
                                 blk.bn.gamma.data(), blk.bn.beta.data(), blk.bn.epsilon,
                                 act.ptr());
        if (conv_capture) conv_capture->push_back(std::move(conv));
        cur = std::move(act);
    }
    res.features = std::move(cur);
    return res;
}

BackboneResult forward_transductive(const SegmentationNet& net, const Tensor& image) {
    require(image.rank() == 3, "forward_transductive: image must be CHW");
    require(image.dim(0) == net.input_channels(),
            "forward_transductive: image channels do not match first conv");
    const int h = image.dim(1), w = image.dim(2), d = h * w;
    BackboneResult res;
    res.batch_stats.resize(net.blocks.size());
    Tensor cur = image;
    for (size_t l = 0; l < net.blocks.size(); ++l) {
        const auto& blk = net.blocks[l];
        Tensor conv({blk.conv.cout, h, w});
        kernels::conv3x3_forward(cur.ptr(), blk.conv.cin, h, w, blk.conv.weight.data(),
                                 blk.conv.bias.data(), blk.conv.cout, conv.ptr());
        auto& bs = res.batch_stats[l];
        bs.mean.resize(blk.conv.cout);
        bs.stdd.resize(blk.conv.cout);
        kernels::channel_mean_std(conv.ptr(), blk.conv.cout, d, bs.mean.data(), bs.stdd.data());
        for (auto& s : bs.stdd) s = std::max(s, 1e-6f);  // constant channels
        Tensor act({blk.conv.cout, h, w});
        kernels::bn_relu_forward(conv.ptr(), blk.conv.cout, d, bs.mean.data(), bs.stdd.data(),
                                 blk.bn.gamma.data(), blk.bn.beta.data(), blk.bn.epsilon,
                                 act.ptr());
        cur = std::move(act);
    }
    res.features = std::move(cur);
    return res;
}

Tensor forward_head(const Conv1x1& head, const Tensor& features) {
    require(features.rank() == 3, "forward_head: features must be CHW");
    require(features.dim(0) == head.cin, "forward_head: feature channels do not match head");
    const int h = features.dim(1), w = features.dim(2), d = h * w;
    Tensor logits({head.cout, h, w});
    kernels::conv1x1_forward(features.ptr(), head.cin, d, head.weight.data(), head.bias.data(),
                             head.cout, logits.ptr());
    return logits;
}

Tensor softmax_per_pixel(const Tensor& logits) {
    require(logits.rank() == 3, "softmax_per_pixel: logits must be CHW");
    require(logits.all_finite(), "softmax_per_pixel: logits must be finite");
    const int c = logits.dim(0), d = logits.dim(1) * logits.dim(2);
    Tensor out(logits.shape);
    const float* in = logits.ptr();
    float* dst = out.ptr();
    for (int i = 0; i < d; ++i) {
        double mx = in[i];
        for (int ch = 1; ch < c; ++ch) mx = std::max(mx, static_cast<double>(in[ch * d + i]));
        double sum = 0.0;
        for (int ch = 0; ch < c; ++ch) sum += std::exp(static_cast<double>(in[ch * d + i]) - mx);
        for (int ch = 0; ch < c; ++ch)
            dst[ch * d + i] =
                static_cast<float>(std::exp(static_cast<double>(in[ch * d + i]) - mx) / sum);
    }
    return out;
}

HeadGradient head_gradient(const Tensor& features, const Conv1x1& head,
                           const std::vector<double>& dloss_dlogits) {
    const int d = features.dim(1) * features.dim(2);
    require(static_cast<int>(dloss_dlogits.size()) == head.cout * d,
            "head_gradient: dloss_dlogits must be cout x d");
    HeadGradient g;
    g.dweight.assign(static_cast<size_t>(head.cout) * head.cin, 0.0);
    g.dbias.assign(head.cout, 0.0);
    const float* feat = features.ptr();
    for (int co = 0; co < head.cout; ++co) {
        const double* gl = dloss_dlogits.data() + static_cast<size_t>(co) * d;
        double gb = 0.0;
        for (int i = 0; i < d; ++i) gb += gl[i];
        g.dbias[co] = gb;
        for (int ci = 0; ci < head.cin; ++ci) {
            const float* f = feat + static_cast<size_t>(ci) * d;
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += gl[i] * f[i];
            g.dweight[static_cast<size_t>(co) * head.cin + ci] = acc;
        }
    }
    return g;
}

}  // namespace atta
