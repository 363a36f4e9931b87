#include "atta/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>

namespace atta::kernels {

void set_threads_from_env() {
    const char* env = std::getenv("ATTA_THREADS");
    if (!env) return;
    int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(std::min(n, omp_get_num_procs()));
}

int max_threads() { return omp_get_max_threads(); }

namespace {

// Copies a CHW tensor into a zero-padded (h+2)x(w+2) buffer per channel.
void pad1(const float* in, int c, int h, int w, float* out) {
    const int hp = h + 2, wp = w + 2;
    std::memset(out, 0, sizeof(float) * static_cast<size_t>(c) * hp * wp);
    for (int ch = 0; ch < c; ++ch) {
        const float* src = in + static_cast<size_t>(ch) * h * w;
        float* dst = out + static_cast<size_t>(ch) * hp * wp;
        for (int y = 0; y < h; ++y)
            std::memcpy(dst + (y + 1) * wp + 1, src + y * w, sizeof(float) * w);
    }
}

// One output row of the 3x3 convolution. Accumulation order per output
// element is fixed by the (ci, ky, kx) loop nest, independent of threading.
inline void conv3x3_row(const float* in_pad, int cin, int h, int w,
                        const float* weight, float bias, int co, int y, float* out_row) {
    const int wp = w + 2;
    for (int x = 0; x < w; ++x) out_row[x] = bias;
    const float* wbase = weight + static_cast<size_t>(co) * cin * 9;
    for (int ci = 0; ci < cin; ++ci) {
        const float* chan = in_pad + static_cast<size_t>(ci) * (h + 2) * wp;
        const float* wk = wbase + static_cast<size_t>(ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            const float* row = chan + (y + ky) * wp;
            for (int kx = 0; kx < 3; ++kx) {
                const float wv = wk[ky * 3 + kx];
                const float* src = row + kx;
                for (int x = 0; x < w; ++x) out_row[x] += wv * src[x];
            }
        }
    }
}

inline void grad_input_row(const float* gout_pad, int cout, int h, int w,
                           const float* weight, int cin, int ci, int y, float* gin_row) {
    const int wp = w + 2;
    for (int x = 0; x < w; ++x) gin_row[x] = 0.0f;
    for (int co = 0; co < cout; ++co) {
        const float* chan = gout_pad + static_cast<size_t>(co) * (h + 2) * wp;
        const float* wk = weight + (static_cast<size_t>(co) * cin + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
            const float* row = chan + (y + 2 - ky) * wp;
            for (int kx = 0; kx < 3; ++kx) {
                const float wv = wk[ky * 3 + kx];
                const float* src = row + 2 - kx;
                for (int x = 0; x < w; ++x) gin_row[x] += wv * src[x];
            }
        }
    }
}

// Row dot product with four independent accumulator chains; the fixed
// combination order keeps results deterministic while letting the compiler
// vectorize.
inline double row_dot(const float* a, const float* b, int n) {
    float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
    int x = 0;
    for (; x + 4 <= n; x += 4) {
        s0 += a[x] * b[x];
        s1 += a[x + 1] * b[x + 1];
        s2 += a[x + 2] * b[x + 2];
        s3 += a[x + 3] * b[x + 3];
    }
    for (; x < n; ++x) s0 += a[x] * b[x];
    return static_cast<double>((s0 + s1) + (s2 + s3));
}

inline void grad_params_one_cout(const float* gout, const float* in_pad, int cin, int h, int w,
                                 int co, float* gweight, float* gbias) {
    const int wp = w + 2;
    const float* g = gout + static_cast<size_t>(co) * h * w;
    double gb = 0.0;
    for (int i = 0; i < h * w; ++i) gb += g[i];
    gbias[co] = static_cast<float>(gb);
    float* gw = gweight + static_cast<size_t>(co) * cin * 9;
    for (int ci = 0; ci < cin; ++ci) {
        const float* chan = in_pad + static_cast<size_t>(ci) * (h + 2) * wp;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                double acc = 0.0;
                for (int y = 0; y < h; ++y)
                    acc += row_dot(g + y * w, chan + (y + ky) * wp + kx, w);
                gw[ci * 9 + ky * 3 + kx] = static_cast<float>(acc);
            }
        }
    }
}

inline void conv1x1_one_cout(const float* in, int cin, int d,
                             const float* weight, float bias, int co, float* out) {
    float* dst = out + static_cast<size_t>(co) * d;
    for (int i = 0; i < d; ++i) dst[i] = bias;
    const float* wk = weight + static_cast<size_t>(co) * cin;
    for (int ci = 0; ci < cin; ++ci) {
        const float wv = wk[ci];
        const float* src = in + static_cast<size_t>(ci) * d;
        for (int i = 0; i < d; ++i) dst[i] += wv * src[i];
    }
}

inline void mean_std_one_channel(const float* x, int d, float* mean, float* stdd) {
    double sum = 0.0;
    for (int i = 0; i < d; ++i) sum += x[i];
    const double m = sum / d;
    double sq = 0.0;
    for (int i = 0; i < d; ++i) {
        const double delta = x[i] - m;
        sq += delta * delta;
    }
    *mean = static_cast<float>(m);
    *stdd = static_cast<float>(std::sqrt(sq / d));
}

inline void bn_relu_one_channel(const float* x, int d, float mean, float stdd,
                                float gamma, float beta, float eps, float* out) {
    const float inv = 1.0f / std::sqrt(stdd * stdd + eps);
    for (int i = 0; i < d; ++i) {
        const float v = gamma * ((x[i] - mean) * inv) + beta;
        out[i] = v > 0.0f ? v : 0.0f;
    }
}

}  // namespace

void conv3x3_forward(const float* in, int cin, int h, int w,
                     const float* weight, const float* bias, int cout, float* out) {
    std::vector<float> pad(static_cast<size_t>(cin) * (h + 2) * (w + 2));
    pad1(in, cin, h, w, pad.data());
#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < cout; ++co)
        for (int y = 0; y < h; ++y)
            conv3x3_row(pad.data(), cin, h, w, weight, bias[co], co, y,
                        out + (static_cast<size_t>(co) * h + y) * w);
}

void conv3x3_forward_serial(const float* in, int cin, int h, int w,
                            const float* weight, const float* bias, int cout, float* out) {
    std::vector<float> pad(static_cast<size_t>(cin) * (h + 2) * (w + 2));
    pad1(in, cin, h, w, pad.data());
    for (int co = 0; co < cout; ++co)
        for (int y = 0; y < h; ++y)
            conv3x3_row(pad.data(), cin, h, w, weight, bias[co], co, y,
                        out + (static_cast<size_t>(co) * h + y) * w);
}

void conv3x3_grad_input(const float* gout, int cout, int h, int w,
                        const float* weight, int cin, float* gin) {
    std::vector<float> pad(static_cast<size_t>(cout) * (h + 2) * (w + 2));
    pad1(gout, cout, h, w, pad.data());
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < cin; ++ci)
        for (int y = 0; y < h; ++y)
            grad_input_row(pad.data(), cout, h, w, weight, cin, ci, y,
                           gin + (static_cast<size_t>(ci) * h + y) * w);
}

void conv3x3_grad_input_serial(const float* gout, int cout, int h, int w,
                               const float* weight, int cin, float* gin) {
    std::vector<float> pad(static_cast<size_t>(cout) * (h + 2) * (w + 2));
    pad1(gout, cout, h, w, pad.data());
    for (int ci = 0; ci < cin; ++ci)
        for (int y = 0; y < h; ++y)
            grad_input_row(pad.data(), cout, h, w, weight, cin, ci, y,
                           gin + (static_cast<size_t>(ci) * h + y) * w);
}

void conv3x3_grad_params(const float* gout, const float* in, int cin, int h, int w,
                         int cout, float* gweight, float* gbias) {
    std::vector<float> pad(static_cast<size_t>(cin) * (h + 2) * (w + 2));
    pad1(in, cin, h, w, pad.data());
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co)
        grad_params_one_cout(gout, pad.data(), cin, h, w, co, gweight, gbias);
}

void conv3x3_grad_params_serial(const float* gout, const float* in, int cin, int h, int w,
                                int cout, float* gweight, float* gbias) {
    std::vector<float> pad(static_cast<size_t>(cin) * (h + 2) * (w + 2));
    pad1(in, cin, h, w, pad.data());
    for (int co = 0; co < cout; ++co)
        grad_params_one_cout(gout, pad.data(), cin, h, w, co, gweight, gbias);
}

void conv1x1_forward(const float* in, int cin, int d,
                     const float* weight, const float* bias, int cout, float* out) {
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) conv1x1_one_cout(in, cin, d, weight, bias[co], co, out);
}

void conv1x1_forward_serial(const float* in, int cin, int d,
                            const float* weight, const float* bias, int cout, float* out) {
    for (int co = 0; co < cout; ++co) conv1x1_one_cout(in, cin, d, weight, bias[co], co, out);
}

void channel_mean_std(const float* x, int c, int d, float* mean, float* stdd) {
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch)
        mean_std_one_channel(x + static_cast<size_t>(ch) * d, d, mean + ch, stdd + ch);
}

void channel_mean_std_serial(const float* x, int c, int d, float* mean, float* stdd) {
    for (int ch = 0; ch < c; ++ch)
        mean_std_one_channel(x + static_cast<size_t>(ch) * d, d, mean + ch, stdd + ch);
}

void bn_relu_forward(const float* x, int c, int d, const float* mean, const float* stdd,
                     const float* gamma, const float* beta, float eps, float* out) {
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch)
        bn_relu_one_channel(x + static_cast<size_t>(ch) * d, d, mean[ch], stdd[ch],
                            gamma[ch], beta[ch], eps, out + static_cast<size_t>(ch) * d);
}

void bn_relu_forward_serial(const float* x, int c, int d, const float* mean, const float* stdd,
                            const float* gamma, const float* beta, float eps, float* out) {
    for (int ch = 0; ch < c; ++ch)
        bn_relu_one_channel(x + static_cast<size_t>(ch) * d, d, mean[ch], stdd[ch],
                            gamma[ch], beta[ch], eps, out + static_cast<size_t>(ch) * d);
}

}  // namespace atta::kernels
