#pragma once

#include <vector>

namespace atta::kernels {

// OpenMP-parallel compute kernels, each paired with a serial reference
// implementation. The two variants share the same per-element inner routine,
// so their outputs are bitwise identical for any thread count; the serial
// versions exist for testing and benchmarking, the parallel ones are the
// production path.

// Caps OpenMP threads from the ATTA_THREADS environment variable.
void set_threads_from_env();
int max_threads();

// 3x3 convolution, stride 1, zero padding 1, CHW layout.
// weight layout: [cout][cin][3][3], bias: [cout].
void conv3x3_forward(const float* in, int cin, int h, int w,
                     const float* weight, const float* bias, int cout, float* out);
void conv3x3_forward_serial(const float* in, int cin, int h, int w,
                            const float* weight, const float* bias, int cout, float* out);

// Gradient of the 3x3 convolution w.r.t. its input.
void conv3x3_grad_input(const float* gout, int cout, int h, int w,
                        const float* weight, int cin, float* gin);
void conv3x3_grad_input_serial(const float* gout, int cout, int h, int w,
                               const float* weight, int cin, float* gin);

// Gradient of the 3x3 convolution w.r.t. weight and bias.
void conv3x3_grad_params(const float* gout, const float* in, int cin, int h, int w,
                         int cout, float* gweight, float* gbias);
void conv3x3_grad_params_serial(const float* gout, const float* in, int cin, int h, int w,
                                int cout, float* gweight, float* gbias);

// 1x1 convolution over d pixels. weight: [cout][cin], bias: [cout].
void conv1x1_forward(const float* in, int cin, int d,
                     const float* weight, const float* bias, int cout, float* out);
void conv1x1_forward_serial(const float* in, int cin, int d,
                            const float* weight, const float* bias, int cout, float* out);

// Per-channel mean and biased standard deviation over d pixels.
void channel_mean_std(const float* x, int c, int d, float* mean, float* stdd);
void channel_mean_std_serial(const float* x, int c, int d, float* mean, float* stdd);

// Fused inference batch norm + affine + ReLU with supplied statistics.
// Normalizes by sqrt(std^2 + eps).
void bn_relu_forward(const float* x, int c, int d, const float* mean, const float* stdd,
                     const float* gamma, const float* beta, float eps, float* out);
void bn_relu_forward_serial(const float* x, int c, int d, const float* mean, const float* stdd,
                            const float* gamma, const float* beta, float eps, float* out);

}  // namespace atta::kernels
