#include "bdet/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "bdet/errors.hpp"
#include "bdet/rng.hpp"

namespace bdet {

int conv_out_extent(int in, int kernel, int stride, Padding pad) {
    if (stride < 1) throw DataError("conv stride must be >= 1");
    if (pad == Padding::Same) return (in + stride - 1) / stride;
    if (kernel > in) throw DataError("conv kernel extent exceeds input extent in valid mode");
    return (in - kernel) / stride + 1;
}

int conv_pad_before(int in, int kernel, int stride, Padding pad) {
    if (pad == Padding::Valid) return 0;
    int out = conv_out_extent(in, kernel, stride, pad);
    int total = std::max((out - 1) * stride + kernel - in, 0);
    return total / 2;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, Padding pad) {
    if (input.rank() != 3) throw DataError("conv2d input must be [C,H,W], got " + input.shape_str());
    if (kernel.rank() != 4) throw DataError("conv2d kernel must be [K,C,kh,kw], got " + kernel.shape_str());
    if (kernel.dim(1) != input.dim(0)) {
        throw DataError("conv2d channel mismatch: input " + input.shape_str() + " vs kernel " + kernel.shape_str());
    }
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
        throw DataError("conv2d bias must be [K], got " + bias.shape_str());
    }
    require_finite(input, "conv2d input");

    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int K = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int OH = conv_out_extent(H, kh, stride, pad);
    const int OW = conv_out_extent(W, kw, stride, pad);
    const int ph = conv_pad_before(H, kh, stride, pad);
    const int pw = conv_pad_before(W, kw, stride, pad);
    if (pad == Padding::Same && (kh > H + ph + std::max((OH - 1) * stride + kh - H - ph, 0) ||
                                 kw > W + pw + std::max((OW - 1) * stride + kw - W - pw, 0))) {
        throw DataError("conv2d kernel larger than padded input");
    }

    Tensor out({K, OH, OW});
    for (int k = 0; k < K; ++k) {
        double b = bias[static_cast<std::size_t>(k)];
        double* o = out.data() + static_cast<std::size_t>(k) * OH * OW;
        for (int i = 0; i < OH * OW; ++i) o[i] = b;
    }
    for (int k = 0; k < K; ++k) {
        double* orow = out.data() + static_cast<std::size_t>(k) * OH * OW;
        for (int c = 0; c < C; ++c) {
            const double* in = input.data() + static_cast<std::size_t>(c) * H * W;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    double wv = kernel.at4(k, c, ky, kx);
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < OH; ++oy) {
                        int iy = oy * stride + ky - ph;
                        if (iy < 0 || iy >= H) continue;
                        const double* irow = in + static_cast<std::size_t>(iy) * W;
                        double* out_line = orow + static_cast<std::size_t>(oy) * OW;
                        for (int ox = 0; ox < OW; ++ox) {
                            int ix = ox * stride + kx - pw;
                            if (ix < 0 || ix >= W) continue;
                            out_line[ox] += wv * irow[ix];
                        }
                    }
                }
            }
        }
    }
    return out;
}

void conv2d_backward(const Tensor& input, const Tensor& kernel, int stride, Padding pad, const Tensor& grad_out,
                     Tensor& grad_input, Tensor& grad_kernel, Tensor& grad_bias) {
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    const int K = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int OH = grad_out.dim(1), OW = grad_out.dim(2);
    const int ph = conv_pad_before(H, kh, stride, pad);
    const int pw = conv_pad_before(W, kw, stride, pad);

    for (int k = 0; k < K; ++k) {
        const double* g = grad_out.data() + static_cast<std::size_t>(k) * OH * OW;
        double acc = 0.0;
        for (int i = 0; i < OH * OW; ++i) acc += g[i];
        grad_bias[static_cast<std::size_t>(k)] += acc;
    }
    for (int k = 0; k < K; ++k) {
        const double* g = grad_out.data() + static_cast<std::size_t>(k) * OH * OW;
        for (int c = 0; c < C; ++c) {
            const double* in = input.data() + static_cast<std::size_t>(c) * H * W;
            double* gin = grad_input.data() + static_cast<std::size_t>(c) * H * W;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    double wv = kernel.at4(k, c, ky, kx);
                    double wg = 0.0;
                    for (int oy = 0; oy < OH; ++oy) {
                        int iy = oy * stride + ky - ph;
                        if (iy < 0 || iy >= H) continue;
                        const double* irow = in + static_cast<std::size_t>(iy) * W;
                        double* girow = gin + static_cast<std::size_t>(iy) * W;
                        const double* grow = g + static_cast<std::size_t>(oy) * OW;
                        for (int ox = 0; ox < OW; ++ox) {
                            int ix = ox * stride + kx - pw;
                            if (ix < 0 || ix >= W) continue;
                            wg += grow[ox] * irow[ix];
                            girow[ix] += grow[ox] * wv;
                        }
                    }
                    grad_kernel.at4(k, c, ky, kx) += wg;
                }
            }
        }
    }
}

Tensor batch_norm_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                          const Tensor& running_var, bool training, double eps, Tensor* batch_mean_out,
                          Tensor* batch_var_out) {
    if (input.rank() != 3) throw DataError("batch_norm input must be [C,H,W], got " + input.shape_str());
    const int C = input.dim(0);
    const std::size_t N = static_cast<std::size_t>(input.dim(1)) * input.dim(2);
    if (gamma.numel() != static_cast<std::size_t>(C) || beta.numel() != static_cast<std::size_t>(C)) {
        throw DataError("batch_norm gamma/beta must be [C]");
    }

    Tensor out(input.shape());
    Tensor mean({C}), var({C});
    for (int c = 0; c < C; ++c) {
        const double* in = input.data() + static_cast<std::size_t>(c) * N;
        double m, v;
        if (training) {
            double s = 0.0;
            for (std::size_t i = 0; i < N; ++i) s += in[i];
            m = s / static_cast<double>(N);
            double sq = 0.0;
            for (std::size_t i = 0; i < N; ++i) {
                double d = in[i] - m;
                sq += d * d;
            }
            v = sq / static_cast<double>(N);
        } else {
            m = running_mean[static_cast<std::size_t>(c)];
            v = running_var[static_cast<std::size_t>(c)];
        }
        mean[static_cast<std::size_t>(c)] = m;
        var[static_cast<std::size_t>(c)] = v;
        double inv = 1.0 / std::sqrt(v + eps);
        double g = gamma[static_cast<std::size_t>(c)], b = beta[static_cast<std::size_t>(c)];
        double* o = out.data() + static_cast<std::size_t>(c) * N;
        for (std::size_t i = 0; i < N; ++i) o[i] = (in[i] - m) * inv * g + b;
    }
    if (batch_mean_out) *batch_mean_out = mean;
    if (batch_var_out) *batch_var_out = var;
    return out;
}

void batch_norm_backward(const Tensor& input, const Tensor& gamma, const Tensor& mean, const Tensor& var,
                         bool training, double eps, const Tensor& grad_out, Tensor& grad_input, Tensor& grad_gamma,
                         Tensor& grad_beta) {
    const int C = input.dim(0);
    const std::size_t N = static_cast<std::size_t>(input.dim(1)) * input.dim(2);
    for (int c = 0; c < C; ++c) {
        const double* in = input.data() + static_cast<std::size_t>(c) * N;
        const double* g = grad_out.data() + static_cast<std::size_t>(c) * N;
        double* gi = grad_input.data() + static_cast<std::size_t>(c) * N;
        double m = mean[static_cast<std::size_t>(c)];
        double inv = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
        double gam = gamma[static_cast<std::size_t>(c)];

        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            double xh = (in[i] - m) * inv;
            sum_g += g[i];
            sum_gx += g[i] * xh;
        }
        grad_beta[static_cast<std::size_t>(c)] += sum_g;
        grad_gamma[static_cast<std::size_t>(c)] += sum_gx;

        if (training) {
            double invN = 1.0 / static_cast<double>(N);
            for (std::size_t i = 0; i < N; ++i) {
                double xh = (in[i] - m) * inv;
                gi[i] += gam * inv * (g[i] - sum_g * invN - xh * sum_gx * invN);
            }
        } else {
            for (std::size_t i = 0; i < N; ++i) gi[i] += gam * inv * g[i];
        }
    }
}

Tensor softmax_lastdim_forward(const Tensor& logits) {
    if (logits.rank() < 1) throw DataError("softmax needs at least one axis");
    require_finite(logits, "softmax input");
    const int n = logits.dim(logits.rank() - 1);
    const std::size_t rows = logits.numel() / static_cast<std::size_t>(n);
    Tensor out(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = logits.data() + r * n;
        double* p = out.data() + r * n;
        double mx = z[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, z[i]);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            p[i] = std::exp(z[i] - mx);
            sum += p[i];
        }
        for (int i = 0; i < n; ++i) p[i] /= sum;
    }
    return out;
}

void softmax_lastdim_backward(const Tensor& probs, const Tensor& grad_out, Tensor& grad_in) {
    const int n = probs.dim(probs.rank() - 1);
    const std::size_t rows = probs.numel() / static_cast<std::size_t>(n);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* p = probs.data() + r * n;
        const double* g = grad_out.data() + r * n;
        double* gi = grad_in.data() + r * n;
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += p[i] * g[i];
        for (int i = 0; i < n; ++i) gi[i] += p[i] * (g[i] - dot);
    }
}

double dropout_keep_factor(std::uint64_t seed, std::size_t index, double rate) {
    if (rate == 0.0) return 1.0;
    double u = hash_to_unit(hash_combine(seed, static_cast<std::uint64_t>(index)));
    return u >= rate ? 1.0 / (1.0 - rate) : 0.0;
}

Tensor dropout_forward(const Tensor& input, double rate, std::uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) throw DataError("dropout rate must be in [0, 1), got " + std::to_string(rate));
    if (rate == 0.0) return input;
    Tensor out(input.shape());
    for (std::size_t i = 0; i < input.numel(); ++i) out[i] = input[i] * dropout_keep_factor(seed, i, rate);
    return out;
}

Tensor upsample_nearest_forward(const Tensor& input, int factor) {
    if (factor < 1) throw DataError("upsample factor must be >= 1");
    if (input.rank() != 3) throw DataError("upsample input must be [C,H,W]");
    const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
    Tensor out({C, H * factor, W * factor});
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H * factor; ++y) {
            const double* irow = input.data() + (static_cast<std::size_t>(c) * H + y / factor) * W;
            double* orow = out.data() + (static_cast<std::size_t>(c) * H * factor + y) * (W * factor);
            for (int x = 0; x < W * factor; ++x) orow[x] = irow[x / factor];
        }
    }
    return out;
}

void upsample_nearest_backward(const std::vector<int>& in_shape, int factor, const Tensor& grad_out, Tensor& grad_in) {
    const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H * factor; ++y) {
            double* girow = grad_in.data() + (static_cast<std::size_t>(c) * H + y / factor) * W;
            const double* gorow = grad_out.data() + (static_cast<std::size_t>(c) * H * factor + y) * (W * factor);
            for (int x = 0; x < W * factor; ++x) girow[x / factor] += gorow[x];
        }
    }
}

Tensor concat_channels_forward(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
        throw DataError("concat requires matching spatial extents: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data(), a.data() + a.numel(), out.data());
    std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace bdet
