#pragma once

#include <cstdint>
#include <vector>

#include "bdet/tensor.hpp"

namespace bdet {

enum class Padding { Same, Valid };

// Output spatial extent of a conv along one axis.
int conv_out_extent(int in, int kernel, int stride, Padding pad);
// Leading pad along one axis (Same: total pad split with the extra row at the
// far side; Valid: 0).
int conv_pad_before(int in, int kernel, int stride, Padding pad);

// input [C,H,W], kernel [K,C,kh,kw], bias [K]  ->  [K,H',W']  (cross-correlation)
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, Padding pad);
void conv2d_backward(const Tensor& input, const Tensor& kernel, int stride, Padding pad, const Tensor& grad_out,
                     Tensor& grad_input, Tensor& grad_kernel, Tensor& grad_bias);

// Per-channel normalization of [C,H,W] over the spatial axes.
// train: uses batch statistics and reports them; eval: uses running stats.
Tensor batch_norm_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta, const Tensor& running_mean,
                          const Tensor& running_var, bool training, double eps, Tensor* batch_mean_out,
                          Tensor* batch_var_out);
void batch_norm_backward(const Tensor& input, const Tensor& gamma, const Tensor& mean, const Tensor& var,
                         bool training, double eps, const Tensor& grad_out, Tensor& grad_input, Tensor& grad_gamma,
                         Tensor& grad_beta);

// Numerically stable softmax over the trailing axis.
Tensor softmax_lastdim_forward(const Tensor& logits);
void softmax_lastdim_backward(const Tensor& probs, const Tensor& grad_out, Tensor& grad_in);

// Inverted-dropout keep factor for one element: 0 or 1/(1-rate).
// Pure function of (seed, flat element index).
double dropout_keep_factor(std::uint64_t seed, std::size_t index, double rate);
Tensor dropout_forward(const Tensor& input, double rate, std::uint64_t seed);

Tensor upsample_nearest_forward(const Tensor& input, int factor);
void upsample_nearest_backward(const std::vector<int>& in_shape, int factor, const Tensor& grad_out, Tensor& grad_in);

Tensor concat_channels_forward(const Tensor& a, const Tensor& b);

double sigmoid(double x);
double logit(double p);

}  // namespace bdet
