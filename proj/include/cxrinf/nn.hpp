#pragma once

#include <vector>

#include "cxrinf/autodiff.hpp"

// Differentiable tensor ops on NCHW tensors. Each op records its result on the
// graph owning its first input.
namespace cxrinf::nn {

/// 2-D convolution. `weight` is (Cout, Cin, k, k); `bias` may be null.
Var conv2d(Var x, Var weight, Var bias, int stride, int pad);

Var relu(Var x);
Var sigmoid(Var x);
Var add(Var a, Var b);
Var concat(const std::vector<Var>& parts);

/// Max pooling over valid (non-padded) taps.
Var max_pool(Var x, int kernel, int stride, int pad);
/// Average pooling; the divisor counts valid (non-padded) taps only.
Var avg_pool(Var x, int kernel, int stride, int pad);
Var upsample_nearest(Var x, int factor);
/// (N, C, H, W) -> (N, C, 1, 1)
Var global_avg_pool(Var x);
/// Fully connected layer on (N, C, 1, 1) inputs; weight is (out, in, 1, 1).
Var linear(Var x, Var weight, Var bias);

/// Row-wise softmax over channels of an (N, C, 1, 1) tensor. Not recorded.
Tensor softmax(const Tensor& logits);

}  // namespace cxrinf::nn
