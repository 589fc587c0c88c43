#pragma once

#include <optional>
#include <type_traits>
#include <vector>

#include "dinoyolo/autograd.h"

// Differentiable forward ops. All ops are instantiated for float and double;
// double is used by the gradient checks.
namespace dinoyolo::ops {

template <typename T>
using Var = Variable<T>;

/// Cross-correlation over NCHW input with an [O,C,kh,kw] kernel.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const std::type_identity_t<std::optional<Var<T>>>& bias, int stride,
              int padding);

/// Affine map over the trailing axis: input [..,Din], weight [Dout,Din].
template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const std::type_identity_t<std::optional<Var<T>>>& bias);

/// Batched matrix product a[B,M,K] x b[B,K,N], or b[B,N,K] transposed when transpose_b.
template <typename T>
Var<T> batched_matmul(const Var<T>& a, const Var<T>& b, bool transpose_b);

/// Normalization over the trailing axis followed by per-feature gain and offset.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& offset, double eps = 1e-6);

template <typename T>
Var<T> silu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> gelu(const Var<T>& x);
template <typename T>
Var<T> softmax(const Var<T>& x, int axis);

/// Nearest-neighbour upsampling of NCHW maps by an integer factor.
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor);

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& axes);

/// [N,C,H,W] -> [N,H*W,C], row index varying slowest.
template <typename T>
Var<T> tokens_from_map(const Var<T>& map);
/// [N,H*W,C] -> [N,C,H,W].
template <typename T>
Var<T> map_from_tokens(const Var<T>& tokens, int64_t height, int64_t width);

/// a + b where b's shape equals a trailing suffix of a's shape (b is broadcast).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);
/// Multiplies channel c of an [N,C,...] tensor by gate[c].
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& gate);
template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);

/// Multi-head self-attention parameters; every projection is [D,D] with a [D] bias.
template <typename T>
struct AttentionParams {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Per head softmax(Q K^T / sqrt(D/heads)) V, heads concatenated, then output-projected.
template <typename T>
Var<T> multi_head_self_attention(const Var<T>& tokens, const AttentionParams<T>& params, int heads);

}  // namespace dinoyolo::ops
