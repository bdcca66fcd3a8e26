#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vlmo/numerics/tensor.hpp"

// Differentiable tensor operations. All matrix ops take rank-2 inputs unless
// noted; "row" ops view a [..., D] tensor as rows x D.
namespace vlmo {

inline constexpr std::int64_t kIgnoreIndex = -100;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[R x in] * w[in x out] + bias[out]; bias may be an undefined tensor.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// x[R x C] + tiled y[r x C] where r divides R: row i receives y[i mod r].
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& y);

template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

// Max-subtracted softmax along `axis`. Throws NumericError on non-finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// Exact erf form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Mean of -log softmax(logits)[target] over rows whose target is not
// kIgnoreIndex. Returns 0 when every row is ignored.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> targets,
                        std::int64_t ignore_index = kIgnoreIndex);

// Rows scaled to unit norm; rows with norm below eps are divided by eps.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12));

// Multi-head scaled dot-product attention over `batch` independent
// sequences of length `seq`. qkv holds [q | k | v] column blocks, each of
// width D, for batch*seq rows. key_valid (batch*seq, may be empty) masks
// padded keys. Returns batch*seq x D.
template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq, std::size_t heads,
                    std::span<const std::uint8_t> key_valid);

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> index);
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// Gradient passes only where lo < x < hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);
// x / s with s a one-element tensor; differentiable in both.
template <typename T>
Tensor<T> div_scalar(const Tensor<T>& x, const Tensor<T>& s);
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target);

}  // namespace vlmo
