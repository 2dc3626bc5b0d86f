#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "hatnet/rng.hpp"
#include "hatnet/tensor.hpp"

namespace hatnet {

// Dense layer, weight-only by default; a bias row can be enabled by config.
template <typename T>
struct LinearT {
  TensorT<T> weight;               // [in x out]
  std::optional<TensorT<T>> bias;  // [out]

  static LinearT init(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    LinearT layer;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    layer.weight = TensorT<T>::uniform({in, out}, -bound, bound, rng, true);
    if (with_bias) layer.bias = TensorT<T>::zeros({out}, true);
    return layer;
  }

  TensorT<T> operator()(const TensorT<T>& x) const {
    auto y = matmul(x, weight);
    if (bias) y = add_row(y, *bias);
    return y;
  }

  std::size_t in_dim() const { return weight.dims()[0]; }
  std::size_t out_dim() const { return weight.dims()[1]; }
};

template <typename T>
struct MultiHeadParamsT {
  std::vector<LinearT<T>> query, key, value;  // H projections, d -> d_h
  LinearT<T> out;                             // d -> d

  static MultiHeadParamsT init(std::size_t d, std::size_t heads, bool with_bias, Rng& rng) {
    if (heads == 0 || d % heads != 0)
      throw ConfigError("multi_head: model dim " + std::to_string(d) +
                        " is not divisible into " + std::to_string(heads) + " heads");
    MultiHeadParamsT p;
    const std::size_t d_h = d / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      p.query.push_back(LinearT<T>::init(d, d_h, with_bias, rng));
      p.key.push_back(LinearT<T>::init(d, d_h, with_bias, rng));
      p.value.push_back(LinearT<T>::init(d, d_h, with_bias, rng));
    }
    p.out = LinearT<T>::init(d, d, with_bias, rng);
    return p;
  }

  std::size_t heads() const { return query.size(); }
  std::size_t model_dim() const { return out.in_dim(); }
  std::size_t head_dim() const { return query.empty() ? 0 : query[0].out_dim(); }
};

template <typename T>
struct FfnParamsT {
  LinearT<T> expand;  // d -> 4d
  LinearT<T> reduce;  // 4d -> d

  static FfnParamsT init(std::size_t d, bool with_bias, Rng& rng) {
    FfnParamsT p;
    p.expand = LinearT<T>::init(d, 4 * d, with_bias, rng);
    p.reduce = LinearT<T>::init(4 * d, d, with_bias, rng);
    return p;
  }
};

struct AttentionOptions {
  bool keep_weights = false;   // retain per-head attention matrices
  bool residual_norm = false;  // pre-norm residual wiring around MH and FFN
};

template <typename T>
struct ScaledDotResult {
  TensorT<T> out;      // [N_q x d_v]
  TensorT<T> weights;  // [N_q x N_k], rows sum to 1
};

template <typename T>
ScaledDotResult<T> scaled_dot_product(const TensorT<T>& q, const TensorT<T>& k,
                                      const TensorT<T>& v) {
  detail::check_rank2(q, "scaled_dot_product");
  detail::check_rank2(k, "scaled_dot_product");
  detail::check_rank2(v, "scaled_dot_product");
  if (q.dims()[1] != k.dims()[1])
    throw ShapeError("scaled_dot_product: query/key dims disagree " + dims_to_string(q.dims()) +
                     " vs " + dims_to_string(k.dims()));
  if (k.dims()[0] != v.dims()[0])
    throw ShapeError("scaled_dot_product: key/value row counts disagree " +
                     dims_to_string(k.dims()) + " vs " + dims_to_string(v.dims()));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(q.dims()[1]));
  auto weights = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_dh));
  return {matmul(weights, v), weights};
}

// Concat(head_1..head_H) * beta_mha, each head a scaled dot-product over its
// own query/key/value projections. Per-head weight matrices are appended to
// `head_weights` when provided (inspection only; caller owns the memory).
template <typename T>
TensorT<T> multi_head(const MultiHeadParamsT<T>& params, const TensorT<T>& x_q,
                      const TensorT<T>& x_k, const TensorT<T>& x_v,
                      std::vector<TensorT<T>>* head_weights = nullptr) {
  detail::check_rank2(x_q, "multi_head");
  detail::check_rank2(x_k, "multi_head");
  detail::check_rank2(x_v, "multi_head");
  if (x_k.dims()[0] != x_v.dims()[0])
    throw ShapeError("multi_head: key/value row counts disagree " + dims_to_string(x_k.dims()) +
                     " vs " + dims_to_string(x_v.dims()));
  const std::size_t d = params.model_dim();
  if (x_q.dims()[1] != d || x_k.dims()[1] != d || x_v.dims()[1] != d)
    throw ShapeError("multi_head: expected feature dim " + std::to_string(d) + ", got " +
                     dims_to_string(x_q.dims()) + " / " + dims_to_string(x_k.dims()) + " / " +
                     dims_to_string(x_v.dims()));
  std::vector<TensorT<T>> heads;
  heads.reserve(params.heads());
  for (std::size_t h = 0; h < params.heads(); ++h) {
    auto sdp = scaled_dot_product(params.query[h](x_q), params.key[h](x_k), params.value[h](x_v));
    if (head_weights) head_weights->push_back(sdp.weights);
    heads.push_back(sdp.out);
  }
  return params.out(concat_last_dim(heads));
}

// ReLU(X * beta_E) * beta_R
template <typename T>
TensorT<T> ffn(const FfnParamsT<T>& params, const TensorT<T>& x) {
  detail::check_rank2(x, "ffn");
  if (x.dims()[1] != params.expand.in_dim())
    throw ShapeError("ffn: expected feature dim " + std::to_string(params.expand.in_dim()) +
                     ", got " + dims_to_string(x.dims()));
  return params.reduce(relu(params.expand(x)));
}

// FFN(Multihead(...)). Plain composition by default; with residual_norm the
// standard pre-norm wiring is used instead:
//   y = X_Q + MH(LN(X_Q), LN(X_K), LN(X_V));  out = y + FFN(LN(y))
template <typename T>
TensorT<T> transformer_unit(const MultiHeadParamsT<T>& mh, const FfnParamsT<T>& ff,
                            const TensorT<T>& x_q, const TensorT<T>& x_k, const TensorT<T>& x_v,
                            const AttentionOptions& opts = {},
                            std::vector<TensorT<T>>* head_weights = nullptr) {
  if (!opts.residual_norm) return ffn(ff, multi_head(mh, x_q, x_k, x_v, head_weights));
  auto attended = multi_head(mh, layer_norm_rows(x_q), layer_norm_rows(x_k),
                             layer_norm_rows(x_v), head_weights);
  auto y = add(x_q, attended);
  return add(y, ffn(ff, layer_norm_rows(y)));
}

using Linear = LinearT<float>;
using MultiHeadParams = MultiHeadParamsT<float>;
using FfnParams = FfnParamsT<float>;

}  // namespace hatnet
