#pragma once

#include <array>

#include "pastn/context.hpp"
#include "pastn/tensor.hpp"

namespace pastn {

// Per-node temporal self-attention. Projections are shared across nodes;
// the layer-norm affine belongs to Eq-style residual normalization that
// closes the module.
struct TPAMParams {
  Tensor w_query, w_key, w_value;  // D x d
  Tensor w_out;                    // d x D
  Tensor ln_gamma, ln_beta;        // D
  std::size_t heads = 1;

  std::size_t model_dim() const { return w_query.dim(0); }
  std::size_t attn_dim() const { return w_query.dim(1); }
};

inline constexpr double kTpamLayerNormEps = 1e-8;

// Q = X W_Q, K = X W_K, V = X W_V for one node's [T x D] sequence.
std::array<Tensor, 3> qkv_project(const Tensor& x_n, const TPAMParams& params);

// Per head: softmax(Q_h K_h^T / sqrt(d_h)) V_h; heads concatenated along the
// feature axis and projected by W_O. Input/output are a single node's
// [T x d] / [T x D] sequences.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const TPAMParams& params);

// LayerNorm(MultiheadAttention(...) + X) for every (batch, node) sequence of
// a [B,D,N,T] tensor; shape preserved exactly. When sink requests capture,
// the attention maps of batch element 0 are stored per node and head.
Tensor tpam_forward(const Tensor& x, const TPAMParams& params, AttentionSink* sink = nullptr);

}  // namespace pastn
