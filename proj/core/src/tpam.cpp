#include "pastn/tpam.hpp"

#include <cmath>

namespace pastn {

namespace {

void check_params(const TPAMParams& p) {
  if (p.heads == 0 || p.attn_dim() % p.heads != 0) {
    throw ConfigError("tpam: attention width " + std::to_string(p.attn_dim()) +
                      " is not divisible by " + std::to_string(p.heads) + " heads");
  }
}

}  // namespace

std::array<Tensor, 3> qkv_project(const Tensor& x_n, const TPAMParams& params) {
  if (x_n.rank() != 2 || x_n.dim(1) != params.model_dim()) {
    throw ShapeError("qkv_project: sequence " + shape_str(x_n.shape()) +
                     " does not match projection " + shape_str(params.w_query.shape()));
  }
  return {matmul(x_n, params.w_query), matmul(x_n, params.w_key), matmul(x_n, params.w_value)};
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const TPAMParams& params) {
  check_params(params);
  const std::size_t heads = params.heads;
  const std::size_t d_h = params.attn_dim() / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d_h));

  std::vector<Tensor> qs = split(q, 1, heads);
  std::vector<Tensor> ks = split(k, 1, heads);
  std::vector<Tensor> vs = split(v, 1, heads);
  std::vector<Tensor> heads_out;
  heads_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor scores = scale(matmul(qs[h], transpose(ks[h])), inv_scale);
    Tensor attn = softmax(scores, 1);
    heads_out.push_back(matmul(attn, vs[h]));
  }
  return matmul(concat(heads_out, 1), params.w_out);
}

Tensor tpam_forward(const Tensor& x, const TPAMParams& params, AttentionSink* sink) {
  check_params(params);
  if (x.rank() != 4) throw ShapeError("tpam_forward: expected [B,D,N,T], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), d_model = x.dim(1), n = x.dim(2), t = x.dim(3);
  if (d_model != params.model_dim()) {
    throw ShapeError("tpam_forward: channel width " + std::to_string(d_model) +
                     " does not match projections " + shape_str(params.w_query.shape()));
  }
  const std::size_t heads = params.heads;
  const std::size_t d_attn = params.attn_dim();
  const std::size_t d_h = d_attn / heads;
  const std::size_t g = b * n;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d_h));

  // [B,D,N,T] -> [G,T,D] with G = B*N; every sequence attends independently.
  Tensor seqs = reshape(permute(x, {0, 2, 3, 1}), {g, t, d_model});
  Tensor flat = reshape(seqs, {g * t, d_model});

  auto to_heads = [&](const Tensor& w) {
    Tensor proj = reshape(matmul(flat, w), {g, t, heads, d_h});
    return reshape(permute(proj, {0, 2, 1, 3}), {g * heads, t, d_h});
  };
  Tensor qh = to_heads(params.w_query);
  Tensor kh = to_heads(params.w_key);
  Tensor vh = to_heads(params.w_value);

  Tensor attn = softmax(scale(bmm(qh, kh, /*transpose_b=*/true), inv_scale), 2);

  if (sink != nullptr && sink->capture) {
    sink->nodes = n;
    sink->heads = heads;
    sink->seq_len = t;
    sink->maps.assign(n * heads * t * t, 0.0);
    auto src = attn.data();
    for (std::size_t node = 0; node < n; ++node) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t block = (node * heads + h) * t * t;  // batch element 0
        for (std::size_t i = 0; i < t * t; ++i) sink->maps[(node * heads + h) * t * t + i] = src[block + i];
      }
    }
  }

  Tensor ctxv = bmm(attn, vh);  // [G*H, T, d_h]
  Tensor merged = reshape(permute(reshape(ctxv, {g, heads, t, d_h}), {0, 2, 1, 3}), {g * t, d_attn});
  Tensor out = reshape(matmul(merged, params.w_out), {g, t, d_model});

  Tensor normed = layer_norm(add(out, seqs), params.ln_gamma, params.ln_beta, kTpamLayerNormEps);
  return permute(reshape(normed, {b, n, t, d_model}), {0, 3, 1, 2});
}

}  // namespace pastn
