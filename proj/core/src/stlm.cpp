#include "pastn/stlm.hpp"

#include "pastn/rng.hpp"

namespace pastn {

Tensor gated_tcn(const Tensor& x, const GatedTCNParams& params) {
  const std::size_t c_out = params.filter_kernel.dim(0);
  Tensor filter = temporal_conv(x, params.filter_kernel, params.dilation);
  filter = add(filter, reshape(params.filter_bias, {1, c_out, 1, 1}));
  Tensor gate = temporal_conv(x, params.gate_kernel, params.dilation);
  gate = add(gate, reshape(params.gate_bias, {1, c_out, 1, 1}));
  return mul(tanh(filter), sigmoid(gate));
}

Tensor stlm_forward(const Tensor& x, const GatedTCNParams& tcn, const DiffusionConvParams& diff,
                    const GraphBundle& bundle, double dropout_p, const ForwardCtx& ctx) {
  Tensor h = gated_tcn(x, tcn);
  Tensor z = diffusion_conv_seq(h, bundle, diff.weights, diff.depth);
  return dropout(z, dropout_p, ctx.training, ctx.dropout_rng);
}

}  // namespace pastn
