#pragma once

#include <array>
#include <vector>

#include "pastn/context.hpp"
#include "pastn/graph.hpp"
#include "pastn/tensor.hpp"

namespace pastn {

// Both branches of the gate share kernel size and dilation.
struct GatedTCNParams {
  Tensor filter_kernel;  // C_out x C_in x k
  Tensor filter_bias;    // C_out
  Tensor gate_kernel;    // C_out x C_in x k
  Tensor gate_bias;      // C_out
  std::size_t dilation = 1;
};

struct DiffusionConvParams {
  std::vector<std::array<Tensor, 3>> weights;  // K+1 triples, each D_in x M
  std::size_t depth = 1;                       // K
};

// h = tanh(filter * x + b) . sigmoid(gate * x + c), convolving along the
// time axis only; T' = T - dilation*(k-1).
Tensor gated_tcn(const Tensor& x, const GatedTCNParams& params);

// Gated TCN, then the diffusion graph convolution at every remaining time
// step, then dropout (training mode only).
Tensor stlm_forward(const Tensor& x, const GatedTCNParams& tcn, const DiffusionConvParams& diff,
                    const GraphBundle& bundle, double dropout_p, const ForwardCtx& ctx);

}  // namespace pastn
