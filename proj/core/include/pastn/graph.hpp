#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pastn/tensor.hpp"

namespace pastn {

struct Edge {
  std::size_t from = 0;
  std::size_t to = 0;
  double distance = 0.0;
};

// The traffic graph together with everything the diffusion convolution
// propagates over: the distance-kernel adjacency, its forward/backward
// transition matrices, and the learnable factor embeddings behind the
// adaptive adjacency (shared across all ST-layers).
struct GraphBundle {
  std::size_t nodes = 0;
  Tensor adjacency;   // N x N, nonnegative
  Tensor p_forward;   // N x N, rows sum to 1 or are all zero
  Tensor p_backward;  // N x N
  Tensor e1, e2;      // N x d_e, learnable
};

// A[u][v] = exp(-d^2/sigma^2) when that value clears the threshold.
// Symmetric entries appear only if both directed edges are supplied.
Tensor build_adjacency(const std::vector<Edge>& edges, std::size_t n, double sigma,
                       double threshold);

// Row-normalized A and A^T; zero rows stay zero (isolated nodes propagate
// nothing).
std::pair<Tensor, Tensor> transition_matrices(const Tensor& adjacency);

// softmax(relu(E1 * E2^T)) row-wise; differentiable, recomputed each forward.
Tensor adaptive_adjacency(const Tensor& e1, const Tensor& e2);

GraphBundle make_bundle(Tensor adjacency, std::size_t embed_dim, std::uint64_t seed);

// Population standard deviation of the supplied edge distances; the default
// kernel bandwidth.
double default_sigma(const std::vector<Edge>& edges);

// Z = sum_k P_f^k X W_k1 + P_b^k X W_k2 + A_apt^k X W_k3 over a whole
// [B,C,N,T] sequence (every time step independently). Matrix powers are
// realized by iterated propagation, never by materializing dense powers.
// weights holds K+1 triples of [D_in x M] matrices.
Tensor diffusion_conv_seq(const Tensor& x, const GraphBundle& bundle,
                          const std::vector<std::array<Tensor, 3>>& weights, std::size_t depth);

// Single-time-step form: x_t is [N x D_in], output [N x M].
Tensor diffusion_conv(const Tensor& x_t, const GraphBundle& bundle,
                      const std::vector<std::array<Tensor, 3>>& weights, std::size_t depth);

std::vector<Edge> load_edges_csv(const std::string& path);
void write_edges_csv(const std::string& path, const std::vector<Edge>& edges);

}  // namespace pastn
