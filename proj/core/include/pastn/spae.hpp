#pragma once

#include <cstdint>
#include <vector>

#include "pastn/tensor.hpp"

namespace pastn {

enum class SpaeInit { kSinusoidal, kRandom };

// Learnable per-node positional table added to the hidden representation
// right after the input projection. Sinusoidal initialization keeps the
// relative sensor order; freezing it turns the table into a constant.
struct SPAETable {
  Tensor table;  // N x d_model
  SpaeInit init_kind = SpaeInit::kSinusoidal;
  bool frozen = false;

  void set_frozen(bool v) {
    frozen = v;
    if (table.defined()) table.set_requires_grad(!v);
  }
};

// The closed-form initial value for node i, dimension k: sin for even k,
// cos for odd k, both at frequency 1/10000^(2k/d_model).
double spae_initial_value(std::size_t i, std::size_t k, std::size_t d_model);

SPAETable init_spae(std::size_t n, std::size_t d_model, SpaeInit kind, std::uint64_t seed);

// out[b][c][n][t] = h[b][c][n][t] + table[n][c]; gradients into the table
// sum over batch and time.
Tensor apply_spae(const Tensor& h, const SPAETable& spae);

struct DispersionResult {
  std::vector<std::size_t> nodes;  // node index of each retained angle
  std::vector<double> angles;     // one angle per non-skipped node
  double resultant_length = 0.0;
  std::size_t skipped = 0;  // points with (near) zero 2-D norm
  bool collapsed = false;   // all points coincide; reported as R = 1
};

// Projects node embeddings to 2-D with a power-iteration PCA, maps every
// point to the unit circle, and returns the circular resultant length:
// R near 0 means uniformly dispersed embeddings, R near 1 means collapse.
DispersionResult dispersion_score(const Tensor& node_embeddings);

}  // namespace pastn
