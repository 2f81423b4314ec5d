#pragma once

#include <cstddef>
#include <vector>

namespace pastn {

class Rng;

// Captures the last ST-layer's attention probabilities for batch element 0
// when requested: one H x T x T row-stochastic map per node.
struct AttentionSink {
  bool capture = false;
  std::size_t nodes = 0, heads = 0, seq_len = 0;
  std::vector<double> maps;  // N x H x T x T

  double at(std::size_t node, std::size_t head, std::size_t row, std::size_t col) const {
    return maps[((node * heads + head) * seq_len + row) * seq_len + col];
  }
};

struct ForwardCtx {
  bool training = false;
  Rng* dropout_rng = nullptr;
  AttentionSink* attention = nullptr;
};

}  // namespace pastn
