#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pastn/graph.hpp"
#include "pastn/tensor.hpp"

namespace pastn {

// z-score scaler fit on the training split's flow values only.
struct Scaler {
  double mean = 0.0;
  double stddev = 1.0;
  bool degenerate = false;  // constant series; stddev forced to 1

  double normalize(double x) const { return (x - mean) / stddev; }
  double denormalize(double z) const { return z * stddev + mean; }
};

// 5-minute flow readings for N sensors. Timestamps are UTC-naive civil time.
struct RawSeries {
  std::size_t steps = 0;
  std::size_t nodes = 0;
  std::vector<double> values;          // steps x nodes, row-major
  std::int64_t start_minutes = 0;      // minutes since 1970-01-01 00:00
  static constexpr int kIntervalMinutes = 5;

  double value(std::size_t t, std::size_t n) const { return values[t * nodes + n]; }
  // fraction of day in [0,1) and weekday index (Monday = 0) for step t.
  double time_of_day(std::size_t t) const;
  std::size_t day_of_week(std::size_t t) const;
};

struct GeneratorParams {
  double base_lo = 120.0, base_hi = 280.0;
  double amp_lo = 40.0, amp_hi = 90.0;
  double noise_lo = 2.0, noise_hi = 6.0;
  double weekday_boost = 25.0;
  double spillover = 0.3;
};

// Diurnal sinusoid per node plus weekday lift, one-step neighbor spillover
// through P_f, and Gaussian noise; clamped at zero and fully determined by
// the seed. Starts on a Monday at 00:00.
RawSeries generate_synthetic(std::size_t nodes, std::size_t days, const GraphBundle& bundle,
                             std::uint64_t seed, const GeneratorParams& params = {});

RawSeries load_flow_csv(const std::string& path);
void write_flow_csv(const std::string& path, const RawSeries& series);

struct SplitRanges {
  std::size_t train_begin = 0, train_end = 0;
  std::size_t val_begin = 0, val_end = 0;
  std::size_t test_begin = 0, test_end = 0;
};

// Contiguous, ordered, non-overlapping window-index ranges covering
// [0, window_count); floor boundaries, remainder to test.
SplitRanges chronological_split(std::size_t window_count,
                                std::array<double, 3> ratios = {0.6, 0.2, 0.2});

// Sliding windows with D_feat = 3 channels: z-scored flow, time-of-day in
// [0,1), day-of-week / 7. The scaler is fit on the training windows only.
struct WindowedDataset {
  std::size_t window_count = 0;
  std::size_t t_in = 12, t_out = 12;
  std::size_t nodes = 0;
  static constexpr std::size_t kFeatures = 3;
  std::vector<double> inputs;   // W x T x N x 3, flow channel normalized
  std::vector<double> targets;  // W x T' x N x 1, normalized
  Scaler scaler;
  SplitRanges split;

  Tensor gather_inputs(const std::vector<std::size_t>& windows) const;
  Tensor gather_targets(const std::vector<std::size_t>& windows) const;
  Tensor window_input(std::size_t w) const;  // [T, N, 3]
};

WindowedDataset featurize_and_window(const RawSeries& raw, std::size_t t_in = 12,
                                     std::size_t t_out = 12,
                                     std::array<double, 3> ratios = {0.6, 0.2, 0.2});

// Repeats the last observed flow value of each node for all T' steps, in
// original units. window is a [T, N, D_feat] normalized input window.
Tensor persistence_baseline(const Tensor& window, const Scaler& scaler, std::size_t t_out);

// Random geometric graph on the unit square: every directed pair within
// `radius` becomes an edge with its Euclidean distance.
std::vector<Edge> random_geometric_edges(std::size_t nodes, double radius, std::uint64_t seed);

}  // namespace pastn
