#pragma once

#include <string>
#include <vector>

#include "pastn/tensor.hpp"

namespace pastn {

struct HorizonMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;         // percentage; meaningful only when mape_defined
  bool mape_defined = true;  // false when every target was masked
  std::size_t count = 0;     // entries contributing to MAE/RMSE
  std::size_t masked = 0;    // entries excluded from MAPE
};

struct MetricsReport {
  HorizonMetrics overall;
  std::vector<HorizonMetrics> per_step;  // index 0 = horizon step 1
  std::size_t samples = 0;
};

// pred/target in original units, shaped [S, T', ...]; axis 1 is the horizon.
// MAPE averages |e|/|y| over entries with |y| >= mask_eps.
MetricsReport compute_metrics(const Tensor& pred, const Tensor& target, double mask_eps = 1.0);

struct HorizonRow {
  std::string label;  // h15min / h30min / h1h
  HorizonMetrics metrics;
};

// The named 15 min / 30 min / 1 h rows (steps 3, 6, 12 of a 5-minute
// series); horizons beyond T' are skipped with a notice on the row list.
std::vector<HorizonRow> horizon_table(const MetricsReport& report);

// metrics.csv: horizon,mae,rmse,mape,masked_count with horizon in
// {step_1..step_T', h15min, h30min, h1h, overall}; optional extra rows
// (e.g. the persistence baseline) are appended verbatim.
std::string metrics_to_csv(const MetricsReport& report,
                           const std::vector<HorizonRow>& extra_rows = {});
void write_metrics_csv(const std::string& path, const MetricsReport& report,
                       const std::vector<HorizonRow>& extra_rows = {});

}  // namespace pastn
