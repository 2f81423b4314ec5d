#include "pastn/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace pastn {

MetricsReport compute_metrics(const Tensor& pred, const Tensor& target, double mask_eps) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("compute_metrics: shape mismatch: " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  if (pred.rank() < 2) {
    throw ShapeError("compute_metrics: expected [S, T', ...], got " + shape_str(pred.shape()));
  }
  const std::size_t samples = pred.dim(0);
  const std::size_t horizon = pred.dim(1);
  std::size_t inner = 1;
  for (std::size_t d = 2; d < pred.rank(); ++d) inner *= pred.dim(d);

  struct Acc {
    double abs_err = 0.0, sq_err = 0.0, pct_err = 0.0;
    std::size_t count = 0, mape_count = 0;
  };
  std::vector<Acc> step(horizon);
  const double* pp = pred.data().data();
  const double* pt = target.data().data();
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t h = 0; h < horizon; ++h) {
      const std::size_t base = (s * horizon + h) * inner;
      Acc& a = step[h];
      for (std::size_t i = 0; i < inner; ++i) {
        const double e = pp[base + i] - pt[base + i];
        a.abs_err += std::fabs(e);
        a.sq_err += e * e;
        ++a.count;
        if (std::fabs(pt[base + i]) >= mask_eps) {
          a.pct_err += std::fabs(e) / std::fabs(pt[base + i]);
          ++a.mape_count;
        }
      }
    }
  }

  auto finish = [](const Acc& a) {
    HorizonMetrics m;
    m.count = a.count;
    m.masked = a.count - a.mape_count;
    m.mae = a.abs_err / static_cast<double>(a.count);
    m.rmse = std::sqrt(a.sq_err / static_cast<double>(a.count));
    if (a.mape_count > 0) {
      m.mape = 100.0 * a.pct_err / static_cast<double>(a.mape_count);
    } else {
      m.mape_defined = false;
      m.mape = std::nan("");
    }
    return m;
  };

  MetricsReport report;
  report.samples = samples;
  report.per_step.reserve(horizon);
  Acc total;
  for (const Acc& a : step) {
    report.per_step.push_back(finish(a));
    total.abs_err += a.abs_err;
    total.sq_err += a.sq_err;
    total.pct_err += a.pct_err;
    total.count += a.count;
    total.mape_count += a.mape_count;
  }
  report.overall = finish(total);
  return report;
}

std::vector<HorizonRow> horizon_table(const MetricsReport& report) {
  const std::pair<const char*, std::size_t> named[] = {
      {"h15min", 3}, {"h30min", 6}, {"h1h", 12}};
  std::vector<HorizonRow> rows;
  for (auto [label, s] : named) {
    if (s <= report.per_step.size()) {
      rows.push_back({label, report.per_step[s - 1]});
    } else {
      std::fprintf(stderr, "notice: horizon %s needs %zu steps, only %zu available\n", label, s,
                   report.per_step.size());
    }
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void append_row(std::string& out, const std::string& label, const HorizonMetrics& m) {
  out += label;
  out += ',' + fmt(m.mae) + ',' + fmt(m.rmse) + ',';
  out += m.mape_defined ? fmt(m.mape) : "nan";
  out += ',' + std::to_string(m.masked) + '\n';
}

}  // namespace

std::string metrics_to_csv(const MetricsReport& report, const std::vector<HorizonRow>& extra_rows) {
  std::string out = "horizon,mae,rmse,mape,masked_count\n";
  for (std::size_t s = 0; s < report.per_step.size(); ++s) {
    append_row(out, "step_" + std::to_string(s + 1), report.per_step[s]);
  }
  for (const HorizonRow& row : horizon_table(report)) append_row(out, row.label, row.metrics);
  append_row(out, "overall", report.overall);
  for (const HorizonRow& row : extra_rows) append_row(out, row.label, row.metrics);
  return out;
}

void write_metrics_csv(const std::string& path, const MetricsReport& report,
                       const std::vector<HorizonRow>& extra_rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics file: " + path);
  out << metrics_to_csv(report, extra_rows);
}

}  // namespace pastn
