#include "pastn/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "pastn/rng.hpp"

namespace pastn {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kMinutesPerDay = 24 * 60;

// Days since 1970-01-01 for a civil date (proleptic Gregorian).
std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                       static_cast<unsigned>(d) - 1u;
  const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
  return static_cast<std::int64_t>(era) * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
  y = static_cast<int>(yy + (m <= 2));
}

std::string format_timestamp(std::int64_t minutes) {
  const std::int64_t day = minutes >= 0 ? minutes / kMinutesPerDay
                                        : (minutes - kMinutesPerDay + 1) / kMinutesPerDay;
  const int mod = static_cast<int>(minutes - day * kMinutesPerDay);
  int y, m, d;
  civil_from_days(day, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d %02d:%02d:%02d", y, m, d, mod / 60, mod % 60, 0);
  return buf;
}

std::int64_t parse_timestamp(const std::string& text, std::size_t row) {
  int y, mo, d, h, mi, s = 0;
  const int got = std::sscanf(text.c_str(), "%d-%d-%d %d:%d:%d", &y, &mo, &d, &h, &mi, &s);
  if (got < 5 || mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59) {
    throw FormatError("row " + std::to_string(row) + ": bad timestamp '" + text + "'");
  }
  return days_from_civil(y, mo, d) * kMinutesPerDay + h * 60 + mi;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

// 2024-01-01 is a Monday.
constexpr std::int64_t kDefaultStartMinutes = 19723LL * kMinutesPerDay;

}  // namespace

double RawSeries::time_of_day(std::size_t t) const {
  const std::int64_t minutes = start_minutes + static_cast<std::int64_t>(t) * kIntervalMinutes;
  const std::int64_t mod = ((minutes % kMinutesPerDay) + kMinutesPerDay) % kMinutesPerDay;
  return static_cast<double>(mod) / static_cast<double>(kMinutesPerDay);
}

std::size_t RawSeries::day_of_week(std::size_t t) const {
  const std::int64_t minutes = start_minutes + static_cast<std::int64_t>(t) * kIntervalMinutes;
  std::int64_t day = minutes >= 0 ? minutes / kMinutesPerDay
                                  : (minutes - kMinutesPerDay + 1) / kMinutesPerDay;
  // 1970-01-01 was a Thursday; shift so Monday = 0.
  return static_cast<std::size_t>(((day + 3) % 7 + 7) % 7);
}

RawSeries generate_synthetic(std::size_t nodes, std::size_t days, const GraphBundle& bundle,
                             std::uint64_t seed, const GeneratorParams& params) {
  if (nodes < 2 || days < 2) throw ValueError("generate_synthetic: need N >= 2 and days >= 2");
  if (bundle.nodes != nodes) {
    throw ShapeError("generate_synthetic: bundle has " + std::to_string(bundle.nodes) +
                     " nodes, requested " + std::to_string(nodes));
  }
  Rng rng = Rng::derive(seed, "synthetic");
  std::vector<double> base(nodes), amp(nodes), phase(nodes), noise(nodes);
  for (std::size_t n = 0; n < nodes; ++n) base[n] = rng.uniform(params.base_lo, params.base_hi);
  for (std::size_t n = 0; n < nodes; ++n) amp[n] = rng.uniform(params.amp_lo, params.amp_hi);
  for (std::size_t n = 0; n < nodes; ++n) phase[n] = rng.uniform(0.0, 1.0);
  for (std::size_t n = 0; n < nodes; ++n) noise[n] = rng.uniform(params.noise_lo, params.noise_hi);

  RawSeries series;
  series.nodes = nodes;
  series.steps = days * (kMinutesPerDay / RawSeries::kIntervalMinutes);
  series.start_minutes = kDefaultStartMinutes;
  series.values.assign(series.steps * nodes, 0.0);

  const auto pf = bundle.p_forward.data();
  for (std::size_t t = 0; t < series.steps; ++t) {
    const double tod = series.time_of_day(t);
    const bool weekday = series.day_of_week(t) < 5;
    for (std::size_t n = 0; n < nodes; ++n) {
      double v = base[n] + amp[n] * std::sin(2.0 * kPi * (tod - phase[n]));
      if (weekday) v += params.weekday_boost;
      if (t > 0 && params.spillover != 0.0) {
        double inflow = 0.0;
        for (std::size_t m = 0; m < nodes; ++m) {
          inflow += pf[n * nodes + m] * series.value(t - 1, m);
        }
        v += params.spillover * inflow;
      }
      v += noise[n] * rng.normal();
      series.values[t * nodes + n] = v > 0.0 ? v : 0.0;
    }
  }
  return series;
}

RawSeries load_flow_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open flow file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file");
  auto header = split_csv_line(line);
  if (header.empty() || header[0] != "timestamp") {
    throw FormatError(path + ": first header column must be 'timestamp'");
  }
  std::vector<std::size_t> node_cols;
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (header[c].rfind("node_", 0) == 0) {
      node_cols.push_back(c);
    } else {
      std::cerr << "warning: " << path << ": ignoring non-flow column '" << header[c] << "'\n";
    }
  }
  if (node_cols.empty()) throw FormatError(path + ": no node_<i> columns found");

  RawSeries series;
  series.nodes = node_cols.size();
  std::size_t row = 1;
  std::int64_t prev_minutes = 0;
  std::vector<double> last_valid(series.nodes, 0.0);
  std::vector<bool> seen(series.nodes, false);
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw FormatError(path + ": row " + std::to_string(row) + " has " +
                        std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(header.size()));
    }
    const std::int64_t minutes = parse_timestamp(cells[0], row);
    if (series.steps == 0) {
      series.start_minutes = minutes;
    } else if (minutes != prev_minutes + RawSeries::kIntervalMinutes) {
      throw FormatError(path + ": row " + std::to_string(row) +
                        ": timestamps must increase in 5-minute steps");
    }
    prev_minutes = minutes;
    for (std::size_t i = 0; i < series.nodes; ++i) {
      const std::string& cell = cells[node_cols[i]];
      double v;
      if (cell.empty()) {
        if (!seen[i]) {
          throw FormatError(path + ": row " + std::to_string(row) + ": first reading of node " +
                            std::to_string(i) + " is missing");
        }
        v = last_valid[i];
      } else {
        try {
          v = std::stod(cell);
        } catch (const std::exception&) {
          throw FormatError(path + ": row " + std::to_string(row) + ": bad value '" + cell + "'");
        }
        seen[i] = true;
        last_valid[i] = v;
      }
      series.values.push_back(v);
    }
    ++series.steps;
  }
  if (series.steps == 0) throw FormatError(path + ": no data rows");
  return series;
}

void write_flow_csv(const std::string& path, const RawSeries& series) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write flow file: " + path);
  out << "timestamp";
  for (std::size_t n = 0; n < series.nodes; ++n) out << ",node_" << n;
  out << "\n";
  char buf[64];
  for (std::size_t t = 0; t < series.steps; ++t) {
    out << format_timestamp(series.start_minutes +
                            static_cast<std::int64_t>(t) * RawSeries::kIntervalMinutes);
    for (std::size_t n = 0; n < series.nodes; ++n) {
      std::snprintf(buf, sizeof(buf), "%.17g", series.value(t, n));
      out << "," << buf;
    }
    out << "\n";
  }
}

SplitRanges chronological_split(std::size_t window_count, std::array<double, 3> ratios) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::fabs(total - 1.0) > 1e-9) {
    throw ValueError("chronological_split: ratios must sum to 1");
  }
  SplitRanges r;
  r.train_begin = 0;
  r.train_end = static_cast<std::size_t>(std::floor(ratios[0] * static_cast<double>(window_count)));
  r.val_begin = r.train_end;
  r.val_end = r.val_begin +
              static_cast<std::size_t>(std::floor(ratios[1] * static_cast<double>(window_count)));
  r.test_begin = r.val_end;
  r.test_end = window_count;
  if (r.train_end == r.train_begin || r.val_end == r.val_begin || r.test_end == r.test_begin) {
    throw DataError("chronological_split: " + std::to_string(window_count) +
                    " windows cannot give every split at least one window");
  }
  return r;
}

WindowedDataset featurize_and_window(const RawSeries& raw, std::size_t t_in, std::size_t t_out,
                                     std::array<double, 3> ratios) {
  if (raw.steps < t_in + t_out) {
    throw DataError("featurize_and_window: series of " + std::to_string(raw.steps) +
                    " steps is shorter than one " + std::to_string(t_in + t_out) +
                    "-step window");
  }
  WindowedDataset ds;
  ds.t_in = t_in;
  ds.t_out = t_out;
  ds.nodes = raw.nodes;
  ds.window_count = raw.steps - t_in - t_out + 1;
  ds.split = chronological_split(ds.window_count, ratios);

  // Scaler statistics from the training windows' input flow values only.
  double mean = 0.0;
  std::size_t count = 0;
  for (std::size_t w = ds.split.train_begin; w < ds.split.train_end; ++w) {
    for (std::size_t t = 0; t < t_in; ++t)
      for (std::size_t n = 0; n < raw.nodes; ++n) {
        mean += raw.value(w + t, n);
        ++count;
      }
  }
  mean /= static_cast<double>(count);
  double var = 0.0;
  for (std::size_t w = ds.split.train_begin; w < ds.split.train_end; ++w) {
    for (std::size_t t = 0; t < t_in; ++t)
      for (std::size_t n = 0; n < raw.nodes; ++n) {
        const double c = raw.value(w + t, n) - mean;
        var += c * c;
      }
  }
  var /= static_cast<double>(count);
  ds.scaler.mean = mean;
  ds.scaler.stddev = std::sqrt(var);
  if (ds.scaler.stddev == 0.0) {
    std::cerr << "warning: constant training flow; scaler std forced to 1\n";
    ds.scaler.stddev = 1.0;
    ds.scaler.degenerate = true;
  }

  ds.inputs.resize(ds.window_count * t_in * raw.nodes * WindowedDataset::kFeatures);
  ds.targets.resize(ds.window_count * t_out * raw.nodes);
  std::size_t in_pos = 0;
  for (std::size_t w = 0; w < ds.window_count; ++w) {
    for (std::size_t t = 0; t < t_in; ++t) {
      const std::size_t step = w + t;
      const double tod = raw.time_of_day(step);
      const double dow = static_cast<double>(raw.day_of_week(step)) / 7.0;
      for (std::size_t n = 0; n < raw.nodes; ++n) {
        ds.inputs[in_pos++] = ds.scaler.normalize(raw.value(step, n));
        ds.inputs[in_pos++] = tod;
        ds.inputs[in_pos++] = dow;
      }
    }
    for (std::size_t t = 0; t < t_out; ++t) {
      const std::size_t step = w + t_in + t;
      for (std::size_t n = 0; n < raw.nodes; ++n) {
        ds.targets[(w * t_out + t) * raw.nodes + n] = ds.scaler.normalize(raw.value(step, n));
      }
    }
  }
  return ds;
}

Tensor WindowedDataset::gather_inputs(const std::vector<std::size_t>& windows) const {
  const std::size_t stride = t_in * nodes * kFeatures;
  Tensor out = Tensor::zeros({windows.size(), t_in, nodes, kFeatures});
  auto dst = out.data();
  std::size_t pos = 0;
  for (std::size_t w : windows) {
    std::copy(inputs.begin() + static_cast<std::ptrdiff_t>(w * stride),
              inputs.begin() + static_cast<std::ptrdiff_t>((w + 1) * stride),
              dst.begin() + static_cast<std::ptrdiff_t>(pos));
    pos += stride;
  }
  return out;
}

Tensor WindowedDataset::gather_targets(const std::vector<std::size_t>& windows) const {
  const std::size_t stride = t_out * nodes;
  Tensor out = Tensor::zeros({windows.size(), t_out, nodes, 1});
  auto dst = out.data();
  std::size_t pos = 0;
  for (std::size_t w : windows) {
    std::copy(targets.begin() + static_cast<std::ptrdiff_t>(w * stride),
              targets.begin() + static_cast<std::ptrdiff_t>((w + 1) * stride),
              dst.begin() + static_cast<std::ptrdiff_t>(pos));
    pos += stride;
  }
  return out;
}

Tensor WindowedDataset::window_input(std::size_t w) const {
  if (w >= window_count) throw IndexError("window_input: window index out of range");
  const std::size_t stride = t_in * nodes * kFeatures;
  return Tensor::from_data({t_in, nodes, kFeatures},
                           std::vector<double>(inputs.begin() + static_cast<std::ptrdiff_t>(w * stride),
                                               inputs.begin() + static_cast<std::ptrdiff_t>((w + 1) * stride)));
}

Tensor persistence_baseline(const Tensor& window, const Scaler& scaler, std::size_t t_out) {
  if (window.rank() != 3) {
    throw ShapeError("persistence_baseline: expected [T,N,D] window, got " +
                     shape_str(window.shape()));
  }
  const std::size_t t_in = window.dim(0), nodes = window.dim(1), feats = window.dim(2);
  Tensor out = Tensor::zeros({t_out, nodes});
  auto src = window.data();
  auto dst = out.data();
  for (std::size_t n = 0; n < nodes; ++n) {
    const double last = scaler.denormalize(src[((t_in - 1) * nodes + n) * feats]);
    for (std::size_t t = 0; t < t_out; ++t) dst[t * nodes + n] = last;
  }
  return out;
}

std::vector<Edge> random_geometric_edges(std::size_t nodes, double radius, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, "geometric-graph");
  std::vector<double> xs(nodes), ys(nodes);
  for (std::size_t i = 0; i < nodes; ++i) {
    xs[i] = rng.uniform();
    ys[i] = rng.uniform();
  }
  std::vector<Edge> edges;
  for (std::size_t u = 0; u < nodes; ++u)
    for (std::size_t v = 0; v < nodes; ++v) {
      if (u == v) continue;
      const double d = std::hypot(xs[u] - xs[v], ys[u] - ys[v]);
      if (d <= radius) edges.push_back({u, v, d});
    }
  return edges;
}

}  // namespace pastn
