#include "pastn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "pastn/rng.hpp"

namespace pastn {

Tensor mae_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mae_loss: shape mismatch: " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  return mean(abs(sub(pred, target)));
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].numel(), 0.0);
    v_[i].assign(params_[i].numel(), 0.0);
  }
}

void Adam::step() {
  double norm_sq = 0.0;
  for (Tensor& p : params_) {
    if (!p.has_grad()) {
      throw ContractError("adam: trainable parameter " + shape_str(p.shape()) +
                          " carries no gradient");
    }
    for (double g : p.grad()) norm_sq += g * g;
  }
  const double norm = std::sqrt(norm_sq);
  const double clip_scale = (options_.clip > 0.0 && norm > options_.clip)
                                ? options_.clip / norm
                                : 1.0;
  ++step_;
  const double bias1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bias2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].data();
    auto grad = params_[i].grad();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad[k] * clip_scale;
      m_[i][k] = options_.beta1 * m_[i][k] + (1.0 - options_.beta1) * g;
      v_[i][k] = options_.beta2 * v_[i][k] + (1.0 - options_.beta2) * g * g;
      const double m_hat = m_[i][k] / bias1;
      const double v_hat = v_[i][k] / bias2;
      data[k] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

namespace {

std::vector<std::size_t> split_windows(const WindowedDataset& ds, Split split) {
  std::size_t begin = 0, end = 0;
  switch (split) {
    case Split::kTrain: begin = ds.split.train_begin; end = ds.split.train_end; break;
    case Split::kVal: begin = ds.split.val_begin; end = ds.split.val_end; break;
    case Split::kTest: begin = ds.split.test_begin; end = ds.split.test_end; break;
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

std::size_t eval_threads() {
  const char* env = std::getenv("PASTN_THREADS");
  if (env == nullptr) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v > 1 ? static_cast<std::size_t>(v) : 1;
}

// Denormalized model predictions for the given windows, written into
// out[i * T' * N ...] in window order regardless of thread count.
void predict_into(const WindowedDataset& ds, const Model& model,
                  const std::vector<std::size_t>& windows, std::size_t batch_size,
                  std::vector<double>& out) {
  const std::size_t t_out = ds.t_out, nodes = ds.nodes;
  const std::size_t stride = t_out * nodes;
  auto run_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t pos = lo; pos < hi; pos += batch_size) {
      const std::size_t count = std::min(batch_size, hi - pos);
      std::vector<std::size_t> batch(windows.begin() + static_cast<std::ptrdiff_t>(pos),
                                     windows.begin() + static_cast<std::ptrdiff_t>(pos + count));
      Tensor x = ds.gather_inputs(batch);
      ForwardCtx ctx;  // eval mode, no tape
      Tensor y = model.forward(x, ctx);
      auto src = y.data();
      for (std::size_t b = 0; b < count; ++b) {
        for (std::size_t i = 0; i < stride; ++i) {
          out[(pos + b) * stride + i] = ds.scaler.denormalize(src[b * stride + i]);
        }
      }
    }
  };
  const std::size_t threads = std::min(eval_threads(), windows.empty() ? std::size_t{1} : windows.size());
  if (threads <= 1) {
    run_range(0, windows.size());
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (windows.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(windows.size(), lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back(run_range, lo, hi);
  }
  for (auto& th : pool) th.join();
}

std::vector<double> denormalized_targets(const WindowedDataset& ds,
                                         const std::vector<std::size_t>& windows) {
  const std::size_t stride = ds.t_out * ds.nodes;
  std::vector<double> out(windows.size() * stride);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    for (std::size_t k = 0; k < stride; ++k) {
      out[i * stride + k] = ds.scaler.denormalize(ds.targets[windows[i] * stride + k]);
    }
  }
  return out;
}

}  // namespace

MetricsReport evaluate_split(const WindowedDataset& dataset, const Model& model, Split split,
                             std::size_t batch_size) {
  auto windows = split_windows(dataset, split);
  if (windows.empty()) throw DataError("evaluate_split: split holds no windows");
  std::vector<double> pred(windows.size() * dataset.t_out * dataset.nodes);
  predict_into(dataset, model, windows, batch_size, pred);
  Tensor p = Tensor::from_data({windows.size(), dataset.t_out, dataset.nodes}, std::move(pred));
  Tensor y = Tensor::from_data({windows.size(), dataset.t_out, dataset.nodes},
                               denormalized_targets(dataset, windows));
  return compute_metrics(p, y);
}

MetricsReport evaluate_persistence(const WindowedDataset& dataset, Split split) {
  auto windows = split_windows(dataset, split);
  if (windows.empty()) throw DataError("evaluate_persistence: split holds no windows");
  const std::size_t stride = dataset.t_out * dataset.nodes;
  std::vector<double> pred(windows.size() * stride);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    Tensor f = persistence_baseline(dataset.window_input(windows[i]), dataset.scaler,
                                    dataset.t_out);
    auto src = f.data();
    std::copy(src.begin(), src.end(), pred.begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  Tensor p = Tensor::from_data({windows.size(), dataset.t_out, dataset.nodes}, std::move(pred));
  Tensor y = Tensor::from_data({windows.size(), dataset.t_out, dataset.nodes},
                               denormalized_targets(dataset, windows));
  return compute_metrics(p, y);
}

TrainResult train_loop(const WindowedDataset& dataset, Model& model, const TrainOptions& options) {
  auto train_windows = split_windows(dataset, Split::kTrain);
  if (train_windows.empty()) throw DataError("train_loop: no training windows");

  Adam optimizer(model.trainable_parameters(), options.adam);
  Rng shuffle_rng = Rng::derive(options.seed, "train/shuffle");
  Rng dropout_rng = Rng::derive(options.seed, "train/dropout");

  TrainResult result;
  result.best_val_mae = std::numeric_limits<double>::infinity();

  // Snapshot storage for the best epoch's parameters.
  auto named = model.named_parameters();
  std::vector<std::vector<double>> best_values;
  auto snapshot = [&]() {
    best_values.clear();
    for (auto& [name, t] : named) best_values.emplace_back(t.data().begin(), t.data().end());
  };
  auto restore = [&]() {
    for (std::size_t i = 0; i < named.size(); ++i) {
      auto dst = named[i].second.data();
      std::copy(best_values[i].begin(), best_values[i].end(), dst.begin());
    }
  };

  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(train_windows);

    double loss_sum = 0.0;
    std::size_t sample_count = 0;
    std::size_t batch_index = 0;
    for (std::size_t pos = 0; pos < train_windows.size(); pos += options.batch_size, ++batch_index) {
      const std::size_t count = std::min(options.batch_size, train_windows.size() - pos);
      std::vector<std::size_t> batch(train_windows.begin() + static_cast<std::ptrdiff_t>(pos),
                                     train_windows.begin() + static_cast<std::ptrdiff_t>(pos + count));
      Tensor x = dataset.gather_inputs(batch);
      Tensor y = dataset.gather_targets(batch);

      Tape tape;
      ForwardCtx ctx;
      ctx.training = true;
      ctx.dropout_rng = &dropout_rng;
      Tensor pred = model.forward(x, ctx);
      Tensor loss = mae_loss(pred, y);
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(batch_index));
      }
      tape.backward(loss);
      optimizer.step();
      optimizer.zero_grad();
      loss_sum += loss_value * static_cast<double>(count);
      sample_count += count;
    }

    MetricsReport val = evaluate_split(dataset, model, Split::kVal, options.batch_size);
    const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(sample_count);
    entry.val_mae = val.overall.mae;
    entry.val_rmse = val.overall.rmse;
    entry.val_mape = val.overall.mape;
    entry.seconds = elapsed.count();
    result.log.push_back(entry);

    if (val.overall.mae < result.best_val_mae) {
      result.best_val_mae = val.overall.mae;
      result.best_epoch = epoch;
      since_best = 0;
      snapshot();
    } else if (++since_best >= options.patience) {
      result.early_stopped = true;
      break;
    }
  }

  if (!best_values.empty()) restore();
  return result;
}

std::string epoch_log_to_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,train_loss,val_mae,val_rmse,val_mape,seconds\n";
  char buf[192];
  for (const EpochLog& e : log) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.3f\n", e.epoch, e.train_loss,
                  e.val_mae, e.val_rmse, e.val_mape, e.seconds);
    out += buf;
  }
  return out;
}

void write_epoch_log_csv(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write epoch log: " + path);
  out << epoch_log_to_csv(log);
}

}  // namespace pastn
