#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pastn/data.hpp"
#include "pastn/metrics.hpp"
#include "pastn/model.hpp"
#include "pastn/tensor.hpp"

namespace pastn {

// (1/(B*T'*N)) * sum |pred - target| on normalized values; subgradient 0 at
// ties.
Tensor mae_loss(const Tensor& pred, const Tensor& target);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 5.0;  // global gradient norm
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {});

  // Global-norm clip, then the bias-corrected update, in place. Every
  // tracked parameter must carry a gradient.
  void step();
  void zero_grad();
  std::size_t steps_taken() const { return step_; }
  const AdamOptions& options() const { return options_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamOptions options_;
  std::size_t step_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
  double val_mape = 0.0;
  double seconds = 0.0;
};

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::size_t patience = 15;
  AdamOptions adam;
  std::uint64_t seed = 1;
};

struct TrainResult {
  std::vector<EpochLog> log;
  double best_val_mae = 0.0;
  std::size_t best_epoch = 0;  // 1-based
  bool early_stopped = false;
};

// Seeded shuffled minibatches, MAE objective, Adam; evaluates validation
// MAE each epoch in eval mode, keeps the best parameters (restored into the
// model on return) and stops early after `patience` epochs without
// improvement. Throws DivergenceError on a non-finite loss.
TrainResult train_loop(const WindowedDataset& dataset, Model& model, const TrainOptions& options);

enum class Split { kTrain, kVal, kTest };

// Denormalized predictions vs targets over one split; honors PASTN_THREADS
// for batch-parallel eval (default 1).
MetricsReport evaluate_split(const WindowedDataset& dataset, const Model& model, Split split,
                             std::size_t batch_size = 64);

// Persistence forecast metrics over the same split.
MetricsReport evaluate_persistence(const WindowedDataset& dataset, Split split);

std::string epoch_log_to_csv(const std::vector<EpochLog>& log);
void write_epoch_log_csv(const std::string& path, const std::vector<EpochLog>& log);

}  // namespace pastn
