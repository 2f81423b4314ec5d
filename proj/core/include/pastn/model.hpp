#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pastn/context.hpp"
#include "pastn/graph.hpp"
#include "pastn/spae.hpp"
#include "pastn/stlm.hpp"
#include "pastn/tensor.hpp"
#include "pastn/tpam.hpp"

namespace pastn {

struct AblationFlags {
  bool no_spae = false;
  bool no_tpam = false;
  bool st_only = false;
  bool spae_random_init = false;
  bool spae_frozen = false;

  // Applies st_only's implications and rejects contradictory combinations.
  AblationFlags normalized() const;
  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  std::size_t layers = 4;            // L
  std::size_t channels = 16;         // C, residual width (= d_model)
  std::size_t diffusion_depth = 2;   // K
  std::size_t heads = 4;             // H
  std::size_t t_in = 12;
  std::size_t t_out = 12;
  std::size_t d_feat = 3;
  std::size_t nodes = 0;             // N
  std::size_t kernel = 2;            // TCN kernel size
  std::size_t embed_dim = 10;        // d_e of the adaptive-adjacency factors
  double dropout = 0.3;
  AblationFlags ablation;

  std::size_t skip_channels() const { return 2 * channels; }
  std::size_t head_hidden() const { return 4 * channels; }
  // 1, 2, 1, 2, ... of length L.
  std::vector<std::size_t> dilations() const;
  std::size_t receptive_field() const;
  void validate() const;
};

// The paper-best preset sits at the upper bound of the searched grid.
ModelConfig default_config(std::size_t nodes);
ModelConfig paper_best_config(std::size_t nodes);

// Returns a copy of `config` with exactly the named components removed or
// altered; everything else is untouched so comparisons stay controlled.
ModelConfig ablation_variant(const ModelConfig& config, const AblationFlags& flags);

struct StLayerParams {
  GatedTCNParams tcn;
  DiffusionConvParams diffusion;
  TPAMParams tpam;  // tensors undefined under no_tpam
  Tensor skip_w, skip_b;
};

struct ModelParams {
  Tensor input_w, input_b;  // 1x1 projection D_feat -> C
  SPAETable spae;           // table undefined under no_spae
  std::vector<StLayerParams> layers;
  Tensor head1_w, head1_b;  // C_skip -> 4C
  Tensor head2_w, head2_b;  // 4C -> T'
};

struct LoadedModel;

class Model {
 public:
  // Seeded construction; the bundle carries the learnable adaptive factors.
  Model(ModelConfig config, GraphBundle bundle, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  GraphBundle& bundle() { return bundle_; }
  const GraphBundle& bundle() const { return bundle_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  // x: [B, T, N, D_feat] normalized -> [B, T', N, 1] normalized.
  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const;

  // The hidden representation right after the input projection (before the
  // positional table is added): [B, C, N, T0]. Feeds the dispersion
  // diagnostic's before/after comparison.
  Tensor input_hidden(const Tensor& x) const;

  // All tensors in checkpoint declaration order, frozen ones included.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> trainable_parameters() const;
  std::size_t parameter_count() const;
  static std::size_t expected_parameter_count(const ModelConfig& config);

  void save_checkpoint(const std::string& path, double scaler_mean, double scaler_std) const;
  static LoadedModel load_checkpoint(const std::string& path, GraphBundle bundle);

  // Copies values from another model with an identical parameter layout.
  void copy_parameters_from(const Model& other);
  // Copies every parameter present in both models (by name), skipping the rest.
  void copy_shared_parameters_from(const Model& other);

 private:
  Model(ModelConfig config, GraphBundle bundle);  // uninitialized params
  ModelConfig config_;
  GraphBundle bundle_;
  ModelParams params_;
};

struct LoadedModel {
  Model model;
  double scaler_mean = 0.0;
  double scaler_std = 1.0;
};

// Forecast in original units: eval-mode forward then inverse z-score of the
// flow channel. history is [T, N, D_feat], already normalized.
Tensor predict(const Tensor& history, const Model& model, double scaler_mean, double scaler_std);

// JSON round-trip for configs (canonical key order), shared by checkpoints
// and the CLI's effective-config echo.
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

}  // namespace pastn
