#include "pastn/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "pastn/rng.hpp"

namespace pastn {

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'A', 'S', 'T', 'N', 'C', 'K', '1'};

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), -bound, bound, rng, true);
}

}  // namespace

AblationFlags AblationFlags::normalized() const {
  AblationFlags f = *this;
  if (f.st_only) {
    f.no_spae = true;
    f.no_tpam = true;
  }
  if (f.no_spae && (f.spae_random_init || f.spae_frozen)) {
    throw ConfigError("ablation: SPAE is removed but an SPAE variant flag is set");
  }
  if (f.spae_random_init && f.spae_frozen) {
    // Frozen-random is a legal combination in principle, but the study keeps
    // one factor per variant; reject so variants stay controlled.
    throw ConfigError("ablation: spae_random_init and spae_frozen are mutually exclusive");
  }
  return f;
}

std::vector<std::size_t> ModelConfig::dilations() const {
  std::vector<std::size_t> d(layers);
  for (std::size_t i = 0; i < layers; ++i) d[i] = (i % 2 == 0) ? 1 : 2;
  return d;
}

std::size_t ModelConfig::receptive_field() const {
  std::size_t r = 1;
  for (std::size_t d : dilations()) r += d * (kernel - 1);
  return r;
}

void ModelConfig::validate() const {
  if (layers == 0) throw ConfigError("config: at least one ST-layer required");
  if (channels == 0 || heads == 0 || nodes == 0 || d_feat == 0 || t_in == 0 || t_out == 0) {
    throw ConfigError("config: extents must be positive");
  }
  if (kernel < 1) throw ConfigError("config: kernel must be >= 1");
  if (diffusion_depth < 1 || diffusion_depth > 3) {
    throw ConfigError("config: diffusion depth must lie in {1,2,3}, got " +
                      std::to_string(diffusion_depth));
  }
  if (channels % heads != 0) {
    throw ConfigError("config: channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("config: dropout must lie in [0,1)");
  // Every layer must keep at least one time step. The input is left-padded
  // to the receptive field, so with T0 = max(t_in, R) the stack always ends
  // at T0 - (R - 1) >= 1; reject only genuinely impossible geometries.
  std::size_t len = std::max(t_in, receptive_field());
  const auto dils = dilations();
  for (std::size_t l = 0; l < dils.size(); ++l) {
    const std::size_t consume = dils[l] * (kernel - 1);
    if (len <= consume) {
      throw ConfigError("config: receptive field leaves no time steps at layer " +
                        std::to_string(l));
    }
    len -= consume;
  }
  ablation.normalized();  // throws on contradictions
}

ModelConfig default_config(std::size_t nodes) {
  ModelConfig c;
  c.nodes = nodes;
  return c;
}

ModelConfig paper_best_config(std::size_t nodes) {
  ModelConfig c;
  c.layers = 8;
  c.channels = 32;
  c.diffusion_depth = 3;
  c.heads = 8;
  c.nodes = nodes;
  return c;
}

ModelConfig ablation_variant(const ModelConfig& config, const AblationFlags& flags) {
  ModelConfig out = config;
  out.ablation = flags.normalized();
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Construction

Model::Model(ModelConfig config, GraphBundle bundle)
    : config_(std::move(config)), bundle_(std::move(bundle)) {
  config_.validate();
  config_.ablation = config_.ablation.normalized();
  if (bundle_.nodes != config_.nodes) {
    throw ConfigError("model: graph has " + std::to_string(bundle_.nodes) +
                      " nodes but config expects " + std::to_string(config_.nodes));
  }
}

Model::Model(ModelConfig config, GraphBundle bundle, std::uint64_t seed)
    : Model(std::move(config), std::move(bundle)) {
  Rng rng = Rng::derive(seed, "model/init");
  const std::size_t c = config_.channels;
  const std::size_t k = config_.kernel;

  params_.input_w = fan_in_uniform({c, config_.d_feat}, config_.d_feat, rng);
  params_.input_b = Tensor::zeros({c}, true);

  if (!config_.ablation.no_spae) {
    params_.spae = init_spae(config_.nodes, c,
                             config_.ablation.spae_random_init ? SpaeInit::kRandom
                                                               : SpaeInit::kSinusoidal,
                             seed);
    params_.spae.set_frozen(config_.ablation.spae_frozen);
  }

  const auto dils = config_.dilations();
  params_.layers.resize(config_.layers);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    StLayerParams& layer = params_.layers[l];
    layer.tcn.filter_kernel = fan_in_uniform({c, c, k}, c * k, rng);
    layer.tcn.filter_bias = Tensor::zeros({c}, true);
    layer.tcn.gate_kernel = fan_in_uniform({c, c, k}, c * k, rng);
    layer.tcn.gate_bias = Tensor::zeros({c}, true);
    layer.tcn.dilation = dils[l];

    layer.diffusion.depth = config_.diffusion_depth;
    layer.diffusion.weights.resize(config_.diffusion_depth + 1);
    for (auto& triple : layer.diffusion.weights)
      for (Tensor& w : triple) w = fan_in_uniform({c, c}, c, rng);

    if (!config_.ablation.no_tpam) {
      layer.tpam.w_query = fan_in_uniform({c, c}, c, rng);
      layer.tpam.w_key = fan_in_uniform({c, c}, c, rng);
      layer.tpam.w_value = fan_in_uniform({c, c}, c, rng);
      layer.tpam.w_out = fan_in_uniform({c, c}, c, rng);
      layer.tpam.ln_gamma = Tensor::full({c}, 1.0, true);
      layer.tpam.ln_beta = Tensor::zeros({c}, true);
      layer.tpam.heads = config_.heads;
    }

    layer.skip_w = fan_in_uniform({config_.skip_channels(), c}, c, rng);
    layer.skip_b = Tensor::zeros({config_.skip_channels()}, true);
  }

  params_.head1_w = fan_in_uniform({config_.head_hidden(), config_.skip_channels()},
                                   config_.skip_channels(), rng);
  params_.head1_b = Tensor::zeros({config_.head_hidden()}, true);
  params_.head2_w = fan_in_uniform({config_.t_out, config_.head_hidden()},
                                   config_.head_hidden(), rng);
  params_.head2_b = Tensor::zeros({config_.t_out}, true);
}

// ---------------------------------------------------------------------------
// Forward

Tensor Model::input_hidden(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.t_in || x.dim(2) != config_.nodes ||
      x.dim(3) != config_.d_feat) {
    throw ShapeError("forward: expected [B," + std::to_string(config_.t_in) + "," +
                     std::to_string(config_.nodes) + "," + std::to_string(config_.d_feat) +
                     "], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  Tensor h = permute(x, {0, 3, 2, 1});  // [B, D_feat, N, T]
  const std::size_t receptive = config_.receptive_field();
  if (config_.t_in < receptive) {
    Tensor pad = Tensor::zeros({batch, config_.d_feat, config_.nodes, receptive - config_.t_in});
    h = concat({pad, h}, 3);
  }
  return conv1x1(h, params_.input_w, params_.input_b);
}

Tensor Model::forward(const Tensor& x, const ForwardCtx& ctx) const {
  Tensor h = input_hidden(x);
  const std::size_t batch = h.dim(0);
  if (!config_.ablation.no_spae) h = apply_spae(h, params_.spae);

  Tensor skip_sum;
  const std::size_t last = config_.layers - 1;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const StLayerParams& layer = params_.layers[l];
    Tensor residual = h;
    const std::size_t t_before = h.dim(3);
    const std::size_t consume = layer.tcn.dilation * (config_.kernel - 1);
    if (t_before <= consume) {
      throw ShapeError("forward: layer " + std::to_string(l) + " receptive field exceeds its " +
                       std::to_string(t_before) + " remaining time steps");
    }
    h = stlm_forward(h, layer.tcn, layer.diffusion, bundle_, config_.dropout, ctx);
    if (!config_.ablation.no_tpam) {
      AttentionSink* sink = (l == last) ? ctx.attention : nullptr;
      h = tpam_forward(h, layer.tpam, sink);
    }
    // Skip path: the layer output at the final-length crop (here the last
    // remaining step), projected to the skip width.
    Tensor tail = slice(h, 3, h.dim(3) - 1, 1);
    Tensor s = conv1x1(tail, layer.skip_w, layer.skip_b);
    skip_sum = skip_sum.defined() ? add(skip_sum, s) : s;
    // Residual around the whole ST-layer, input cropped to match.
    h = add(h, slice(residual, 3, t_before - h.dim(3), h.dim(3)));
  }

  Tensor out = relu(skip_sum);
  out = relu(conv1x1(out, params_.head1_w, params_.head1_b));
  out = conv1x1(out, params_.head2_w, params_.head2_b);  // [B, T', N, 1]
  return reshape(out, {batch, config_.t_out, config_.nodes, 1});
}

// ---------------------------------------------------------------------------
// Parameter enumeration

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("input.weight", params_.input_w);
  out.emplace_back("input.bias", params_.input_b);
  if (!config_.ablation.no_spae) out.emplace_back("spae.table", params_.spae.table);
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    const StLayerParams& layer = params_.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "tcn.filter_kernel", layer.tcn.filter_kernel);
    out.emplace_back(p + "tcn.filter_bias", layer.tcn.filter_bias);
    out.emplace_back(p + "tcn.gate_kernel", layer.tcn.gate_kernel);
    out.emplace_back(p + "tcn.gate_bias", layer.tcn.gate_bias);
    for (std::size_t k = 0; k < layer.diffusion.weights.size(); ++k) {
      const std::string q = p + "diffusion.k" + std::to_string(k) + ".";
      out.emplace_back(q + "forward", layer.diffusion.weights[k][0]);
      out.emplace_back(q + "backward", layer.diffusion.weights[k][1]);
      out.emplace_back(q + "adaptive", layer.diffusion.weights[k][2]);
    }
    if (!config_.ablation.no_tpam) {
      out.emplace_back(p + "tpam.w_query", layer.tpam.w_query);
      out.emplace_back(p + "tpam.w_key", layer.tpam.w_key);
      out.emplace_back(p + "tpam.w_value", layer.tpam.w_value);
      out.emplace_back(p + "tpam.w_out", layer.tpam.w_out);
      out.emplace_back(p + "tpam.ln_gamma", layer.tpam.ln_gamma);
      out.emplace_back(p + "tpam.ln_beta", layer.tpam.ln_beta);
    }
    out.emplace_back(p + "skip.weight", layer.skip_w);
    out.emplace_back(p + "skip.bias", layer.skip_b);
  }
  out.emplace_back("head1.weight", params_.head1_w);
  out.emplace_back("head1.bias", params_.head1_b);
  out.emplace_back("head2.weight", params_.head2_w);
  out.emplace_back("head2.bias", params_.head2_b);
  out.emplace_back("graph.e1", bundle_.e1);
  out.emplace_back("graph.e2", bundle_.e2);
  return out;
}

std::vector<Tensor> Model::trainable_parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters())
    if (t.requires_grad()) out.push_back(t);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (auto& [name, t] : named_parameters()) total += t.numel();
  return total;
}

std::size_t Model::expected_parameter_count(const ModelConfig& config) {
  const std::size_t c = config.channels;
  const AblationFlags flags = config.ablation.normalized();
  std::size_t total = c * config.d_feat + c;  // input projection
  if (!flags.no_spae) total += config.nodes * c;
  std::size_t per_layer = 2 * (c * c * config.kernel + c);           // gated TCN
  per_layer += 3 * (config.diffusion_depth + 1) * c * c;             // diffusion weights
  if (!flags.no_tpam) per_layer += 4 * c * c + 2 * c;                // attention + layer norm
  per_layer += config.skip_channels() * c + config.skip_channels();  // skip projection
  total += config.layers * per_layer;
  total += config.head_hidden() * config.skip_channels() + config.head_hidden();
  total += config.t_out * config.head_hidden() + config.t_out;
  total += 2 * config.nodes * config.embed_dim;  // adaptive-adjacency factors
  return total;
}

void Model::copy_parameters_from(const Model& other) {
  auto dst = named_parameters();
  auto src = other.named_parameters();
  if (dst.size() != src.size()) {
    throw ContractError("copy_parameters_from: parameter layout mismatch");
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].first != src[i].first || dst[i].second.numel() != src[i].second.numel()) {
      throw ContractError("copy_parameters_from: mismatch at " + dst[i].first);
    }
    auto d = dst[i].second.data();
    auto s = src[i].second.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

void Model::copy_shared_parameters_from(const Model& other) {
  auto dst = named_parameters();
  for (auto& [name, t] : dst) {
    for (auto& [oname, ot] : other.named_parameters()) {
      if (oname == name && ot.numel() == t.numel()) {
        auto d = t.data();
        auto s = ot.data();
        std::copy(s.begin(), s.end(), d.begin());
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Config JSON

std::string config_to_json(const ModelConfig& config) {
  nlohmann::json j;
  j["channels"] = config.channels;
  j["d_feat"] = config.d_feat;
  j["diffusion_depth"] = config.diffusion_depth;
  j["dropout"] = config.dropout;
  j["embed_dim"] = config.embed_dim;
  j["heads"] = config.heads;
  j["kernel"] = config.kernel;
  j["layers"] = config.layers;
  j["nodes"] = config.nodes;
  j["t_in"] = config.t_in;
  j["t_out"] = config.t_out;
  j["ablation"] = {{"no_spae", config.ablation.no_spae},
                   {"no_tpam", config.ablation.no_tpam},
                   {"st_only", config.ablation.st_only},
                   {"spae_random_init", config.ablation.spae_random_init},
                   {"spae_frozen", config.ablation.spae_frozen}};
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ModelConfig c;
  c.channels = j.at("channels").get<std::size_t>();
  c.d_feat = j.at("d_feat").get<std::size_t>();
  c.diffusion_depth = j.at("diffusion_depth").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.kernel = j.at("kernel").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.nodes = j.at("nodes").get<std::size_t>();
  c.t_in = j.at("t_in").get<std::size_t>();
  c.t_out = j.at("t_out").get<std::size_t>();
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    c.ablation.no_spae = a.value("no_spae", false);
    c.ablation.no_tpam = a.value("no_tpam", false);
    c.ablation.st_only = a.value("st_only", false);
    c.ablation.spae_random_init = a.value("spae_random_init", false);
    c.ablation.spae_frozen = a.value("spae_frozen", false);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: magic, config JSON segment, then every parameter tensor in
// declaration order as little-endian doubles prefixed by its shape.

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(out, bits);
}

double read_f64(std::istream& in) {
  std::uint64_t bits = read_u64(in);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void Model::save_checkpoint(const std::string& path, double scaler_mean,
                            double scaler_std) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));

  nlohmann::json j;
  j["config"] = nlohmann::json::parse(config_to_json(config_));
  j["scaler"] = {{"mean", scaler_mean}, {"std", scaler_std}};
  j["spae_frozen"] = config_.ablation.no_spae ? false : params_.spae.frozen;
  const std::string header = j.dump();
  write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  for (auto& [name, t] : named_parameters()) {
    write_u64(out, t.rank());
    for (std::size_t d = 0; d < t.rank(); ++d) write_u64(out, t.dim(d));
    for (double v : t.data()) write_f64(out, v);
  }
  if (!out) throw DataError("checkpoint write failed: " + path);
}

LoadedModel Model::load_checkpoint(const std::string& path, GraphBundle bundle) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatError(path + ": not a PASTN checkpoint");
  }
  const std::uint64_t header_len = read_u64(in);
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  nlohmann::json j = nlohmann::json::parse(header);
  ModelConfig config = config_from_json(j.at("config").dump());

  Model model(config, std::move(bundle), /*seed=*/0);
  if (!config.ablation.no_spae) model.params_.spae.set_frozen(j.value("spae_frozen", false));

  for (auto& [name, t] : model.named_parameters()) {
    const std::uint64_t rank = read_u64(in);
    if (rank != t.rank()) throw FormatError(path + ": rank mismatch for " + name);
    std::size_t count = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const std::uint64_t extent = read_u64(in);
      if (extent != t.dim(d)) throw FormatError(path + ": shape mismatch for " + name);
      count *= extent;
    }
    auto dst = t.data();
    for (std::size_t i = 0; i < count; ++i) dst[i] = read_f64(in);
    if (!in) throw FormatError(path + ": truncated tensor data at " + name);
  }
  return LoadedModel{std::move(model), j.at("scaler").at("mean").get<double>(),
                j.at("scaler").at("std").get<double>()};
}

Tensor predict(const Tensor& history, const Model& model, double scaler_mean,
               double scaler_std) {
  if (history.rank() != 3) {
    throw ShapeError("predict: expected [T,N,D_feat] history, got " + shape_str(history.shape()));
  }
  if (history.dim(1) != model.config().nodes) {
    throw ConfigError("predict: history has " + std::to_string(history.dim(1)) +
                      " nodes, model expects " + std::to_string(model.config().nodes));
  }
  Tensor x = reshape(history, {1, history.dim(0), history.dim(1), history.dim(2)});
  ForwardCtx ctx;  // eval mode
  Tensor y = model.forward(x, ctx);
  Tensor flat = reshape(y, {model.config().t_out, model.config().nodes});
  Tensor out = Tensor::zeros({model.config().t_out, model.config().nodes});
  auto src = flat.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) dst[i] = src[i] * scaler_std + scaler_mean;
  return out;
}

}  // namespace pastn
