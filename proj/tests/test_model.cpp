#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "oracles.hpp"
#include "pastn/data.hpp"
#include "pastn/model.hpp"
#include "pastn/rng.hpp"

using namespace pastn;

namespace {

GraphBundle test_bundle(std::size_t n, std::uint64_t seed, std::size_t embed_dim = 10) {
  Rng rng(seed);
  std::vector<Edge> edges;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v)
      if (u != v && rng.uniform() < 0.7) edges.push_back({u, v, rng.uniform(0.1, 1.0)});
  return make_bundle(build_adjacency(edges, n, 0.5, 0.0), embed_dim, seed);
}

ModelConfig tiny_config(std::size_t nodes = 5) {
  ModelConfig c;
  c.layers = 4;
  c.channels = 8;
  c.diffusion_depth = 1;
  c.heads = 2;
  c.nodes = nodes;
  return c;
}

Tensor random_input(const ModelConfig& c, std::size_t batch, Rng& rng) {
  return Tensor::uniform({batch, c.t_in, c.nodes, c.d_feat}, -1.0, 1.0, rng);
}

void zero_all_parameters(Model& model) {
  for (auto& [name, t] : model.named_parameters()) {
    auto d = t.data();
    std::fill(d.begin(), d.end(), 0.0);
  }
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("shape contract holds across the full search grid") {
  const std::size_t n = 4, batch = 2;
  for (std::size_t layers : {4, 6, 8})
    for (std::size_t channels : {16, 24, 32})
      for (std::size_t depth : {1, 2, 3})
        for (std::size_t heads : {2, 4, 8}) {
          ModelConfig c;
          c.layers = layers;
          c.channels = channels;
          c.diffusion_depth = depth;
          c.heads = heads;
          c.nodes = n;
          Model model(c, test_bundle(n, 1), 7);
          Rng rng(layers * 1000 + channels * 10 + heads);
          ForwardCtx ctx;
          Tensor y = model.forward(random_input(c, batch, rng), ctx);
          REQUIRE(y.shape() == Shape{batch, 12, n, 1});
        }
}

TEST_CASE("dilations alternate 1,2 starting at 1 and set the receptive field") {
  ModelConfig c = tiny_config();
  auto d = c.dilations();
  REQUIRE(d.size() == 4);
  CHECK(d == std::vector<std::size_t>{1, 2, 1, 2});
  CHECK(c.receptive_field() == 7);  // 1 + (1+2+1+2)*(k-1)

  ModelConfig c8 = paper_best_config(5);
  CHECK(c8.receptive_field() == 13);
}

TEST_CASE("config validation rejects impossible settings") {
  ModelConfig c = tiny_config();
  c.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ModelConfig k = tiny_config();
  k.diffusion_depth = 4;
  CHECK_THROWS_AS(k.validate(), ConfigError);
  ModelConfig z = tiny_config();
  z.layers = 0;
  CHECK_THROWS_AS(z.validate(), ConfigError);
}

TEST_CASE("zeroed network with output-head bias is constant") {
  ModelConfig c = tiny_config();
  Model model(c, test_bundle(c.nodes, 3), 11);
  zero_all_parameters(model);
  auto h2b = model.params().head2_b.data();
  for (std::size_t t = 0; t < h2b.size(); ++t) h2b[t] = 0.5 + static_cast<double>(t);

  Rng rng(13);
  ForwardCtx ctx;
  Tensor y = model.forward(random_input(c, 2, rng), ctx);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 12; ++t)
      for (std::size_t n = 0; n < c.nodes; ++n)
        CHECK(y.at({b, t, n, 0}) == doctest::Approx(0.5 + t).epsilon(1e-15));
}

TEST_CASE("parameter count matches the closed-form expectation") {
  for (const ModelConfig& c :
       {tiny_config(), default_config(9), paper_best_config(6)}) {
    Model model(c, test_bundle(c.nodes, 5, c.embed_dim), 3);
    CHECK(model.parameter_count() == Model::expected_parameter_count(c));
  }
}

TEST_CASE("ablation flags: identity, implication, contradictions") {
  ModelConfig c = tiny_config();
  ModelConfig same = ablation_variant(c, {});
  CHECK(same.ablation == AblationFlags{});

  ModelConfig st = ablation_variant(c, {.st_only = true});
  CHECK(st.ablation.no_spae);
  CHECK(st.ablation.no_tpam);

  // st_only == composing no_spae + no_tpam: identical parameter counts
  ModelConfig both = ablation_variant(c, {.no_spae = true, .no_tpam = true});
  CHECK(Model::expected_parameter_count(st) == Model::expected_parameter_count(both));

  CHECK_THROWS_AS(ablation_variant(c, {.no_spae = true, .spae_frozen = true}), ConfigError);
  CHECK_THROWS_AS(ablation_variant(c, {.st_only = true, .spae_random_init = true}), ConfigError);
  CHECK_THROWS_AS(ablation_variant(c, {.spae_random_init = true, .spae_frozen = true}),
                  ConfigError);
}

TEST_CASE("removing TPAM drops exactly the TPAM parameter total") {
  ModelConfig c = tiny_config();
  ModelConfig no_tpam = ablation_variant(c, {.no_tpam = true});
  const std::size_t full = Model::expected_parameter_count(c);
  const std::size_t reduced = Model::expected_parameter_count(no_tpam);
  // per layer: W_Q, W_K, W_V, W_O plus the layer-norm affine
  const std::size_t tpam_total = c.layers * (4 * c.channels * c.channels + 2 * c.channels);
  CHECK(full - reduced == tpam_total);

  Model m_full(c, test_bundle(c.nodes, 7), 5);
  Model m_reduced(no_tpam, test_bundle(c.nodes, 7), 5);
  CHECK(m_full.parameter_count() - m_reduced.parameter_count() == tpam_total);
}

TEST_CASE("no_tpam model equals a hand-assembled network without attention") {
  ModelConfig c = tiny_config();
  ModelConfig cfg = ablation_variant(c, {.no_tpam = true});
  Model model(cfg, test_bundle(c.nodes, 9), 17);
  Rng rng(19);
  Tensor x = random_input(cfg, 2, rng);
  ForwardCtx ctx;
  Tensor got = model.forward(x, ctx);

  // hand assembly from the same parameters and public pieces
  const ModelParams& p = model.params();
  Tensor h = model.input_hidden(x);
  h = apply_spae(h, p.spae);
  Tensor skip_sum;
  for (const StLayerParams& layer : p.layers) {
    Tensor residual = h;
    const std::size_t t_before = h.dim(3);
    h = stlm_forward(h, layer.tcn, layer.diffusion, model.bundle(), cfg.dropout, ctx);
    Tensor tail = slice(h, 3, h.dim(3) - 1, 1);
    Tensor s = conv1x1(tail, layer.skip_w, layer.skip_b);
    skip_sum = skip_sum.defined() ? add(skip_sum, s) : s;
    h = add(h, slice(residual, 3, t_before - h.dim(3), h.dim(3)));
  }
  Tensor out = relu(skip_sum);
  out = relu(conv1x1(out, p.head1_w, p.head1_b));
  out = conv1x1(out, p.head2_w, p.head2_b);
  Tensor want = reshape(out, {2, cfg.t_out, cfg.nodes, 1});

  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == want.data()[i]);
}

TEST_CASE("no_spae model equals the full model with a zeroed frozen table") {
  ModelConfig c = tiny_config();
  Model full(c, test_bundle(c.nodes, 11), 23);
  {
    auto table = full.params().spae.table.data();
    std::fill(table.begin(), table.end(), 0.0);
    full.params().spae.set_frozen(true);
  }
  ModelConfig cfg = ablation_variant(c, {.no_spae = true});
  Model reduced(cfg, test_bundle(c.nodes, 11), 23);
  reduced.copy_shared_parameters_from(full);

  Rng rng(29);
  Tensor x = random_input(c, 2, rng);
  ForwardCtx ctx;
  Tensor a = full.forward(x, ctx);
  Tensor b = reduced.forward(x, ctx);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("eval forward is deterministic; train mode is seeded-deterministic") {
  ModelConfig c = tiny_config();
  Model model(c, test_bundle(c.nodes, 13), 31);
  Rng rng(37);
  Tensor x = random_input(c, 2, rng);

  ForwardCtx eval_ctx;
  Tensor y1 = model.forward(x, eval_ctx);
  Tensor y2 = model.forward(x, eval_ctx);
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);

  auto train_once = [&]() {
    Rng dropout_rng = Rng::derive(7, "dropout");
    ForwardCtx ctx;
    ctx.training = true;
    ctx.dropout_rng = &dropout_rng;
    return model.forward(x, ctx);
  };
  Tensor t1 = train_once();
  Tensor t2 = train_once();
  bool differs_from_eval = false;
  for (std::size_t i = 0; i < t1.numel(); ++i) {
    CHECK(t1.data()[i] == t2.data()[i]);
    differs_from_eval = differs_from_eval || t1.data()[i] != y1.data()[i];
  }
  CHECK(differs_from_eval);  // dropout actually fired
}

TEST_CASE("full tiny-config gradient check against finite differences") {
  ModelConfig c = tiny_config();
  c.dropout = 0.0;
  Model model(c, test_bundle(c.nodes, 17), 41);
  Rng rng(43);
  Tensor x = random_input(c, 2, rng);
  Tensor target = Tensor::uniform({2, c.t_out, c.nodes, 1}, -1.0, 1.0, rng);

  std::vector<Tensor> leaves;
  for (auto& [name, t] : model.named_parameters()) leaves.push_back(t);
  ForwardCtx ctx;
  auto fd = oracles::check_gradients(
      [&]() { return mean(abs(sub(model.forward(x, ctx), target))); }, leaves, 1e-5,
      /*stride=*/17);  // spot-check across every tensor; acceptance covers all coords
  CHECK(fd.max_rel_err < 1e-4);
}

TEST_CASE("checkpoint round trip is bit-exact and reproduces outputs") {
  ModelConfig c = tiny_config();
  c.ablation.spae_frozen = true;  // exercise frozen-flag persistence
  Model model(c, test_bundle(c.nodes, 19), 47);
  const std::string path = "/tmp/pastn_test_checkpoint.bin";
  model.save_checkpoint(path, 123.5, 17.25);

  LoadedModel loaded = Model::load_checkpoint(path, test_bundle(c.nodes, 19));
  CHECK(loaded.scaler_mean == 123.5);
  CHECK(loaded.scaler_std == 17.25);
  CHECK(loaded.model.params().spae.frozen);

  auto a = model.named_parameters();
  auto b = loaded.model.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    REQUIRE(a[i].second.numel() == b[i].second.numel());
    for (std::size_t k = 0; k < a[i].second.numel(); ++k)
      CHECK(a[i].second.data()[k] == b[i].second.data()[k]);
  }

  Rng rng(53);
  Tensor x = random_input(c, 1, rng);
  ForwardCtx ctx;
  Tensor y1 = model.forward(x, ctx);
  Tensor y2 = loaded.model.forward(x, ctx);
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);

  // a second save produces byte-identical files
  const std::string path2 = "/tmp/pastn_test_checkpoint2.bin";
  loaded.model.save_checkpoint(path2, 123.5, 17.25);
  std::FILE* f1 = std::fopen(path.c_str(), "rb");
  std::FILE* f2 = std::fopen(path2.c_str(), "rb");
  REQUIRE(f1);
  REQUIRE(f2);
  int ch1, ch2;
  do {
    ch1 = std::fgetc(f1);
    ch2 = std::fgetc(f2);
    CHECK(ch1 == ch2);
  } while (ch1 != EOF && ch2 != EOF);
  std::fclose(f1);
  std::fclose(f2);
}

TEST_CASE("predict: zeroed network forecasts the training mean; deterministic") {
  ModelConfig c = tiny_config();
  Model model(c, test_bundle(c.nodes, 23), 59);
  zero_all_parameters(model);
  const double mean_flow = 240.0, std_flow = 35.0;

  Tensor history = Tensor::zeros({c.t_in, c.nodes, c.d_feat});  // normalized mean = 0
  Tensor forecast = predict(history, model, mean_flow, std_flow);
  REQUIRE(forecast.shape() == Shape{c.t_out, c.nodes});
  for (double v : forecast.data()) CHECK(v == mean_flow);

  Model m2(c, test_bundle(c.nodes, 23), 61);
  Rng rng(67);
  Tensor h2 = Tensor::uniform({c.t_in, c.nodes, c.d_feat}, -1.0, 1.0, rng);
  Tensor f1 = predict(h2, m2, mean_flow, std_flow);
  Tensor f2 = predict(h2, m2, mean_flow, std_flow);
  for (std::size_t i = 0; i < f1.numel(); ++i) CHECK(f1.data()[i] == f2.data()[i]);

  Tensor wrong_nodes = Tensor::zeros({c.t_in, c.nodes + 1, c.d_feat});
  CHECK_THROWS_AS(predict(wrong_nodes, m2, mean_flow, std_flow), ConfigError);
}

TEST_CASE("config JSON round trip is canonical") {
  ModelConfig c = paper_best_config(33);
  c.ablation.spae_frozen = true;
  const std::string once = config_to_json(c);
  ModelConfig back = config_from_json(once);
  CHECK(config_to_json(back) == once);
  CHECK(back.layers == 8);
  CHECK(back.nodes == 33);
  CHECK(back.ablation.spae_frozen);
}

}  // TEST_SUITE
