#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "pastn/rng.hpp"
#include "pastn/stlm.hpp"

using namespace pastn;

namespace {

GatedTCNParams random_tcn(std::size_t c_out, std::size_t c_in, std::size_t k,
                          std::size_t dilation, Rng& rng) {
  GatedTCNParams p;
  p.filter_kernel = Tensor::uniform({c_out, c_in, k}, -0.7, 0.7, rng, true);
  p.filter_bias = Tensor::uniform({c_out}, -0.3, 0.3, rng, true);
  p.gate_kernel = Tensor::uniform({c_out, c_in, k}, -0.7, 0.7, rng, true);
  p.gate_bias = Tensor::uniform({c_out}, -0.3, 0.3, rng, true);
  p.dilation = dilation;
  return p;
}

GraphBundle dense_bundle(std::size_t n, Rng& rng, std::uint64_t seed) {
  std::vector<Edge> edges;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v)
      if (u != v) edges.push_back({u, v, rng.uniform(0.2, 1.5)});
  return make_bundle(build_adjacency(edges, n, 1.0, 0.0), 3, seed);
}

DiffusionConvParams random_diffusion(std::size_t depth, std::size_t c, Rng& rng) {
  DiffusionConvParams p;
  p.depth = depth;
  p.weights.resize(depth + 1);
  for (auto& triple : p.weights)
    for (Tensor& t : triple) t = Tensor::uniform({c, c}, -0.5, 0.5, rng, true);
  return p;
}

}  // namespace

TEST_SUITE("stlm") {

TEST_CASE("gated TCN: zero parameters give zero output") {
  GatedTCNParams p;
  p.filter_kernel = Tensor::zeros({2, 2, 2});
  p.filter_bias = Tensor::zeros({2});
  p.gate_kernel = Tensor::zeros({2, 2, 2});
  p.gate_bias = Tensor::zeros({2});
  p.dilation = 1;
  Rng rng(3);
  Tensor x = Tensor::uniform({1, 2, 3, 6}, -1.0, 1.0, rng);
  Tensor y = gated_tcn(x, p);
  REQUIRE(y.shape() == Shape{1, 2, 3, 5});
  for (double v : y.data()) CHECK(v == 0.0);  // tanh(0)*sigmoid(0)
}

TEST_CASE("gated TCN: saturated gate reduces to the tanh branch") {
  Rng rng(5);
  GatedTCNParams p = random_tcn(2, 2, 2, 1, rng);
  p.gate_kernel = Tensor::zeros({2, 2, 2});
  p.gate_bias = Tensor::full({2}, 50.0);  // sigmoid(50) = 1 within 1e-20
  Tensor x = Tensor::uniform({1, 2, 2, 5}, -1.0, 1.0, rng);
  Tensor y = gated_tcn(x, p);
  Tensor filter = add(temporal_conv(x, p.filter_kernel, 1), reshape(p.filter_bias, {1, 2, 1, 1}));
  Tensor want = tanh(filter);
  for (std::size_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-15));
}

TEST_CASE("gated TCN hand case: tanh(0.25) * sigmoid(0)") {
  GatedTCNParams p;
  p.filter_kernel = Tensor::from_data({1, 1, 2}, {1, 0});
  p.filter_bias = Tensor::zeros({1});
  p.gate_kernel = Tensor::from_data({1, 1, 2}, {0, 0});
  p.gate_bias = Tensor::zeros({1});
  p.dilation = 1;
  Tensor x = Tensor::from_data({1, 1, 1, 2}, {0.5, 0.25});
  Tensor y = gated_tcn(x, p);
  REQUIRE(y.numel() == 1);
  CHECK(y.item() == doctest::Approx(std::tanh(0.25) * 0.5).epsilon(1e-15));
}

TEST_CASE("receptive field exceeding T raises a length error") {
  Rng rng(7);
  GatedTCNParams p = random_tcn(2, 2, 2, 4, rng);
  Tensor x = Tensor::uniform({1, 2, 2, 4}, -1.0, 1.0, rng);  // needs T > 4
  CHECK_THROWS_AS(gated_tcn(x, p), ShapeError);
}

TEST_CASE("identity diffusion stack collapses stlm to the gated TCN output") {
  Rng rng(9);
  const std::size_t c = 3, n = 4;
  GraphBundle bundle = dense_bundle(n, rng, 11);
  GatedTCNParams tcn = random_tcn(c, c, 2, 1, rng);
  DiffusionConvParams diff;
  diff.depth = 1;
  diff.weights.resize(2);
  diff.weights[0] = {Tensor::identity(c), Tensor::zeros({c, c}), Tensor::zeros({c, c})};
  diff.weights[1] = {Tensor::zeros({c, c}), Tensor::zeros({c, c}), Tensor::zeros({c, c})};
  // K=0 weights alone mean Z = X * I
  diff.depth = 1;
  Tensor x = Tensor::uniform({2, c, n, 6}, -1.0, 1.0, rng);
  ForwardCtx eval_ctx;
  Tensor got = stlm_forward(x, tcn, diff, bundle, 0.3, eval_ctx);
  Tensor want = gated_tcn(x, tcn);
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.numel(); ++i)
    CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-13));
}

TEST_CASE("zero gated output gives zero module output") {
  Rng rng(13);
  const std::size_t c = 2, n = 3;
  GraphBundle bundle = dense_bundle(n, rng, 17);
  GatedTCNParams tcn;
  tcn.filter_kernel = Tensor::zeros({c, c, 2});
  tcn.filter_bias = Tensor::zeros({c});
  tcn.gate_kernel = Tensor::zeros({c, c, 2});
  tcn.gate_bias = Tensor::zeros({c});
  tcn.dilation = 1;
  DiffusionConvParams diff = random_diffusion(2, c, rng);
  Tensor x = Tensor::uniform({1, c, n, 5}, -1.0, 1.0, rng);
  ForwardCtx eval_ctx;
  Tensor y = stlm_forward(x, tcn, diff, bundle, 0.3, eval_ctx);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("stlm matches a monolithic straight-line oracle") {
  Rng rng(17);
  const std::size_t c = 2, n = 3, t = 3, k = 2;
  GraphBundle bundle = dense_bundle(n, rng, 23);
  GatedTCNParams tcn = random_tcn(c, c, k, 1, rng);
  DiffusionConvParams diff = random_diffusion(1, c, rng);
  Tensor x = Tensor::uniform({1, c, n, t}, -1.0, 1.0, rng);
  ForwardCtx eval_ctx;
  Tensor got = stlm_forward(x, tcn, diff, bundle, 0.3, eval_ctx);

  // Oracle: scalar loops, no module boundaries. Dropout is eval-mode identity.
  const std::size_t t_out = t - (k - 1);
  std::vector<double> h(c * n * t_out);
  for (std::size_t co = 0; co < c; ++co) {
    for (std::size_t node = 0; node < n; ++node) {
      for (std::size_t j = 0; j < t_out; ++j) {
        double filter = tcn.filter_bias.at({co});
        double gate = tcn.gate_bias.at({co});
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t s = 0; s < k; ++s) {
            const double xv = x.at({0, ci, node, j + (k - 1 - s)});
            filter += tcn.filter_kernel.at({co, ci, s}) * xv;
            gate += tcn.gate_kernel.at({co, ci, s}) * xv;
          }
        h[(co * n + node) * t_out + j] =
            std::tanh(filter) * (1.0 / (1.0 + std::exp(-gate)));
      }
    }
  }
  // diffusion at each remaining step via the dense oracle
  for (std::size_t j = 0; j < t_out; ++j) {
    std::vector<double> xt(n * c);
    for (std::size_t node = 0; node < n; ++node)
      for (std::size_t ci = 0; ci < c; ++ci) xt[node * c + ci] = h[(ci * n + node) * t_out + j];
    auto zt = oracles::diffusion_dense_oracle(xt, n, c, bundle, diff.weights, diff.depth);
    for (std::size_t node = 0; node < n; ++node)
      for (std::size_t m = 0; m < c; ++m) {
        const double want = zt[node * c + m];
        CHECK(std::fabs(got.at({0, m, node, j}) - want) < 1e-12);
      }
  }
}

TEST_CASE("temporal causality: future perturbations never reach earlier outputs") {
  Rng rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t c = 2, n = 3, t = 8;
    GraphBundle bundle = dense_bundle(n, rng, 31 + static_cast<std::uint64_t>(trial));
    GatedTCNParams tcn = random_tcn(c, c, 2, 1 + rng.index(2), rng);
    DiffusionConvParams diff = random_diffusion(1, c, rng);
    Tensor x = Tensor::uniform({1, c, n, t}, -1.0, 1.0, rng);
    ForwardCtx eval_ctx;
    Tensor base = stlm_forward(x, tcn, diff, bundle, 0.3, eval_ctx);
    const std::size_t t_out = base.dim(3);
    const std::size_t lag = t - t_out;  // output j reads inputs up to j + lag

    const std::size_t perturb_t = lag + 1 + rng.index(t_out - 1);
    Tensor x2 = x.clone();
    x2.data()[((0 * c + rng.index(c)) * n + rng.index(n)) * t + perturb_t] += 0.5;
    Tensor out2 = stlm_forward(x2, tcn, diff, bundle, 0.3, eval_ctx);
    for (std::size_t m = 0; m < c; ++m)
      for (std::size_t node = 0; node < n; ++node)
        for (std::size_t j = 0; j + lag < perturb_t; ++j)
          CHECK(out2.at({0, m, node, j}) == base.at({0, m, node, j}));
  }
}

TEST_CASE("factorization: TCN is node-local, diffusion is time-local") {
  Rng rng(23);
  const std::size_t c = 2, n = 4, t = 6;
  GatedTCNParams tcn = random_tcn(c, c, 2, 2, rng);
  Tensor x = Tensor::uniform({1, c, n, t}, -1.0, 1.0, rng);
  Tensor base = gated_tcn(x, tcn);

  // perturb node 2: other nodes' TCN outputs must not move
  Tensor x2 = x.clone();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t j = 0; j < t; ++j) x2.data()[((ci)*n + 2) * t + j] += 0.3;
  Tensor moved = gated_tcn(x2, tcn);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t node = 0; node < n; ++node) {
      if (node == 2) continue;
      for (std::size_t j = 0; j < base.dim(3); ++j)
        CHECK(moved.at({0, ci, node, j}) == base.at({0, ci, node, j}));
    }

  // diffusion: perturb time step 3, all other steps' outputs identical
  GraphBundle bundle = dense_bundle(n, rng, 37);
  DiffusionConvParams diff = random_diffusion(2, c, rng);
  Tensor sig = Tensor::uniform({1, c, n, t}, -1.0, 1.0, rng);
  Tensor zbase = diffusion_conv_seq(sig, bundle, diff.weights, diff.depth);
  Tensor sig2 = sig.clone();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t node = 0; node < n; ++node) sig2.data()[((ci)*n + node) * t + 3] -= 0.7;
  Tensor zmoved = diffusion_conv_seq(sig2, bundle, diff.weights, diff.depth);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t node = 0; node < n; ++node)
      for (std::size_t j = 0; j < t; ++j) {
        if (j == 3) continue;
        CHECK(zmoved.at({0, ci, node, j}) == zbase.at({0, ci, node, j}));
      }
}

TEST_CASE("full gradient check through stlm_forward") {
  Rng rng(29);
  const std::size_t c = 2, n = 3, t = 4;
  GraphBundle bundle = dense_bundle(n, rng, 41);
  GatedTCNParams tcn = random_tcn(c, c, 2, 1, rng);
  DiffusionConvParams diff = random_diffusion(1, c, rng);
  Tensor x = Tensor::uniform({1, c, n, t}, -1.0, 1.0, rng);

  std::vector<Tensor> leaves = {x,
                                tcn.filter_kernel,
                                tcn.filter_bias,
                                tcn.gate_kernel,
                                tcn.gate_bias,
                                bundle.e1,
                                bundle.e2};
  for (auto& triple : diff.weights)
    for (Tensor& w : triple) leaves.push_back(w);

  ForwardCtx eval_ctx;
  auto fd = oracles::check_gradients(
      [&]() { return mean(tanh(stlm_forward(x, tcn, diff, bundle, 0.3, eval_ctx))); }, leaves);
  CHECK(fd.max_rel_err < 1e-4);
}

}  // TEST_SUITE
