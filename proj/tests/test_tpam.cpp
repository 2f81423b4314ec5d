#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "pastn/rng.hpp"
#include "pastn/tpam.hpp"

using namespace pastn;

namespace {

TPAMParams random_tpam(std::size_t d_model, std::size_t heads, Rng& rng) {
  TPAMParams p;
  p.w_query = Tensor::uniform({d_model, d_model}, -0.6, 0.6, rng, true);
  p.w_key = Tensor::uniform({d_model, d_model}, -0.6, 0.6, rng, true);
  p.w_value = Tensor::uniform({d_model, d_model}, -0.6, 0.6, rng, true);
  p.w_out = Tensor::uniform({d_model, d_model}, -0.6, 0.6, rng, true);
  p.ln_gamma = Tensor::full({d_model}, 1.0, true);
  p.ln_beta = Tensor::zeros({d_model}, true);
  p.heads = heads;
  return p;
}

}  // namespace

TEST_SUITE("tpam") {

TEST_CASE("qkv projection: zero input, identity weight, matmul oracle") {
  Rng rng(3);
  TPAMParams p = random_tpam(3, 1, rng);
  auto [q0, k0, v0] = qkv_project(Tensor::zeros({4, 3}), p);
  for (const Tensor* t : {&q0, &k0, &v0})
    for (double v : t->data()) CHECK(v == 0.0);

  TPAMParams ident = random_tpam(3, 1, rng);
  ident.w_query = Tensor::identity(3);
  Tensor x = Tensor::uniform({4, 3}, -1.0, 1.0, rng);
  auto [qi, ki, vi] = qkv_project(x, ident);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(qi.data()[i] == x.data()[i]);

  auto [q, k, v] = qkv_project(x, p);
  Tensor want = matmul(x, p.w_query);
  for (std::size_t i = 0; i < q.numel(); ++i) CHECK(q.data()[i] == want.data()[i]);
}

TEST_CASE("attention with T=1 passes V through W_O") {
  Rng rng(5);
  TPAMParams p = random_tpam(4, 2, rng);
  Tensor q = Tensor::uniform({1, 4}, -1.0, 1.0, rng);
  Tensor k = Tensor::uniform({1, 4}, -1.0, 1.0, rng);
  Tensor v = Tensor::uniform({1, 4}, -1.0, 1.0, rng);
  Tensor out = multi_head_attention(q, k, v, p);
  Tensor want = matmul(v, p.w_out);
  for (std::size_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-14));
}

TEST_CASE("identical keys give uniform attention and a time-constant output") {
  Rng rng(7);
  const std::size_t t = 5, d = 4;
  TPAMParams p = random_tpam(d, 2, rng);
  Tensor q = Tensor::uniform({t, d}, -1.0, 1.0, rng);
  Tensor k_row = Tensor::uniform({1, d}, -1.0, 1.0, rng);
  std::vector<double> k_data;
  for (std::size_t i = 0; i < t; ++i)
    k_data.insert(k_data.end(), k_row.data().begin(), k_row.data().end());
  Tensor k = Tensor::from_data({t, d}, k_data);
  Tensor v = Tensor::uniform({t, d}, -1.0, 1.0, rng);

  Tensor out = multi_head_attention(q, k, v, p);
  // column means of V, mapped through W_O, replicated across time
  Tensor vbar = Tensor::zeros({1, d});
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t; ++i) acc += v.at({i, j});
    vbar.data()[j] = acc / static_cast<double>(t);
  }
  Tensor want = matmul(vbar, p.w_out);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(out.at({i, j}) == doctest::Approx(want.at({0, j})).epsilon(1e-12));
}

TEST_CASE("attention matches the scalar brute-force oracle") {
  Rng rng(11);
  for (const auto& [t, d, heads] : std::vector<std::array<std::size_t, 3>>{
           {3, 2, 1}, {4, 4, 2}, {2, 4, 2}, {4, 2, 1}}) {
    TPAMParams p = random_tpam(d, heads, rng);
    Tensor q = Tensor::uniform({t, d}, -1.5, 1.5, rng);
    Tensor k = Tensor::uniform({t, d}, -1.5, 1.5, rng);
    Tensor v = Tensor::uniform({t, d}, -1.5, 1.5, rng);
    Tensor got = multi_head_attention(q, k, v, p);
    auto want = oracles::attention_brute_force(
        std::vector<double>(q.data().begin(), q.data().end()),
        std::vector<double>(k.data().begin(), k.data().end()),
        std::vector<double>(v.data().begin(), v.data().end()),
        std::vector<double>(p.w_out.data().begin(), p.w_out.data().end()), t, d, heads, d);
    REQUIRE(got.numel() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(std::fabs(got.data()[i] - want[i]) < 1e-12);
  }
}

TEST_CASE("tpam_forward: zero attention branch reduces to LayerNorm(x)") {
  Rng rng(13);
  const std::size_t d = 4;
  TPAMParams p = random_tpam(d, 2, rng);
  p.w_value = Tensor::zeros({d, d});
  p.w_out = Tensor::zeros({d, d});
  Tensor x = Tensor::uniform({2, d, 3, 5}, -1.0, 1.0, rng);
  Tensor out = tpam_forward(x, p);
  REQUIRE(out.shape() == x.shape());
  // reference: layer norm over the channel axis per (b, n, t)
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t t = 0; t < 5; ++t) {
        double m = 0.0, var = 0.0;
        for (std::size_t c = 0; c < d; ++c) m += x.at({b, c, n, t});
        m /= d;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = x.at({b, c, n, t}) - m;
          var += diff * diff;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kTpamLayerNormEps);
        for (std::size_t c = 0; c < d; ++c) {
          const double want = (x.at({b, c, n, t}) - m) * inv;
          CHECK(out.at({b, c, n, t}) == doctest::Approx(want).epsilon(1e-12));
        }
      }
}

TEST_CASE("tpam_forward preserves shape and agrees with the per-node ops") {
  Rng rng(17);
  const std::size_t b = 2, d = 4, n = 3, t = 5;
  TPAMParams p = random_tpam(d, 2, rng);
  Tensor x = Tensor::uniform({b, d, n, t}, -1.0, 1.0, rng);
  Tensor out = tpam_forward(x, p);
  REQUIRE(out.shape() == Shape{b, d, n, t});

  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t node = 0; node < n; ++node) {
      // build X_n [T x D] and run the spec-level per-node pipeline
      std::vector<double> seq(t * d);
      for (std::size_t ti = 0; ti < t; ++ti)
        for (std::size_t c = 0; c < d; ++c) seq[ti * d + c] = x.at({bi, c, node, ti});
      Tensor xn = Tensor::from_data({t, d}, seq);
      auto [q, k, v] = qkv_project(xn, p);
      Tensor attn_out = multi_head_attention(q, k, v, p);
      Tensor want = layer_norm(add(attn_out, xn), p.ln_gamma, p.ln_beta, kTpamLayerNormEps);
      for (std::size_t ti = 0; ti < t; ++ti)
        for (std::size_t c = 0; c < d; ++c)
          CHECK(out.at({bi, c, node, ti}) == doctest::Approx(want.at({ti, c})).epsilon(1e-12));
    }
}

TEST_CASE("attention-map accessor returns row-stochastic H x T x T maps per node") {
  Rng rng(19);
  const std::size_t b = 2, d = 6, n = 4, t = 5, heads = 3;
  TPAMParams p = random_tpam(d, heads, rng);
  Tensor x = Tensor::uniform({b, d, n, t}, -1.0, 1.0, rng);
  AttentionSink sink;
  sink.capture = true;
  tpam_forward(x, p, &sink);
  REQUIRE(sink.nodes == n);
  REQUIRE(sink.heads == heads);
  REQUIRE(sink.seq_len == t);
  for (std::size_t node = 0; node < n; ++node)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
          const double a = sink.at(node, h, i, j);
          CHECK(a > 0.0);
          total += a;
        }
        CHECK(std::fabs(total - 1.0) < 1e-12);
      }
}

TEST_CASE("pre-residual attention output is permutation-equivariant over time") {
  Rng rng(23);
  const std::size_t t = 6, d = 4;
  TPAMParams p = random_tpam(d, 2, rng);
  Tensor x = Tensor::uniform({t, d}, -1.0, 1.0, rng);
  auto [q, k, v] = qkv_project(x, p);
  Tensor base = multi_head_attention(q, k, v, p);

  std::vector<std::size_t> perm(t);
  for (std::size_t i = 0; i < t; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<double> permuted(t * d);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t c = 0; c < d; ++c) permuted[i * d + c] = x.at({perm[i], c});
  Tensor xp = Tensor::from_data({t, d}, permuted);
  auto [qp, kp, vp] = qkv_project(xp, p);
  Tensor out = multi_head_attention(qp, kp, vp, p);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t c = 0; c < d; ++c)
      CHECK(out.at({i, c}) == doctest::Approx(base.at({perm[i], c})).epsilon(1e-11));
}

TEST_CASE("node independence and global temporal receptive field") {
  Rng rng(29);
  const std::size_t b = 1, d = 4, n = 3, t = 5;
  TPAMParams p = random_tpam(d, 2, rng);
  Tensor x = Tensor::uniform({b, d, n, t}, -1.0, 1.0, rng);
  Tensor base = tpam_forward(x, p);

  // perturb node 1: nodes 0 and 2 unchanged
  Tensor x2 = x.clone();
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t ti = 0; ti < t; ++ti) x2.data()[((c)*n + 1) * t + ti] += 0.4;
  Tensor moved = tpam_forward(x2, p);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t node = 0; node < n; ++node) {
      if (node == 1) continue;
      for (std::size_t ti = 0; ti < t; ++ti)
        CHECK(moved.at({0, c, node, ti}) == base.at({0, c, node, ti}));
    }

  // perturbing one time step generically moves every output step of that node
  Tensor x3 = x.clone();
  x3.data()[((1) * n + 0) * t + 2] += 0.8;
  Tensor global = tpam_forward(x3, p);
  for (std::size_t ti = 0; ti < t; ++ti) {
    double delta = 0.0;
    for (std::size_t c = 0; c < d; ++c)
      delta += std::fabs(global.at({0, c, 0, ti}) - base.at({0, c, 0, ti}));
    CHECK(delta > 1e-9);
  }
}

TEST_CASE("full gradient check through tpam_forward") {
  Rng rng(31);
  const std::size_t d = 4;
  TPAMParams p = random_tpam(d, 2, rng);
  Tensor x = Tensor::uniform({1, d, 2, 3}, -1.0, 1.0, rng);
  auto fd = oracles::check_gradients(
      [&]() { return mean(mul(tpam_forward(x, p), x)); },
      {x, p.w_query, p.w_key, p.w_value, p.w_out, p.ln_gamma, p.ln_beta});
  CHECK(fd.max_rel_err < 1e-4);
}

}  // TEST_SUITE
