#include "pastn/spae.hpp"

#include <cmath>

#include "pastn/rng.hpp"

namespace pastn {

double spae_initial_value(std::size_t i, std::size_t k, std::size_t d_model) {
  const double freq =
      std::pow(10000.0, 2.0 * static_cast<double>(k) / static_cast<double>(d_model));
  const double arg = static_cast<double>(i) / freq;
  return (k % 2 == 0) ? std::sin(arg) : std::cos(arg);
}

SPAETable init_spae(std::size_t n, std::size_t d_model, SpaeInit kind, std::uint64_t seed) {
  if (n == 0 || d_model == 0) throw ValueError("init_spae: N and d_model must be positive");
  SPAETable spae;
  spae.init_kind = kind;
  if (kind == SpaeInit::kSinusoidal) {
    Tensor t = Tensor::zeros({n, d_model}, true);
    auto data = t.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d_model; ++k) data[i * d_model + k] = spae_initial_value(i, k, d_model);
    spae.table = t;
  } else {
    Rng rng = Rng::derive(seed, "spae/random-init");
    spae.table = Tensor::uniform({n, d_model}, -0.5, 0.5, rng, true);
  }
  return spae;
}

Tensor apply_spae(const Tensor& h, const SPAETable& spae) {
  if (h.rank() != 4) throw ShapeError("apply_spae: expected [B,C,N,T], got " + shape_str(h.shape()));
  const std::size_t c = h.dim(1), n = h.dim(2);
  if (!spae.table.defined() || spae.table.dim(0) != n || spae.table.dim(1) != c) {
    throw ShapeError("apply_spae: table " +
                     (spae.table.defined() ? shape_str(spae.table.shape()) : std::string("(none)")) +
                     " does not match hidden channels of " + shape_str(h.shape()));
  }
  return add(h, reshape(transpose(spae.table), {1, c, n, 1}));
}

namespace {

// Dominant eigenvector of a symmetric PSD matrix by power iteration.
// Returns false when the matrix is numerically zero.
bool power_iteration(const std::vector<double>& m, std::size_t d, std::vector<double>& vec,
                     double& eigenvalue) {
  double frob = 0.0;
  for (double v : m) frob += v * v;
  if (frob < 1e-28) return false;

  vec.assign(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) vec[i] = 1.0 + 1e-3 * static_cast<double>(i);
  double norm = 0.0;
  for (double v : vec) norm += v * v;
  norm = std::sqrt(norm);
  for (double& v : vec) v /= norm;

  std::vector<double> next(d);
  for (int iter = 0; iter < 1000; ++iter) {
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += m[i * d + j] * vec[j];
      next[i] = acc;
    }
    double nn = 0.0;
    for (double v : next) nn += v * v;
    nn = std::sqrt(nn);
    if (nn < 1e-28) return false;
    double delta = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      next[i] /= nn;
      delta += (next[i] - vec[i]) * (next[i] - vec[i]);
    }
    vec.swap(next);
    if (delta < 1e-26) break;
  }
  eigenvalue = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += m[i * d + j] * vec[j];
    eigenvalue += vec[i] * acc;
  }
  return true;
}

// Deterministic unit vector orthogonal to v1 (used when the deflated
// covariance vanishes, e.g. data on an exact line).
std::vector<double> orthogonal_complement(const std::vector<double>& v1) {
  const std::size_t d = v1.size();
  std::size_t pick = 0;
  double best = std::fabs(v1[0]);
  for (std::size_t i = 1; i < d; ++i) {
    if (std::fabs(v1[i]) < best) {
      best = std::fabs(v1[i]);
      pick = i;
    }
  }
  std::vector<double> v(d, 0.0);
  v[pick] = 1.0;
  double dot = v1[pick];
  double norm = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    v[i] -= dot * v1[i];
    norm += v[i] * v[i];
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

}  // namespace

DispersionResult dispersion_score(const Tensor& node_embeddings) {
  if (node_embeddings.rank() != 2 || node_embeddings.dim(0) < 2 || node_embeddings.dim(1) < 2) {
    throw ShapeError("dispersion_score: expected [N>=2, C>=2] embeddings, got " +
                     shape_str(node_embeddings.shape()));
  }
  const std::size_t n = node_embeddings.dim(0), d = node_embeddings.dim(1);
  auto src = node_embeddings.data();

  std::vector<double> centered(n * d);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += src[i * d + j];
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered[i * d + j] = src[i * d + j] - m;
  }

  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double va = centered[i * d + a];
      if (va == 0.0) continue;
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += va * centered[i * d + b];
    }
  for (double& v : cov) v /= static_cast<double>(n);

  DispersionResult result;
  std::vector<double> v1, v2;
  double lambda1 = 0.0, lambda2 = 0.0;
  if (!power_iteration(cov, d, v1, lambda1)) {
    // All embeddings coincide: total collapse by definition.
    result.resultant_length = 1.0;
    result.collapsed = true;
    result.skipped = n;
    return result;
  }
  std::vector<double> deflated = cov;
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) deflated[a * d + b] -= lambda1 * v1[a] * v1[b];
  if (!power_iteration(deflated, d, v2, lambda2)) v2 = orthogonal_complement(v1);

  double sum_cos = 0.0, sum_sin = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p1 = 0.0, p2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      p1 += centered[i * d + j] * v1[j];
      p2 += centered[i * d + j] * v2[j];
    }
    const double norm = std::hypot(p1, p2);
    if (norm < 1e-12) {
      ++result.skipped;
      continue;
    }
    result.nodes.push_back(i);
    result.angles.push_back(std::atan2(p2, p1));
    sum_cos += p1 / norm;
    sum_sin += p2 / norm;
  }
  if (result.angles.empty()) {
    result.resultant_length = 1.0;
    result.collapsed = true;
    return result;
  }
  const double count = static_cast<double>(result.angles.size());
  result.resultant_length = std::hypot(sum_cos / count, sum_sin / count);
  return result;
}

}  // namespace pastn
