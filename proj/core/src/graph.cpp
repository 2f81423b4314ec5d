#include "pastn/graph.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pastn/rng.hpp"

namespace pastn {

Tensor build_adjacency(const std::vector<Edge>& edges, std::size_t n, double sigma,
                       double threshold) {
  if (sigma <= 0.0) throw ValueError("build_adjacency: sigma must be positive");
  if (threshold < 0.0 || threshold >= 1.0) {
    throw ValueError("build_adjacency: threshold must lie in [0,1)");
  }
  Tensor a = Tensor::zeros({n, n});
  auto pa = a.data();
  for (const Edge& e : edges) {
    if (e.from >= n || e.to >= n) {
      throw IndexError("build_adjacency: edge (" + std::to_string(e.from) + "," +
                       std::to_string(e.to) + ") out of range for " + std::to_string(n) +
                       " nodes");
    }
    if (e.distance <= 0.0) {
      throw ValueError("build_adjacency: nonpositive distance on edge (" +
                       std::to_string(e.from) + "," + std::to_string(e.to) + ")");
    }
    if (e.from == e.to) continue;  // the diagonal stays zero
    const double w = std::exp(-(e.distance * e.distance) / (sigma * sigma));
    pa[e.from * n + e.to] = w >= threshold ? w : 0.0;
  }
  return a;
}

namespace {

Tensor row_normalize(const Tensor& a) {
  const std::size_t n = a.dim(0);
  Tensor p = Tensor::zeros({n, n});
  auto src = a.data();
  auto dst = p.data();
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += src[i * n + j];
    if (total == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) dst[i * n + j] = src[i * n + j] / total;
  }
  return p;
}

}  // namespace

std::pair<Tensor, Tensor> transition_matrices(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    throw ShapeError("transition_matrices: adjacency must be square, got " +
                     shape_str(adjacency.shape()));
  }
  const std::size_t n = adjacency.dim(0);
  Tensor at = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) at.data()[j * n + i] = adjacency.data()[i * n + j];
  return {row_normalize(adjacency), row_normalize(at)};
}

Tensor adaptive_adjacency(const Tensor& e1, const Tensor& e2) {
  if (e1.rank() != 2 || e2.rank() != 2 || e1.dim(0) != e2.dim(0) || e1.dim(1) != e2.dim(1)) {
    throw ShapeError("adaptive_adjacency: factor shapes disagree: " + shape_str(e1.shape()) +
                     " vs " + shape_str(e2.shape()));
  }
  return softmax(relu(matmul(e1, transpose(e2))), 1);
}

GraphBundle make_bundle(Tensor adjacency, std::size_t embed_dim, std::uint64_t seed) {
  GraphBundle bundle;
  bundle.nodes = adjacency.dim(0);
  auto [pf, pb] = transition_matrices(adjacency);
  bundle.adjacency = std::move(adjacency);
  bundle.p_forward = std::move(pf);
  bundle.p_backward = std::move(pb);
  Rng r1 = Rng::derive(seed, "graph/e1");
  Rng r2 = Rng::derive(seed, "graph/e2");
  bundle.e1 = Tensor::normal({bundle.nodes, embed_dim}, 0.0, 1.0, r1, true);
  bundle.e2 = Tensor::normal({bundle.nodes, embed_dim}, 0.0, 1.0, r2, true);
  return bundle;
}

double default_sigma(const std::vector<Edge>& edges) {
  if (edges.empty()) return 1.0;
  double mean = 0.0;
  for (const Edge& e : edges) mean += e.distance;
  mean /= static_cast<double>(edges.size());
  double var = 0.0;
  for (const Edge& e : edges) var += (e.distance - mean) * (e.distance - mean);
  var /= static_cast<double>(edges.size());
  const double sd = std::sqrt(var);
  return sd > 0.0 ? sd : (mean > 0.0 ? mean : 1.0);
}

Tensor diffusion_conv_seq(const Tensor& x, const GraphBundle& bundle,
                          const std::vector<std::array<Tensor, 3>>& weights, std::size_t depth) {
  if (weights.size() != depth + 1) {
    throw ConfigError("diffusion_conv: expected " + std::to_string(3 * (depth + 1)) +
                      " weight matrices (3 per order), got " +
                      std::to_string(3 * weights.size()));
  }
  // k = 0: P^0 = I for all three operators.
  Tensor z = conv1x1(x, transpose(weights[0][0]));
  z = add(z, conv1x1(x, transpose(weights[0][1])));
  z = add(z, conv1x1(x, transpose(weights[0][2])));
  if (depth == 0) return z;

  Tensor apt = adaptive_adjacency(bundle.e1, bundle.e2);
  Tensor hop_f = x, hop_b = x, hop_a = x;
  for (std::size_t k = 1; k <= depth; ++k) {
    hop_f = graph_propagate(hop_f, bundle.p_forward);
    hop_b = graph_propagate(hop_b, bundle.p_backward);
    hop_a = graph_propagate(hop_a, apt);
    z = add(z, conv1x1(hop_f, transpose(weights[k][0])));
    z = add(z, conv1x1(hop_b, transpose(weights[k][1])));
    z = add(z, conv1x1(hop_a, transpose(weights[k][2])));
  }
  return z;
}

Tensor diffusion_conv(const Tensor& x_t, const GraphBundle& bundle,
                      const std::vector<std::array<Tensor, 3>>& weights, std::size_t depth) {
  if (x_t.rank() != 2) {
    throw ShapeError("diffusion_conv: expected [N,D] signal, got " + shape_str(x_t.shape()));
  }
  if (x_t.dim(0) != bundle.nodes) {
    throw ShapeError("diffusion_conv: signal " + shape_str(x_t.shape()) + " does not match " +
                     std::to_string(bundle.nodes) + " graph nodes");
  }
  const std::size_t n = x_t.dim(0), d = x_t.dim(1);
  Tensor x4 = reshape(transpose(x_t), {1, d, n, 1});
  Tensor z4 = diffusion_conv_seq(x4, bundle, weights, depth);
  return transpose(reshape(z4, {z4.dim(1), n}));
}

std::vector<Edge> load_edges_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open adjacency file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file");
  if (line.size() && line.back() == '\r') line.pop_back();
  if (line != "from,to,distance") {
    throw FormatError(path + ": expected header 'from,to,distance', got '" + line + "'");
  }
  std::vector<Edge> edges;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    long long u = 0, v = 0;
    double d = 0.0;
    if (std::sscanf(line.c_str(), "%lld,%lld,%lf", &u, &v, &d) != 3 || u < 0 || v < 0) {
      throw FormatError(path + ": malformed edge at row " + std::to_string(row));
    }
    edges.push_back({static_cast<std::size_t>(u), static_cast<std::size_t>(v), d});
  }
  return edges;
}

void write_edges_csv(const std::string& path, const std::vector<Edge>& edges) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write adjacency file: " + path);
  out << "from,to,distance\n";
  char buf[64];
  for (const Edge& e : edges) {
    std::snprintf(buf, sizeof(buf), "%.17g", e.distance);
    out << e.from << "," << e.to << "," << buf << "\n";
  }
}

}  // namespace pastn
