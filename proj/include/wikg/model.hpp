#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "wikg/graph.hpp"
#include "wikg/tensor.hpp"

namespace wikg {

enum class Readout { mean, max };
enum class Mode { train, eval };

inline const char* readout_name(Readout r) { return r == Readout::mean ? "mean" : "max"; }

inline Readout parse_readout(const std::string& s) {
  if (s == "mean") return Readout::mean;
  if (s == "max") return Readout::max;
  throw param_error("unknown readout '" + s + "'");
}

namespace detail {

/// Glorot-uniform fill: +-sqrt(6 / (fan_in + fan_out)), row-major draw order.
template <typename T>
Tensor<T> glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> v(fan_in * fan_out);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
  return Tensor<T>::from({fan_in, fan_out}, std::move(v), /*requires_grad=*/true);
}

template <typename T>
Tensor<T> zero_bias(std::size_t n) {
  return Tensor<T>::zeros({1, n}, /*requires_grad=*/true);
}

}  // namespace detail

/// All learnable weights of the model. Weight layout conventions:
/// input projection and interaction/classifier weights are stored
/// input-major and applied as x*W + b; the head/tail projector is stored
/// as given and applied as x*W^T (no bias).
template <typename T>
struct WikgParams {
  std::size_t d_in = 0, d = 0, c = 0;
  T leaky_slope = T(0.2);

  Tensor<T> input_w;  // d_in x d
  Tensor<T> input_b;  // 1 x d
  HeadTailProjector<T> projector;
  Tensor<T> w1, b1;      // d x d, 1 x d
  Tensor<T> w2, b2;      // d x d, 1 x d
  Tensor<T> head_w;      // d x c
  Tensor<T> head_b;      // 1 x c

  /// Seeded initialization; weights are drawn in registry order.
  static WikgParams init(std::size_t d_in, std::size_t d, std::size_t c, T leaky_slope,
                         Rng& rng) {
    if (d_in == 0 || d == 0 || c < 2) throw param_error("WikgParams: bad dimensions");
    WikgParams p;
    p.d_in = d_in;
    p.d = d;
    p.c = c;
    p.leaky_slope = leaky_slope;
    p.input_w = detail::glorot<T>(d_in, d, rng);
    p.input_b = detail::zero_bias<T>(d);
    p.projector.w_h = detail::glorot<T>(d, d, rng);
    p.projector.w_t = detail::glorot<T>(d, d, rng);
    p.w1 = detail::glorot<T>(d, d, rng);
    p.b1 = detail::zero_bias<T>(d);
    p.w2 = detail::glorot<T>(d, d, rng);
    p.b2 = detail::zero_bias<T>(d);
    p.head_w = detail::glorot<T>(d, c, rng);
    p.head_b = detail::zero_bias<T>(c);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    return {{"input_proj.weight", input_w}, {"input_proj.bias", input_b},
            {"projector.w_h", projector.w_h}, {"projector.w_t", projector.w_t},
            {"interact.w1.weight", w1},       {"interact.w1.bias", b1},
            {"interact.w2.weight", w2},       {"interact.w2.bias", b2},
            {"classifier.weight", head_w},    {"classifier.bias", head_b}};
  }
};

/// Exact number of scalar learnables.
template <typename T>
std::size_t param_count(const WikgParams<T>& p) {
  std::size_t total = 0;
  for (const auto& [name, t] : p.named()) total += t.size();
  return total;
}

/// Intermediate products of one attention pass over the graph.
template <typename T>
struct AttentionTrace {
  Tensor<T> u;      // n x k triplet scores
  Tensor<T> pi;     // n x k attention weights, rows sum to 1
  Tensor<T> h_nbr;  // n x D aggregated neighbor embedding
  Tensor<T> h_new;  // n x D updated heads (filled after dual_interaction)
};

/// Triplet attention over the graph: u[i][j] = t_j^T tanh(h_i + r_ij),
/// pi = row-softmax(u), h_nbr[i] = sum_j pi[i][j] * t_j.
template <typename T>
AttentionTrace<T> knowledge_attention(const DirectedBagGraph<T>& g) {
  const std::size_t n = g.n, k = g.k, d = g.heads.cols();
  std::vector<std::int64_t> rep(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) rep[i * k + j] = static_cast<std::int64_t>(i);

  auto t_nbr = gather_rows(g.tails, std::span<const std::int64_t>(g.neighbor_idx.data));
  auto h_rep = gather_rows(g.heads, std::span<const std::int64_t>(rep));
  auto r_flat = reshape(g.edge_emb, {n * k, d});

  AttentionTrace<T> trace;
  auto mixed = tanh_op(add(h_rep, r_flat));
  trace.u = reshape(rowwise_sum(hadamard(t_nbr, mixed)), {n, k});
  trace.pi = row_softmax(trace.u);
  auto weighted = hadamard(t_nbr, reshape(trace.pi, {n * k, 1}));
  trace.h_nbr = sum_row_groups(weighted, k);
  return trace;
}

/// Node update fusing additive and multiplicative interactions:
/// LeakyReLU(W1(h + h_nbr) + b1) + LeakyReLU(W2(h * h_nbr) + b2).
template <typename T>
Tensor<T> dual_interaction(const Tensor<T>& h, const Tensor<T>& h_nbr,
                           const WikgParams<T>& p) {
  if (h.rows() != h_nbr.rows() || h.cols() != h_nbr.cols())
    throw shape_error("dual_interaction: shape mismatch");
  auto sum_path = leaky_relu(add(matmul(add(h, h_nbr), p.w1), p.b1), p.leaky_slope);
  auto prod_path = leaky_relu(add(matmul(hadamard(h, h_nbr), p.w2), p.b2), p.leaky_slope);
  return add(sum_path, prod_path);
}

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // 1 x C
  AttentionTrace<T> trace;
  DirectedBagGraph<T> graph;
};

/// Full bag pipeline: input projection -> graph construction (per policy) ->
/// knowledge attention -> dual interaction -> dropout (train only) ->
/// readout over updated heads -> classifier logits.
template <typename T>
ForwardResult<T> forward_bag(const Tensor<T>& features, const WikgParams<T>& p,
                             const EdgePolicy& policy, Mode mode, Readout readout,
                             T dropout_p, Rng& rng) {
  if (features.cols() != p.d_in)
    throw shape_error("forward_bag: feature dim " + std::to_string(features.cols()) +
                      " != configured d_in " + std::to_string(p.d_in));

  auto x = add(matmul(features, p.input_w), p.input_b);
  auto [heads, tails] = project_head_tail(x, p.projector);

  ForwardResult<T> res;
  if (policy.variant == EdgeVariant::wikg) {
    res.graph = build_wikg_graph(heads, tails, policy.k, policy.exclude_self, policy.clamp_k);
  } else {
    res.graph = build_knn_graph(x, heads, tails, policy.variant, policy.k,
                                policy.exclude_self, policy.clamp_k);
  }
  res.trace = knowledge_attention(res.graph);
  res.trace.h_new = dual_interaction(res.graph.heads, res.trace.h_nbr, p);

  auto pooled_input = dropout(res.trace.h_new, dropout_p, mode == Mode::train, rng);
  auto z = (readout == Readout::mean) ? reduce_mean_rows(pooled_input)
                                      : reduce_max_rows(pooled_input);
  res.logits = add(matmul(z, p.head_w), p.head_b);
  return res;
}

/// Softmax probabilities from a 1xC logits row (plain values, off-tape).
template <typename T>
std::vector<double> probabilities(const Tensor<T>& logits) {
  const auto lv = logits.values();
  double mx = static_cast<double>(lv[0]);
  for (std::size_t j = 1; j < lv.size(); ++j) mx = std::max(mx, static_cast<double>(lv[j]));
  std::vector<double> probs(lv.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < lv.size(); ++j) {
    probs[j] = std::exp(static_cast<double>(lv[j]) - mx);
    sum += probs[j];
  }
  for (auto& v : probs) v /= sum;
  return probs;
}

}  // namespace wikg
