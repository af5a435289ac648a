#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "json.hpp"
#include "wikg/tensor.hpp"

namespace wikg {

/// Edge construction policy: the head/tail similarity graph, or one of the
/// two k-NN ablations over the projected features.
enum class EdgeVariant { wikg, knn_cos, knn_dist };

inline const char* edge_variant_name(EdgeVariant v) {
  switch (v) {
    case EdgeVariant::wikg: return "wikg";
    case EdgeVariant::knn_cos: return "knn-cos";
    case EdgeVariant::knn_dist: return "knn-dist";
  }
  return "?";
}

inline EdgeVariant parse_edge_variant(const std::string& s) {
  if (s == "wikg") return EdgeVariant::wikg;
  if (s == "knn-cos" || s == "knn_cos") return EdgeVariant::knn_cos;
  if (s == "knn-dist" || s == "knn_dist") return EdgeVariant::knn_dist;
  throw param_error("unknown edge policy '" + s + "'");
}

struct EdgePolicy {
  EdgeVariant variant = EdgeVariant::wikg;
  std::size_t k = 6;
  bool exclude_self = false;  // mask the diagonal before selection
  bool clamp_k = false;       // clamp k to the number of candidates instead of erroring
};

/// Head and tail projections. Applied in row-vector convention:
/// heads = x * w_h^T, tails = x * w_t^T (no bias).
template <typename T>
struct HeadTailProjector {
  Tensor<T> w_h;  // DxD
  Tensor<T> w_t;  // DxD
};

template <typename T>
std::pair<Tensor<T>, Tensor<T>> project_head_tail(const Tensor<T>& features,
                                                  const HeadTailProjector<T>& proj) {
  if (features.cols() != proj.w_h.cols() || proj.w_h.rows() != proj.w_h.cols() ||
      proj.w_t.rows() != proj.w_t.cols() || proj.w_h.rows() != proj.w_t.rows()) {
    throw shape_error("project_head_tail: projector must be DxD matching feature dim");
  }
  return {matmul_nt(features, proj.w_h), matmul_nt(features, proj.w_t)};
}

/// One bag as a directed graph: each node keeps its k selected neighbors,
/// the normalized selection weights omega, and per-edge embeddings
/// r = omega * t_neighbor + (1 - omega) * h_self. All tensors participate
/// in the tape; only neighbor_idx is non-differentiable.
template <typename T>
struct DirectedBagGraph {
  std::size_t n = 0;
  std::size_t k = 0;
  IndexMatrix neighbor_idx;  // n x k
  Tensor<T> omega;           // n x k, rows sum to 1
  Tensor<T> edge_emb;        // n x k x D
  Tensor<T> heads;           // n x D
  Tensor<T> tails;           // n x D
};

namespace detail {

// Row-wise top-k indices with optional diagonal exclusion. Descending by
// value, ties to the lower column index.
template <typename T>
IndexMatrix select_topk_indices(const Tensor<T>& scores, std::size_t k, bool exclude_self) {
  const std::size_t n = scores.rows(), m = scores.cols();
  IndexMatrix idx(n, k);
  const auto sv = scores.values();
  std::vector<std::size_t> order;
  order.reserve(m);
  for (std::size_t i = 0; i < n; ++i) {
    order.clear();
    for (std::size_t j = 0; j < m; ++j) {
      if (exclude_self && j == i) continue;
      order.push_back(j);
    }
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const T va = sv[i * m + a], vb = sv[i * m + b];
                        if (va != vb) return va > vb;
                        return a < b;
                      });
    for (std::size_t j = 0; j < k; ++j) idx.at(i, j) = static_cast<std::int64_t>(order[j]);
  }
  return idx;
}

template <typename T>
std::size_t checked_k(std::size_t n, std::size_t k, bool exclude_self, bool clamp_k) {
  const std::size_t limit = exclude_self ? n - 1 : n;
  if (n == 0 || limit == 0) throw param_error("graph: no neighbor candidates");
  if (k < 1) throw param_error("graph: k must be >= 1");
  if (k > limit) {
    if (!clamp_k)
      throw param_error("graph: k=" + std::to_string(k) + " exceeds candidate count " +
                        std::to_string(limit));
    return limit;
  }
  return k;
}

// Shared tail of all constructors: omega over the selected scores, then the
// per-edge embeddings.
template <typename T>
DirectedBagGraph<T> assemble_graph(const Tensor<T>& heads, const Tensor<T>& tails,
                                   const Tensor<T>& selected_scores, IndexMatrix idx) {
  const std::size_t n = heads.rows(), d = heads.cols(), k = idx.cols;
  DirectedBagGraph<T> g;
  g.n = n;
  g.k = k;
  g.heads = heads;
  g.tails = tails;
  g.neighbor_idx = std::move(idx);
  g.omega = row_softmax(selected_scores);

  std::vector<std::int64_t> rep(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) rep[i * k + j] = static_cast<std::int64_t>(i);
  auto t_nbr = gather_rows(tails, std::span<const std::int64_t>(g.neighbor_idx.data));
  auto h_rep = gather_rows(heads, std::span<const std::int64_t>(rep));
  auto om = reshape(g.omega, {n * k, 1});
  auto one_minus = subtract(Tensor<T>::full({n * k, 1}, T(1)), om);
  auto edges = add(hadamard(t_nbr, om), hadamard(h_rep, one_minus));
  g.edge_emb = reshape(edges, {n, k, d});
  return g;
}

}  // namespace detail

/// Dynamic directed graph from head/tail similarity: scaled dot-product
/// logits (scale = D^-1/2), per-row top-k on the raw logits, softmax over
/// the k selected logits as omega. Everything except the index selection
/// stays on the tape.
template <typename T>
DirectedBagGraph<T> build_wikg_graph(const Tensor<T>& heads, const Tensor<T>& tails,
                                     std::size_t k, bool exclude_self = false,
                                     bool clamp_k = false) {
  if (heads.rows() != tails.rows() || heads.cols() != tails.cols())
    throw shape_error("build_wikg_graph: heads/tails shapes differ");
  const std::size_t n = heads.rows(), d = heads.cols();
  const std::size_t kk = detail::checked_k<T>(n, k, exclude_self, clamp_k);

  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  auto logits = matmul_nt(scalar_mul(heads, scale), tails);
  if (!exclude_self) {
    auto tk = topk_rows(logits, kk);
    return detail::assemble_graph(heads, tails, tk.values, std::move(tk.indices));
  }
  auto idx = detail::select_topk_indices(logits, kk, true);
  auto sel = gather_entries(logits, idx);
  return detail::assemble_graph(heads, tails, sel, std::move(idx));
}

/// k-NN ablation constructors: neighbors by highest cosine similarity or
/// smallest Euclidean distance over the (projected) feature embeddings;
/// omega is the softmax over the selected similarity scores (negated
/// distances for knn_dist). Heads/tails and edge embeddings are unchanged.
///
/// Selection scans a plain pairwise score matrix; the selected scores are
/// then recomputed through tape ops pair-by-pair, so a self edge's distance
/// is exactly 0 (x_i - x_i elementwise) and its gradient exactly vanishes.
template <typename T>
DirectedBagGraph<T> build_knn_graph(const Tensor<T>& features, const Tensor<T>& heads,
                                    const Tensor<T>& tails, EdgeVariant metric, std::size_t k,
                                    bool exclude_self = false, bool clamp_k = false) {
  if (metric != EdgeVariant::knn_cos && metric != EdgeVariant::knn_dist)
    throw param_error("build_knn_graph: metric must be knn_cos or knn_dist");
  if (features.rows() != heads.rows())
    throw shape_error("build_knn_graph: features/heads row mismatch");
  const std::size_t n = features.rows(), d_feat = features.cols();
  const std::size_t kk = detail::checked_k<T>(n, k, exclude_self, clamp_k);

  const auto xv = features.values();
  std::vector<T> sq_norm(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = 0; e < d_feat; ++e) sq_norm[i] += xv[i * d_feat + e] * xv[i * d_feat + e];
  }
  if (metric == EdgeVariant::knn_cos) {
    for (std::size_t i = 0; i < n; ++i) {
      if (sq_norm[i] == T(0))
        throw param_error("build_knn_graph: zero-norm row " + std::to_string(i) +
                          " under cosine metric");
    }
  }

  auto scores = Tensor<T>::zeros({n, n});  // off-tape, used only to pick indices
  auto sv = scores.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (metric == EdgeVariant::knn_cos) {
        T dot = T(0);
        for (std::size_t e = 0; e < d_feat; ++e) dot += xv[i * d_feat + e] * xv[j * d_feat + e];
        sv[i * n + j] = dot / (std::sqrt(sq_norm[i]) * std::sqrt(sq_norm[j]));
      } else {
        T d2 = T(0);
        for (std::size_t e = 0; e < d_feat; ++e) {
          const T diff = xv[i * d_feat + e] - xv[j * d_feat + e];
          d2 += diff * diff;
        }
        sv[i * n + j] = -std::sqrt(d2);
      }
    }
  }
  IndexMatrix idx = detail::select_topk_indices(scores, kk, exclude_self);

  std::vector<std::int64_t> rep(n * kk);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < kk; ++j) rep[i * kk + j] = static_cast<std::int64_t>(i);
  auto src = gather_rows(features, std::span<const std::int64_t>(rep));
  auto nbr = gather_rows(features, std::span<const std::int64_t>(idx.data));

  Tensor<T> sel;
  if (metric == EdgeVariant::knn_cos) {
    auto dots = rowwise_sum(hadamard(src, nbr));  // nk x 1
    auto inv_norm = reciprocal(sqrt_op(rowwise_sum(hadamard(features, features))));
    auto scaled = hadamard(hadamard(dots, gather_rows(inv_norm, std::span<const std::int64_t>(rep))),
                           gather_rows(inv_norm, std::span<const std::int64_t>(idx.data)));
    sel = reshape(scaled, {n, kk});
  } else {
    auto diff = subtract(src, nbr);
    auto dist = sqrt_op(rowwise_sum(hadamard(diff, diff)));
    sel = reshape(scalar_mul(dist, T(-1)), {n, kk});
  }
  return detail::assemble_graph(heads, tails, sel, std::move(idx));
}

/// Structural validator shared by every edge policy. Throws on violation.
template <typename T>
void validate_graph(const DirectedBagGraph<T>& g, double tol = 1e-5) {
  if (g.neighbor_idx.rows != g.n || g.neighbor_idx.cols != g.k)
    throw error("graph: neighbor_idx shape mismatch");
  if (g.omega.rows() != g.n || g.omega.cols() != g.k) throw error("graph: omega shape mismatch");
  const std::size_t d = g.heads.cols();
  if (g.edge_emb.shape() != std::vector<std::size_t>{g.n, g.k, d})
    throw error("graph: edge_emb shape mismatch");
  for (auto v : g.neighbor_idx.data) {
    if (v < 0 || static_cast<std::size_t>(v) >= g.n) throw error("graph: neighbor index out of range");
  }
  for (std::size_t i = 0; i < g.n; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < g.k; ++j) {
      const double w = static_cast<double>(g.omega.at(i, j));
      if (!(w > 0.0 && w <= 1.0)) throw error("graph: omega entry outside (0,1]");
      sum += w;
    }
    if (std::fabs(sum - 1.0) > 1e-6) throw error("graph: omega row does not sum to 1");
  }
  // Edge embedding identity, recomputed from omega/heads/tails.
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = 0; j < g.k; ++j) {
      const auto nb = static_cast<std::size_t>(g.neighbor_idx.at(i, j));
      const double w = static_cast<double>(g.omega.at(i, j));
      for (std::size_t e = 0; e < d; ++e) {
        const double expect = w * static_cast<double>(g.tails.at(nb, e)) +
                              (1.0 - w) * static_cast<double>(g.heads.at(i, e));
        const double got = static_cast<double>(g.edge_emb.at(i, j, e));
        if (std::fabs(got - expect) > tol * std::max(1.0, std::fabs(expect)))
          throw error("graph: edge embedding identity violated at (" + std::to_string(i) +
                      "," + std::to_string(j) + "," + std::to_string(e) + ")");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Serialization (JSON / DOT)
// ---------------------------------------------------------------------------

/// Parsed form of the exported JSON document; enough structure for
/// round-trip checks and external tooling.
struct GraphDocument {
  std::size_t n = 0;
  std::size_t k = 0;
  IndexMatrix neighbor_idx;
  std::vector<double> omega;          // n*k, row-major
  std::vector<double> pi;             // empty when absent
  std::vector<std::int64_t> node_meta;

  bool operator==(const GraphDocument& o) const {
    return n == o.n && k == o.k && neighbor_idx == o.neighbor_idx && omega == o.omega &&
           pi == o.pi && node_meta == o.node_meta;
  }
};

/// Edges are emitted per source node: src selects dst as a neighbor, so both
/// omega and pi sum to 1 over each source's k edges.
template <typename T>
nlohmann::json graph_to_json(const DirectedBagGraph<T>& g,
                             const std::vector<std::int64_t>& node_meta = {},
                             const Tensor<T>* pi = nullptr) {
  if (!node_meta.empty() && node_meta.size() != g.n)
    throw param_error("graph_to_json: node_meta size mismatch");
  if (pi && (pi->rows() != g.n || pi->cols() != g.k))
    throw param_error("graph_to_json: pi shape mismatch");
  nlohmann::json doc;
  doc["n"] = g.n;
  doc["k"] = g.k;
  doc["edges"] = nlohmann::json::array();
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = 0; j < g.k; ++j) {
      nlohmann::json e;
      e["src"] = i;
      e["dst"] = g.neighbor_idx.at(i, j);
      e["omega"] = static_cast<double>(g.omega.at(i, j));
      if (pi)
        e["pi"] = static_cast<double>(pi->at(i, j));
      else
        e["pi"] = nullptr;
      doc["edges"].push_back(std::move(e));
    }
  }
  doc["node_meta"] = node_meta;
  return doc;
}

inline GraphDocument parse_graph_json(const nlohmann::json& doc) {
  GraphDocument g;
  try {
    g.n = doc.at("n").get<std::size_t>();
    g.k = doc.at("k").get<std::size_t>();
    const auto& edges = doc.at("edges");
    if (edges.size() != g.n * g.k) throw io_error("graph json: edge count != n*k");
    g.neighbor_idx = IndexMatrix(g.n, g.k);
    g.omega.assign(g.n * g.k, 0.0);
    const bool has_pi = !edges.empty() && !edges.front().at("pi").is_null();
    if (has_pi) g.pi.assign(g.n * g.k, 0.0);
    std::vector<std::size_t> cursor(g.n, 0);
    for (const auto& e : edges) {
      const auto src = e.at("src").get<std::size_t>();
      if (src >= g.n || cursor[src] >= g.k) throw io_error("graph json: bad edge grouping");
      const auto j = cursor[src]++;
      g.neighbor_idx.at(src, j) = e.at("dst").get<std::int64_t>();
      g.omega[src * g.k + j] = e.at("omega").get<double>();
      if (has_pi) g.pi[src * g.k + j] = e.at("pi").get<double>();
    }
    if (doc.contains("node_meta")) g.node_meta = doc.at("node_meta").get<std::vector<std::int64_t>>();
  } catch (const nlohmann::json::exception& ex) {
    throw io_error(std::string("graph json: ") + ex.what());
  }
  return g;
}

/// DOT emission; edge labels are omega rounded to 4 decimals, with pi
/// appended when available.
template <typename T>
std::string graph_to_dot(const DirectedBagGraph<T>& g,
                         const std::vector<std::int64_t>& node_meta = {},
                         const Tensor<T>* pi = nullptr) {
  std::string out = "digraph bag {\n";
  char buf[96];
  for (std::size_t i = 0; i < g.n; ++i) {
    if (!node_meta.empty()) {
      std::snprintf(buf, sizeof(buf), "  n%zu [label=\"%zu (p%lld)\"];\n", i, i,
                    static_cast<long long>(node_meta[i]));
    } else {
      std::snprintf(buf, sizeof(buf), "  n%zu [label=\"%zu\"];\n", i, i);
    }
    out += buf;
  }
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = 0; j < g.k; ++j) {
      if (pi) {
        std::snprintf(buf, sizeof(buf), "  n%zu -> n%lld [label=\"%.4f|%.4f\"];\n", i,
                      static_cast<long long>(g.neighbor_idx.at(i, j)),
                      static_cast<double>(g.omega.at(i, j)), static_cast<double>(pi->at(i, j)));
      } else {
        std::snprintf(buf, sizeof(buf), "  n%zu -> n%lld [label=\"%.4f\"];\n", i,
                      static_cast<long long>(g.neighbor_idx.at(i, j)),
                      static_cast<double>(g.omega.at(i, j)));
      }
      out += buf;
    }
  }
  out += "}\n";
  return out;
}

}  // namespace wikg
