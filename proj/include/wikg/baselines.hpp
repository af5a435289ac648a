#pragma once

#include <string>
#include <utility>
#include <vector>

#include "wikg/model.hpp"
#include "wikg/tensor.hpp"

namespace wikg {

/// Simple MIL aggregators sharing the input projection and classifier head
/// with the graph model. gated_attention follows the attention-based MIL
/// recipe: a_i = softmax_i(w^T (tanh(V x_i) * sigmoid(U x_i))).
enum class BaselineKind { mean_pool, max_pool, gated_attention };

inline const char* baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::mean_pool: return "mean";
    case BaselineKind::max_pool: return "max";
    case BaselineKind::gated_attention: return "abmil";
  }
  return "?";
}

template <typename T>
struct BaselineParams {
  BaselineKind kind = BaselineKind::mean_pool;
  std::size_t d_in = 0, d = 0, c = 0, hidden = 0;

  Tensor<T> input_w;  // d_in x d
  Tensor<T> input_b;  // 1 x d
  Tensor<T> attn_v;   // d x hidden (gated only)
  Tensor<T> attn_u;   // d x hidden (gated only)
  Tensor<T> attn_w;   // hidden x 1 (gated only)
  Tensor<T> head_w;   // d x c
  Tensor<T> head_b;   // 1 x c

  static BaselineParams init(BaselineKind kind, std::size_t d_in, std::size_t d, std::size_t c,
                             std::size_t hidden, Rng& rng) {
    if (d_in == 0 || d == 0 || c < 2) throw param_error("BaselineParams: bad dimensions");
    BaselineParams p;
    p.kind = kind;
    p.d_in = d_in;
    p.d = d;
    p.c = c;
    p.input_w = detail::glorot<T>(d_in, d, rng);
    p.input_b = detail::zero_bias<T>(d);
    if (kind == BaselineKind::gated_attention) {
      if (hidden == 0) throw param_error("BaselineParams: gated attention needs hidden > 0");
      p.hidden = hidden;
      p.attn_v = detail::glorot<T>(d, hidden, rng);
      p.attn_u = detail::glorot<T>(d, hidden, rng);
      p.attn_w = detail::glorot<T>(hidden, 1, rng);
    }
    p.head_w = detail::glorot<T>(d, c, rng);
    p.head_b = detail::zero_bias<T>(c);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out = {{"input_proj.weight", input_w},
                                                          {"input_proj.bias", input_b}};
    if (kind == BaselineKind::gated_attention) {
      out.emplace_back("attention.v", attn_v);
      out.emplace_back("attention.u", attn_u);
      out.emplace_back("attention.w", attn_w);
    }
    out.emplace_back("classifier.weight", head_w);
    out.emplace_back("classifier.bias", head_b);
    return out;
  }
};

template <typename T>
std::size_t param_count(const BaselineParams<T>& p) {
  std::size_t total = 0;
  for (const auto& [name, t] : p.named()) total += t.size();
  return total;
}

template <typename T>
struct BaselineForward {
  Tensor<T> logits;     // 1 x C
  Tensor<T> attention;  // 1 x n (gated only)
};

template <typename T>
BaselineForward<T> baseline_forward(const Tensor<T>& features, const BaselineParams<T>& p) {
  if (features.rows() < 1) throw param_error("baseline_forward: empty bag");
  if (features.cols() != p.d_in) throw shape_error("baseline_forward: feature dim mismatch");

  auto x = add(matmul(features, p.input_w), p.input_b);
  BaselineForward<T> res;
  Tensor<T> z;
  switch (p.kind) {
    case BaselineKind::mean_pool:
      z = reduce_mean_rows(x);
      break;
    case BaselineKind::max_pool:
      z = reduce_max_rows(x);
      break;
    case BaselineKind::gated_attention: {
      auto gate = hadamard(tanh_op(matmul(x, p.attn_v)), sigmoid_op(matmul(x, p.attn_u)));
      auto scores = matmul(gate, p.attn_w);               // n x 1
      res.attention = row_softmax(transpose(scores));     // 1 x n
      z = matmul(res.attention, x);
      break;
    }
  }
  res.logits = add(matmul(z, p.head_w), p.head_b);
  return res;
}

}  // namespace wikg
