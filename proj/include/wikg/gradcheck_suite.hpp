#pragma once

#include <functional>
#include <string>
#include <vector>

#include "wikg/gradcheck.hpp"
#include "wikg/model.hpp"
#include "wikg/tensor.hpp"

namespace wikg {

struct OpCheckResult {
  std::string op;
  GradCheckReport report;
};

namespace detail {

inline Tensor<double> rand_tensor(Rng& rng, std::size_t rows, std::size_t cols, double lo,
                                  double hi) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from({rows, cols}, std::move(v), /*requires_grad=*/true);
}

// All entries pairwise-distinct with a healthy margin, so selection ops
// (top-k, max) keep their argmax stable under the FD perturbation.
inline Tensor<double> rand_separated(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> perm(rows * cols);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm.begin(), perm.end());
  std::vector<double> v(rows * cols);
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = 0.2 * static_cast<double>(perm[i]) + rng.uniform(0.0, 0.01);
  return Tensor<double>::from({rows, cols}, std::move(v), true);
}

// Entries bounded away from zero (kink/pole avoidance for leaky_relu,
// reciprocal).
inline Tensor<double> rand_signed_away_from_zero(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(0.3, 1.5) * (rng.below(2) == 0 ? 1.0 : -1.0);
  return Tensor<double>::from({rows, cols}, std::move(v), true);
}

// Scalar-valued wrapper: weighted sum of all output entries against fixed
// random weights, so every element influences the loss asymmetrically.
inline Tensor<double> scalarize(const Tensor<double>& out, const Tensor<double>& weights) {
  auto flat = reshape(out, {std::size_t{1}, out.size()});
  return rowwise_sum(hadamard(flat, weights));
}

inline Tensor<double> make_weights(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  for (auto& v : w) v = rng.uniform(0.25, 1.75) * (rng.below(2) == 0 ? 1.0 : -1.0);
  return Tensor<double>::row(std::move(w));
}

}  // namespace detail

/// Finite-difference checks for every differentiable op, randomized from
/// `seed`. `filter` restricts to ops whose name contains the substring.
inline std::vector<OpCheckResult> run_op_gradchecks(std::uint64_t seed, double eps, double tol,
                                                    const std::string& filter = "") {
  using detail::make_weights;
  using detail::rand_separated;
  using detail::rand_signed_away_from_zero;
  using detail::rand_tensor;
  using detail::scalarize;

  std::vector<OpCheckResult> results;
  std::size_t op_index = 0;

  auto check = [&](const std::string& name,
                   const std::function<void(Rng&, std::vector<Tensor<double>>&,
                                            std::function<Tensor<double>()>&)>& setup) {
    ++op_index;
    if (!filter.empty() && name.find(filter) == std::string::npos) return;
    Rng rng(derive_seed(seed, 0xabc0 + op_index));
    std::vector<Tensor<double>> watched;
    std::function<Tensor<double>()> f;
    setup(rng, watched, f);
    results.push_back({name, grad_check<double>(f, watched, eps, tol)});
  };

  check("matmul", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 5, 4, -1.5, 1.5);
    auto b = rand_tensor(rng, 4, 3, -1.5, 1.5);
    auto w = make_weights(rng, 15);
    watched = {a, b};
    f = [=]() { return scalarize(matmul(a, b), w); };
  });
  check("matmul-nt", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 5, 4, -1.5, 1.5);
    auto b = rand_tensor(rng, 3, 4, -1.5, 1.5);
    auto w = make_weights(rng, 15);
    watched = {a, b};
    f = [=]() { return scalarize(matmul_nt(a, b), w); };
  });
  check("add", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 4, -2, 2);
    auto b = rand_tensor(rng, 3, 4, -2, 2);
    auto w = make_weights(rng, 12);
    watched = {a, b};
    f = [=]() { return scalarize(add(a, b), w); };
  });
  check("add-row-broadcast", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 4, -2, 2);
    auto b = rand_tensor(rng, 1, 4, -2, 2);
    auto w = make_weights(rng, 12);
    watched = {a, b};
    f = [=]() { return scalarize(add(a, b), w); };
  });
  check("add-col-broadcast", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 4, -2, 2);
    auto b = rand_tensor(rng, 3, 1, -2, 2);
    auto w = make_weights(rng, 12);
    watched = {a, b};
    f = [=]() { return scalarize(add(a, b), w); };
  });
  check("subtract", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 4, -2, 2);
    auto b = rand_tensor(rng, 3, 4, -2, 2);
    auto w = make_weights(rng, 12);
    watched = {a, b};
    f = [=]() { return scalarize(subtract(a, b), w); };
  });
  check("hadamard", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 4, -2, 2);
    auto b = rand_tensor(rng, 3, 4, -2, 2);
    auto w = make_weights(rng, 12);
    watched = {a, b};
    f = [=]() { return scalarize(hadamard(a, b), w); };
  });
  check("hadamard-col-broadcast", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 4, 3, -2, 2);
    auto b = rand_tensor(rng, 4, 1, -2, 2);
    auto w = make_weights(rng, 12);
    watched = {a, b};
    f = [=]() { return scalarize(hadamard(a, b), w); };
  });
  check("scalar-mul", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 3, -2, 2);
    auto w = make_weights(rng, 9);
    watched = {a};
    f = [=]() { return scalarize(scalar_mul(a, -1.7), w); };
  });
  check("transpose", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 4, -2, 2);
    auto w = make_weights(rng, 12);
    watched = {a};
    f = [=]() { return scalarize(transpose(a), w); };
  });
  check("reshape", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 4, -2, 2);
    auto w = make_weights(rng, 12);
    watched = {a};
    f = [=]() { return scalarize(reshape(a, {2, 6}), w); };
  });
  check("gather-rows", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 5, 3, -2, 2);
    static const std::vector<std::int64_t> idx = {0, 2, 2, 4, 1};
    auto w = make_weights(rng, 15);
    watched = {a};
    f = [=]() { return scalarize(gather_rows(a, std::span<const std::int64_t>(idx)), w); };
  });
  check("gather-entries", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 4, 5, -2, 2);
    IndexMatrix idx(4, 2);
    for (std::size_t i = 0; i < 4; ++i) {
      idx.at(i, 0) = static_cast<std::int64_t>(rng.below(5));
      idx.at(i, 1) = static_cast<std::int64_t>(rng.below(5));
    }
    auto w = make_weights(rng, 8);
    watched = {a};
    f = [=]() { return scalarize(gather_entries(a, idx), w); };
  });
  check("concat-rows", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 2, 3, -2, 2);
    auto b = rand_tensor(rng, 3, 3, -2, 2);
    auto w = make_weights(rng, 15);
    watched = {a, b};
    f = [=]() { return scalarize(concat_rows(a, b), w); };
  });
  check("row-softmax", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 5, -3, 3);
    auto w = make_weights(rng, 15);
    watched = {a};
    f = [=]() { return scalarize(row_softmax(a), w); };
  });
  check("tanh", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 3, -2, 2);
    auto w = make_weights(rng, 9);
    watched = {a};
    f = [=]() { return scalarize(tanh_op(a), w); };
  });
  check("leaky-relu", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_signed_away_from_zero(rng, 3, 3);
    auto w = make_weights(rng, 9);
    watched = {a};
    f = [=]() { return scalarize(leaky_relu(a, 0.2), w); };
  });
  check("sigmoid", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 3, -3, 3);
    auto w = make_weights(rng, 9);
    watched = {a};
    f = [=]() { return scalarize(sigmoid_op(a), w); };
  });
  check("sqrt", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 3, 0.5, 2.0);
    auto w = make_weights(rng, 9);
    watched = {a};
    f = [=]() { return scalarize(sqrt_op(a), w); };
  });
  check("reciprocal", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_signed_away_from_zero(rng, 3, 3);
    auto w = make_weights(rng, 9);
    watched = {a};
    f = [=]() { return scalarize(reciprocal(a), w); };
  });
  check("rowwise-sum", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 3, 4, -2, 2);
    auto w = make_weights(rng, 3);
    watched = {a};
    f = [=]() { return scalarize(rowwise_sum(a), w); };
  });
  check("sum-row-groups", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 6, 3, -2, 2);
    auto w = make_weights(rng, 9);
    watched = {a};
    f = [=]() { return scalarize(sum_row_groups(a, 2), w); };
  });
  check("reduce-mean-rows", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 4, 3, -2, 2);
    auto w = make_weights(rng, 3);
    watched = {a};
    f = [=]() { return scalarize(reduce_mean_rows(a), w); };
  });
  check("reduce-max-rows", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_separated(rng, 4, 3);
    auto w = make_weights(rng, 3);
    watched = {a};
    f = [=]() { return scalarize(reduce_max_rows(a), w); };
  });
  check("topk-rows", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_separated(rng, 4, 6);
    auto w = make_weights(rng, 12);
    watched = {a};
    f = [=]() { return scalarize(topk_rows(a, 3).values, w); };
  });
  check("cross-entropy", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 1, 4, -2, 2);
    const std::size_t label = rng.below(4);
    watched = {a};
    f = [=]() { return cross_entropy(a, label); };
  });
  check("dropout", [&](Rng& rng, auto& watched, auto& f) {
    auto a = rand_tensor(rng, 4, 4, -2, 2);
    auto w = make_weights(rng, 16);
    const std::uint64_t mask_seed = rng.next_u64();
    watched = {a};
    f = [=]() {
      Rng mask_rng(mask_seed);  // frozen mask keeps f deterministic
      return scalarize(dropout(a, 0.4, true, mask_rng), w);
    };
  });

  return results;
}

/// Finite-difference check of the full bag loss (all parameters plus the
/// input features) at small dimensions, for the given edge policy. Eval
/// mode, so the loss is deterministic. Features are redrawn until every
/// node's k-th/(k+1)-th selection scores are separated, keeping the
/// neighbor choice stable under perturbation.
inline GradCheckReport run_model_gradcheck(std::uint64_t seed, double eps, double tol,
                                           EdgeVariant variant = EdgeVariant::wikg,
                                           bool exclude_self = false) {
  const std::size_t n = 12, d_in = 6, d = 8, c = 3, k = 3;
  Rng rng(derive_seed(seed, 0x6d6f64));
  auto params = WikgParams<double>::init(d_in, d, c, 0.2, rng);
  const EdgePolicy policy{variant, k, exclude_self, false};

  Tensor<double> features;
  for (int attempt = 0; attempt < 64; ++attempt) {
    features = detail::rand_tensor(rng, n, d_in, -1.0, 1.0);
    typename Tape<double>::NoGrad off;
    auto x = add(matmul(features, params.input_w), params.input_b);
    const auto xv = x.values();
    const std::size_t dx = x.cols();
    std::vector<double> scores(n * n, 0.0);
    if (variant == EdgeVariant::wikg) {
      auto [heads, tails] = project_head_tail(x, params.projector);
      auto logits = matmul(scalar_mul(heads, 1.0 / std::sqrt(static_cast<double>(d))),
                           transpose(tails));
      scores.assign(logits.values().begin(), logits.values().end());
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          if (variant == EdgeVariant::knn_cos) {
            double dot = 0, ni = 0, nj = 0;
            for (std::size_t e = 0; e < dx; ++e) {
              dot += xv[i * dx + e] * xv[j * dx + e];
              ni += xv[i * dx + e] * xv[i * dx + e];
              nj += xv[j * dx + e] * xv[j * dx + e];
            }
            scores[i * n + j] = dot / std::sqrt(ni * nj);
          } else {
            double d2 = 0;
            for (std::size_t e = 0; e < dx; ++e) {
              const double diff = xv[i * dx + e] - xv[j * dx + e];
              d2 += diff * diff;
            }
            scores[i * n + j] = -std::sqrt(d2);
          }
        }
      }
    }
    double min_gap = 1e9;
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) row[j] = scores[i * n + j];
      if (exclude_self) row[i] = -1e18;
      std::sort(row.begin(), row.end(), std::greater<>());
      min_gap = std::min(min_gap, row[k - 1] - row[k]);
    }
    // the LeakyReLU pre-activations must sit away from the kink, or the
    // central difference straddles it and reports a bogus slope
    double min_preact = 1e9;
    {
      auto [heads, tails] = project_head_tail(x, params.projector);
      auto g = (variant == EdgeVariant::wikg)
                   ? build_wikg_graph(heads, tails, k, exclude_self, false)
                   : build_knn_graph(x, heads, tails, variant, k, exclude_self, false);
      auto trace = knowledge_attention(g);
      auto pre1 = add(matmul(add(g.heads, trace.h_nbr), params.w1), params.b1);
      auto pre2 = add(matmul(hadamard(g.heads, trace.h_nbr), params.w2), params.b2);
      for (double v : pre1.values()) min_preact = std::min(min_preact, std::fabs(v));
      for (double v : pre2.values()) min_preact = std::min(min_preact, std::fabs(v));
    }
    if (min_gap > 1e-3 && min_preact > 1e-4) break;
  }

  const std::size_t label = rng.below(c);
  Rng unused(0);
  auto f = [&]() {
    return cross_entropy(
        forward_bag(features, params, policy, Mode::eval, Readout::mean, 0.3, unused).logits,
        label);
  };
  std::vector<Tensor<double>> watched{features};
  for (auto& [name, t] : params.named()) watched.push_back(t);
  return grad_check<double>(f, watched, eps, tol);
}

}  // namespace wikg
