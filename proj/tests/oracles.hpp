// Independent reference implementations used as test oracles. Everything
// here is deliberately written from the definitions (plain loops, long
// double accumulation) and shares no code with the library kernels.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace oracle {

// Plain triple-loop matrix product at long double precision.
inline std::vector<long double> matmul(const std::vector<long double>& a,
                                       const std::vector<long double>& b, std::size_t m,
                                       std::size_t k, std::size_t n) {
  std::vector<long double> c(m * n, 0.0L);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return c;
}

// Direct exp-normalize softmax of one row at long double precision.
inline std::vector<long double> softmax(const std::vector<long double>& row) {
  long double mx = row[0];
  for (auto v : row) mx = std::max(mx, v);
  std::vector<long double> out(row.size());
  long double denom = 0.0L;
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i] - mx);
    denom += out[i];
  }
  for (auto& v : out) v /= denom;
  return out;
}

// Full argsort selection: k largest per row, descending, ties to the lower
// column index.
inline std::vector<std::int64_t> topk_by_argsort(const std::vector<double>& row, std::size_t k) {
  std::vector<std::int64_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), std::int64_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
    if (row[static_cast<std::size_t>(a)] != row[static_cast<std::size_t>(b)])
      return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
    return a < b;
  });
  idx.resize(k);
  return idx;
}

inline long double cosine(const std::vector<double>& x, std::size_t d, std::size_t i,
                          std::size_t j) {
  long double dot = 0, ni = 0, nj = 0;
  for (std::size_t e = 0; e < d; ++e) {
    dot += static_cast<long double>(x[i * d + e]) * x[j * d + e];
    ni += static_cast<long double>(x[i * d + e]) * x[i * d + e];
    nj += static_cast<long double>(x[j * d + e]) * x[j * d + e];
  }
  return dot / std::sqrt(ni * nj);
}

inline long double euclidean(const std::vector<double>& x, std::size_t d, std::size_t i,
                             std::size_t j) {
  long double s = 0;
  for (std::size_t e = 0; e < d; ++e) {
    const long double diff = static_cast<long double>(x[i * d + e]) - x[j * d + e];
    s += diff * diff;
  }
  return std::sqrt(s);
}

// AUC by exhaustive concordant-pair counting; returns the exact numerator
// 2*wins + ties and the denominator 2*n1*n0 separately.
struct PairCountAuc {
  long long numerator = 0;    // 2 * wins + ties
  long long denominator = 0;  // 2 * n1 * n0
  double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};

inline PairCountAuc auc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  PairCountAuc out;
  long long n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      ++n1;
    } else {
      ++n0;
    }
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j])
        out.numerator += 2;
      else if (scores[i] == scores[j])
        out.numerator += 1;
    }
  }
  out.denominator = 2 * n1 * n0;
  return out;
}

// Reference Adam: scalar loops, double precision, pow-based bias correction.
struct ReferenceAdam {
  double lr, beta1, beta2, eps, weight_decay;
  std::vector<double> m, v;
  std::size_t t = 0;

  void step(std::vector<double>& x, const std::vector<double>& grad) {
    if (m.empty()) {
      m.assign(x.size(), 0.0);
      v.assign(x.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double g = grad[i] + weight_decay * x[i];
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double mh = m[i] / (1.0 - std::pow(beta1, static_cast<double>(t)));
      const double vh = v[i] / (1.0 - std::pow(beta2, static_cast<double>(t)));
      x[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

// Nearest-prototype decoder (squared Euclidean).
inline std::size_t nearest_prototype(const std::vector<std::vector<float>>& prototypes,
                                     const float* instance, std::size_t d) {
  std::size_t best = 0;
  long double best_d = 1e30L;
  for (std::size_t p = 0; p < prototypes.size(); ++p) {
    long double s = 0;
    for (std::size_t e = 0; e < d; ++e) {
      const long double diff = static_cast<long double>(instance[e]) - prototypes[p][e];
      s += diff * diff;
    }
    if (s < best_d) {
      best_d = s;
      best = p;
    }
  }
  return best;
}

// Minimal DOT grammar check: digraph header, node statements, edge
// statements 'nA -> nB [label="..."];', balanced braces.
inline bool dot_parses(const std::string& text) {
  std::size_t pos = 0;
  auto skip_ws = [&]() {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  };
  auto accept = [&](const std::string& tok) {
    skip_ws();
    if (text.compare(pos, tok.size(), tok) == 0) {
      pos += tok.size();
      return true;
    }
    return false;
  };
  auto ident = [&]() {
    skip_ws();
    const std::size_t start = pos;
    while (pos < text.size() &&
           (std::isalnum(static_cast<unsigned char>(text[pos])) || text[pos] == '_'))
      ++pos;
    return pos > start;
  };
  auto attr_block = [&]() {
    if (!accept("[")) return true;  // attributes optional
    while (pos < text.size() && text[pos] != ']') {
      if (text[pos] == '"') {
        ++pos;
        while (pos < text.size() && text[pos] != '"') ++pos;
        if (pos == text.size()) return false;
      }
      ++pos;
    }
    return accept("]");
  };
  if (!accept("digraph")) return false;
  if (!ident()) return false;
  if (!accept("{")) return false;
  while (true) {
    skip_ws();
    if (accept("}")) break;
    if (!ident()) return false;  // source node
    skip_ws();
    if (accept("->")) {
      if (!ident()) return false;  // destination node
    }
    if (!attr_block()) return false;
    if (!accept(";")) return false;
    if (pos >= text.size()) return false;
  }
  skip_ws();
  return pos == text.size() || text.find_first_not_of(" \t\r\n", pos) == std::string::npos;
}

}  // namespace oracle
