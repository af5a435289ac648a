#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "wikg/common.hpp"

namespace wikg {

/// Rank-based (Mann-Whitney) AUC with average ranks for ties:
/// AUC = (sum of positive ranks - n1(n1+1)/2) / (n1 * n0).
/// Requires both classes present.
inline double auc_rank(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw shape_error("auc_rank: size mismatch");
  const std::size_t n = scores.size();
  std::size_t n1 = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw param_error("auc_rank: labels must be 0/1");
    n1 += static_cast<std::size_t>(y);
  }
  const std::size_t n0 = n - n1;
  if (n1 == 0 || n0 == 0) throw param_error("auc_rank: needs both classes");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] == 1) pos_rank_sum += avg_rank;
    }
    i = j + 1;
  }
  const double num = pos_rank_sum - static_cast<double>(n1) * (static_cast<double>(n1) + 1.0) / 2.0;
  return num / (static_cast<double>(n1) * static_cast<double>(n0));
}

/// One evaluation pass. accuracy/auc/weighted_f1 are fractions in [0, 1]
/// (the CLI renders percents); per-class accuracy is recall, NaN for a
/// class with no evaluation samples.
struct MetricsReport {
  double accuracy = 0.0;
  double auc = 0.0;
  double weighted_f1 = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
  std::size_t n_eval = 0;

  nlohmann::json to_json() const {
    nlohmann::json doc;
    doc["accuracy"] = accuracy;
    doc["auc"] = auc;
    doc["weighted_f1"] = weighted_f1;
    doc["per_class_accuracy"] = nlohmann::json::array();
    for (double v : per_class_accuracy) {
      if (std::isfinite(v))
        doc["per_class_accuracy"].push_back(v);
      else
        doc["per_class_accuracy"].push_back(nullptr);
    }
    doc["confusion"] = confusion;
    doc["n_eval"] = n_eval;
    return doc;
  }
};

/// Metrics from per-sample class probabilities. Binary decisions use the
/// 0.5 threshold on P(class 1); multiclass uses argmax (ties to the lowest
/// class). AUC is binary rank-based, or the unweighted mean of one-vs-rest
/// AUCs for C > 2; classes absent from the eval set are excluded from that
/// mean via the warn callback.
inline MetricsReport compute_metrics(const std::vector<std::vector<double>>& probs,
                                     const std::vector<std::size_t>& labels, std::size_t c,
                                     const std::function<void(const std::string&)>& warn = {}) {
  if (probs.size() != labels.size() || probs.empty())
    throw param_error("compute_metrics: empty or mismatched inputs");
  for (const auto& p : probs) {
    if (p.size() != c) throw shape_error("compute_metrics: probability row size != C");
  }
  for (auto y : labels) {
    if (y >= c) throw param_error("compute_metrics: label out of range");
  }
  const std::size_t n = probs.size();
  MetricsReport rep;
  rep.n_eval = n;
  rep.confusion.assign(c, std::vector<std::size_t>(c, 0));

  for (std::size_t i = 0; i < n; ++i) {
    std::size_t pred;
    if (c == 2) {
      pred = probs[i][1] >= 0.5 ? 1 : 0;
    } else {
      pred = 0;
      for (std::size_t j = 1; j < c; ++j) {
        if (probs[i][j] > probs[i][pred]) pred = j;
      }
    }
    ++rep.confusion[labels[i]][pred];
  }

  std::size_t correct = 0;
  for (std::size_t j = 0; j < c; ++j) correct += rep.confusion[j][j];
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  rep.per_class_accuracy.assign(c, std::numeric_limits<double>::quiet_NaN());
  double weighted_f1 = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    std::size_t support = 0, predicted = 0;
    for (std::size_t t = 0; t < c; ++t) {
      support += rep.confusion[j][t];
      predicted += rep.confusion[t][j];
    }
    if (support > 0)
      rep.per_class_accuracy[j] =
          static_cast<double>(rep.confusion[j][j]) / static_cast<double>(support);
    const std::size_t tp2 = 2 * rep.confusion[j][j];
    const double f1 = (support + predicted) > 0
                          ? static_cast<double>(tp2) / static_cast<double>(support + predicted)
                          : 0.0;
    weighted_f1 += static_cast<double>(support) * f1;
  }
  rep.weighted_f1 = weighted_f1 / static_cast<double>(n);

  if (c == 2) {
    std::vector<double> scores(n);
    std::vector<int> binary(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probs[i][1];
      binary[i] = labels[i] == 1 ? 1 : 0;
    }
    rep.auc = auc_rank(scores, binary);
  } else {
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t support = 0;
      for (std::size_t t = 0; t < c; ++t) support += rep.confusion[j][t];
      if (support == 0 || support == n) {
        if (warn)
          warn("class " + std::to_string(j) +
               " absent from eval set (or covers it entirely); excluded from macro AUC");
        continue;
      }
      std::vector<double> scores(n);
      std::vector<int> binary(n);
      for (std::size_t i = 0; i < n; ++i) {
        scores[i] = probs[i][j];
        binary[i] = labels[i] == j ? 1 : 0;
      }
      sum += auc_rank(scores, binary);
      ++counted;
    }
    rep.auc = counted > 0 ? sum / static_cast<double>(counted)
                          : std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

/// Sample mean and standard deviation (n-1 denominator; 0 for n == 1).
inline std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) throw param_error("mean_std: empty");
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() == 1) return {mean, 0.0};
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size() - 1);
  return {mean, std::sqrt(var)};
}

}  // namespace wikg
