#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "wikg/baselines.hpp"
#include "wikg/checkpoint.hpp"
#include "wikg/data.hpp"
#include "wikg/metrics.hpp"
#include "wikg/model.hpp"
#include "wikg/optim.hpp"

namespace wikg {

struct TrainConfig {
  std::size_t epochs = 100;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t k = 6;
  double dropout_p = 0.3;
  static constexpr std::size_t batch_size = 1;  // one bag per step
  std::uint64_t seed = 0;
  ModelKind model = ModelKind::wikg;
  EdgeVariant policy = EdgeVariant::wikg;
  Readout readout = Readout::mean;
  double leaky_slope = 0.2;
  std::size_t d = 512;
  std::size_t attn_hidden = 128;
  bool decoupled_wd = false;
  bool exclude_self = false;
  bool clamp_k = false;
  std::size_t jobs = 1;

  void validate() const {
    if (lr < 0.0) throw param_error("config: lr must be >= 0");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw param_error("config: dropout in [0,1)");
    if (epochs == 0) throw param_error("config: epochs must be >= 1");
    if (k == 0) throw param_error("config: k must be >= 1");
    if (d == 0) throw param_error("config: d must be >= 1");
    if (jobs == 0) throw param_error("config: jobs must be >= 1");
  }
};

/// A trainable model of either kind behind one forward/named/checkpoint
/// surface, so the loop below does not care which architecture it drives.
template <typename T>
struct ModelInstance {
  ModelKind kind = ModelKind::wikg;
  WikgParams<T> wikg;
  BaselineParams<T> baseline;
  EdgePolicy policy;
  Readout readout = Readout::mean;
  T dropout_p = T(0.3);
  std::size_t d_in = 0, c = 0;

  static ModelInstance create(const TrainConfig& cfg, std::size_t d_in, std::size_t c,
                              Rng& rng) {
    ModelInstance m;
    m.kind = cfg.model;
    m.policy = {cfg.policy, cfg.k, cfg.exclude_self, cfg.clamp_k};
    m.readout = cfg.readout;
    m.dropout_p = static_cast<T>(cfg.dropout_p);
    m.d_in = d_in;
    m.c = c;
    if (cfg.model == ModelKind::wikg) {
      m.wikg = WikgParams<T>::init(d_in, cfg.d, c, static_cast<T>(cfg.leaky_slope), rng);
    } else {
      BaselineKind bk = cfg.model == ModelKind::mean_pool  ? BaselineKind::mean_pool
                        : cfg.model == ModelKind::max_pool ? BaselineKind::max_pool
                                                           : BaselineKind::gated_attention;
      m.baseline = BaselineParams<T>::init(bk, d_in, cfg.d, c, cfg.attn_hidden, rng);
    }
    return m;
  }

  Tensor<T> forward(const Tensor<T>& features, Mode mode, Rng& rng) const {
    if (kind == ModelKind::wikg)
      return forward_bag(features, wikg, policy, mode, readout, dropout_p, rng).logits;
    return baseline_forward(features, baseline).logits;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    return kind == ModelKind::wikg ? wikg.named() : baseline.named();
  }

  CheckpointConfig checkpoint_config() const {
    CheckpointConfig cfg;
    cfg.kind = kind;
    cfg.dtype_bytes = static_cast<std::uint32_t>(sizeof(T));
    cfg.d_in = static_cast<std::uint32_t>(d_in);
    cfg.d = static_cast<std::uint32_t>(kind == ModelKind::wikg ? wikg.d : baseline.d);
    cfg.c = static_cast<std::uint32_t>(c);
    cfg.k = static_cast<std::uint32_t>(policy.k);
    cfg.policy = policy.variant;
    cfg.readout = readout;
    cfg.leaky_slope = kind == ModelKind::wikg ? static_cast<double>(wikg.leaky_slope) : 0.2;
    cfg.exclude_self = policy.exclude_self;
    cfg.clamp_k = policy.clamp_k;
    cfg.attn_hidden = static_cast<std::uint32_t>(baseline.hidden);
    return cfg;
  }

  void save(const std::string& path) const { save_checkpoint(path, checkpoint_config(), named()); }

  static ModelInstance load(const std::string& path) {
    auto ck = load_checkpoint<T>(path);
    ModelInstance m;
    m.kind = ck.config.kind;
    m.policy = {ck.config.policy, ck.config.k, ck.config.exclude_self, ck.config.clamp_k};
    m.readout = ck.config.readout;
    m.d_in = ck.config.d_in;
    m.c = ck.config.c;
    if (m.kind == ModelKind::wikg)
      m.wikg = wikg_params_from_checkpoint(ck);
    else
      m.baseline = baseline_params_from_checkpoint(ck);
    return m;
  }

  std::size_t parameter_count() const {
    return kind == ModelKind::wikg ? param_count(wikg) : param_count(baseline);
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_auc = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainResult {
  int fold = 0;
  double best_val_auc = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
  std::string checkpoint_path;
  std::string log_path;
};

namespace detail {

template <typename T>
std::vector<std::vector<double>> eval_probabilities(const ModelInstance<T>& model,
                                                    const std::vector<const Bag<T>*>& bags) {
  typename Tape<T>::NoGrad off;
  Rng unused(0);
  std::vector<std::vector<double>> probs;
  probs.reserve(bags.size());
  for (const auto* bag : bags) {
    probs.push_back(probabilities(model.forward(bag->features, Mode::eval, unused)));
  }
  return probs;
}

inline double val_auc_from_probs(const std::vector<std::vector<double>>& probs,
                                 const std::vector<std::size_t>& labels, std::size_t c) {
  try {
    return compute_metrics(probs, labels, c).auc;
  } catch (const param_error&) {
    return std::numeric_limits<double>::quiet_NaN();  // single-class validation fold
  }
}

}  // namespace detail

/// Trains one fold: bags with bag.fold == held_out_fold are the validation
/// set, everything else trains. One bag per optimizer step, shuffled each
/// epoch from a per-epoch derived seed; logs epoch,train_loss,val_auc,seconds
/// and keeps the checkpoint with the best validation AUC.
template <typename T>
TrainResult train(const std::vector<Bag<T>>& bags, int held_out_fold, std::size_t num_classes,
                  const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (bags.empty()) throw param_error("train: empty dataset");
  std::vector<const Bag<T>*> train_set, val_set;
  for (const auto& b : bags) {
    (b.fold == held_out_fold ? val_set : train_set).push_back(&b);
  }
  if (train_set.empty()) throw param_error("train: no training bags outside fold " +
                                           std::to_string(held_out_fold));
  const std::size_t d_in = bags.front().features.cols();
  std::vector<std::size_t> val_labels;
  for (const auto* b : val_set) val_labels.push_back(b->label);

  const std::uint64_t fold_seed =
      derive_seed(cfg.seed, 0xf01du + static_cast<std::uint64_t>(held_out_fold));
  Rng init_rng(derive_seed(fold_seed, 1));
  Rng dropout_rng(derive_seed(fold_seed, 2));

  auto model = ModelInstance<T>::create(cfg, d_in, num_classes, init_rng);
  AdamConfig<T> acfg;
  acfg.lr = static_cast<T>(cfg.lr);
  acfg.beta1 = static_cast<T>(cfg.beta1);
  acfg.beta2 = static_cast<T>(cfg.beta2);
  acfg.eps = static_cast<T>(cfg.eps);
  acfg.weight_decay = static_cast<T>(cfg.weight_decay);
  acfg.decoupled = cfg.decoupled_wd;
  Adam<T> adam(acfg);
  auto params = model.named();

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.fold = held_out_fold;
  result.log_path =
      (std::filesystem::path(out_dir) / ("fold" + std::to_string(held_out_fold) + "_log.csv"))
          .string();
  result.checkpoint_path =
      (std::filesystem::path(out_dir) / ("fold" + std::to_string(held_out_fold) + "_best.wkgc"))
          .string();
  std::ofstream log_file(result.log_path, std::ios::trunc);
  if (!log_file) throw io_error("cannot open " + result.log_path + " for writing");
  log_file << "epoch,train_loss,val_auc,seconds\n";

  std::vector<std::vector<T>> best_values;
  bool have_best = false;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(derive_seed(fold_seed, 0x500 + epoch));
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      const Bag<T>& bag = *train_set[idx];
      for (auto& [name, p] : params) p.zero_grad();
      Tape<T> tape;
      auto logits = model.forward(bag.features, Mode::train, dropout_rng);
      auto loss = cross_entropy(logits, bag.label);
      const double loss_val = static_cast<double>(loss.item());
      if (!std::isfinite(loss_val))
        throw error("train: non-finite loss on bag '" + bag.id + "' (epoch " +
                    std::to_string(epoch) + ")");
      loss_sum += loss_val;
      tape.backward(loss);
      adam.step(params);
    }

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train_set.size());
    if (!val_set.empty()) {
      const auto probs = detail::eval_probabilities(model, val_set);
      row.val_auc = detail::val_auc_from_probs(probs, val_labels, num_classes);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);
    char line[128];
    std::snprintf(line, sizeof(line), "%zu,%.8g,%.8g,%.3f\n", row.epoch, row.train_loss,
                  row.val_auc, row.seconds);
    log_file << line;
    log_file.flush();

    const bool improved = std::isfinite(row.val_auc) &&
                          (!have_best || row.val_auc > result.best_val_auc);
    if (improved || val_set.empty()) {
      have_best = true;
      result.best_val_auc = row.val_auc;
      result.best_epoch = epoch;
      best_values.clear();
      for (const auto& [name, p] : params)
        best_values.emplace_back(p.values().begin(), p.values().end());
    }
  }

  if (!best_values.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].second.set_values(best_values[i]);
  }
  model.save(result.checkpoint_path);
  return result;
}

/// Metrics of a model over the bags assigned to `fold`.
template <typename T>
MetricsReport evaluate(const ModelInstance<T>& model, const std::vector<Bag<T>>& bags, int fold,
                       const std::function<void(const std::string&)>& warn = {}) {
  std::vector<const Bag<T>*> eval_set;
  std::vector<std::size_t> labels;
  for (const auto& b : bags) {
    if (b.fold == fold) {
      eval_set.push_back(&b);
      labels.push_back(b.label);
    }
  }
  if (eval_set.empty()) throw param_error("evaluate: no bags in fold " + std::to_string(fold));
  if (model.d_in != eval_set.front()->features.cols())
    throw param_error("evaluate: checkpoint d_in " + std::to_string(model.d_in) +
                      " does not match bag feature dim " +
                      std::to_string(eval_set.front()->features.cols()));
  const auto probs = detail::eval_probabilities(model, eval_set);
  return compute_metrics(probs, labels, model.c, warn);
}

template <typename T>
MetricsReport evaluate_checkpoint(const std::string& checkpoint_path,
                                  const std::vector<Bag<T>>& bags, int fold) {
  return evaluate(ModelInstance<T>::load(checkpoint_path), bags, fold);
}

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;
};

struct CvReport {
  std::vector<int> folds;
  std::vector<TrainResult> train_results;
  std::vector<MetricsReport> fold_reports;
  MetricSummary accuracy, auc, weighted_f1;

  void summarize() {
    std::vector<double> a, u, f;
    for (const auto& r : fold_reports) {
      a.push_back(r.accuracy);
      u.push_back(r.auc);
      f.push_back(r.weighted_f1);
    }
    std::tie(accuracy.mean, accuracy.stddev) = mean_std(a);
    std::tie(auc.mean, auc.stddev) = mean_std(u);
    std::tie(weighted_f1.mean, weighted_f1.stddev) = mean_std(f);
  }
};

/// Trains and evaluates every fold present in the dataset. Folds run on up
/// to cfg.jobs threads; per-fold seeds derive from (seed, fold), so results
/// do not depend on scheduling.
template <typename T>
CvReport cross_validate(const std::vector<Bag<T>>& bags, std::size_t num_classes,
                        const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::set<int> fold_set;
  for (const auto& b : bags) fold_set.insert(b.fold);
  if (fold_set.size() < 2) throw param_error("cross_validate: need at least 2 folds");

  CvReport report;
  report.folds.assign(fold_set.begin(), fold_set.end());
  report.train_results.resize(report.folds.size());
  report.fold_reports.resize(report.folds.size());

  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error = nullptr;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= report.folds.size()) return;
      try {
        report.train_results[i] = train(bags, report.folds[i], num_classes, cfg, out_dir);
        report.fold_reports[i] = evaluate_checkpoint<T>(report.train_results[i].checkpoint_path,
                                                        bags, report.folds[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  const std::size_t n_threads = std::min(cfg.jobs, report.folds.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  report.summarize();
  return report;
}

struct SweepRow {
  std::size_t k = 0;
  MetricSummary auc, accuracy, weighted_f1;
};

/// One cross-validation per k (same seed each time, so a single-entry sweep
/// reproduces cross_validate exactly). Emits sweep.csv under out_dir.
template <typename T>
std::vector<SweepRow> neighbor_sweep(const std::vector<Bag<T>>& bags, std::size_t num_classes,
                                     const TrainConfig& cfg, const std::vector<std::size_t>& ks,
                                     const std::string& out_dir) {
  if (ks.empty()) throw param_error("sweep: no k values");
  std::size_t min_n = std::numeric_limits<std::size_t>::max();
  for (const auto& b : bags) min_n = std::min(min_n, b.features.rows());
  for (auto k : ks) {
    if (!cfg.clamp_k && k > min_n)
      throw param_error("sweep: k=" + std::to_string(k) + " exceeds smallest bag size " +
                        std::to_string(min_n) + " (enable clamping or drop it)");
  }

  std::filesystem::create_directories(out_dir);
  std::vector<SweepRow> rows;
  for (auto k : ks) {
    TrainConfig kcfg = cfg;
    kcfg.k = k;
    const auto sub = (std::filesystem::path(out_dir) / ("k" + std::to_string(k))).string();
    auto cv = cross_validate(bags, num_classes, kcfg, sub);
    rows.push_back({k, cv.auc, cv.accuracy, cv.weighted_f1});
  }

  std::string csv = "k,auc_mean,auc_std,accuracy_mean,accuracy_std,weighted_f1_mean,weighted_f1_std\n";
  char line[192];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%zu,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n", r.k, r.auc.mean,
                  r.auc.stddev, r.accuracy.mean, r.accuracy.stddev, r.weighted_f1.mean,
                  r.weighted_f1.stddev);
    csv += line;
  }
  detail::write_file((std::filesystem::path(out_dir) / "sweep.csv").string(), csv);
  return rows;
}

}  // namespace wikg
