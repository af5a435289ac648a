// Command-line front end: dataset generation, training, evaluation,
// cross-validation, neighbor sweeps, graph export and gradient checking.
// Exit codes: 0 success, 1 runtime failure, 2 usage/parameter error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "wikg/checkpoint.hpp"
#include "wikg/data.hpp"
#include "wikg/gradcheck_suite.hpp"
#include "wikg/graph.hpp"
#include "wikg/model.hpp"
#include "wikg/train.hpp"

namespace {

struct ModelFlags {
  std::string model = "wikg";
  std::string policy = "wikg";
  std::string readout = "mean";
  std::size_t epochs = 100;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  std::size_t k = 6;
  double dropout = 0.3;
  double slope = 0.2;
  std::size_t embed_dim = 512;
  std::size_t attn_hidden = 128;
  std::uint64_t seed = 0;
  bool decoupled_wd = false;
  bool exclude_self = false;
  bool clamp_k = false;
  bool f64 = false;
  std::size_t jobs = 1;

  wikg::TrainConfig to_config() const {
    wikg::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.lr = lr;
    cfg.weight_decay = weight_decay;
    cfg.k = k;
    cfg.dropout_p = dropout;
    cfg.seed = seed;
    cfg.model = wikg::parse_model_kind(model);
    cfg.policy = wikg::parse_edge_variant(policy);
    cfg.readout = wikg::parse_readout(readout);
    cfg.leaky_slope = slope;
    cfg.d = embed_dim;
    cfg.attn_hidden = attn_hidden;
    cfg.decoupled_wd = decoupled_wd;
    cfg.exclude_self = exclude_self;
    cfg.clamp_k = clamp_k;
    cfg.jobs = jobs;
    cfg.validate();
    return cfg;
  }
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf, bool with_jobs) {
  cmd->add_option("--model", mf.model, "Model: wikg | mean | max | abmil")
      ->default_str("wikg");
  cmd->add_option("--policy", mf.policy, "Edge policy: wikg | knn-cos | knn-dist")
      ->default_str("wikg");
  cmd->add_option("--readout", mf.readout, "Readout pooling: mean | max")->default_str("mean");
  cmd->add_option("--epochs", mf.epochs, "Training epochs")->default_val(100);
  cmd->add_option("--lr", mf.lr, "Adam learning rate")->default_val(1e-4);
  cmd->add_option("--weight-decay", mf.weight_decay, "L2 weight decay")->default_val(1e-5);
  cmd->add_option("--k", mf.k, "Neighbors per node")->default_val(6);
  cmd->add_option("--dropout", mf.dropout, "Dropout before readout")->default_val(0.3);
  cmd->add_option("--slope", mf.slope, "LeakyReLU negative slope")->default_val(0.2);
  cmd->add_option("--embed-dim", mf.embed_dim, "Embedded feature dim")->default_val(512);
  cmd->add_option("--attn-hidden", mf.attn_hidden, "Gated-attention hidden dim (abmil)")
      ->default_val(128);
  cmd->add_option("--seed", mf.seed, "PRNG seed")->default_val(0);
  cmd->add_flag("--decoupled-wd", mf.decoupled_wd, "Decoupled weight decay instead of coupled L2");
  cmd->add_flag("--exclude-self", mf.exclude_self, "Mask self edges during neighbor selection");
  cmd->add_flag("--clamp-k", mf.clamp_k, "Clamp k to bag size instead of erroring");
  cmd->add_flag("--f64", mf.f64, "Train in double precision (high-precision mode)");
  if (with_jobs) cmd->add_option("--jobs", mf.jobs, "Parallel fold workers")->default_val(1);
}

template <typename T>
std::pair<std::vector<wikg::Bag<T>>, std::size_t> load_data(const std::string& manifest_path) {
  const auto manifest = wikg::read_manifest(manifest_path);
  return {wikg::load_dataset<T>(manifest), manifest.num_classes};
}

void print_report(const wikg::MetricsReport& rep) {
  std::printf("n_eval=%zu accuracy=%.2f%% auc=%.2f%% weighted_f1=%.2f%%\n", rep.n_eval,
              100.0 * rep.accuracy, 100.0 * rep.auc, 100.0 * rep.weighted_f1);
}

template <typename T>
int run_train(const std::string& data, int fold, const ModelFlags& mf, const std::string& out) {
  auto [bags, classes] = load_data<T>(data);
  const auto cfg = mf.to_config();
  auto result = wikg::train(bags, fold, classes, cfg, out);
  std::printf("fold %d: best val AUC %.4f at epoch %zu\n", fold, result.best_val_auc,
              result.best_epoch);
  std::printf("checkpoint: %s\nlog: %s\n", result.checkpoint_path.c_str(),
              result.log_path.c_str());
  return 0;
}

template <typename T>
int run_eval(const std::string& checkpoint, const std::string& data, int fold,
             const std::string& report_path) {
  auto [bags, classes] = load_data<T>(data);
  (void)classes;
  auto rep = wikg::evaluate_checkpoint<T>(checkpoint, bags, fold);
  print_report(rep);
  if (!report_path.empty()) {
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw wikg::io_error("cannot write report " + report_path);
    out << rep.to_json().dump(2) << "\n";
  }
  return 0;
}

template <typename T>
int run_cv(const std::string& data, const ModelFlags& mf, const std::string& out) {
  auto [bags, classes] = load_data<T>(data);
  const auto cfg = mf.to_config();
  auto cv = wikg::cross_validate(bags, classes, cfg, out);
  std::printf("%-6s %10s %10s %10s\n", "fold", "accuracy", "auc", "weighted_f1");
  for (std::size_t i = 0; i < cv.folds.size(); ++i) {
    const auto& r = cv.fold_reports[i];
    std::printf("%-6d %9.2f%% %9.2f%% %9.2f%%\n", cv.folds[i], 100.0 * r.accuracy,
                100.0 * r.auc, 100.0 * r.weighted_f1);
  }
  std::printf("mean   %9.2f%% %9.2f%% %9.2f%%\n", 100.0 * cv.accuracy.mean, 100.0 * cv.auc.mean,
              100.0 * cv.weighted_f1.mean);
  std::printf("std    %9.2f%% %9.2f%% %9.2f%%\n", 100.0 * cv.accuracy.stddev,
              100.0 * cv.auc.stddev, 100.0 * cv.weighted_f1.stddev);
  nlohmann::json doc;
  doc["folds"] = nlohmann::json::array();
  for (std::size_t i = 0; i < cv.folds.size(); ++i) {
    auto j = cv.fold_reports[i].to_json();
    j["fold"] = cv.folds[i];
    doc["folds"].push_back(std::move(j));
  }
  doc["mean"] = {{"accuracy", cv.accuracy.mean}, {"auc", cv.auc.mean},
                 {"weighted_f1", cv.weighted_f1.mean}};
  doc["std"] = {{"accuracy", cv.accuracy.stddev}, {"auc", cv.auc.stddev},
                {"weighted_f1", cv.weighted_f1.stddev}};
  std::ofstream js((std::filesystem::path(out) / "cv_report.json").string(), std::ios::trunc);
  js << doc.dump(2) << "\n";
  return 0;
}

template <typename T>
int run_sweep(const std::string& data, const ModelFlags& mf, const std::vector<std::size_t>& ks,
              const std::string& out) {
  auto [bags, classes] = load_data<T>(data);
  const auto cfg = mf.to_config();
  auto rows = wikg::neighbor_sweep(bags, classes, cfg, ks, out);
  std::printf("%-4s %16s %16s\n", "k", "auc mean+-std", "acc mean+-std");
  for (const auto& r : rows) {
    std::printf("%-4zu %8.2f%%+-%5.2f %8.2f%%+-%5.2f\n", r.k, 100.0 * r.auc.mean,
                100.0 * r.auc.stddev, 100.0 * r.accuracy.mean, 100.0 * r.accuracy.stddev);
  }
  std::printf("table: %s\n", (std::filesystem::path(out) / "sweep.csv").string().c_str());
  return 0;
}

template <typename T>
int run_export(const std::string& checkpoint, const std::string& bag_path,
               const std::string& format, const std::string& out_base) {
  auto model = wikg::ModelInstance<T>::load(checkpoint);
  auto bag = wikg::load_bag<T>(bag_path, 0, 0);
  if (model.kind != wikg::ModelKind::wikg)
    throw wikg::param_error("export-graph needs a wikg checkpoint");
  typename wikg::Tape<T>::NoGrad off;
  wikg::Rng unused(0);
  auto fwd = wikg::forward_bag(bag.features, model.wikg, model.policy, wikg::Mode::eval,
                               model.readout, model.dropout_p, unused);
  if (format == "json" || format == "both") {
    const auto path = out_base + ".json";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw wikg::io_error("cannot write " + path);
    out << wikg::graph_to_json(fwd.graph, bag.node_meta, &fwd.trace.pi).dump(2) << "\n";
    std::printf("wrote %s\n", path.c_str());
  }
  if (format == "dot" || format == "both") {
    const auto path = out_base + ".dot";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw wikg::io_error("cannot write " + path);
    out << wikg::graph_to_dot(fwd.graph, bag.node_meta, &fwd.trace.pi);
    std::printf("wrote %s\n", path.c_str());
  }
  return 0;
}

int run_gradcheck(std::uint64_t seeds, double eps, double tol, const std::string& op_filter) {
  bool all_pass = true;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    for (const auto& r : wikg::run_op_gradchecks(s, eps, tol, op_filter)) {
      if (!r.report.pass || seeds <= 2) {
        std::printf("[%s] seed %llu op %-22s %s\n", r.report.pass ? "pass" : "FAIL",
                    static_cast<unsigned long long>(s), r.op.c_str(),
                    r.report.summary().c_str());
      }
      all_pass = all_pass && r.report.pass;
    }
    if (op_filter.empty()) {
      for (auto variant : {wikg::EdgeVariant::wikg, wikg::EdgeVariant::knn_cos,
                           wikg::EdgeVariant::knn_dist}) {
        const auto rep = wikg::run_model_gradcheck(s, eps, tol, variant);
        if (!rep.pass || seeds <= 2) {
          std::printf("[%s] seed %llu model loss (%s) %s\n", rep.pass ? "pass" : "FAIL",
                      static_cast<unsigned long long>(s), wikg::edge_variant_name(variant),
                      rep.summary().c_str());
        }
        all_pass = all_pass && rep.pass;
      }
    }
  }
  std::printf("gradcheck: %s (eps=%g tol=%g seeds=%llu%s)\n", all_pass ? "ALL PASS" : "FAILURES",
              eps, tol, static_cast<unsigned long long>(seeds),
              op_filter.empty() ? "" : (", filter=" + op_filter).c_str());
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic directed-graph bag classifier (training, evaluation and tooling)"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_config("--config", "",
                 "TOML-style config file with one [subcommand] section per command; flags win");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic co-occurrence dataset");
  std::string gen_out;
  wikg::GenOptions gen_opt;
  std::size_t gen_folds = 4;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--bags", gen_opt.n_bags, "Number of bags (even)")->default_val(400);
  gen->add_option("--min-instances", gen_opt.min_instances, "Smallest bag size")->default_val(30);
  gen->add_option("--max-instances", gen_opt.max_instances, "Largest bag size")->default_val(80);
  gen->add_option("--dim", gen_opt.d_in, "Raw feature dimension")->default_val(384);
  gen->add_option("--sigma", gen_opt.sigma, "Instance noise level")->default_val(0.25);
  gen->add_option("--seed", gen_opt.seed, "Generator seed")->default_val(1);
  gen->add_option("--folds", gen_folds, "Stratified folds written to the manifest")
      ->default_val(4);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train one fold");
  std::string train_data, train_out = "out";
  int train_fold = 0;
  ModelFlags train_flags;
  train_cmd->add_option("--data", train_data, "Manifest CSV")->required();
  train_cmd->add_option("--fold", train_fold, "Held-out validation fold")->default_val(0);
  train_cmd->add_option("--out", train_out, "Output directory")->default_val("out");
  add_model_flags(train_cmd, train_flags, false);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one fold");
  std::string eval_ck, eval_data, eval_report;
  int eval_fold = 0;
  eval_cmd->add_option("--checkpoint", eval_ck, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Manifest CSV")->required();
  eval_cmd->add_option("--fold", eval_fold, "Fold to evaluate")->default_val(0);
  eval_cmd->add_option("--report", eval_report, "Write the metrics report JSON here");

  // cv
  auto* cv_cmd = app.add_subcommand("cv", "Cross-validate over all folds in the manifest");
  std::string cv_data, cv_out = "out";
  ModelFlags cv_flags;
  cv_cmd->add_option("--data", cv_data, "Manifest CSV")->required();
  cv_cmd->add_option("--out", cv_out, "Output directory")->default_val("out");
  add_model_flags(cv_cmd, cv_flags, true);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Cross-validate for each k in a list");
  std::string sweep_data, sweep_out = "out";
  std::vector<std::size_t> sweep_ks;
  ModelFlags sweep_flags;
  sweep_cmd->add_option("--data", sweep_data, "Manifest CSV")->required();
  sweep_cmd->add_option("--out", sweep_out, "Output directory")->default_val("out");
  sweep_cmd->add_option("--k-values", sweep_ks, "Neighbor counts, e.g. --k-values 2,4,6,8")
      ->required()
      ->delimiter(',');
  add_model_flags(sweep_cmd, sweep_flags, true);

  // export-graph
  auto* export_cmd = app.add_subcommand("export-graph", "Run a bag in eval mode and export its graph");
  std::string ex_ck, ex_bag, ex_format = "json", ex_out = "graph";
  export_cmd->add_option("--checkpoint", ex_ck, "Checkpoint file")->required();
  export_cmd->add_option("--bag", ex_bag, "Bag file (.wkgb)")->required();
  export_cmd->add_option("--format", ex_format, "json | dot | both")->default_str("json");
  export_cmd->add_option("--out", ex_out, "Output base path (extension appended)")
      ->default_str("graph");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of every op and the full model");
  std::uint64_t gc_seeds = 5;
  double gc_eps = 1e-5, gc_tol = 1e-5;
  std::string gc_op;
  gc_cmd->add_option("--seeds", gc_seeds, "Random seeds to run")->default_val(5);
  gc_cmd->add_option("--eps", gc_eps, "Finite-difference step")->default_val(1e-5);
  gc_cmd->add_option("--tol", gc_tol, "Max relative error accepted")->default_val(1e-5);
  gc_cmd->add_option("--op", gc_op, "Restrict to ops whose name contains this substring");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      auto ds = wikg::gen_cooccurrence_dataset(gen_opt);
      const auto manifest = wikg::write_dataset(gen_out, ds, gen_folds);
      std::printf("wrote %zu bags + manifest %s\n", ds.bags.size(), manifest.c_str());
      return 0;
    }
    if (train_cmd->parsed()) {
      return train_flags.f64 ? run_train<double>(train_data, train_fold, train_flags, train_out)
                             : run_train<float>(train_data, train_fold, train_flags, train_out);
    }
    if (eval_cmd->parsed()) {
      const auto header = wikg::peek_checkpoint(eval_ck);
      return header.dtype_bytes == 8 ? run_eval<double>(eval_ck, eval_data, eval_fold, eval_report)
                                     : run_eval<float>(eval_ck, eval_data, eval_fold, eval_report);
    }
    if (cv_cmd->parsed()) {
      return cv_flags.f64 ? run_cv<double>(cv_data, cv_flags, cv_out)
                          : run_cv<float>(cv_data, cv_flags, cv_out);
    }
    if (sweep_cmd->parsed()) {
      return sweep_flags.f64 ? run_sweep<double>(sweep_data, sweep_flags, sweep_ks, sweep_out)
                             : run_sweep<float>(sweep_data, sweep_flags, sweep_ks, sweep_out);
    }
    if (export_cmd->parsed()) {
      if (ex_format != "json" && ex_format != "dot" && ex_format != "both")
        throw wikg::param_error("--format must be json, dot or both");
      const auto header = wikg::peek_checkpoint(ex_ck);
      return header.dtype_bytes == 8 ? run_export<double>(ex_ck, ex_bag, ex_format, ex_out)
                                     : run_export<float>(ex_ck, ex_bag, ex_format, ex_out);
    }
    if (gc_cmd->parsed()) {
      return run_gradcheck(gc_seeds, gc_eps, gc_tol, gc_op);
    }
  } catch (const wikg::param_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
