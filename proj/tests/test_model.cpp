#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "wikg/checkpoint.hpp"
#include "wikg/gradcheck_suite.hpp"
#include "wikg/model.hpp"

using namespace wikg;
using Catch::Approx;

namespace {

template <typename T>
Tensor<T> rand2d(Rng& rng, std::size_t m, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(m * n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from({m, n}, std::move(v));
}

WikgParams<double> small_params(Rng& rng, std::size_t d_in, std::size_t d, std::size_t c) {
  return WikgParams<double>::init(d_in, d, c, 0.2, rng);
}

}  // namespace

TEST_CASE("knowledge attention with k=1 is a pass-through") {
  Rng rng(2);
  auto heads = rand2d<double>(rng, 4, 3);
  auto tails = rand2d<double>(rng, 4, 3);
  auto g = build_wikg_graph(heads, tails, 1);
  auto trace = knowledge_attention(g);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(trace.pi.at(i, 0) == 1.0);
    const auto nb = static_cast<std::size_t>(g.neighbor_idx.at(i, 0));
    for (std::size_t e = 0; e < 3; ++e)
      CHECK(trace.h_nbr.at(i, e) == Approx(tails.at(nb, e)).margin(1e-12));
  }
}

TEST_CASE("knowledge attention with constant tails is convex") {
  Rng rng(3);
  auto heads = rand2d<double>(rng, 5, 3);
  std::vector<double> trow{0.3, -1.2, 0.7};
  std::vector<double> tv;
  for (int i = 0; i < 5; ++i) tv.insert(tv.end(), trow.begin(), trow.end());
  auto tails = Tensor<double>::from({5, 3}, tv);
  auto g = build_wikg_graph(heads, tails, 3);
  auto trace = knowledge_attention(g);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t e = 0; e < 3; ++e)
      CHECK(trace.h_nbr.at(i, e) == Approx(trow[e]).margin(1e-9));
}

TEST_CASE("knowledge attention matches the per-element equation oracle") {
  Rng rng(4);
  const std::size_t n = 6, k = 3, d = 4;
  auto heads = rand2d<double>(rng, n, d);
  auto tails = rand2d<double>(rng, n, d);
  auto g = build_wikg_graph(heads, tails, k);
  auto trace = knowledge_attention(g);

  for (std::size_t i = 0; i < n; ++i) {
    std::vector<long double> u(k);
    for (std::size_t j = 0; j < k; ++j) {
      const auto nb = static_cast<std::size_t>(g.neighbor_idx.at(i, j));
      const long double om = g.omega.at(i, j);
      long double dot = 0;
      for (std::size_t e = 0; e < d; ++e) {
        const long double r = om * tails.at(nb, e) + (1.0L - om) * heads.at(i, e);
        dot += static_cast<long double>(tails.at(nb, e)) * std::tanh(heads.at(i, e) + r);
      }
      u[j] = dot;
      CHECK(trace.u.at(i, j) == Approx(static_cast<double>(dot)).margin(1e-10));
    }
    const auto pi = oracle::softmax(u);
    double pi_sum = 0;
    for (std::size_t j = 0; j < k; ++j) {
      CHECK(trace.pi.at(i, j) == Approx(static_cast<double>(pi[j])).margin(1e-10));
      pi_sum += trace.pi.at(i, j);
    }
    CHECK(pi_sum == Approx(1.0).margin(1e-6));
    for (std::size_t e = 0; e < d; ++e) {
      long double agg = 0;
      for (std::size_t j = 0; j < k; ++j)
        agg += pi[j] * tails.at(static_cast<std::size_t>(g.neighbor_idx.at(i, j)), e);
      CHECK(trace.h_nbr.at(i, e) == Approx(static_cast<double>(agg)).margin(1e-10));
    }
  }
}

TEST_CASE("dual interaction hand cases") {
  Rng rng(5);
  WikgParams<double> p;
  p.d_in = 3;
  p.d = 3;
  p.c = 2;
  p.leaky_slope = 0.2;
  p.w1 = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  p.b1 = Tensor<double>::zeros({1, 3});
  p.w2 = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  p.b2 = Tensor<double>::zeros({1, 3});

  auto h = Tensor<double>::from({2, 3}, {1, -2, 0.5, -0.25, 3, -1});
  auto zero = Tensor<double>::zeros({2, 3});
  auto out = dual_interaction(h, zero, p);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t e = 0; e < 3; ++e) {
      const double x = h.at(i, e);
      CHECK(out.at(i, e) == Approx(x > 0 ? x : 0.2 * x).margin(1e-12));
    }
  auto all_zero = dual_interaction(zero, zero, p);
  for (auto v : all_zero.values()) CHECK(v == 0.0);
}

TEST_CASE("dual interaction matches the equation oracle") {
  Rng rng(6);
  const std::size_t n = 5, d = 4;
  auto p = small_params(rng, 4, d, 2);
  auto h = rand2d<double>(rng, n, d);
  auto hn = rand2d<double>(rng, n, d);
  auto out = dual_interaction(h, hn, p);
  auto lrelu = [](long double v) { return v > 0 ? v : 0.2L * v; };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < d; ++o) {
      long double s1 = p.b1.at(0, o), s2 = p.b2.at(0, o);
      for (std::size_t e = 0; e < d; ++e) {
        s1 += (static_cast<long double>(h.at(i, e)) + hn.at(i, e)) * p.w1.at(e, o);
        s2 += (static_cast<long double>(h.at(i, e)) * hn.at(i, e)) * p.w2.at(e, o);
      }
      CHECK(out.at(i, o) == Approx(static_cast<double>(lrelu(s1) + lrelu(s2))).margin(1e-10));
    }
  }
}

TEST_CASE("zero classifier gives uniform prediction") {
  Rng rng(7);
  auto p = small_params(rng, 6, 8, 2);
  p.head_w.set_values(std::vector<double>(8 * 2, 0.0));
  p.head_b.set_values(std::vector<double>(2, 0.0));
  auto features = rand2d<double>(rng, 9, 6);
  Rng drop(1);
  auto res = forward_bag(features, p, {EdgeVariant::wikg, 3}, Mode::eval, Readout::mean, 0.3,
                         drop);
  CHECK(res.logits.at(0, 0) == 0.0);
  CHECK(res.logits.at(0, 1) == 0.0);
  const auto probs = probabilities(res.logits);
  CHECK(probs[0] == Approx(0.5));
  CHECK(probs[1] == Approx(0.5));
}

TEST_CASE("full-model gradcheck for every edge policy") {
  for (auto variant : {EdgeVariant::wikg, EdgeVariant::knn_cos, EdgeVariant::knn_dist}) {
    auto rep = run_model_gradcheck(1, 1e-5, 1e-5, variant);
    INFO(edge_variant_name(variant) << ": " << rep.summary());
    CHECK(rep.pass);
  }
  auto excl = run_model_gradcheck(2, 1e-5, 1e-5, EdgeVariant::wikg, /*exclude_self=*/true);
  INFO(excl.summary());
  CHECK(excl.pass);
}

TEST_CASE("parameter count closed form") {
  Rng rng(8);
  auto p = WikgParams<float>::init(384, 512, 2, 0.2f, rng);
  const std::size_t expect = 384 * 512 + 512      // input projection
                             + 2 * 512 * 512      // head/tail projectors
                             + 2 * (512 * 512 + 512)  // dual interaction
                             + 512 * 2 + 2;       // classifier
  CHECK(param_count(p) == expect);

  auto p4 = WikgParams<float>::init(384, 512, 4, 0.2f, rng);
  CHECK(param_count(p4) - param_count(p) == 2 * (512 + 1));

  // enumeration over the registry agrees
  std::size_t enumerated = 0;
  std::size_t tensors = 0;
  for (const auto& [name, t] : p.named()) {
    enumerated += t.size();
    ++tensors;
  }
  CHECK(tensors == 10);
  CHECK(enumerated == expect);
}

TEST_CASE("permutation invariance of eval-mode mean readout") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(derive_seed(100, seed));
    auto p = WikgParams<float>::init(6, 10, 2, 0.2f, rng);
    const std::size_t n = 14;
    auto features = rand2d<float>(rng, n, 6);
    Rng drop(1);
    const EdgePolicy pol{EdgeVariant::wikg, 4};
    auto base = forward_bag(features, p, pol, Mode::eval, Readout::mean, 0.3f, drop);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    std::vector<float> pv(n * 6);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t e = 0; e < 6; ++e) pv[perm[i] * 6 + e] = features.at(i, e);
    auto permuted = forward_bag(Tensor<float>::from({n, 6}, pv), p, pol, Mode::eval,
                                Readout::mean, 0.3f, drop);
    for (std::size_t j = 0; j < 2; ++j)
      CHECK(std::fabs(base.logits.at(0, j) - permuted.logits.at(0, j)) < 1e-5f);
  }
}

TEST_CASE("eval-mode forward is bit-deterministic") {
  Rng rng(11);
  auto p = WikgParams<float>::init(5, 8, 3, 0.2f, rng);
  auto features = rand2d<float>(rng, 12, 5);
  Rng d1(9), d2(9);
  auto a = forward_bag(features, p, {EdgeVariant::wikg, 4}, Mode::eval, Readout::mean, 0.3f, d1);
  auto b = forward_bag(features, p, {EdgeVariant::wikg, 4}, Mode::eval, Readout::mean, 0.3f, d2);
  for (std::size_t j = 0; j < 3; ++j) REQUIRE(a.logits.at(0, j) == b.logits.at(0, j));
}

TEST_CASE("train-mode dropout is active, eval-mode is not") {
  Rng rng(12);
  auto p = WikgParams<float>::init(5, 8, 2, 0.2f, rng);
  auto features = rand2d<float>(rng, 10, 5);
  Rng d1(1), d2(2);
  auto t1 = forward_bag(features, p, {EdgeVariant::wikg, 3}, Mode::train, Readout::mean, 0.5f, d1);
  auto t2 = forward_bag(features, p, {EdgeVariant::wikg, 3}, Mode::train, Readout::mean, 0.5f, d2);
  bool differ = false;
  for (std::size_t j = 0; j < 2; ++j)
    differ = differ || t1.logits.at(0, j) != t2.logits.at(0, j);
  CHECK(differ);  // different masks move the logits
}

TEST_CASE("symmetric bag reduces to the hand computation") {
  Rng rng(13);
  const std::size_t d_in = 4, d = 5, c = 2, n = 4;
  auto p = small_params(rng, d_in, d, c);
  std::vector<double> row{0.4, -0.9, 1.3, 0.2};
  std::vector<double> fv;
  for (std::size_t i = 0; i < n; ++i) fv.insert(fv.end(), row.begin(), row.end());
  auto features = Tensor<double>::from({n, d_in}, fv);
  Rng drop(1);
  auto res = forward_bag(features, p, {EdgeVariant::wikg, n}, Mode::eval, Readout::mean, 0.3,
                         drop);

  // hand computation over the single distinct instance
  auto lrelu = [](long double v) { return v > 0 ? v : 0.2L * v; };
  std::vector<long double> x(d, 0.0L), h(d, 0.0L), t(d, 0.0L), z(d, 0.0L);
  for (std::size_t o = 0; o < d; ++o) {
    x[o] = p.input_b.at(0, o);
    for (std::size_t e = 0; e < d_in; ++e) x[o] += static_cast<long double>(row[e]) * p.input_w.at(e, o);
  }
  for (std::size_t o = 0; o < d; ++o) {
    for (std::size_t e = 0; e < d; ++e) {
      h[o] += x[e] * p.projector.w_h.at(o, e);
      t[o] += x[e] * p.projector.w_t.at(o, e);
    }
  }
  for (std::size_t o = 0; o < d; ++o) {
    long double s1 = p.b1.at(0, o), s2 = p.b2.at(0, o);
    for (std::size_t e = 0; e < d; ++e) {
      s1 += (h[e] + t[e]) * p.w1.at(e, o);
      s2 += (h[e] * t[e]) * p.w2.at(e, o);
    }
    z[o] = lrelu(s1) + lrelu(s2);
  }
  for (std::size_t j = 0; j < c; ++j) {
    long double logit = p.head_b.at(0, j);
    for (std::size_t e = 0; e < d; ++e) logit += z[e] * p.head_w.at(e, j);
    CHECK(res.logits.at(0, j) == Approx(static_cast<double>(logit)).margin(1e-9));
  }
}

TEST_CASE("duplicating a bag: copies update identically; k=1 keeps logits") {
  Rng rng(14);
  const std::size_t n = 6, d_in = 5;
  auto p = small_params(rng, d_in, 7, 2);
  auto features = rand2d<double>(rng, n, d_in);
  std::vector<double> dup(features.values().begin(), features.values().end());
  dup.insert(dup.end(), features.values().begin(), features.values().end());
  auto doubled = Tensor<double>::from({2 * n, d_in}, dup);
  Rng drop(1);

  // with k=1 the tie rule sends every copy to the original best neighbor,
  // so the mean readout is exactly reproduced
  auto base1 = forward_bag(features, p, {EdgeVariant::wikg, 1}, Mode::eval, Readout::mean, 0.3,
                           drop);
  auto dup1 = forward_bag(doubled, p, {EdgeVariant::wikg, 1}, Mode::eval, Readout::mean, 0.3,
                          drop);
  for (std::size_t j = 0; j < 2; ++j)
    CHECK(dup1.logits.at(0, j) == Approx(base1.logits.at(0, j)).margin(1e-9));

  // with k>1 the duplicated top-k multiset differs (each score appears
  // twice), but a node and its copy always share selection and update
  auto dup3 = forward_bag(doubled, p, {EdgeVariant::wikg, 3}, Mode::eval, Readout::mean, 0.3,
                          drop);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < 7; ++e)
      CHECK(dup3.trace.h_new.at(i, e) == Approx(dup3.trace.h_new.at(i + n, e)).margin(1e-9));
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(15);
  auto p = WikgParams<float>::init(6, 8, 3, 0.25f, rng);
  CheckpointConfig cfg;
  cfg.kind = ModelKind::wikg;
  cfg.d_in = 6;
  cfg.d = 8;
  cfg.c = 3;
  cfg.k = 4;
  cfg.policy = EdgeVariant::knn_cos;
  cfg.readout = Readout::max;
  cfg.leaky_slope = 0.25;
  cfg.exclude_self = true;

  const auto dir = std::filesystem::temp_directory_path() / "wikg_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "model.wkgc").string();
  save_checkpoint(path, cfg, p.named());

  auto loaded = load_checkpoint<float>(path);
  CHECK(loaded.config.kind == ModelKind::wikg);
  CHECK(loaded.config.c == 3);
  CHECK(loaded.config.policy == EdgeVariant::knn_cos);
  CHECK(loaded.config.readout == Readout::max);
  CHECK(loaded.config.leaky_slope == 0.25);
  CHECK(loaded.config.exclude_self);
  REQUIRE(loaded.tensors.size() == 10);
  const auto orig = p.named();
  for (std::size_t i = 0; i < orig.size(); ++i) {
    REQUIRE(loaded.tensors[i].first == orig[i].first);
    REQUIRE(loaded.tensors[i].second.shape() == orig[i].second.shape());
    const auto a = loaded.tensors[i].second.values();
    const auto b = orig[i].second.values();
    for (std::size_t e = 0; e < a.size(); ++e) REQUIRE(a[e] == b[e]);
  }

  // writing the loaded tensors again reproduces the file byte for byte
  const auto path2 = (dir / "model2.wkgc").string();
  save_checkpoint(path2, loaded.config, loaded.tensors);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);

  CHECK_THROWS_AS(load_checkpoint<double>(path), io_error);  // dtype mismatch
  CHECK(peek_checkpoint(path).dtype_bytes == 4);
}

TEST_CASE("forward_bag rejects undersized bags unless clamped") {
  Rng rng(16);
  auto p = WikgParams<float>::init(4, 6, 2, 0.2f, rng);
  auto features = rand2d<float>(rng, 3, 4);
  Rng drop(1);
  CHECK_THROWS_AS(
      forward_bag(features, p, {EdgeVariant::wikg, 5}, Mode::eval, Readout::mean, 0.3f, drop),
      param_error);
  auto res = forward_bag(features, p, {EdgeVariant::wikg, 5, false, /*clamp_k=*/true}, Mode::eval,
                         Readout::mean, 0.3f, drop);
  CHECK(res.graph.k == 3);
}
