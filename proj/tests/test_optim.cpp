#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "wikg/optim.hpp"

using namespace wikg;
using Catch::Approx;

namespace {

std::vector<std::pair<std::string, Tensor<double>>> one_param(std::vector<double> values) {
  const std::size_t n = values.size();
  auto t = Tensor<double>::from({1, n}, std::move(values), true);
  return {{"p", t}};
}

}  // namespace

TEST_CASE("zero gradient with zero state leaves parameters unchanged") {
  AdamConfig<double> cfg;
  cfg.weight_decay = 0.0;
  Adam<double> adam(cfg);
  auto params = one_param({1.5, -2.0, 0.25});
  params[0].second.ensure_grad();
  const std::vector<double> before(params[0].second.values().begin(),
                                   params[0].second.values().end());
  adam.step(params);
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(params[0].second.values()[i] == before[i]);
}

TEST_CASE("lr=0 leaves parameters bit-identical") {
  AdamConfig<double> cfg;
  cfg.lr = 0.0;
  Adam<double> adam(cfg);
  auto params = one_param({0.7, -1.1});
  params[0].second.ensure_grad();
  params[0].second.add_grad(0, 3.0);
  params[0].second.add_grad(1, -2.0);
  const std::vector<double> before(params[0].second.values().begin(),
                                   params[0].second.values().end());
  for (int i = 0; i < 5; ++i) adam.step(params);
  for (std::size_t i = 0; i < 2; ++i) REQUIRE(params[0].second.values()[i] == before[i]);
}

TEST_CASE("adam drives a quadratic to zero") {
  AdamConfig<double> cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  Adam<double> adam(cfg);
  auto params = one_param({1.0});
  for (int step = 0; step < 200; ++step) {
    params[0].second.zero_grad();
    params[0].second.ensure_grad();
    params[0].second.add_grad(0, 2.0 * params[0].second.values()[0]);  // d(x^2)/dx
    adam.step(params);
  }
  CHECK(std::fabs(params[0].second.values()[0]) < 1e-3);
}

TEST_CASE("adam matches the independent reference over 50 random steps") {
  Rng rng(99);
  const std::size_t n = 7;
  std::vector<double> init(n);
  for (auto& v : init) v = rng.uniform(-2, 2);

  AdamConfig<double> cfg;  // defaults: lr 1e-4, wd 1e-5 coupled
  cfg.lr = 3e-3;
  Adam<double> adam(cfg);
  auto params = one_param(init);

  oracle::ReferenceAdam ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, {}, {}, 0};
  std::vector<double> ref_x = init;

  for (int step = 0; step < 50; ++step) {
    std::vector<double> grad(n);
    for (auto& g : grad) g = rng.uniform(-1, 1);
    params[0].second.zero_grad();
    params[0].second.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) params[0].second.add_grad(i, grad[i]);
    adam.step(params);
    ref.step(ref_x, grad);
    for (std::size_t i = 0; i < n; ++i)
      REQUIRE(params[0].second.values()[i] == Approx(ref_x[i]).margin(1e-10));
  }
}

TEST_CASE("decoupled weight decay differs from coupled and shrinks weights") {
  AdamConfig<double> coupled;
  coupled.lr = 1e-2;
  coupled.weight_decay = 1e-2;
  AdamConfig<double> decoupled = coupled;
  decoupled.decoupled = true;

  auto pa = one_param({1.0});
  auto pb = one_param({1.0});
  Adam<double> a(coupled), b(decoupled);
  for (int step = 0; step < 10; ++step) {
    for (auto* p : {&pa, &pb}) {
      (*p)[0].second.zero_grad();
      (*p)[0].second.ensure_grad();
      (*p)[0].second.add_grad(0, 0.5);
    }
    a.step(pa);
    b.step(pb);
  }
  CHECK(pa[0].second.values()[0] != pb[0].second.values()[0]);
  CHECK(pb[0].second.values()[0] < 1.0);
}

TEST_CASE("non-finite gradients abort the step with a diagnostic") {
  Adam<double> adam(AdamConfig<double>{});
  auto params = one_param({1.0, 2.0});
  params[0].second.ensure_grad();
  params[0].second.add_grad(1, std::numeric_limits<double>::infinity());
  try {
    adam.step(params);
    FAIL("expected error");
  } catch (const error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("'p'") != std::string::npos);
    CHECK(msg.find("non-finite gradient") != std::string::npos);
  }
}

TEST_CASE("parameter count may not change between steps") {
  Adam<double> adam(AdamConfig<double>{});
  auto params = one_param({1.0});
  params[0].second.ensure_grad();
  adam.step(params);
  auto more = one_param({1.0});
  params.push_back(more[0]);
  params[1].second.ensure_grad();
  CHECK_THROWS_AS(adam.step(params), param_error);
}

TEST_CASE("config validation") {
  AdamConfig<double> bad;
  bad.lr = -1.0;
  CHECK_THROWS_AS(Adam<double>(bad), param_error);
  AdamConfig<double> bad2;
  bad2.beta1 = 1.0;
  CHECK_THROWS_AS(Adam<double>(bad2), param_error);
}
