#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wikg/tensor.hpp"

namespace wikg {

template <typename T>
struct AdamConfig {
  T lr = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(1e-5);
  bool decoupled = false;  // default: coupled L2 (grad += wd * param)
};

/// Classical Adam with bias correction. Weight decay is folded into the
/// gradient before the moment update (coupled L2); the decoupled variant
/// subtracts lr*wd*param separately and keeps the moments decay-free.
/// Bias-correction factors are tracked multiplicatively (no pow), so steps
/// are bit-deterministic.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig<T> cfg) : cfg_(cfg) {
    if (cfg_.lr < T(0)) throw param_error("adam: lr must be >= 0");
    if (!(cfg_.beta1 >= T(0) && cfg_.beta1 < T(1))) throw param_error("adam: beta1 out of range");
    if (!(cfg_.beta2 >= T(0) && cfg_.beta2 < T(1))) throw param_error("adam: beta2 out of range");
    if (cfg_.eps <= T(0)) throw param_error("adam: eps must be > 0");
  }

  std::size_t steps() const { return t_; }

  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;

  void step(std::vector<std::pair<std::string, Tensor<T>>>& params) {
    if (state_.empty()) {
      state_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        state_[i].m.assign(params[i].second.size(), T(0));
        state_[i].v.assign(params[i].second.size(), T(0));
        state_[i].scratch.assign(params[i].second.size(), T(0));
      }
    } else if (state_.size() != params.size()) {
      throw param_error("adam: parameter count changed between steps");
    }

    for (auto& [name, p] : params) {
      p.ensure_grad();
      Eigen::Map<const Arr> g(p.grad().data(), static_cast<Eigen::Index>(p.size()));
      if (!g.allFinite()) {
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (!std::isfinite(static_cast<double>(p.grad()[i])))
            throw error("adam: non-finite gradient in '" + name + "' at element " +
                        std::to_string(i) + "; step aborted");
        }
      }
    }

    ++t_;
    beta1t_ *= cfg_.beta1;
    beta2t_ *= cfg_.beta2;
    const T inv_corr1 = T(1) / (T(1) - beta1t_);
    const T inv_corr2 = T(1) / (T(1) - beta2t_);

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi].second;
      const auto numel = static_cast<Eigen::Index>(p.size());
      Eigen::Map<Arr> x(p.mutable_values().data(), numel);
      Eigen::Map<const Arr> grad(p.grad().data(), numel);
      auto& st = state_[pi];
      Eigen::Map<Arr> m(st.m.data(), numel);
      Eigen::Map<Arr> v(st.v.data(), numel);
      Eigen::Map<Arr> ge(st.scratch.data(), numel);
      if (cfg_.decoupled) {
        ge = grad;
      } else {
        ge = grad + cfg_.weight_decay * x;
      }
      m = cfg_.beta1 * m + (T(1) - cfg_.beta1) * ge;
      v = cfg_.beta2 * v + (T(1) - cfg_.beta2) * ge.square();
      if (cfg_.decoupled) {
        x -= cfg_.lr * ((m * inv_corr1) / ((v * inv_corr2).sqrt() + cfg_.eps) +
                        cfg_.weight_decay * x);
      } else {
        x -= cfg_.lr * (m * inv_corr1) / ((v * inv_corr2).sqrt() + cfg_.eps);
      }
    }
  }

 private:
  struct Moments {
    std::vector<T, Eigen::aligned_allocator<T>> m, v, scratch;
  };
  AdamConfig<T> cfg_;
  std::vector<Moments> state_;
  std::size_t t_ = 0;
  T beta1t_ = T(1);
  T beta2t_ = T(1);
};

}  // namespace wikg
