#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "wikg/tensor.hpp"

namespace wikg {

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::size_t elements_checked = 0;
  std::string worst;  // "input <i> element <e>: analytic=.. fd=.."

  std::string summary() const {
    return (pass ? std::string("pass") : std::string("FAIL")) +
           " max_rel_err=" + std::to_string(max_rel_err) + " over " +
           std::to_string(elements_checked) + " elements" +
           (worst.empty() ? "" : " (worst: " + worst + ")");
  }
};

/// Central finite-difference check of reverse-mode gradients.
///
/// `f` must be a deterministic scalar-valued function of the watched tensors
/// (it is re-evaluated many times with perturbed values). Each watched tensor
/// must have requires_grad set. Relative error per element is
/// |analytic - fd| / max(|analytic|, |fd|, floor); the floor turns the
/// comparison absolute (at floor*tol) for near-zero gradients, which keeps
/// plain FD roundoff (~1e-11 for O(1) losses) far under tolerance while a
/// genuinely wrong backward rule still errs at the gradient's own scale.
/// Meant to run on the double instantiation; at float the FD quotient itself
/// is unreliable.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f,
                           std::vector<Tensor<T>> watched, T eps, double tol,
                           double floor = 1e-3) {
  if (watched.empty()) throw param_error("grad_check: nothing to check");
  for (auto& w : watched) {
    if (!w.requires_grad()) throw param_error("grad_check: watched tensor lacks requires_grad");
    w.zero_grad();
  }

  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    Tensor<T> loss = f();
    if (loss.size() != 1) throw param_error("grad_check: f must return a scalar");
    tape.backward(loss);
    for (auto& w : watched) {
      w.ensure_grad();
      analytic.emplace_back(w.grad().begin(), w.grad().end());
    }
  }

  GradCheckReport rep;
  rep.pass = true;
  typename Tape<T>::NoGrad off;
  for (std::size_t wi = 0; wi < watched.size(); ++wi) {
    auto vals = watched[wi].mutable_values();
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const T saved = vals[e];
      vals[e] = saved + eps;
      const double fplus = static_cast<double>(f().item());
      vals[e] = saved - eps;
      const double fminus = static_cast<double>(f().item());
      vals[e] = saved;
      const double fd = (fplus - fminus) / (2.0 * static_cast<double>(eps));
      const double an = static_cast<double>(analytic[wi][e]);
      const double denom = std::max({std::fabs(an), std::fabs(fd), floor});
      const double rel = std::fabs(an - fd) / denom;
      ++rep.elements_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "input " + std::to_string(wi) + " element " + std::to_string(e) +
                    ": analytic=" + std::to_string(an) + " fd=" + std::to_string(fd);
      }
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace wikg
