#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bevtrack/tensor.hpp"

namespace bevtrack {

struct FdReport {
  std::size_t entries_checked = 0;
  double max_rel_err = 0.0;
  std::string worst_entry;

  bool pass(double tol) const { return max_rel_err < tol; }
};

// Central finite differences against the tape gradient. `make_loss` rebuilds
// the forward pass from the inputs' current values every call; the inputs are
// perturbed in place. `max_entries` caps the per-tensor sweep (0 = all
// entries, otherwise a deterministic stride sample).
inline FdReport finite_diff_check(
    const std::function<Tensor()>& make_loss,
    const std::vector<std::pair<std::string, Tensor>>& inputs,
    double h = 1e-6, std::size_t max_entries = 0) {
  Tensor loss = make_loss();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& [_, t] : inputs) analytic.push_back(t.grad());

  FdReport rep;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor t = inputs[ti].second;
    const std::size_t n = t.numel();
    const std::size_t stride =
        (max_entries == 0 || n <= max_entries) ? 1 : (n + max_entries - 1) / max_entries;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = t.data()[i];
      t.data()[i] = saved + h;
      double fp;
      {
        NoGradGuard ng;
        fp = make_loss().value();
      }
      t.data()[i] = saved - h;
      double fm;
      {
        NoGradGuard ng;
        fm = make_loss().value();
      }
      t.data()[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[ti][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
      const double rel = std::abs(fd - an) / denom;
      ++rep.entries_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_entry = inputs[ti].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

}  // namespace bevtrack
