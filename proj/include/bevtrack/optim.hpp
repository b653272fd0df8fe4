#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "bevtrack/param_store.hpp"

namespace bevtrack {

struct OptimConfig {
  double lr = 2.0e-4;
  double weight_decay = 1.0e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1.0e-8;
  std::size_t total_steps = 1;  // horizon of the cosine schedule
};

// AdamW with decoupled weight decay and a cosine learning-rate schedule.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

  // lr(s) = base * 0.5 * (1 + cos(pi * s / total)), s counted from 0.
  double lr_at(std::size_t s) const;
  std::size_t step_count() const { return step_; }

  // Updates every canonical parameter once; aliases see the update for free.
  void step(ParamStore& params);

 private:
  OptimConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace bevtrack
