#include "bevtrack/optim.hpp"

#include <cmath>

namespace bevtrack {

double AdamW::lr_at(std::size_t s) const {
  const double frac = static_cast<double>(s) / static_cast<double>(cfg_.total_steps);
  return cfg_.lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

void AdamW::step(ParamStore& params) {
  const double lr = lr_at(step_);
  const std::size_t t = step_ + 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));

  for (auto& [name, tensor] : params.canonical()) {
    Tensor p = tensor;
    if (!p.has_grad())
      throw ContractError("AdamW: missing gradient for parameter " + name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != p.numel()) m.assign(p.numel(), 0.0);
    if (v.size() != p.numel()) v.assign(p.numel(), 0.0);

    auto& w = p.data();
    const auto& g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
  }
  ++step_;
}

}  // namespace bevtrack
