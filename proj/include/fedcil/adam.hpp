#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fedcil/parameter_vector.hpp"

namespace fedcil {

// Adam with per-entry state, keyed by parameter name. Entries absent from a
// step's gradient map are left untouched.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.5, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double learning_rate() const { return lr_; }

  void step(ParameterVector& params,
            const std::map<std::string, std::vector<double>>& grads) {
    for (const auto& [name, g] : grads) {
      ParameterEntry& e = params.at(name);
      if (g.size() != e.data.size()) {
        throw DimensionError("Adam::step: gradient size mismatch for " + name);
      }
      State& s = state_[name];
      if (s.m.size() != g.size()) {
        s = State{};
        s.m.assign(g.size(), 0.0);
        s.v.assign(g.size(), 0.0);
      }
      ++s.t;
      const double bc1 = 1.0 - std::pow(beta1_, s.t);
      const double bc2 = 1.0 - std::pow(beta2_, s.t);
      for (std::size_t i = 0; i < g.size(); ++i) {
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        e.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void reset() { state_.clear(); }

 private:
  struct State {
    std::vector<double> m, v;
    long t = 0;
  };

  double lr_, beta1_, beta2_, eps_;
  std::map<std::string, State> state_;
};

}  // namespace fedcil
