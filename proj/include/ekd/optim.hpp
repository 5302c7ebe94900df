#pragma once

#include <cmath>
#include <vector>

#include "ekd/model.hpp"
#include "ekd/network.hpp"

namespace ekd {

// Adaptive-moment optimizer with L2 decay folded into the gradient
// (g + wd * theta) before the moment updates.
template <typename S>
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit Adam(const ParamState<S>& st) {
    for (const auto& t : st.params) {
      m_.emplace_back(t.size(), S(0));
      v_.emplace_back(t.size(), S(0));
    }
  }

  int steps() const noexcept { return t_; }

  void step(ParamState<S>& st, const Gradients<S>& g, double lr, double weight_decay) {
    ++t_;
    const S b1 = S(kBeta1), b2 = S(kBeta2);
    const S c1 = S(1.0 - std::pow(kBeta1, t_));
    const S c2 = S(1.0 - std::pow(kBeta2, t_));
    const S slr = S(lr), wd = S(weight_decay), eps = S(kEps);
    for (std::size_t i = 0; i < st.params.size(); ++i) {
      auto& theta = st.params[i].values;
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& gi = g[i];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        const S grad = gi[j] + wd * theta[j];
        m[j] = b1 * m[j] + (S(1) - b1) * grad;
        v[j] = b2 * v[j] + (S(1) - b2) * grad * grad;
        const S mhat = m[j] / c1;
        const S vhat = v[j] / c2;
        theta[j] -= slr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  int t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

}  // namespace ekd
