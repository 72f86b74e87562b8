#pragma once

#include <cmath>
#include <vector>

#include "dlac/autodiff.hpp"

namespace dlac {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by the order of the
/// parameter list given at construction.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    if (!(opt_.lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (!(opt_.beta1 >= 0.0 && opt_.beta1 < 1.0) || !(opt_.beta2 >= 0.0 && opt_.beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0, 1)");
    }
    for (auto* p : params_) {
      first_.emplace_back(p->value.shape());
      second_.emplace_back(p->value.shape());
    }
  }

  /// Applies one update to every trainable parameter; all must carry a gradient.
  void step() {
    for (auto* p : params_) {
      if (p->requires_grad && !p->grad_ready) {
        throw GraphError("adam step: parameter '" + p->name + "' has no gradient; call backward first");
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      if (!p.requires_grad) continue;
      auto w = p.value.data();
      auto g = p.grad.data();
      auto m = first_[i].data();
      auto v = second_[i].data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * g[k];
        v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * g[k] * g[k];
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        w[k] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  std::uint64_t steps() const { return step_; }
  const AdamOptions& options() const { return opt_; }
  const Tensor& first_moment(std::size_t i) const { return first_.at(i); }
  const Tensor& second_moment(std::size_t i) const { return second_.at(i); }

 private:
  std::vector<Parameter*> params_;
  AdamOptions opt_;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  std::uint64_t step_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params)
    for (double g : p->grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto* p : params)
      for (auto& g : p->grad.data()) g *= s;
  }
  return norm;
}

}  // namespace dlac
