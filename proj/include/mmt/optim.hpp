#pragma once

// Global-norm gradient clipping and Adam.

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "mmt/error.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

// Scales the .grad buffers in place so their joint L2 norm is at most
// `threshold`; returns the pre-clip norm. Tensors without an allocated grad
// contribute zero. Idempotent up to rounding.
template <class T>
double clip_global_norm(const std::vector<TensorPtr<T>>& params, double threshold) {
  if (!(threshold > 0)) throw ContractError("clip_global_norm: threshold must be > 0");
  double sq = 0;
  for (const auto& p : params) {
    for (const T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const T scale = static_cast<T>(threshold / norm);
    for (const auto& p : params) {
      for (T& g : p->grad) g *= scale;
    }
  }
  return norm;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments and the step counter are kept per
// parameter tensor: under probabilistic task interleaving the partitions
// update on different subsets of the global steps, and bias correction has
// to track how often each tensor actually moved.
template <class T>
class Adam {
 public:
  struct Slot {
    std::vector<T> m, v;
    std::int64_t t = 0;
  };

  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }

  // Applies one update to each listed parameter from its .grad buffer.
  // A missing grad buffer counts as an all-zero gradient.
  void step(const std::vector<TensorPtr<T>>& params) {
    for (const auto& p : params) {
      Slot& s = slot(p);
      s.t += 1;
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
      const std::size_t n = p->values.size();
      const bool has_grad = !p->grad.empty();
      for (std::size_t i = 0; i < n; ++i) {
        const double g = has_grad ? static_cast<double>(p->grad[i]) : 0.0;
        double m = cfg_.beta1 * static_cast<double>(s.m[i]) + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * static_cast<double>(s.v[i]) + (1.0 - cfg_.beta2) * g * g;
        s.m[i] = static_cast<T>(m);
        s.v[i] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        p->values[i] = static_cast<T>(static_cast<double>(p->values[i]) -
                                      cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
      check_finite(*p, "adam_step");
    }
  }

  Slot& slot(const TensorPtr<T>& p) {
    auto it = slots_.find(p.get());
    if (it == slots_.end()) {
      Slot s;
      s.m.assign(p->values.size(), T(0));
      s.v.assign(p->values.size(), T(0));
      it = slots_.emplace(p.get(), std::move(s)).first;
    }
    return it->second;
  }

  bool has_slot(const TensorPtr<T>& p) const { return slots_.count(p.get()) > 0; }

 private:
  AdamConfig cfg_;
  std::unordered_map<const Tensor<T>*, Slot> slots_;
};

}  // namespace mmt
