#pragma once

#include <map>
#include <string>
#include <vector>

#include "bimot/nn.hpp"

namespace bimot {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Parameters with requires_grad off are never
/// touched and carry no moment state; trainable parameters with an absent
/// gradient are skipped for that step.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  // Throws DataError naming the parameter if any gradient is non-finite; nothing is updated then.
  void step(ParamStore<T>& store, double lr);

  long long steps() const { return step_; }
  bool has_state(const std::string& name) const { return moments_.contains(name); }

  void save_to(ArrayArchive& archive, const std::string& prefix) const;
  void load_from(const ArrayArchive& archive, const std::string& prefix);

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig config_;
  long long step_ = 0;
  std::map<std::string, Moments> moments_;
};

// Global L2 norm over present gradients of trainable parameters.
template <typename T>
double grad_norm(const ParamStore<T>& store);

// Rescales gradients so the global norm is at most max_norm; returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm);

// Linear warmup from 0 over warmup_steps, then constant.
double warmup_lr(double base_lr, long long step, long long warmup_steps);

// Linear warmup, then cosine decay from base_lr to final_frac * base_lr at total_steps.
double warmup_cosine_lr(double base_lr, long long step, long long warmup_steps, long long total_steps,
                        double final_frac);

}  // namespace bimot
