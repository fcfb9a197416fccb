#include "bimot/optim.hpp"

#include <cmath>

namespace bimot {

template <typename T>
void AdamW<T>::step(ParamStore<T>& store, double lr) {
  for (const auto& p : store.params()) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw DataError("non-finite gradient in parameter " + p.name);
    }
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (auto& p : store.params()) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    auto& mo = moments_[p.name];
    const std::size_t n = p.tensor.numel();
    if (mo.m.size() != n) {
      mo.m.assign(n, 0.0);
      mo.v.assign(n, 0.0);
    }
    auto values = p.tensor.values();
    const auto grad = p.tensor.grad();
    const double decay = 1.0 - lr * config_.weight_decay;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i];
      mo.m[i] = b1 * mo.m[i] + (1 - b1) * g;
      mo.v[i] = b2 * mo.v[i] + (1 - b2) * g * g;
      const double mhat = mo.m[i] / c1, vhat = mo.v[i] / c2;
      double theta = static_cast<double>(values[i]) * decay;
      theta -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      values[i] = static_cast<T>(theta);
    }
  }
}

template <typename T>
void AdamW<T>::save_to(ArrayArchive& archive, const std::string& prefix) const {
  for (const auto& [name, mo] : moments_) {
    archive.put(prefix + name + ".m", std::span<const double>(mo.m), Shape{mo.m.size()});
    archive.put(prefix + name + ".v", std::span<const double>(mo.v), Shape{mo.v.size()});
  }
  archive.metadata()[prefix + "step"] = std::to_string(step_);
}

template <typename T>
void AdamW<T>::load_from(const ArrayArchive& archive, const std::string& prefix) {
  moments_.clear();
  const auto& meta = archive.metadata();
  auto it = meta.find(prefix + "step");
  step_ = it == meta.end() ? 0 : std::stoll(it->second);
  for (const auto& [name, entry] : archive.entries()) {
    if (!name.starts_with(prefix) || !name.ends_with(".m")) continue;
    const std::string param = name.substr(prefix.size(), name.size() - prefix.size() - 2);
    moments_[param] = {archive.get<double>(name), archive.get<double>(prefix + param + ".v")};
  }
}

template <typename T>
double grad_norm(const ParamStore<T>& store) {
  double sq = 0;
  for (const auto& p : store.params()) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  const double norm = grad_norm(store);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (auto& p : store.params()) {
      if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
      for (T& g : p.tensor.node().grad) g = static_cast<T>(g * s);
    }
  }
  return norm;
}

double warmup_lr(double base_lr, long long step, long long warmup_steps) {
  if (warmup_steps <= 0 || step >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

double warmup_cosine_lr(double base_lr, long long step, long long warmup_steps, long long total_steps,
                        double final_frac) {
  if (step < warmup_steps) return warmup_lr(base_lr, step, warmup_steps);
  const double span = static_cast<double>(std::max(1LL, total_steps - warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  const double floor = base_lr * final_frac;
  return floor + (base_lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template class AdamW<float>;
template class AdamW<double>;
template double grad_norm<float>(const ParamStore<float>&);
template double grad_norm<double>(const ParamStore<double>&);
template double clip_grad_norm<float>(ParamStore<float>&, double);
template double clip_grad_norm<double>(ParamStore<double>&, double);

}  // namespace bimot
