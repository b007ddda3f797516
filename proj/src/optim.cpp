#include "cxal/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cxal {

Tensor& ParamSet::add(const std::string& name, Tensor value, const std::string& group) {
  if (index_.contains(name)) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, std::move(value), group});
  return entries_.back().value;
}

Tensor& ParamSet::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::out_of_range("unknown parameter: " + name);
  }
  return entries_[it->second].value;
}

const Tensor& ParamSet::get(const std::string& name) const {
  return entry(name).value;
}

const ParamSet::Entry& ParamSet::entry(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::out_of_range("unknown parameter: " + name);
  }
  return entries_[it->second];
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

void ParamSet::set_trainable_prefix(const std::string& prefix, bool on) {
  for (auto& e : entries_) {
    if (e.name.starts_with(prefix)) e.value.set_requires_grad(on);
  }
}

void ParamSet::freeze_all() {
  for (auto& e : entries_) e.value.set_requires_grad(false);
}

std::vector<std::string> ParamSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (e.value.requires_grad()) out.push_back(e.name);
  }
  return out;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

AdamW::AdamW(AdamWConfig config, std::map<std::string, float> group_lr) : config_(config) {
  state_.group_lr = std::move(group_lr);
}

void AdamW::step(ParamSet& params) {
  for (const auto& e : params.entries()) {
    if (!e.value.requires_grad() || !e.value.has_grad()) continue;
    for (float g : e.value.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adamw: non-finite gradient for parameter '" + e.name + "' at step " +
                           std::to_string(state_.step + 1));
      }
    }
  }
  ++state_.step;
  const auto t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), t);
  const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), t);
  for (auto& e : params.entries()) {
    if (!e.value.requires_grad()) continue;
    const auto lr_it = state_.group_lr.find(e.group);
    if (lr_it == state_.group_lr.end()) {
      throw std::invalid_argument("adamw: no learning rate for group '" + e.group + "'");
    }
    const double lr = lr_it->second;
    auto& m = state_.first_moment[e.name];
    auto& v = state_.second_moment[e.name];
    const std::size_t n = e.value.numel();
    if (m.empty()) {
      m.assign(n, 0.0F);
      v.assign(n, 0.0F);
    }
    auto w = e.value.data();
    const auto g = e.value.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const float gi = g.empty() ? 0.0F : g[i];
      m[i] = config_.beta1 * m[i] + (1.0F - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0F - config_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double wi = w[i];
      wi -= lr * config_.weight_decay * wi;
      wi -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

}  // namespace cxal
