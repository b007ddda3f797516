#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "cxal/tensor.hpp"

namespace cxal {

/// Named parameter table in insertion order. Group tags select the learning rate.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    std::string group;
  };

  Tensor& add(const std::string& name, Tensor value, const std::string& group);
  bool contains(const std::string& name) const { return index_.contains(name); }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  const Entry& entry(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  /// Marks every parameter trainable or frozen by name prefix.
  void set_trainable_prefix(const std::string& prefix, bool on);
  void freeze_all();
  std::vector<std::string> trainable_names() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamWConfig {
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float eps = 1e-8F;
  float weight_decay = 0.01F;
};

struct OptimizerState {
  std::uint64_t step = 0;
  std::map<std::string, float> group_lr;
  /// Moments keyed by parameter name; shape-congruent with the parameter.
  std::map<std::string, std::vector<float>> first_moment;
  std::map<std::string, std::vector<float>> second_moment;
};

/// AdamW with decoupled weight decay, applied to trainable parameters only.
class AdamW {
 public:
  AdamW(AdamWConfig config, std::map<std::string, float> group_lr);

  /// Throws NumericError without touching any parameter if a gradient is non-finite.
  void step(ParamSet& params);

  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }
  const AdamWConfig& config() const { return config_; }

 private:
  AdamWConfig config_;
  OptimizerState state_;
};

}  // namespace cxal
