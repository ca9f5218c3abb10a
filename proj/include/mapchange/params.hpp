#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mapchange/tensor.hpp"

namespace mapchange {

// Named trainable tensor plus its SGD momentum buffer. Gradients live on
// the tape of the pass that produced them, not here.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor velocity;
};

// Registration-ordered parameter set with stable addresses and name lookup.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor init);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool has(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  std::size_t count() const { return order_.size(); }
  Parameter& at(std::size_t i) { return *order_[i]; }
  const Parameter& at(std::size_t i) const { return *order_[i]; }
  std::size_t total_size() const;

 private:
  std::vector<std::unique_ptr<Parameter>> order_;
  std::unordered_map<std::string, Parameter*> index_;
};

// Initializers. Every parameter draws from its own RNG stream derived from
// (seed, name), so the same name gets bit-identical values no matter what
// other parameters exist — ablation variants share their common weights.
Tensor init_kaiming(const std::string& name, uint64_t seed, std::vector<std::size_t> shape,
                    std::size_t fan_in);
Tensor init_zeros(std::vector<std::size_t> shape);
Tensor init_ones(std::vector<std::size_t> shape);

}  // namespace mapchange
