#include "mapchange/params.hpp"

#include <cmath>

#include "mapchange/errors.hpp"
#include "mapchange/rng.hpp"

namespace mapchange {

Parameter& ParameterStore::add(std::string name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->velocity = Tensor::zeros(init.shape());
  p->value = std::move(init);
  Parameter* raw = p.get();
  order_.push_back(std::move(p));
  index_.emplace(std::move(name), raw);
  return *raw;
}

Parameter& ParameterStore::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return *it->second;
}

const Parameter& ParameterStore::get(std::string_view name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : order_) n += p->value.size();
  return n;
}

Tensor init_kaiming(const std::string& name, uint64_t seed, std::vector<std::size_t> shape,
                    std::size_t fan_in) {
  if (fan_in == 0) throw ConfigError("init_kaiming: zero fan-in for " + name);
  Rng rng(derive_seed(seed, fnv1a64(name)));
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

Tensor init_zeros(std::vector<std::size_t> shape) { return Tensor::zeros(std::move(shape)); }

Tensor init_ones(std::vector<std::size_t> shape) { return Tensor::full(std::move(shape), 1.0); }

}  // namespace mapchange
