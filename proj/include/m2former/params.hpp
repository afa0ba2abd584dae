#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "m2former/errors.hpp"
#include "m2former/rng.hpp"
#include "m2former/tensor.hpp"

namespace m2f {

// Named tensors in insertion order. Used for trainable parameters, their
// gradients (same names/shapes) and non-trainable buffers such as running
// batch-norm statistics.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Shape shape, T fill = T{0}) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.emplace_back(std::move(shape), fill);
    return values_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) { return values_[lookup(name)]; }
  const Tensor<T>& at(const std::string& name) const { return values_[lookup(name)]; }

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<T>& value(std::size_t i) { return values_[i]; }
  const Tensor<T>& value(std::size_t i) const { return values_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  // Same names and shapes, all zeros.
  ParamSet zeros_like() const {
    ParamSet out;
    for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], values_[i].shape());
    return out;
  }

  void zero() {
    for (auto& v : values_) v.fill(T{0});
  }

  // this += other, name by name; other may hold a subset of the names.
  void accumulate(const ParamSet& other) {
    for (std::size_t i = 0; i < other.size(); ++i) at(other.name(i)) += other.value(i);
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      out.add(names_[i], values_[i].shape()) = values_[i].template cast<U>();
    }
    return out;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
void init_trunc_normal(Tensor<T>& t, Rng& rng, double sigma = 0.02) {
  for (auto& v : t.data()) v = static_cast<T>(rng.trunc_normal(sigma));
}

}  // namespace m2f
