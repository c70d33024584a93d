#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "glandseg/error.hpp"

namespace glandseg {

template <typename T>
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const NamedTensor&) const = default;
};

/// Ordered collection of named tensors. Layers refer to entries by index.
template <typename T>
class ParamSet {
 public:
  int add(std::string name, std::vector<int> shape, T fill = T(0)) {
    std::size_t n = 1;
    for (const int d : shape) n *= static_cast<std::size_t>(d);
    entries_.push_back({std::move(name), std::move(shape), std::vector<T>(n, fill)});
    return static_cast<int>(entries_.size()) - 1;
  }

  int size() const { return static_cast<int>(entries_.size()); }
  NamedTensor<T>& operator[](int i) { return entries_[static_cast<std::size_t>(i)]; }
  const NamedTensor<T>& operator[](int i) const { return entries_[static_cast<std::size_t>(i)]; }
  T* data(int i) { return entries_[static_cast<std::size_t>(i)].values.data(); }
  const T* data(int i) const { return entries_[static_cast<std::size_t>(i)].values.data(); }

  int index_of(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name == name) return static_cast<int>(i);
    }
    throw Error("no parameter named '" + std::string(name) + "'");
  }
  bool contains(std::string_view name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return true;
    }
    return false;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.size();
    return n;
  }

  /// Same names and shapes, every value set to `fill`.
  ParamSet like(T fill = T(0)) const {
    ParamSet out;
    for (const auto& e : entries_) out.add(e.name, e.shape, fill);
    return out;
  }

  bool same_layout(const ParamSet& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != o.entries_[i].name || entries_[i].shape != o.entries_[i].shape) return false;
    }
    return true;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  bool operator==(const ParamSet&) const = default;

 private:
  std::vector<NamedTensor<T>> entries_;
};

}  // namespace glandseg
