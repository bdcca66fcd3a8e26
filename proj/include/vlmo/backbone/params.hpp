#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vlmo/numerics/tensor.hpp"

namespace vlmo::model {

// Named trainable tensors in a stable insertion order. The order defines
// initialization draws and checkpoint layout.
template <typename T>
class ParameterStore {
  public:
    using Entry = std::pair<std::string, Tensor<T>>;

    Tensor<T>& add(const std::string& name, Tensor<T> value);
    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    // Throws ContractError for unknown names.
    const Tensor<T>& get(const std::string& name) const;
    Tensor<T>& get(const std::string& name);

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t total_values() const;

    void zero_grad();

    // Deep copy with values converted to U; gradients are not copied.
    template <typename U>
    ParameterStore<U> cast() const {
        ParameterStore<U> out;
        for (const auto& [name, t] : entries_) {
            std::vector<U> values(t.data().begin(), t.data().end());
            out.add(name, Tensor<U>::from(t.shape(), std::move(values), true));
        }
        return out;
    }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Truncated normal (two standard deviations) used for weight init.
template <typename T>
Tensor<T> truncated_normal(Shape shape, double stddev, std::uint64_t seed);

}  // namespace vlmo::model
