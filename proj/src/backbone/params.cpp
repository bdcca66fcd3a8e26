#include "vlmo/backbone/params.hpp"

#include <random>

namespace vlmo::model {

template <typename T>
Tensor<T>& ParameterStore<T>::add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
    value.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return entries_[it->second].second;
}

template <typename T>
Tensor<T>& ParameterStore<T>::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return entries_[it->second].second;
}

template <typename T>
std::size_t ParameterStore<T>::total_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
Tensor<T> truncated_normal(Shape shape, double stddev, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) {
        double z;
        do z = n01(rng);
        while (std::abs(z) > 2.0);
        v = static_cast<T>(z * stddev);
    }
    return Tensor<T>::from(std::move(shape), std::move(values));
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template Tensor<float> truncated_normal<float>(Shape, double, std::uint64_t);
template Tensor<double> truncated_normal<double>(Shape, double, std::uint64_t);

}  // namespace vlmo::model
