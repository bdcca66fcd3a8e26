#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace vlmo {

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

template <typename T>
struct AdamWState {
    std::vector<T> m;
    std::vector<T> v;
    std::int64_t step = 0;

    static AdamWState for_size(std::size_t n) { return {std::vector<T>(n, T(0)), std::vector<T>(n, T(0)), 0}; }
};

// One decoupled-weight-decay Adam update with bias correction:
//   p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)
template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, AdamWState<T>& state, const AdamWOptions& options);

}  // namespace vlmo
