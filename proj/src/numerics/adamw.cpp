#include "vlmo/numerics/adamw.hpp"

#include <cmath>
#include <string>

#include "vlmo/numerics/tensor.hpp"

namespace vlmo {

template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, AdamWState<T>& state, const AdamWOptions& options) {
    if (grad.size() != param.size() || state.m.size() != param.size() || state.v.size() != param.size()) {
        throw DimensionError("adamw_step: parameter of " + std::to_string(param.size()) + " values, gradient " +
                             std::to_string(grad.size()) + ", moments " + std::to_string(state.m.size()) + "/" +
                             std::to_string(state.v.size()));
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(options.beta1, t);
    const double correction2 = 1.0 - std::pow(options.beta2, t);
    const T b1 = T(options.beta1), b2 = T(options.beta2);
    const T decay = T(options.lr * options.weight_decay);
    const T step_size = T(options.lr / correction1);
    const T sqrt_c2 = T(std::sqrt(correction2));
    const T eps = T(options.eps);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const T g = grad[i];
        state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
        param[i] -= decay * param[i];
        param[i] -= step_size * state.m[i] / (std::sqrt(state.v[i]) / sqrt_c2 + eps);
    }
}

template void adamw_step(std::span<float>, std::span<const float>, AdamWState<float>&, const AdamWOptions&);
template void adamw_step(std::span<double>, std::span<const double>, AdamWState<double>&, const AdamWOptions&);

}  // namespace vlmo
