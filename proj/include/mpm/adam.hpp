#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mpm/tensor.hpp"

namespace mpm {

template <typename T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    int64_t t = 0;
    T lr = T(0.001);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T epsilon = T(1e-8);

    AdamState() = default;
    AdamState(size_t n, T lr_, T beta1_ = T(0.9), T beta2_ = T(0.999), T epsilon_ = T(1e-8))
        : m(n, T(0)), v(n, T(0)), lr(lr_), beta1(beta1_), beta2(beta2_), epsilon(epsilon_) {}
};

// Standard bias-corrected Adam step on one parameter tensor.
template <typename T>
void adam_update(Tensor<T>& param, AdamState<T>& state) {
    if (!param.has_grad())
        throw std::logic_error("adam_update: parameter " + shape_str(param.shape()) + " has no gradient buffer");
    if (state.m.size() != param.numel() || state.v.size() != param.numel())
        throw std::logic_error("adam_update: state size does not match parameter " + shape_str(param.shape()));
    state.t += 1;
    const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.t));
    const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.t));
    T* p = param.data().data();
    const T* g = param.grad().data();
    for (size_t i = 0; i < param.numel(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (T(1) - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (T(1) - state.beta2) * g[i] * g[i];
        const T mhat = state.m[i] / bc1;
        const T vhat = state.v[i] / bc2;
        p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
}

}  // namespace mpm
