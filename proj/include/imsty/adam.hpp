#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "imsty/tensor.hpp"

namespace imsty {

/// Moment buffers and hyperparameters for Adam. One slot per parameter, in
/// the same order as the parameter list it was created for.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_params(const std::vector<Tensor>& params, double lr) {
        AdamState st;
        st.lr = lr;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const Tensor& p : params) {
            st.m.emplace_back(p.numel(), 0.0);
            st.v.emplace_back(p.numel(), 0.0);
        }
        return st;
    }
};

/// One bias-corrected Adam update. Gradients are read from the parameters'
/// gradient buffers; a parameter without a gradient buffer is an error.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (params.size() != state.m.size()) {
        throw std::invalid_argument("adam_step: state holds " + std::to_string(state.m.size()) +
                                    " slots for " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_grad()) {
            throw std::runtime_error("adam_step: parameter " + std::to_string(i) +
                                     " has no gradient");
        }
        if (state.m[i].size() != params[i].numel()) {
            throw std::invalid_argument("adam_step: moment size mismatch at parameter " +
                                        std::to_string(i));
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* x = params[i].ptr();
        const double* g = params[i].grad_ptr();
        double* m = state.m[i].data();
        double* v = state.v[i].data();
        const std::size_t n = params[i].numel();
        for (std::size_t j = 0; j < n; ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            x[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

/// Convenience wrapper owning the state for a fixed parameter list.
class Adam {
public:
    Adam(std::vector<Tensor> params, double lr)
        : params_(std::move(params)), state_(AdamState::for_params(params_, lr)) {}

    void step() { adam_step(params_, state_); }

    void zero_grad() {
        for (Tensor& p : params_) {
            p.ensure_grad();
            p.zero_grad();
        }
    }

    void set_lr(double lr) { state_.lr = lr; }
    double lr() const { return state_.lr; }
    long step_count() const { return state_.step; }
    const AdamState& state() const { return state_; }

private:
    std::vector<Tensor> params_;  // aliases of the model parameters
    AdamState state_;
};

}  // namespace imsty
