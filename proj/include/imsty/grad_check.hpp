#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "imsty/tensor.hpp"

namespace imsty {

/// Compares reverse-mode gradients of a scalar-valued function against
/// central finite differences. Returns the maximum over coordinates of
/// |analytic - numeric| / max(1, |analytic|). The probe tensor is cloned, so
/// the caller's data is untouched.
template <typename F>
double grad_check(F&& f, const Tensor& input, double h = 1e-5) {
    if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");
    Tensor x = input.clone();

    x.set_requires_grad(true);
    x.ensure_grad();
    x.zero_grad();
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = f(static_cast<const Tensor&>(x));
        if (loss.numel() != 1) {
            throw std::invalid_argument("grad_check: f must be scalar-valued, got shape " +
                                        detail::shape_str(loss.shape()));
        }
        tape.backward(loss);
    }
    std::vector<double> analytic(x.grad_raw());

    x.set_requires_grad(false);
    double max_err = 0.0;
    {
        NoGradScope ng;
        double* px = x.ptr();
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double orig = px[i];
            px[i] = orig + h;
            const double lp = f(static_cast<const Tensor&>(x)).value();
            px[i] = orig - h;
            const double lm = f(static_cast<const Tensor&>(x)).value();
            px[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace imsty
