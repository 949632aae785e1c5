#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace imsty {

namespace detail {

struct Storage {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means "no gradient buffer"
    bool requires_grad = false;
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

}  // namespace detail

/// Dense tensor of 64-bit floats in row-major order, with an optional
/// gradient buffer of the same length. Copies are shallow: all copies alias
/// the same storage, which is what lets tape closures see gradients written
/// after the closure was recorded.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : st_(std::make_shared<detail::Storage>()) {
        for (std::size_t d : shape) {
            if (d == 0) {
                throw std::invalid_argument("Tensor: zero-sized dimension in shape " +
                                            detail::shape_str(shape));
            }
        }
        st_->shape = std::move(shape);
        st_->data.assign(detail::shape_numel(st_->shape), fill);
    }

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> values) {
        Tensor t(std::move(shape));
        if (t.numel() != values.size()) {
            throw std::invalid_argument("Tensor::from_data: shape " + detail::shape_str(t.shape()) +
                                        " wants " + std::to_string(t.numel()) + " values, got " +
                                        std::to_string(values.size()));
        }
        t.st_->data = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }
    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(std::vector<std::size_t> shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor full(std::vector<std::size_t> shape, double v) { return Tensor(std::move(shape), v); }

    bool defined() const { return static_cast<bool>(st_); }

    const std::vector<std::size_t>& shape() const {
        check();
        return st_->shape;
    }
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= rank()) {
            throw std::out_of_range("Tensor::dim: axis " + std::to_string(i) + " out of range for " +
                                    detail::shape_str(shape()));
        }
        return st_->shape[i];
    }
    std::size_t numel() const {
        check();
        return st_->data.size();
    }

    double* ptr() {
        check();
        return st_->data.data();
    }
    const double* ptr() const {
        check();
        return st_->data.data();
    }
    std::vector<double>& raw() {
        check();
        return st_->data;
    }
    const std::vector<double>& raw() const {
        check();
        return st_->data;
    }

    double value() const {
        if (numel() != 1) {
            throw std::logic_error("Tensor::value: tensor of shape " + detail::shape_str(shape()) +
                                   " is not a scalar");
        }
        return st_->data[0];
    }

    // Unchecked row-major indexers for the common ranks.
    double& operator()(std::size_t i) { return st_->data[i]; }
    double operator()(std::size_t i) const { return st_->data[i]; }
    double& operator()(std::size_t i, std::size_t j) { return st_->data[i * st_->shape[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return st_->data[i * st_->shape[1] + j]; }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return st_->data[(i * st_->shape[1] + j) * st_->shape[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return st_->data[(i * st_->shape[1] + j) * st_->shape[2] + k];
    }
    double& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return st_->data[((n * st_->shape[1] + c) * st_->shape[2] + h) * st_->shape[3] + w];
    }
    double operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return st_->data[((n * st_->shape[1] + c) * st_->shape[2] + h) * st_->shape[3] + w];
    }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        check();
        st_->requires_grad = v;
        return *this;
    }

    // Gradient state lives in the shared storage and is reachable through
    // const handles, mirroring the shared-tensor semantics of the data ops.
    bool has_grad() const { return st_ && !st_->grad.empty(); }
    void ensure_grad() const {
        check();
        if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0);
    }
    void zero_grad() const {
        if (has_grad()) std::fill(st_->grad.begin(), st_->grad.end(), 0.0);
    }
    void drop_grad() const {
        if (st_) st_->grad.clear();
    }
    double* grad_ptr() const {
        require_grad_buffer();
        return st_->grad.data();
    }
    std::vector<double>& grad_raw() const {
        require_grad_buffer();
        return st_->grad;
    }

    /// Deep copy of the values with no gradient tracking.
    Tensor detach() const {
        Tensor t = from_data(shape(), st_->data);
        return t;
    }

    /// Deep copy of values, keeping the requires_grad flag (grad not copied).
    Tensor clone() const {
        Tensor t = from_data(shape(), st_->data);
        t.st_->requires_grad = st_->requires_grad;
        return t;
    }

    bool same_object(const Tensor& o) const { return st_ == o.st_; }

private:
    void check() const {
        if (!st_) throw std::logic_error("Tensor: use of undefined tensor");
    }
    void require_grad_buffer() const {
        check();
        if (st_->grad.empty()) {
            throw std::logic_error("Tensor: gradient requested but no gradient buffer present");
        }
    }

    std::shared_ptr<detail::Storage> st_;
};

/// Records the backward rule of every differentiable operation executed while
/// the tape is active, in execution order (hence topological). backward()
/// seeds the scalar loss gradient with 1 and replays the rules in reverse.
class Tape {
public:
    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return ops_.size(); }

    void backward(Tensor& loss) {
        if (loss.numel() != 1) {
            throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " +
                                        detail::shape_str(loss.shape()));
        }
        loss.ensure_grad();
        loss.grad_raw()[0] = 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void clear() { ops_.clear(); }

private:
    std::vector<std::function<void()>> ops_;
};

namespace detail {
inline Tape*& tape_slot() {
    thread_local Tape* t = nullptr;
    return t;
}
inline bool& grad_mode_slot() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline Tape* active_tape() { return detail::tape_slot(); }
inline bool grad_enabled() { return detail::grad_mode_slot(); }
inline bool recording() { return active_tape() != nullptr && grad_enabled(); }

/// Makes a tape the active recording target for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(detail::tape_slot()) { detail::tape_slot() = &t; }
    ~TapeScope() { detail::tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

/// Disables gradient recording (teacher forwards, evaluation, data paths).
class NoGradScope {
public:
    NoGradScope() : prev_(detail::grad_mode_slot()) { detail::grad_mode_slot() = false; }
    ~NoGradScope() { detail::grad_mode_slot() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool prev_;
};

}  // namespace imsty
