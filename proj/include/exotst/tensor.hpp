#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "exotst/errors.hpp"

namespace exotst {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

namespace detail {
struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized like value iff requires_grad
    bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major tensor of doubles, rank 1 to 3. Copying a Tensor copies the
/// handle, not the storage; operations that build new values return new
/// tensors. Gradient storage exists only when requires_grad is set at
/// construction and accumulates across backward passes until zero_grad().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto d = std::make_shared<detail::TensorData>();
        const std::size_t n = shape_numel(shape);
        d->shape = std::move(shape);
        d->value.assign(n, 0.0);
        d->requires_grad = requires_grad;
        if (requires_grad) d->grad.assign(n, 0.0);
        Tensor t;
        t.d_ = std::move(d);
        return t;
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& x : t.value()) x = v;
        return t;
    }

    static Tensor from_vector(Shape shape, std::vector<double> data,
                              bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("from_vector: shape " + shape_str(shape) + " wants " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(data.size()));
        }
        Tensor t = zeros(std::move(shape), requires_grad);
        t.d_->value = std::move(data);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_vector({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t numel() const { return d_->value.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape[i]; }
    bool requires_grad() const { return d_ && d_->requires_grad; }

    // Accessors are const because a Tensor is a shared handle: constness of
    // the handle does not protect the storage, same as with a shared_ptr.
    std::vector<double>& value() const { return d_->value; }

    std::vector<double>& grad() const {
        check_grad();
        return d_->grad;
    }

    void zero_grad() const {
        if (requires_grad()) d_->grad.assign(d_->grad.size(), 0.0);
    }

    double& operator()(std::size_t i) const { return d_->value[i]; }
    double& operator()(std::size_t i, std::size_t j) const {
        return d_->value[i * d_->shape[1] + j];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return d_->value[(i * d_->shape[1] + j) * d_->shape[2] + k];
    }

    double item() const {
        if (numel() != 1) {
            throw ContractError("item: tensor has " + std::to_string(numel()) +
                                " elements, expected 1");
        }
        return d_->value[0];
    }

    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

    /// Detached copy: same values, no gradient, no tape history.
    Tensor detach_copy() const {
        return from_vector(shape(), value(), false);
    }

private:
    void check_grad() const {
        if (!requires_grad()) {
            throw ContractError("grad: tensor does not track gradients");
        }
    }

    std::shared_ptr<detail::TensorData> d_;
};

/// Gradient tape: an ordered list of backward closures appended in forward
/// execution order and replayed in reverse. One process-wide instance; all
/// taped ops record here while recording is enabled.
class Tape {
public:
    static Tape& instance() {
        static Tape tape;
        return tape;
    }

    bool enabled() const { return enabled_; }
    void set_enabled(bool on) { enabled_ = on; }

    void record(std::function<void()> backward_fn) {
        records_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return records_.size(); }

    void clear() { records_.clear(); }

    /// Replays every recorded closure in reverse order, then clears the tape
    /// (the closures hold tensor handles alive; dropping them releases the
    /// intermediates of the forward pass).
    void replay_reverse_and_clear() {
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
        records_.clear();
    }

private:
    Tape() = default;
    bool enabled_ = true;
    std::vector<std::function<void()>> records_;
};

/// Disables tape recording for the current scope (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() : prev_(Tape::instance().enabled()) {
        Tape::instance().set_enabled(false);
    }
    ~NoGradGuard() { Tape::instance().set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
/// into the grad buffers of every tensor that requires gradients. The tape is
/// cleared afterwards.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, has shape " +
                            shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward: loss does not track gradients");
    }
    loss.grad()[0] += 1.0;
    Tape::instance().replay_reverse_and_clear();
}

namespace detail {
inline std::uint64_t g_multiply_count = 0;
}

/// Scalar multiplications performed by matmul forward passes since the last
/// reset. Used to check asymptotic cost claims exactly.
inline std::uint64_t multiply_count() { return detail::g_multiply_count; }
inline void reset_multiply_count() { detail::g_multiply_count = 0; }

}  // namespace exotst
