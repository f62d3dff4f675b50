// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace naslora {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents disagree. The message names the offending dimension.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised on NaN/Inf values or adjoints.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Misuse of the gradient tape (non-scalar loss, double backward, ...).
class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;   // empty until an adjoint arrives
    bool requires_grad = false;
    bool is_leaf = true;

    void accumulate_grad(std::size_t i, double g) {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        grad[i] += g;
    }
    std::span<double> grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

/// Dense row-major tensor of doubles. Copies share storage; values are treated as
/// immutable once an op has consumed them, except for parameters updated by an optimizer.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        for (std::size_t d = 0; d < shape.size(); ++d) {
            if (shape[d] == 0) throw ShapeError("tensor extent " + std::to_string(d) + " is zero");
        }
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) +
                             " values");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
    }
    static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
        return Tensor(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
    }
    static Tensor scalar(double value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    /// Writable view; only optimizers and initializers should use this on live parameters.
    std::span<double> mutable_data() { return impl_->data; }
    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }
    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) {
        if (!impl_->is_leaf) throw TapeError("requires_grad can only be toggled on leaf tensors");
        impl_->requires_grad = on;
    }
    bool is_leaf() const { return impl_->is_leaf; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    Tensor grad_tensor() const {
        if (!has_grad()) return Tensor::zeros(shape());
        return Tensor(shape(), impl_->grad);
    }
    void zero_grad() { impl_->grad.clear(); }

    /// Deep copy of values; the result is an untracked leaf.
    Tensor detach() const { return Tensor(shape(), impl_->data); }
    Tensor clone(bool requires_grad) const { return Tensor(shape(), impl_->data, requires_grad); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

    void check_finite(const char* what) const {
        for (double v : impl_->data) {
            if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
        }
    }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of executed differentiable operations. Replaying in reverse delivers
/// adjoints to every tracked tensor. One tape per training context.
class GradTape {
public:
    struct Node {
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void(std::span<const double> out_grad)> backward;
    };

    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    /// Makes this tape the recording target for the current thread while in scope.
    class Scope {
    public:
        explicit Scope(GradTape& tape) : prev_(current()) { current() = &tape; }
        ~Scope() { current() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        GradTape* prev_;
    };

    /// Suspends recording on the current thread while in scope.
    class Pause {
    public:
        Pause() : prev_(current()) { current() = nullptr; }
        ~Pause() { current() = prev_; }
        Pause(const Pause&) = delete;
        Pause& operator=(const Pause&) = delete;

    private:
        GradTape* prev_;
    };

    static GradTape*& current() {
        thread_local GradTape* tape = nullptr;
        return tape;
    }

    void record(const Tensor& output, std::function<void(std::span<const double>)> backward,
                std::initializer_list<const Tensor*> inputs = {}) {
        if (consumed_) throw TapeError("recording on a tape that already ran backward; call clear() first");
        nodes_.push_back(Node{output.impl(), std::move(backward)});
        for (const Tensor* t : inputs) note_input(*t);
    }

    /// Registers a tracked leaf so its adjoint is validated after backward.
    void note_input(const Tensor& t) {
        if (t.defined() && t.requires_grad() && t.is_leaf()) leaves_.push_back(t.impl());
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void backward(const Tensor& loss) {
        if (consumed_) throw TapeError("backward called twice without clearing the tape");
        if (loss.numel() != 1) throw TapeError("backward expects a scalar loss, got " + shape_str(loss.shape()));
        if (nodes_.empty()) throw TapeError("backward on an empty tape");
        if (!loss.requires_grad()) throw TapeError("loss is not tracked on this tape");
        consumed_ = true;
        loss.impl()->grad_buffer()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            const auto& g = it->output->grad;
            if (g.empty()) continue;
            for (double v : g) {
                if (!std::isfinite(v)) throw NumericError("non-finite adjoint during backward");
            }
            it->backward(g);
        }
        for (const auto& leaf : leaves_) {
            for (double v : leaf->grad) {
                if (!std::isfinite(v)) throw NumericError("non-finite adjoint on a tracked leaf");
            }
        }
    }

    /// Releases every recorded node and allows recording again.
    void clear() {
        nodes_.clear();
        leaves_.clear();
        consumed_ = false;
    }

private:
    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<detail::TensorImpl>> leaves_;
    bool consumed_ = false;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
}

/// Creates a non-leaf output and, when a tape is active and any input is tracked,
/// registers the backward closure.
template <class Fn>
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
                   Fn&& backward) {
    Tensor out(std::move(shape), std::move(values));
    GradTape* tape = GradTape::current();
    if (tape && any_requires_grad(inputs)) {
        out.impl()->requires_grad = true;
        out.impl()->is_leaf = false;
        tape->record(out, std::forward<Fn>(backward), inputs);
    }
    return out;
}

}  // namespace detail

/// FNV-1a over the raw bytes of a set of tensors.
inline std::uint64_t checksum(std::span<const Tensor> tensors) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor& t : tensors) {
        for (double v : t.data()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

inline std::uint64_t checksum(const Tensor& t) { return checksum(std::span<const Tensor>(&t, 1)); }

}  // namespace naslora
