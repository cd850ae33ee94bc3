#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "storyframe/common.hpp"
#include "storyframe/rng.hpp"

namespace sf::num {

using Shape = std::vector<int>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;

// Dense row-major tensor of 64-bit floats with optional reverse-mode tape.
// Copies are shallow; data/grad buffers are shared.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values,
                       bool requires_grad = false);
    static Tensor randn(Shape shape, RngStream& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int dim(size_t i) const { return shape_[i]; }
    int rows() const { return shape_[0]; }
    int cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }
    size_t numel() const { return data_ ? data_->size() : 0; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double* grad() { return grad_ ? grad_->data() : nullptr; }
    const double* grad() const { return grad_ ? grad_->data() : nullptr; }

    double& at(int i) { return (*data_)[static_cast<size_t>(i)]; }
    double at(int i) const { return (*data_)[static_cast<size_t>(i)]; }
    double& at(int i, int j) {
        return (*data_)[static_cast<size_t>(i) * shape_[1] + j];
    }
    double at(int i, int j) const {
        return (*data_)[static_cast<size_t>(i) * shape_[1] + j];
    }

    // Scalar convenience for loss tensors.
    double item() const;

    bool requires_grad() const { return requires_grad_; }
    void zero_grad();

    // Same buffers, no tape; gradients do not flow into a detached view.
    Tensor detached() const;
    // Deep copy of values only.
    Tensor clone() const;

    // Reverse-mode accumulation from this scalar into every reachable grad.
    void backward();

    void check_finite(const std::string& what) const;

    std::shared_ptr<Node> node;

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<std::vector<double>> grad_;
    bool requires_grad_ = false;

    friend Tensor make_op_output(Shape shape, std::vector<Tensor> parents,
                                 std::function<void(Tensor&)> backward_fn);
    friend Tensor make_leaf(Shape shape, bool requires_grad);
};

struct Node {
    std::vector<Tensor> parents;
    // Reads out.grad(), accumulates += into parents' grads.
    std::function<void(Tensor&)> backward;
};

// Tape recording switch. Disabled inside NoGradGuard scopes (eval paths).
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Op outputs allocate a grad buffer iff some parent requires grad and the
// tape is enabled; otherwise they are plain values.
Tensor make_op_output(Shape shape, std::vector<Tensor> parents,
                      std::function<void(Tensor&)> backward_fn);
Tensor make_leaf(Shape shape, bool requires_grad);

}  // namespace sf::num
