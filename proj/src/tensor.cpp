#include "storyframe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace sf::num {

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ValidationError("negative extent in shape " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream ss;
    ss << "[";
    for (size_t i = 0; i < s.size(); ++i) ss << (i ? "," : "") << s[i];
    ss << "]";
    return ss.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_leaf(Shape shape, bool requires_grad) {
    Tensor t;
    t.shape_ = std::move(shape);
    size_t n = shape_numel(t.shape_);
    t.data_ = std::make_shared<std::vector<double>>(n, 0.0);
    if (requires_grad) {
        t.grad_ = std::make_shared<std::vector<double>>(n, 0.0);
        t.requires_grad_ = true;
    }
    return t;
}

Tensor make_op_output(Shape shape, std::vector<Tensor> parents,
                      std::function<void(Tensor&)> backward_fn) {
    bool track = false;
    if (grad_enabled()) {
        for (const Tensor& p : parents) track = track || p.requires_grad();
    }
    Tensor t = make_leaf(std::move(shape), track);
    if (track) {
        t.node = std::make_shared<Node>();
        t.node->parents = std::move(parents);
        t.node->backward = std::move(backward_fn);
    }
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return make_leaf(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = make_leaf(std::move(shape), requires_grad);
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ValidationError("from: " + shape_str(shape) + " does not hold " +
                              std::to_string(values.size()) + " values");
    }
    Tensor t = make_leaf(std::move(shape), requires_grad);
    std::copy(values.begin(), values.end(), t.data_->begin());
    return t;
}

Tensor Tensor::randn(Shape shape, RngStream& rng, double stddev, bool requires_grad) {
    Tensor t = make_leaf(std::move(shape), requires_grad);
    for (double& v : *t.data_) v = rng.normal() * stddev;
    return t;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ValidationError("item: tensor " + shape_str(shape_) + " is not scalar");
    }
    return (*data_)[0];
}

void Tensor::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t = make_leaf(shape_, false);
    std::copy(data_->begin(), data_->end(), t.data_->begin());
    return t;
}

void Tensor::check_finite(const std::string& what) const {
    for (double v : *data_) {
        if (!std::isfinite(v)) throw TrainingError("non-finite value in " + what);
    }
}

void Tensor::backward() {
    if (numel() != 1) {
        throw ValidationError("backward: loss must be scalar, got " + shape_str(shape_));
    }
    if (!grad_) throw ValidationError("backward: loss does not require grad");
    (*grad_)[0] = 1.0;
    if (!node) return;

    // Iterative post-order DFS; reversed it is a topological order, so every
    // consumer has finished accumulating into t.grad before t propagates.
    struct Frame {
        Tensor t;
        size_t next;
    };
    std::vector<Tensor> order;
    std::vector<Frame> stack;
    std::unordered_set<Node*> visited;
    stack.push_back({*this, 0});
    visited.insert(node.get());
    while (!stack.empty()) {
        Frame& top = stack.back();
        Node& n = *top.t.node;
        if (top.next < n.parents.size()) {
            Tensor p = n.parents[top.next++];
            if (p.node && visited.insert(p.node.get()).second) {
                stack.push_back({std::move(p), 0});
            }
        } else {
            order.push_back(top.t);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        it->node->backward(*it);
    }
}

}  // namespace sf::num
