#pragma once

#include <string>
#include <vector>

#include "storyframe/tensor.hpp"

#include "json.hpp"

namespace sf::num {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Named parameter tensors with per-parameter gradient accumulators and
// adaptive-moment state. Insertion order is the checkpoint manifest order.
class ParamStore {
public:
    // Creates (or returns, if already present with the same shape) a named
    // parameter. New parameters start with zero moments.
    Tensor create(const std::string& name, Shape shape);
    Tensor create_randn(const std::string& name, Shape shape, RngStream& rng,
                        double stddev);

    bool has(const std::string& name) const;
    Tensor get(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }
    size_t count() const { return order_.size(); }
    int64_t step() const { return step_; }

    void zero_grad();

    // Bias-corrected adaptive-moment update over every parameter whose name
    // starts with `prefix` (all parameters when empty). Increments the step
    // counter and zeroes all gradients. Non-finite gradients abort with a
    // TrainingError naming the parameter.
    void adam_step(const AdamConfig& cfg, const std::string& prefix = "");

    // Checkpoint: one JSON header line {version, meta, tensors:[{name, shape,
    // offset}]} followed by little-endian float32 arrays in manifest order.
    void save(const std::string& path, const nlohmann::json& meta = {}) const;
    // Loads into a fresh store; rejects unknown format versions.
    static ParamStore load(const std::string& path, nlohmann::json* meta_out = nullptr);

private:
    struct Slot {
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
    };
    std::vector<std::string> order_;
    std::vector<Slot> slots_;
    int64_t step_ = 0;

    const Slot* find(const std::string& name) const;
};

}  // namespace sf::num
