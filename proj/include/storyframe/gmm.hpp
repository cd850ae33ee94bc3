#pragma once

#include <string>

#include "storyframe/nn.hpp"
#include "storyframe/ops.hpp"
#include "storyframe/param_store.hpp"
#include "storyframe/rng.hpp"
#include "storyframe/tensor.hpp"

namespace sf::gmm {

using num::ParamStore;
using num::RngStream;
using num::Tensor;

constexpr double kVarianceFloor = 1e-6;

// Per-position mixture over d-dimensional tokens: weights [S,k], means and
// variances [S,k*d] with component i occupying columns [i*d, (i+1)*d).
struct GmmParams {
    Tensor weights;
    Tensor log_weights;  // kept from the logits when available, for NLL stability
    Tensor means;
    Tensor variances;
    int k = 0;
    int d = 0;
};

// Splits a raw head output of width 2kd+k into mixture parameters:
// means raw, variances softplus + floor, weights row-softmax.
GmmParams parameterize(const Tensor& raw, int k, int d);

// Validating constructor for hand-built mixtures (tests, oracles).
GmmParams make_params(const Tensor& weights, const Tensor& means, const Tensor& variances,
                      int k, int d);

// -sum_l log sum_i w exp(log N(target_l | m_i, v_i)), as a graph node.
// scale_by_d divides the total by d.
Tensor nll_loss(const GmmParams& params, const Tensor& target, bool scale_by_d);

// Evaluation wrapper over nll_loss; no tape.
double nll(const GmmParams& params, const Tensor& target, bool scale_by_d);

// Mixture-weighted mean sum_i w_i m_i per position, [S,d].
Tensor mixture_mean(const GmmParams& params);

// Component via tempered categorical softmax(log w / T), then per-channel
// normal with variance T^2 v. T -> 0 collapses to the dominant component's
// mean exactly.
Tensor sample(const GmmParams& params, RngStream& rng, double temperature);

struct ArLossReport {
    Tensor nll_t, l1_t, l2_t, total_t;
    double nll = 0.0, l1 = 0.0, l2 = 0.0, total = 0.0;
};

// Composite token loss: per-token scaled NLL plus mean-absolute and
// mean-squared error of point_prediction against target.
ArLossReport ar_loss(const GmmParams& params, const Tensor& point_prediction,
                     const Tensor& target);

// The modified linear output layer, width -> 2kd+k, zero-initialized so an
// untrained head is the symmetric unit mixture.
struct GmmHead {
    num::Linear out;
    int k = 0;
    int d = 0;
    GmmHead() = default;
    GmmHead(ParamStore& ps, const std::string& prefix, int width, int k, int d, RngStream& rng);
    GmmParams forward(const Tensor& h) const;
};

}  // namespace sf::gmm
