#pragma once

#include <functional>
#include <vector>

#include "storyframe/param_store.hpp"
#include "storyframe/rng.hpp"
#include "storyframe/tensor.hpp"

namespace sf::num {

// Compares analytic gradients against central finite differences for
// `n_probes` randomly chosen parameter coordinates. `loss_fn` must rebuild
// the graph from the current parameter values and return a scalar loss.
// Returns the worst relative error max(|analytic - numeric|) /
// max(|analytic|, |numeric|, 1e-8) over all probes.
double finite_difference_check(const std::function<Tensor()>& loss_fn,
                               const std::vector<Tensor>& params, double epsilon,
                               int n_probes, RngStream& rng);

}  // namespace sf::num
