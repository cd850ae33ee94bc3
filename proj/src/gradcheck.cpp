#include "storyframe/gradcheck.hpp"

#include <cmath>

#include "storyframe/common.hpp"

namespace sf::num {

double finite_difference_check(const std::function<Tensor()>& loss_fn,
                               const std::vector<Tensor>& params, double epsilon,
                               int n_probes, RngStream& rng) {
    if (params.empty()) throw ValidationError("finite_difference_check: no parameters");
    for (auto p : params) p.zero_grad();
    Tensor loss = loss_fn();
    loss.backward();

    double worst = 0.0;
    for (int probe = 0; probe < n_probes; ++probe) {
        size_t pi = size_t(rng.uniform_int(int64_t(params.size())));
        Tensor p = params[pi];
        size_t ci = size_t(rng.uniform_int(int64_t(p.numel())));
        if (!p.grad()) throw ValidationError("finite_difference_check: parameter has no grad");
        double analytic = p.grad()[ci];

        double saved = p.data()[ci];
        p.data()[ci] = saved + epsilon;
        double up;
        {
            NoGradGuard ng;
            up = loss_fn().item();
        }
        p.data()[ci] = saved - epsilon;
        double down;
        {
            NoGradGuard ng;
            down = loss_fn().item();
        }
        p.data()[ci] = saved;

        double numeric = (up - down) / (2.0 * epsilon);
        double err = std::abs(analytic - numeric) /
                     std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        if (err > worst) worst = err;
    }
    for (auto p : params) p.zero_grad();
    return worst;
}

}  // namespace sf::num
