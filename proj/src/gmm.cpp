#include "storyframe/gmm.hpp"

#include <cmath>
#include <vector>

#include "storyframe/common.hpp"

namespace sf::gmm {

using namespace sf::num;

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;

void require_consistent(const GmmParams& p, const Tensor& target) {
    if (p.k <= 0 || p.d <= 0) throw ValidationError("gmm: k and d must be positive");
    if (p.weights.rows() != p.means.rows() || p.weights.rows() != p.variances.rows())
        throw ValidationError("gmm: weights/means/variances row mismatch");
    if (p.weights.cols() != p.k) throw ValidationError("gmm: weights width != k");
    if (p.means.cols() != p.k * p.d || p.variances.cols() != p.k * p.d)
        throw ValidationError("gmm: means/variances width != k*d");
    if (target.defined()) {
        if (target.rows() != p.weights.rows() || target.cols() != p.d)
            throw ValidationError("gmm: target shape mismatch");
    }
    for (size_t i = 0; i < p.variances.numel(); ++i)
        if (!(p.variances.data()[i] > 0.0))
            throw ValidationError("gmm: nonpositive variance");
}
}  // namespace

GmmParams parameterize(const Tensor& raw, int k, int d) {
    if (raw.cols() != 2 * k * d + k)
        throw ValidationError("gmm parameterize: raw width " + std::to_string(raw.cols()) +
                              " != 2kd+k = " + std::to_string(2 * k * d + k));
    GmmParams p;
    p.k = k;
    p.d = d;
    p.means = slice_cols(raw, 0, k * d);
    p.variances = add_const(softplus(slice_cols(raw, k * d, k * d)), kVarianceFloor);
    Tensor logits = slice_cols(raw, 2 * k * d, k);
    p.log_weights = sub_colvec(logits, logsumexp_rows(logits));
    p.weights = exp_t(p.log_weights);
    return p;
}

GmmParams make_params(const Tensor& weights, const Tensor& means, const Tensor& variances,
                      int k, int d) {
    GmmParams p;
    p.k = k;
    p.d = d;
    p.weights = weights;
    p.means = means;
    p.variances = variances;
    require_consistent(p, Tensor());
    for (int i = 0; i < weights.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) {
            double w = weights.at(i, j);
            if (w < 0.0) throw ValidationError("gmm: negative mixture weight");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-9)
            throw ValidationError("gmm: weight row does not sum to 1");
    }
    return p;
}

Tensor nll_loss(const GmmParams& params, const Tensor& target, bool scale_by_d) {
    require_consistent(params, target);
    int k = params.k, d = params.d;
    Tensor logw = params.log_weights.defined() ? params.log_weights : log_t(params.weights);
    std::vector<Tensor> comp_cols;
    comp_cols.reserve(size_t(k));
    for (int i = 0; i < k; ++i) {
        Tensor m = slice_cols(params.means, i * d, d);
        Tensor v = slice_cols(params.variances, i * d, d);
        Tensor diff = sub(target, m);
        Tensor quad = divide(mul(diff, diff), v);
        Tensor rs = row_sum(add(quad, log_t(v)));
        // log N = -(d/2) log 2pi - 0.5 (sum log v + sum (t-m)^2/v)
        Tensor log_n = scale(add_const(rs, double(d) * kLog2Pi), -0.5);
        comp_cols.push_back(add(slice_cols(logw, i, 1), log_n));
    }
    Tensor joint = concat_cols(comp_cols);
    Tensor per_pos = logsumexp_rows(joint);
    Tensor total = neg(sum_all(per_pos));
    return scale_by_d ? div_const(total, double(d)) : total;
}

double nll(const GmmParams& params, const Tensor& target, bool scale_by_d) {
    NoGradGuard ng;
    return nll_loss(params, target, scale_by_d).item();
}

Tensor mixture_mean(const GmmParams& params) {
    require_consistent(params, Tensor());
    int k = params.k, d = params.d;
    Tensor acc;
    for (int i = 0; i < k; ++i) {
        Tensor m = slice_cols(params.means, i * d, d);
        Tensor w = slice_cols(params.weights, i, 1);
        Tensor term = mul_colvec(m, w);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
}

Tensor sample(const GmmParams& params, RngStream& rng, double temperature) {
    if (!(temperature >= 0.0)) throw ValidationError("gmm sample: negative temperature");
    require_consistent(params, Tensor());
    NoGradGuard ng;
    int s = params.weights.rows(), k = params.k, d = params.d;
    Tensor out = Tensor::zeros({s, d});

    for (int l = 0; l < s; ++l) {
        int comp = 0;
        if (k > 1) {
            if (temperature == 1.0) {
                double u = rng.uniform(), cum = 0.0;
                for (int i = 0; i < k; ++i) {
                    cum += params.weights.at(l, i);
                    if (u < cum) {
                        comp = i;
                        break;
                    }
                    comp = i;
                }
            } else if (temperature == 0.0) {
                for (int i = 1; i < k; ++i)
                    if (params.weights.at(l, i) > params.weights.at(l, comp)) comp = i;
            } else {
                // softmax(log w / T) via the max-shifted cumulative walk
                std::vector<double> lw(static_cast<size_t>(k));
                double mx = -1e300;
                for (int i = 0; i < k; ++i) {
                    lw[size_t(i)] = std::log(params.weights.at(l, i)) / temperature;
                    mx = std::max(mx, lw[size_t(i)]);
                }
                double z = 0.0;
                for (int i = 0; i < k; ++i) z += std::exp(lw[size_t(i)] - mx);
                double u = rng.uniform(), cum = 0.0;
                for (int i = 0; i < k; ++i) {
                    cum += std::exp(lw[size_t(i)] - mx) / z;
                    if (u < cum) {
                        comp = i;
                        break;
                    }
                    comp = i;
                }
            }
        }
        for (int c = 0; c < d; ++c) {
            double m = params.means.at(l, comp * d + c);
            double v = params.variances.at(l, comp * d + c);
            double z = rng.normal();
            out.at(l, c) = m + temperature * std::sqrt(v) * z;
        }
    }
    return out;
}

ArLossReport ar_loss(const GmmParams& params, const Tensor& point_prediction,
                     const Tensor& target) {
    require_consistent(params, target);
    if (point_prediction.rows() != target.rows() || point_prediction.cols() != target.cols())
        throw ValidationError("ar_loss: point prediction shape mismatch");
    int s = target.rows();
    ArLossReport r;
    r.nll_t = div_const(nll_loss(params, target, true), double(s));
    Tensor diff = sub(point_prediction, target);
    r.l1_t = mean_all(abs_t(diff));
    r.l2_t = mean_all(mul(diff, diff));
    r.total_t = add(add(r.nll_t, r.l1_t), r.l2_t);
    r.nll = r.nll_t.item();
    r.l1 = r.l1_t.item();
    r.l2 = r.l2_t.item();
    r.total = r.total_t.item();
    return r;
}

GmmHead::GmmHead(ParamStore& ps, const std::string& prefix, int width, int k, int d,
                 RngStream& rng)
    : out(ps, prefix + ".out", width, 2 * k * d + k, rng, 0.0), k(k), d(d) {}

GmmParams GmmHead::forward(const Tensor& h) const {
    return parameterize(out.forward(h), k, d);
}

}  // namespace sf::gmm
