#include <cmath>
#include <vector>

#include "doctest.h"
#include "storyframe/common.hpp"
#include "storyframe/gmm.hpp"
#include "storyframe/gradcheck.hpp"

using namespace sf;
using namespace sf::num;
using namespace sf::gmm;

namespace {

// Direct long-double mixture density, sharing nothing with the library.
long double oracle_density_1d(const std::vector<long double>& w,
                              const std::vector<long double>& m,
                              const std::vector<long double>& v, long double x) {
    const long double two_pi = 6.283185307179586476925L;
    long double acc = 0.0L;
    for (size_t i = 0; i < w.size(); ++i) {
        long double diff = x - m[i];
        acc += w[i] * std::exp(-diff * diff / (2.0L * v[i])) / std::sqrt(two_pi * v[i]);
    }
    return acc;
}

GmmParams params_1pos_1d(double w0, double w1, double m0, double m1, double v0, double v1) {
    return make_params(Tensor::from({1, 2}, {w0, w1}), Tensor::from({1, 2}, {m0, m1}),
                       Tensor::from({1, 2}, {v0, v1}), 2, 1);
}

}  // namespace

TEST_CASE("parameterize: all-zero raw gives the symmetric unit mixture") {
    const int k = 2, d = 3;
    Tensor raw = Tensor::zeros({2, 2 * k * d + k});
    GmmParams p = parameterize(raw, k, d);
    for (int l = 0; l < 2; ++l) {
        CHECK(p.weights.at(l, 0) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(p.weights.at(l, 1) == doctest::Approx(0.5).epsilon(1e-12));
        for (int j = 0; j < k * d; ++j) {
            CHECK(p.means.at(l, j) == 0.0);
            CHECK(p.variances.at(l, j) ==
                  doctest::Approx(std::log(2.0) + 1e-6).epsilon(1e-12));
        }
    }
}

TEST_CASE("parameterize: softmax closed form for logits (ln 3, 0)") {
    const int k = 2, d = 1;
    Tensor raw = Tensor::zeros({1, 2 * k * d + k});
    raw.at(0, 2 * k * d) = std::log(3.0);
    GmmParams p = parameterize(raw, k, d);
    CHECK(p.weights.at(0, 0) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(p.weights.at(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("parameterize: width mismatch is a dimension error") {
    CHECK_THROWS_AS((void)parameterize(Tensor::zeros({1, 9}), 2, 2), ValidationError);
}

TEST_CASE("parameterize: 1000 random rows are normalized and floored") {
    RngStream rng(6, "gmmprop");
    const int k = 4, d = 3, s = 1000;
    Tensor raw = Tensor::randn({s, 2 * k * d + k}, rng, 3.0);
    GmmParams p = parameterize(raw, k, d);
    for (int l = 0; l < s; ++l) {
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            double w = p.weights.at(l, i);
            CHECK(w >= 0.0);
            sum += w;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
        for (int j = 0; j < k * d; ++j) CHECK(p.variances.at(l, j) >= 1e-6);
    }
}

TEST_CASE("nll: standard-normal closed forms") {
    GmmParams p = make_params(Tensor::from({1, 1}, {1.0}), Tensor::from({1, 2}, {0.0, 0.0}),
                              Tensor::from({1, 2}, {1.0, 1.0}), 1, 2);
    Tensor origin = Tensor::from({1, 2}, {0.0, 0.0});
    double two_pi_log = std::log(2.0 * 3.14159265358979323846);
    CHECK(nll(p, origin, false) == doctest::Approx(two_pi_log).epsilon(1e-9));
    CHECK(nll(p, origin, true) == doctest::Approx(two_pi_log / 2.0).epsilon(1e-9));

    Tensor off = Tensor::from({1, 2}, {1.0, 0.0});
    CHECK(nll(p, off, true) == doctest::Approx((two_pi_log + 0.5) / 2.0).epsilon(1e-9));
}

TEST_CASE("nll: matches the direct-density oracle within 1e-9") {
    GmmParams p = params_1pos_1d(0.3, 0.7, -1.0, 2.0, 0.5, 1.5);
    Tensor target = Tensor::from({1, 1}, {0.4});
    long double dens = oracle_density_1d({0.3L, 0.7L}, {-1.0L, 2.0L}, {0.5L, 1.5L}, 0.4L);
    double want = double(-std::log(dens));
    CHECK(nll(p, target, false) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("nll: scale law is exact") {
    RngStream rng(12, "scale");
    const int k = 3, d = 5, s = 4;
    GmmParams p = parameterize(Tensor::randn({s, 2 * k * d + k}, rng), k, d);
    Tensor target = Tensor::randn({s, d}, rng);
    CHECK(nll(p, target, true) == nll(p, target, false) / double(d));
}

TEST_CASE("nll: errors on bad inputs") {
    GmmParams p = params_1pos_1d(0.5, 0.5, 0.0, 1.0, 1.0, 1.0);
    CHECK_THROWS_AS((void)nll(p, Tensor::from({1, 2}, {0.0, 0.0}), false), ValidationError);
    CHECK_THROWS_AS(
        (void)make_params(Tensor::from({1, 2}, {0.5, 0.5}), Tensor::from({1, 2}, {0.0, 1.0}),
                          Tensor::from({1, 2}, {1.0, -0.5}), 2, 1),
        ValidationError);
    CHECK_THROWS_AS(
        (void)make_params(Tensor::from({1, 2}, {0.9, 0.3}), Tensor::from({1, 2}, {0.0, 1.0}),
                          Tensor::from({1, 2}, {1.0, 0.5}), 2, 1),
        ValidationError);
}

TEST_CASE("nll: finite at extreme targets and floored variances") {
    GmmParams p = make_params(Tensor::from({1, 2}, {0.5, 0.5}),
                              Tensor::from({1, 2}, {0.0, 0.0}),
                              Tensor::from({1, 2}, {kVarianceFloor, 1.0}), 2, 1);
    for (double t : {1e3, -1e3, 999.0}) {
        double val = nll(p, Tensor::from({1, 1}, {t}), false);
        CHECK(std::isfinite(val));
    }
}

TEST_CASE("nll: d=1 density integrates to 1 by trapezoid within 1e-4") {
    std::vector<long double> w = {0.25L, 0.45L, 0.30L};
    std::vector<long double> m = {-2.0L, 0.5L, 1.3L};
    std::vector<long double> v = {1.0L, 1.2L, 1.5L};
    GmmParams p = make_params(Tensor::from({1, 3}, {0.25, 0.45, 0.30}),
                              Tensor::from({1, 3}, {-2.0, 0.5, 1.3}),
                              Tensor::from({1, 3}, {1.0, 1.2, 1.5}), 3, 1);
    double sigma_max = std::sqrt(1.5);
    double lo = -30.0 * sigma_max, hi = 30.0 * sigma_max;
    const int n = 20000;
    double h = (hi - lo) / n;
    long double integral = 0.0L;
    for (int i = 0; i <= n; ++i) {
        double x = lo + h * double(i);
        double dens = std::exp(-nll(p, Tensor::from({1, 1}, {x}), false));
        integral += (i == 0 || i == n) ? dens * 0.5L : dens;
    }
    integral *= h;
    CHECK(std::abs(double(integral) - 1.0) <= 1e-4);
}

TEST_CASE("sample: degenerate limits") {
    GmmParams one = make_params(Tensor::from({1, 1}, {1.0}), Tensor::from({1, 2}, {0.7, -0.2}),
                                Tensor::from({1, 2}, {1.0, 2.0}), 1, 2);
    RngStream rng(3, "sample");
    Tensor s0 = sample(one, rng, 0.0);
    CHECK(s0.at(0, 0) == 0.7);
    CHECK(s0.at(0, 1) == -0.2);

    GmmParams degen = params_1pos_1d(1.0, 0.0, 5.0, -5.0, 1e-12, 1e-12);
    for (int i = 0; i < 200; ++i) {
        Tensor s = sample(degen, rng, 1.0);
        CHECK(std::abs(s.at(0, 0) - 5.0) < 1.0);
    }
}

TEST_CASE("sample: monte-carlo moments of the unit gaussian") {
    GmmParams p = make_params(Tensor::from({1, 1}, {1.0}), Tensor::from({1, 1}, {0.0}),
                              Tensor::from({1, 1}, {1.0}), 1, 1);
    RngStream rng(9, "mc");
    double sum = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) sum += sample(p, rng, 1.0).at(0, 0);
    CHECK(std::abs(sum / n) < 4.0 / std::sqrt(double(n)));
}

TEST_CASE("ar_loss: perfect point prediction leaves only the nll") {
    RngStream rng(14, "arl");
    const int k = 2, d = 4, s = 3;
    GmmParams p = parameterize(Tensor::randn({s, 2 * k * d + k}, rng), k, d);
    Tensor target = Tensor::randn({s, d}, rng);
    ArLossReport r = ar_loss(p, target.clone(), target);
    CHECK(r.l1 == 0.0);
    CHECK(r.l2 == 0.0);
    CHECK(r.total == r.nll);
}

TEST_CASE("ar_loss: centered unit mixture closed form for any d") {
    for (int d : {1, 3, 5}) {
        const int s = 3;
        Tensor target = Tensor::zeros({s, d});
        for (int l = 0; l < s; ++l)
            for (int c = 0; c < d; ++c) target.at(l, c) = 0.1 * double(l) - 0.3 * double(c);
        Tensor w = Tensor::full({s, 1}, 1.0);
        GmmParams p = make_params(w, target.clone(), Tensor::full({s, d}, 1.0), 1, d);
        ArLossReport r = ar_loss(p, mixture_mean(p), target);
        CHECK(r.total == doctest::Approx(0.5 * std::log(2.0 * 3.14159265358979323846))
                             .epsilon(1e-9));
    }
}

TEST_CASE("ar_loss: total is the exact sum of its parts") {
    RngStream rng(15, "arsum");
    const int k = 3, d = 2, s = 5;
    GmmParams p = parameterize(Tensor::randn({s, 2 * k * d + k}, rng), k, d);
    Tensor target = Tensor::randn({s, d}, rng);
    ArLossReport r = ar_loss(p, mixture_mean(p), target);
    CHECK(r.total == (r.nll + r.l1) + r.l2);

    // Independent recomputation of all three terms.
    long double nll_acc = 0.0L;
    for (int l = 0; l < s; ++l) {
        long double best = -1e300L, lse = 0.0L;
        std::vector<long double> terms;
        for (int i = 0; i < k; ++i) {
            long double lw = std::log((long double)p.weights.at(l, i));
            long double ln = 0.0L;
            for (int c = 0; c < d; ++c) {
                long double mm = p.means.at(l, i * d + c);
                long double vv = p.variances.at(l, i * d + c);
                long double diff = (long double)target.at(l, c) - mm;
                ln += -0.5L * (std::log(2.0L * 3.14159265358979323846L) + std::log(vv) +
                               diff * diff / vv);
            }
            terms.push_back(lw + ln);
            best = std::max(best, lw + ln);
        }
        for (long double t : terms) lse += std::exp(t - best);
        nll_acc -= best + std::log(lse);
    }
    double want_nll = double(nll_acc / d / s);
    CHECK(r.nll == doctest::Approx(want_nll).epsilon(1e-10));

    Tensor mm = mixture_mean(p);
    long double l1 = 0.0L, l2 = 0.0L;
    for (int l = 0; l < s; ++l)
        for (int c = 0; c < d; ++c) {
            long double diff = (long double)mm.at(l, c) - target.at(l, c);
            l1 += std::fabs((double)diff);
            l2 += diff * diff;
        }
    CHECK(r.l1 == doctest::Approx(double(l1 / (s * d))).epsilon(1e-10));
    CHECK(r.l2 == doctest::Approx(double(l2 / (s * d))).epsilon(1e-10));
}

TEST_CASE("ar_loss gradient w.r.t. raw head output passes finite differences") {
    RngStream rng(16, "gmmfd");
    const int k = 3, d = 4, s = 4;
    Tensor raw = Tensor::randn({s, 2 * k * d + k}, rng, 1.0, true);
    Tensor target = Tensor::randn({s, d}, rng);
    auto loss = [&] {
        GmmParams p = parameterize(raw, k, d);
        return ar_loss(p, mixture_mean(p), target).total_t;
    };
    RngStream probe(4, "probe");
    CHECK(finite_difference_check(loss, {raw}, 1e-5, 40, probe) < 1e-4);
}

TEST_CASE("gmm head: zero-initialized head produces the unit mixture from any input") {
    ParamStore ps;
    RngStream rng(17, "head");
    GmmHead head(ps, "gmm", 8, 4, 2, rng);
    Tensor h = Tensor::randn({3, 8}, rng);
    GmmParams p = head.forward(h);
    for (int l = 0; l < 3; ++l)
        for (int i = 0; i < 4; ++i) {
            CHECK(p.weights.at(l, i) == doctest::Approx(0.25).epsilon(1e-12));
            CHECK(p.means.at(l, i * 2) == 0.0);
        }
}
