#include "storyframe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sf::num {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ValidationError(std::string(op) + ": shape mismatch " +
                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void require_2d(const Tensor& a, const char* op) {
    if (a.shape().size() != 2) {
        throw ValidationError(std::string(op) + ": expected 2-D, got " +
                              shape_str(a.shape()));
    }
}

// c[m,n] += a[m,k] * b[k,n]
void mm_nn(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[m,k] += a[m,n] * b[k,n]^T
void mm_nt(double* c, const double* a, const double* b, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * n;
        double* ci = c + static_cast<size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const double* bl = b + static_cast<size_t>(l) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += ai[j] * bl[j];
            ci[l] += acc;
        }
    }
}

// c[n,k] += a[m,n]^T * b[m,k]
void mm_tn(double* c, const double* a, const double* b, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * n;
        const double* bi = b + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const double aij = ai[j];
            if (aij == 0.0) continue;
            double* cj = c + static_cast<size_t>(j) * k;
            for (int l = 0; l < k; ++l) cj[l] += aij * bi[l];
        }
    }
}

Tensor unary(const Tensor& a, double (*f)(double), double (*df)(double)) {
    Tensor out = make_op_output(a.shape(), {a}, [df](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* x = p.data();
        const double* g = o.grad();
        double* gx = p.grad();
        for (size_t i = 0; i < o.numel(); ++i) gx[i] += g[i] * df(x[i]);
    });
    const double* x = a.data();
    double* y = out.data();
    for (size_t i = 0; i < a.numel(); ++i) y[i] = f(x[i]);
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make_op_output(a.shape(), {a, b}, [](Tensor& o) {
        const double* g = o.grad();
        for (Tensor& p : o.node->parents) {
            if (!p.requires_grad()) continue;
            double* gp = p.grad();
            for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i];
        }
    });
    const double* x = a.data();
    const double* y = b.data();
    double* z = out.data();
    for (size_t i = 0; i < a.numel(); ++i) z[i] = x[i] + y[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make_op_output(a.shape(), {a, b}, [](Tensor& o) {
        const double* g = o.grad();
        Tensor& pa = o.node->parents[0];
        Tensor& pb = o.node->parents[1];
        if (pa.requires_grad()) {
            double* gp = pa.grad();
            for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i];
        }
        if (pb.requires_grad()) {
            double* gp = pb.grad();
            for (size_t i = 0; i < o.numel(); ++i) gp[i] -= g[i];
        }
    });
    const double* x = a.data();
    const double* y = b.data();
    double* z = out.data();
    for (size_t i = 0; i < a.numel(); ++i) z[i] = x[i] - y[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_op_output(a.shape(), {a, b}, [](Tensor& o) {
        const double* g = o.grad();
        Tensor& pa = o.node->parents[0];
        Tensor& pb = o.node->parents[1];
        if (pa.requires_grad()) {
            double* gp = pa.grad();
            const double* y = pb.data();
            for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i] * y[i];
        }
        if (pb.requires_grad()) {
            double* gp = pb.grad();
            const double* x = pa.data();
            for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i] * x[i];
        }
    });
    const double* x = a.data();
    const double* y = b.data();
    double* z = out.data();
    for (size_t i = 0; i < a.numel(); ++i) z[i] = x[i] * y[i];
    return out;
}

Tensor divide(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "divide");
    Tensor out = make_op_output(a.shape(), {a, b}, [](Tensor& o) {
        const double* g = o.grad();
        Tensor& pa = o.node->parents[0];
        Tensor& pb = o.node->parents[1];
        const double* x = pa.data();
        const double* y = pb.data();
        if (pa.requires_grad()) {
            double* gp = pa.grad();
            for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i] / y[i];
        }
        if (pb.requires_grad()) {
            double* gp = pb.grad();
            for (size_t i = 0; i < o.numel(); ++i)
                gp[i] -= g[i] * x[i] / (y[i] * y[i]);
        }
    });
    const double* x = a.data();
    const double* y = b.data();
    double* z = out.data();
    for (size_t i = 0; i < a.numel(); ++i) z[i] = x[i] / y[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = make_op_output(a.shape(), {a}, [s](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i] * s;
    });
    const double* x = a.data();
    double* z = out.data();
    for (size_t i = 0; i < a.numel(); ++i) z[i] = x[i] * s;
    return out;
}

Tensor add_const(const Tensor& a, double c) {
    Tensor out = make_op_output(a.shape(), {a}, [](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i];
    });
    const double* x = a.data();
    double* z = out.data();
    for (size_t i = 0; i < a.numel(); ++i) z[i] = x[i] + c;
    return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

namespace {
double gelu_f(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_df(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}
double softplus_f(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}
double softplus_df(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double abs_f(double x) { return std::fabs(x); }
double abs_df(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }
double log_f(double x) { return std::log(x); }
double log_df(double x) { return 1.0 / x; }
double exp_f(double x) { return std::exp(x); }
}  // namespace

Tensor gelu(const Tensor& a) { return unary(a, gelu_f, gelu_df); }
Tensor softplus(const Tensor& a) { return unary(a, softplus_f, softplus_df); }
Tensor abs_t(const Tensor& a) { return unary(a, abs_f, abs_df); }
Tensor log_t(const Tensor& a) { return unary(a, log_f, log_df); }
Tensor exp_t(const Tensor& a) { return unary(a, exp_f, exp_f); }

Tensor div_const(const Tensor& a, double c) {
    if (c == 0.0) throw ValidationError("div_const: zero divisor");
    Tensor out = make_op_output(a.shape(), {a}, [c](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i] / c;
    });
    const double* x = a.data();
    double* y = out.data();
    for (size_t i = 0; i < a.numel(); ++i) y[i] = x[i] / c;
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw ValidationError("matmul: inner extents differ, " +
                              shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_op_output({m, n}, {a, b}, [m, k, n](Tensor& o) {
        Tensor& pa = o.node->parents[0];
        Tensor& pb = o.node->parents[1];
        if (pa.requires_grad()) mm_nt(pa.grad(), o.grad(), pb.data(), m, n, k);
        if (pb.requires_grad()) mm_tn(pb.grad(), pa.data(), o.grad(), m, k, n);
    });
    mm_nn(out.data(), a.data(), b.data(), m, k, n);
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    int m = a.dim(0), n = a.dim(1);
    Tensor out = make_op_output({n, m}, {a}, [m, n](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                gp[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
    });
    const double* x = a.data();
    double* y = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            y[static_cast<size_t>(j) * m + i] = x[static_cast<size_t>(i) * n + j];
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
    require_2d(x, "add_rowvec");
    if (bias.numel() != static_cast<size_t>(x.dim(1))) {
        throw ValidationError("add_rowvec: bias width mismatch");
    }
    int m = x.dim(0), n = x.dim(1);
    Tensor out = make_op_output(x.shape(), {x, bias}, [m, n](Tensor& o) {
        Tensor& px = o.node->parents[0];
        Tensor& pb = o.node->parents[1];
        const double* g = o.grad();
        if (px.requires_grad()) {
            double* gp = px.grad();
            for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i];
        }
        if (pb.requires_grad()) {
            double* gb = pb.grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[j] += g[static_cast<size_t>(i) * n + j];
        }
    });
    const double* xd = x.data();
    const double* bd = bias.data();
    double* y = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            y[static_cast<size_t>(i) * n + j] = xd[static_cast<size_t>(i) * n + j] + bd[j];
    return out;
}

namespace {
Tensor colvec_combine(const Tensor& x, const Tensor& col, double sign) {
    require_2d(x, "colvec broadcast");
    if (col.dim(0) != x.dim(0) || col.numel() != static_cast<size_t>(x.dim(0))) {
        throw ValidationError("colvec broadcast: column shape mismatch");
    }
    int m = x.dim(0), n = x.dim(1);
    Tensor out = make_op_output(x.shape(), {x, col}, [m, n, sign](Tensor& o) {
        Tensor& px = o.node->parents[0];
        Tensor& pc = o.node->parents[1];
        const double* g = o.grad();
        if (px.requires_grad()) {
            double* gp = px.grad();
            for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i];
        }
        if (pc.requires_grad()) {
            double* gc = pc.grad();
            for (int i = 0; i < m; ++i) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += g[static_cast<size_t>(i) * n + j];
                gc[i] += sign * acc;
            }
        }
    });
    const double* xd = x.data();
    const double* cd = col.data();
    double* y = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            y[static_cast<size_t>(i) * n + j] =
                xd[static_cast<size_t>(i) * n + j] + sign * cd[i];
    return out;
}
}  // namespace

Tensor add_colvec(const Tensor& x, const Tensor& col) { return colvec_combine(x, col, 1.0); }
Tensor sub_colvec(const Tensor& x, const Tensor& col) { return colvec_combine(x, col, -1.0); }

Tensor mul_colvec(const Tensor& x, const Tensor& col) {
    require_2d(x, "mul_colvec");
    if (col.dim(0) != x.dim(0) || col.numel() != static_cast<size_t>(x.dim(0))) {
        throw ValidationError("mul_colvec: column extent mismatch");
    }
    int m = x.dim(0), n = x.dim(1);
    Tensor out = make_op_output(x.shape(), {x, col}, [m, n](Tensor& o) {
        Tensor& px = o.node->parents[0];
        Tensor& pc = o.node->parents[1];
        const double* g = o.grad();
        for (int i = 0; i < m; ++i) {
            double ci = pc.data()[i];
            const double* gi = g + static_cast<size_t>(i) * n;
            if (px.requires_grad()) {
                double* gx = px.grad() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) gx[j] += gi[j] * ci;
            }
            if (pc.requires_grad()) {
                const double* xi = px.data() + static_cast<size_t>(i) * n;
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += gi[j] * xi[j];
                pc.grad()[i] += acc;
            }
        }
    });
    for (int i = 0; i < m; ++i) {
        double ci = col.data()[i];
        const double* xi = x.data() + static_cast<size_t>(i) * n;
        double* yi = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) yi[j] = xi[j] * ci;
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    Tensor out = make_op_output({1}, {a}, [](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        double g = o.grad()[0];
        double* gp = p.grad();
        for (size_t i = 0; i < p.numel(); ++i) gp[i] += g;
    });
    double acc = 0.0;
    const double* x = a.data();
    for (size_t i = 0; i < a.numel(); ++i) acc += x[i];
    out.data()[0] = acc;
    return out;
}

Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw ValidationError("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor row_sum(const Tensor& a) {
    require_2d(a, "row_sum");
    int m = a.dim(0), n = a.dim(1);
    Tensor out = make_op_output({m, 1}, {a}, [m, n](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gp[static_cast<size_t>(i) * n + j] += g[i];
    });
    const double* x = a.data();
    double* y = out.data();
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += x[static_cast<size_t>(i) * n + j];
        y[i] = acc;
    }
    return out;
}

Tensor logsumexp_rows(const Tensor& a) {
    require_2d(a, "logsumexp_rows");
    int m = a.dim(0), n = a.dim(1);
    // Softmax weights are saved for the backward pass.
    auto weights = std::make_shared<std::vector<double>>(static_cast<size_t>(m) * n);
    Tensor out = make_op_output({m, 1}, {a}, [m, n, weights](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        const double* w = weights->data();
        double* gp = p.grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                gp[static_cast<size_t>(i) * n + j] += g[i] * w[static_cast<size_t>(i) * n + j];
    });
    const double* x = a.data();
    double* y = out.data();
    double* w = weights->data();
    for (int i = 0; i < m; ++i) {
        const double* xi = x + static_cast<size_t>(i) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) mx = std::max(mx, xi[j]);
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += std::exp(xi[j] - mx);
        y[i] = mx + std::log(acc);
        double* wi = w + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) wi[j] = std::exp(xi[j] - mx) / acc;
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    require_2d(x, "gather_rows");
    int n = x.dim(1);
    for (int r : rows) {
        if (r < 0 || r >= x.dim(0)) throw ValidationError("gather_rows: row out of range");
    }
    auto ids = std::make_shared<std::vector<int>>(rows);
    Tensor out = make_op_output({static_cast<int>(rows.size()), n}, {x}, [ids, n](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (size_t r = 0; r < ids->size(); ++r) {
            double* dst = gp + static_cast<size_t>((*ids)[r]) * n;
            const double* src = g + r * n;
            for (int j = 0; j < n; ++j) dst[j] += src[j];
        }
    });
    const double* xd = x.data();
    double* y = out.data();
    for (size_t r = 0; r < rows.size(); ++r) {
        const double* src = xd + static_cast<size_t>(rows[r]) * n;
        std::copy(src, src + n, y + r * n);
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
    require_2d(x, "slice_cols");
    if (start < 0 || len <= 0 || start + len > x.dim(1)) {
        throw ValidationError("slice_cols: range out of bounds");
    }
    int m = x.dim(0), n = x.dim(1);
    Tensor out = make_op_output({m, len}, {x}, [m, n, start, len](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < len; ++j)
                gp[static_cast<size_t>(i) * n + start + j] += g[static_cast<size_t>(i) * len + j];
    });
    const double* xd = x.data();
    double* y = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j)
            y[static_cast<size_t>(i) * len + j] = xd[static_cast<size_t>(i) * n + start + j];
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no parts");
    int m = parts[0].dim(0);
    int total = 0;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_cols");
        if (p.dim(0) != m) throw ValidationError("concat_cols: row count mismatch");
        total += p.dim(1);
    }
    std::vector<int> widths;
    widths.reserve(parts.size());
    for (const Tensor& p : parts) widths.push_back(p.dim(1));
    Tensor out = make_op_output({m, total}, parts, [m, total, widths](Tensor& o) {
        const double* g = o.grad();
        int off = 0;
        for (size_t pi = 0; pi < o.node->parents.size(); ++pi) {
            Tensor& p = o.node->parents[pi];
            int w = widths[pi];
            if (p.requires_grad()) {
                double* gp = p.grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                        gp[static_cast<size_t>(i) * w + j] +=
                            g[static_cast<size_t>(i) * total + off + j];
            }
            off += w;
        }
    });
    double* y = out.data();
    int off = 0;
    for (const Tensor& p : parts) {
        int w = p.dim(1);
        const double* src = p.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                y[static_cast<size_t>(i) * total + off + j] = src[static_cast<size_t>(i) * w + j];
        off += w;
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValidationError("concat_rows: no parts");
    int n = parts[0].dim(1);
    int total = 0;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_rows");
        if (p.dim(1) != n) throw ValidationError("concat_rows: column count mismatch");
        total += p.dim(0);
    }
    std::vector<int> heights;
    heights.reserve(parts.size());
    for (const Tensor& p : parts) heights.push_back(p.dim(0));
    Tensor out = make_op_output({total, n}, parts, [n, heights](Tensor& o) {
        const double* g = o.grad();
        size_t off = 0;
        for (size_t pi = 0; pi < o.node->parents.size(); ++pi) {
            Tensor& p = o.node->parents[pi];
            size_t count = static_cast<size_t>(heights[pi]) * n;
            if (p.requires_grad()) {
                double* gp = p.grad();
                for (size_t i = 0; i < count; ++i) gp[i] += g[off + i];
            }
            off += count;
        }
    });
    double* y = out.data();
    size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), y + off);
        off += p.numel();
    }
    return out;
}

Tensor stack_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValidationError("stack_rows: no parts");
    size_t n = parts[0].numel();
    for (const Tensor& p : parts) {
        if (p.numel() != n) throw ValidationError("stack_rows: row width mismatch");
    }
    int m = static_cast<int>(parts.size());
    Tensor out = make_op_output({m, static_cast<int>(n)}, parts, [n](Tensor& o) {
        const double* g = o.grad();
        for (size_t pi = 0; pi < o.node->parents.size(); ++pi) {
            Tensor& p = o.node->parents[pi];
            if (!p.requires_grad()) continue;
            double* gp = p.grad();
            const double* src = g + pi * n;
            for (size_t j = 0; j < n; ++j) gp[j] += src[j];
        }
    });
    double* y = out.data();
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        std::copy(parts[pi].data(), parts[pi].data() + n, y + pi * n);
    }
    return out;
}

Tensor dropout(const Tensor& x, double p, RngStream& rng) {
    if (p < 0.0 || p >= 1.0) throw ValidationError("dropout: p must be in [0,1)");
    if (p == 0.0) return x;
    double keep_scale = 1.0 / (1.0 - p);
    auto mask = std::make_shared<std::vector<double>>(x.numel());
    for (double& m : *mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
    Tensor out = make_op_output(x.shape(), {x}, [mask](Tensor& o) {
        Tensor& px = o.node->parents[0];
        if (!px.requires_grad()) return;
        const double* g = o.grad();
        const double* m = mask->data();
        double* gp = px.grad();
        for (size_t i = 0; i < o.numel(); ++i) gp[i] += g[i] * m[i];
    });
    const double* xd = x.data();
    const double* m = mask->data();
    double* y = out.data();
    for (size_t i = 0; i < x.numel(); ++i) y[i] = xd[i] * m[i];
    return out;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const std::vector<uint8_t>& allowed) {
    require_2d(q, "masked_attention");
    require_2d(k, "masked_attention");
    require_2d(v, "masked_attention");
    if (q.dim(1) != k.dim(1)) {
        throw ValidationError("masked_attention: q/k head dim mismatch");
    }
    if (k.dim(0) != v.dim(0)) {
        throw ValidationError("masked_attention: k/v length mismatch");
    }
    int m = q.dim(0), n = k.dim(0), dh = q.dim(1), dv = v.dim(1);
    if (allowed.size() != static_cast<size_t>(m) * n) {
        throw ValidationError("masked_attention: mask size mismatch");
    }
    double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    // Attention weights are saved for the backward pass; masked (and
    // zero-allowed-row) entries are exactly zero.
    auto attn = std::make_shared<std::vector<double>>(static_cast<size_t>(m) * n, 0.0);
    {
        std::vector<double> scores(static_cast<size_t>(m) * n, 0.0);
        mm_nt(scores.data(), q.data(), k.data(), m, dh, n);
        for (int i = 0; i < m; ++i) {
            double* si = scores.data() + static_cast<size_t>(i) * n;
            const uint8_t* mi = allowed.data() + static_cast<size_t>(i) * n;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < n; ++j) {
                if (mi[j]) mx = std::max(mx, si[j] * sc);
            }
            double* ai = attn->data() + static_cast<size_t>(i) * n;
            if (!std::isfinite(mx)) continue;  // no allowed keys: row stays zero
            double denom = 0.0;
            for (int j = 0; j < n; ++j) {
                if (mi[j]) denom += std::exp(si[j] * sc - mx);
            }
            for (int j = 0; j < n; ++j) {
                if (mi[j]) ai[j] = std::exp(si[j] * sc - mx) / denom;
            }
        }
    }

    Tensor out = make_op_output({m, dv}, {q, k, v}, [m, n, dh, dv, sc, attn](Tensor& o) {
        Tensor& pq = o.node->parents[0];
        Tensor& pk = o.node->parents[1];
        Tensor& pv = o.node->parents[2];
        const double* g = o.grad();
        const double* a = attn->data();
        if (pv.requires_grad()) {
            mm_tn(pv.grad(), attn->data(), g, m, n, dv);
        }
        if (pq.requires_grad() || pk.requires_grad()) {
            std::vector<double> da(static_cast<size_t>(m) * n, 0.0);
            mm_nt(da.data(), g, pv.data(), m, dv, n);
            // ds = a * (da - rowdot(da, a)), already zero where masked
            std::vector<double> ds(static_cast<size_t>(m) * n);
            for (int i = 0; i < m; ++i) {
                const double* ai = a + static_cast<size_t>(i) * n;
                const double* dai = da.data() + static_cast<size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += ai[j] * dai[j];
                double* dsi = ds.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) dsi[j] = ai[j] * (dai[j] - dot) * sc;
            }
            if (pq.requires_grad()) mm_nn(pq.grad(), ds.data(), pk.data(), m, n, dh);
            if (pk.requires_grad()) mm_tn(pk.grad(), ds.data(), pq.data(), m, n, dh);
        }
    });
    mm_nn(out.data(), attn->data(), v.data(), m, n, dv);
    return out;
}

Tensor masked_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const std::vector<uint8_t>& causal,
                               const std::vector<uint8_t>& dropped_keys) {
    int m = q.dim(0), n = k.dim(0);
    if (causal.size() != static_cast<size_t>(m) * n) {
        throw ValidationError("masked_causal_attention: causal mask size mismatch");
    }
    if (!dropped_keys.empty() && dropped_keys.size() != static_cast<size_t>(n)) {
        throw ValidationError("masked_causal_attention: dropped_keys size mismatch");
    }
    std::vector<uint8_t> allowed(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            allowed[static_cast<size_t>(i) * n + j] =
                causal[static_cast<size_t>(i) * n + j] &&
                (dropped_keys.empty() || !dropped_keys[j]);
    return masked_attention(q, k, v, allowed);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_2d(x, "layer_norm");
    int m = x.dim(0), n = x.dim(1);
    if (gain.numel() != static_cast<size_t>(n) || bias.numel() != static_cast<size_t>(n)) {
        throw ValidationError("layer_norm: gain/bias width mismatch");
    }
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(m) * n);
    auto inv_std = std::make_shared<std::vector<double>>(m);

    Tensor out = make_op_output(x.shape(), {x, gain, bias}, [m, n, xhat, inv_std](Tensor& o) {
        Tensor& px = o.node->parents[0];
        Tensor& pg = o.node->parents[1];
        Tensor& pb = o.node->parents[2];
        const double* g = o.grad();
        const double* xh = xhat->data();
        const double* gamma = pg.data();
        if (pg.requires_grad() || pb.requires_grad()) {
            double* gg = pg.requires_grad() ? pg.grad() : nullptr;
            double* gb = pb.requires_grad() ? pb.grad() : nullptr;
            for (int i = 0; i < m; ++i) {
                const double* gi = g + static_cast<size_t>(i) * n;
                const double* xi = xh + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    if (gg) gg[j] += gi[j] * xi[j];
                    if (gb) gb[j] += gi[j];
                }
            }
        }
        if (px.requires_grad()) {
            double* gx = px.grad();
            for (int i = 0; i < m; ++i) {
                const double* gi = g + static_cast<size_t>(i) * n;
                const double* xi = xh + static_cast<size_t>(i) * n;
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < n; ++j) {
                    double dxh = gi[j] * gamma[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xi[j];
                }
                mean_dxhat /= n;
                mean_dxhat_xhat /= n;
                double is = (*inv_std)[i];
                double* gxi = gx + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    double dxh = gi[j] * gamma[j];
                    gxi[j] += is * (dxh - mean_dxhat - xi[j] * mean_dxhat_xhat);
                }
            }
        }
    });

    const double* xd = x.data();
    const double* gamma = gain.data();
    const double* beta = bias.data();
    double* y = out.data();
    for (int i = 0; i < m; ++i) {
        const double* xi = xd + static_cast<size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += xi[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= n;
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        double* xhi = xhat->data() + static_cast<size_t>(i) * n;
        double* yi = y + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            xhi[j] = (xi[j] - mean) * is;
            yi[j] = gamma[j] * xhi[j] + beta[j];
        }
    }
    return out;
}

Tensor patchify(const Tensor& img, int patch) {
    if (img.shape().size() != 3) {
        throw ValidationError("patchify: expected {H,W,C}, got " + shape_str(img.shape()));
    }
    int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    if (h % patch != 0 || w % patch != 0) {
        throw ValidationError("patchify: image extents not divisible by patch");
    }
    int ph = h / patch, pw = w / patch;
    int np = ph * pw, pd = patch * patch * c;

    auto index_of = [w, c, patch, pw](int p, int e) {
        int py = p / pw, px = p % pw;
        int within = e / c, ch = e % c;
        int dy = within / patch, dx = within % patch;
        int y = py * patch + dy, x = px * patch + dx;
        return (static_cast<size_t>(y) * w + x) * c + ch;
    };

    Tensor out = make_op_output({np, pd}, {img}, [np, pd, index_of](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (int i = 0; i < np; ++i)
            for (int e = 0; e < pd; ++e)
                gp[index_of(i, e)] += g[static_cast<size_t>(i) * pd + e];
    });
    const double* x = img.data();
    double* y = out.data();
    for (int i = 0; i < np; ++i)
        for (int e = 0; e < pd; ++e)
            y[static_cast<size_t>(i) * pd + e] = x[index_of(i, e)];
    return out;
}

Tensor unpatchify(const Tensor& tokens, int h, int w, int c, int patch) {
    require_2d(tokens, "unpatchify");
    int ph = h / patch, pw = w / patch;
    int np = ph * pw, pd = patch * patch * c;
    if (tokens.dim(0) != np || tokens.dim(1) != pd) {
        throw ValidationError("unpatchify: token grid does not match target extents");
    }
    auto index_of = [w, c, patch, pw](int p, int e) {
        int py = p / pw, px = p % pw;
        int within = e / c, ch = e % c;
        int dy = within / patch, dx = within % patch;
        int y = py * patch + dy, x = px * patch + dx;
        return (static_cast<size_t>(y) * w + x) * c + ch;
    };
    Tensor out = make_op_output({h, w, c}, {tokens}, [np, pd, index_of](Tensor& o) {
        Tensor& p = o.node->parents[0];
        if (!p.requires_grad()) return;
        const double* g = o.grad();
        double* gp = p.grad();
        for (int i = 0; i < np; ++i)
            for (int e = 0; e < pd; ++e)
                gp[static_cast<size_t>(i) * pd + e] += g[index_of(i, e)];
    });
    const double* x = tokens.data();
    double* y = out.data();
    for (int i = 0; i < np; ++i)
        for (int e = 0; e < pd; ++e)
            y[index_of(i, e)] = x[static_cast<size_t>(i) * pd + e];
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace sf::num
