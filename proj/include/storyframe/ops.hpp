#pragma once

#include <cstdint>
#include <vector>

#include "storyframe/tensor.hpp"

namespace sf::num {

// Elementwise, same shape unless noted.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_const(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor div_const(const Tensor& a, double c);  // true division, not reciprocal-multiply

// 2-D linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Broadcasts.
Tensor add_rowvec(const Tensor& x, const Tensor& bias);   // [m,n] + [n]
Tensor add_colvec(const Tensor& x, const Tensor& col);    // [m,n] + [m,1]
Tensor sub_colvec(const Tensor& x, const Tensor& col);    // [m,n] - [m,1]
Tensor mul_colvec(const Tensor& x, const Tensor& col);    // [m,n] * [m,1]

// Reductions.
Tensor sum_all(const Tensor& a);         // -> [1]
Tensor mean_all(const Tensor& a);        // -> [1]
Tensor row_sum(const Tensor& a);         // [m,n] -> [m,1]
Tensor logsumexp_rows(const Tensor& a);  // [m,n] -> [m,1], max-shifted

// Row gather; doubles as embedding lookup. Gradient scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);

// Layout ops.
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
// Each part is a [n] vector or [1,n] row; output [parts.size(), n].
Tensor stack_rows(const std::vector<Tensor>& parts);

// Inverted dropout: train-time scaling by 1/(1-p), inference needs nothing.
Tensor dropout(const Tensor& x, double p, RngStream& rng);

// Single-head scaled dot-product attention over an explicit key mask.
// q:[m,dh] k:[n,dh] v:[n,dv]; allowed is m*n row-major, nonzero = attendable.
// Rows with no allowed key produce exactly zero output (never NaN).
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const std::vector<uint8_t>& allowed);

// Spec-facing wrapper: lower-triangular causality OR-combined with dropped
// key columns. causal[i*n+j] allows query i to see key j.
Tensor masked_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const std::vector<uint8_t>& causal,
                               const std::vector<uint8_t>& dropped_keys);

// Per-row normalization with learned gain/bias of width n.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// {H,W,C} image <-> [np, patch*patch*C] token grid, row-major patches.
Tensor patchify(const Tensor& img, int patch);
Tensor unpatchify(const Tensor& tokens, int h, int w, int c, int patch);

// mean((a-b)^2) as a scalar tensor.
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace sf::num
