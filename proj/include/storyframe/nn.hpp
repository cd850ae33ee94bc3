#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "storyframe/ops.hpp"
#include "storyframe/param_store.hpp"
#include "storyframe/rng.hpp"
#include "storyframe/tensor.hpp"

namespace sf::num {

// Affine map [S,in] -> [S,out]. Weights N(0, init_std), zero bias; init_std
// < 0 selects 1/sqrt(in), 0 gives an all-zero layer. The bias can be left
// out where it would be redundant (key projections cancel in softmax).
struct Linear {
    Tensor w;
    Tensor b;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& prefix, int in, int out, RngStream& rng,
           double init_std = -1.0, bool bias = true);
    Tensor forward(const Tensor& x) const;
};

// Two-layer GELU perceptron [S,in] -> [S,hidden] -> [S,out].
struct Mlp {
    Linear fc1;
    Linear fc2;
    Mlp() = default;
    Mlp(ParamStore& ps, const std::string& prefix, int in, int hidden, int out,
        RngStream& rng, double out_init_std = -1.0);
    Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;
    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& prefix, int dim);
    Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Multi-head self-attention over one sequence, or cross-attention when a
// separate key/value sequence is given. `allowed` is s_q*s_kv row-major
// (see masked_attention).
struct MultiHeadAttention {
    int n_heads = 0;
    int width = 0;
    Linear wq, wk, wv, wo;
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& ps, const std::string& prefix, int width, int n_heads,
                       RngStream& rng);
    Tensor forward(const Tensor& x_q, const Tensor& x_kv,
                   const std::vector<uint8_t>& allowed) const;
};

// Pre-norm transformer block: self-attention and GELU MLP sublayers, each
// with a residual connection and optional dropout on the sublayer output.
struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    Mlp mlp;
    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, const std::string& prefix, int width, int n_heads,
                     RngStream& rng);
    Tensor forward(const Tensor& x, const std::vector<uint8_t>& allowed,
                   double dropout_p = 0.0, RngStream* drop_rng = nullptr) const;
};

// Pre-norm cross-attention sublayer with residual: queries from x, keys and
// values from a conditioning sequence whose valid slots are flagged in
// `cond_valid` (shared by every query row).
struct CrossAttentionBlock {
    LayerNorm ln_q;
    LayerNorm ln_kv;
    MultiHeadAttention attn;
    CrossAttentionBlock() = default;
    CrossAttentionBlock(ParamStore& ps, const std::string& prefix, int width, int n_heads,
                        RngStream& rng);
    Tensor forward(const Tensor& x, const Tensor& cond,
                   const std::vector<uint8_t>& cond_valid, double dropout_p = 0.0,
                   RngStream* drop_rng = nullptr) const;
};

// Fixed sine/cosine features of a scalar timestep, shape [1,dim].
Tensor sinusoidal_embedding(double t, int dim);

// Flat row-major attention masks.
std::vector<uint8_t> full_attention_mask(int s_q, int s_kv);
std::vector<uint8_t> causal_attention_mask(int s,
                                           const std::vector<uint8_t>& dropped_keys = {});

}  // namespace sf::num
