#include "storyframe/nn.hpp"

#include <cmath>

#include "storyframe/common.hpp"

namespace sf::num {

Linear::Linear(ParamStore& ps, const std::string& prefix, int in, int out, RngStream& rng,
               double init_std, bool bias) {
    double std = init_std < 0.0 ? 1.0 / std::sqrt(double(in)) : init_std;
    if (std == 0.0)
        w = ps.create(prefix + ".w", {in, out});
    else
        w = ps.create_randn(prefix + ".w", {in, out}, rng, std);
    if (bias) b = ps.create(prefix + ".b", {out});
}

Tensor Linear::forward(const Tensor& x) const {
    Tensor y = matmul(x, w);
    return b.defined() ? add_rowvec(y, b) : y;
}

Mlp::Mlp(ParamStore& ps, const std::string& prefix, int in, int hidden, int out,
         RngStream& rng, double out_init_std)
    : fc1(ps, prefix + ".fc1", in, hidden, rng),
      fc2(ps, prefix + ".fc2", hidden, out, rng, out_init_std) {}

Tensor Mlp::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

LayerNorm::LayerNorm(ParamStore& ps, const std::string& prefix, int dim) {
    bool fresh = !ps.has(prefix + ".gain");
    gain = ps.create(prefix + ".gain", {dim});
    if (fresh)
        for (size_t i = 0; i < gain.numel(); ++i) gain.data()[i] = 1.0;
    bias = ps.create(prefix + ".bias", {dim});
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& prefix, int width,
                                       int n_heads, RngStream& rng)
    : n_heads(n_heads), width(width) {
    if (width % n_heads != 0)
        throw ValidationError("attention width must be divisible by head count");
    wq = Linear(ps, prefix + ".wq", width, width, rng);
    wk = Linear(ps, prefix + ".wk", width, width, rng, -1.0, false);
    wv = Linear(ps, prefix + ".wv", width, width, rng);
    wo = Linear(ps, prefix + ".wo", width, width, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& x_q, const Tensor& x_kv,
                                   const std::vector<uint8_t>& allowed) const {
    Tensor q = wq.forward(x_q);
    Tensor k = wk.forward(x_kv);
    Tensor v = wv.forward(x_kv);
    int dh = width / n_heads;
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        heads.push_back(masked_attention(qh, kh, vh, allowed));
    }
    return wo.forward(concat_cols(heads));
}

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& prefix, int width,
                                   int n_heads, RngStream& rng)
    : ln1(ps, prefix + ".ln1", width),
      ln2(ps, prefix + ".ln2", width),
      attn(ps, prefix + ".attn", width, n_heads, rng),
      mlp(ps, prefix + ".mlp", width, 4 * width, width, rng) {}

Tensor TransformerBlock::forward(const Tensor& x, const std::vector<uint8_t>& allowed,
                                 double dropout_p, RngStream* drop_rng) const {
    Tensor h = ln1.forward(x);
    Tensor a = attn.forward(h, h, allowed);
    if (dropout_p > 0.0 && drop_rng) a = dropout(a, dropout_p, *drop_rng);
    Tensor y = add(x, a);
    Tensor m = mlp.forward(ln2.forward(y));
    if (dropout_p > 0.0 && drop_rng) m = dropout(m, dropout_p, *drop_rng);
    return add(y, m);
}

CrossAttentionBlock::CrossAttentionBlock(ParamStore& ps, const std::string& prefix, int width,
                                         int n_heads, RngStream& rng)
    : ln_q(ps, prefix + ".lnq", width),
      ln_kv(ps, prefix + ".lnkv", width),
      attn(ps, prefix + ".attn", width, n_heads, rng) {}

Tensor CrossAttentionBlock::forward(const Tensor& x, const Tensor& cond,
                                    const std::vector<uint8_t>& cond_valid, double dropout_p,
                                    RngStream* drop_rng) const {
    if (int(cond_valid.size()) != cond.rows())
        throw ValidationError("cross-attention: cond_valid length mismatch");
    std::vector<uint8_t> allowed;
    allowed.reserve(size_t(x.rows()) * cond_valid.size());
    for (int i = 0; i < x.rows(); ++i)
        allowed.insert(allowed.end(), cond_valid.begin(), cond_valid.end());
    Tensor a = attn.forward(ln_q.forward(x), ln_kv.forward(cond), allowed);
    if (dropout_p > 0.0 && drop_rng) a = dropout(a, dropout_p, *drop_rng);
    return add(x, a);
}

Tensor sinusoidal_embedding(double t, int dim) {
    if (dim % 2 != 0) throw ValidationError("sinusoidal embedding dim must be even");
    Tensor e = Tensor::zeros({1, dim});
    double* d = e.data();
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        d[size_t(i)] = std::sin(t * freq);
        d[size_t(half + i)] = std::cos(t * freq);
    }
    return e;
}

std::vector<uint8_t> full_attention_mask(int s_q, int s_kv) {
    return std::vector<uint8_t>(size_t(s_q) * size_t(s_kv), 1);
}

std::vector<uint8_t> causal_attention_mask(int s, const std::vector<uint8_t>& dropped_keys) {
    if (!dropped_keys.empty() && int(dropped_keys.size()) != s)
        throw ValidationError("causal mask: dropped_keys length mismatch");
    std::vector<uint8_t> m(size_t(s) * size_t(s), 0);
    for (int i = 0; i < s; ++i)
        for (int j = 0; j <= i; ++j)
            m[size_t(i) * size_t(s) + size_t(j)] =
                (dropped_keys.empty() || !dropped_keys[size_t(j)]) ? 1 : 0;
    return m;
}

}  // namespace sf::num
