#include "storyframe/dae.hpp"

#include <algorithm>
#include <cmath>

#include "storyframe/common.hpp"
#include "storyframe/ops.hpp"

namespace sf::dae {

using num::RngStream;
using num::Tensor;

void DaeConfig::validate() const {
    if (image_size < 4) throw ValidationError("dae config: image_size too small");
    if (d_token < 1 || l_tokens < 1) throw ValidationError("dae config: bad token shape");
    if (t_steps < 1) throw ValidationError("dae config: t_steps must be positive");
    if (enc_patch < 1 || image_size % enc_patch != 0)
        throw ValidationError("dae config: enc_patch must divide image_size");
    if (dec_patch < 1 || image_size % dec_patch != 0)
        throw ValidationError("dae config: dec_patch must divide image_size");
    if (enc_width % n_heads != 0 || dec_width % n_heads != 0)
        throw ValidationError("dae config: widths must be divisible by n_heads");
    if (enc_blocks < 1 || dec_blocks < 1) throw ValidationError("dae config: need blocks");
    if (d_sentence < 1 || d_face < 1) throw ValidationError("dae config: bad cond dims");
    if (noise_offset < 0.0) throw ValidationError("dae config: negative noise offset");
    if (id_mask_p < 0.0 || id_mask_p >= 1.0)
        throw ValidationError("dae config: id_mask_p out of [0,1)");
}

nlohmann::json DaeConfig::to_json() const {
    return {{"image_size", image_size}, {"d_token", d_token},
            {"l_tokens", l_tokens},     {"t_steps", t_steps},
            {"enc_patch", enc_patch},   {"enc_width", enc_width},
            {"enc_blocks", enc_blocks}, {"dec_patch", dec_patch},
            {"dec_width", dec_width},   {"dec_blocks", dec_blocks},
            {"n_heads", n_heads},       {"d_sentence", d_sentence},
            {"d_face", d_face},         {"noise_offset", noise_offset},
            {"id_mask_p", id_mask_p}};
}

DaeConfig DaeConfig::from_json(const nlohmann::json& j) {
    DaeConfig c;
    try {
        c.image_size = j.value("image_size", c.image_size);
        c.d_token = j.value("d_token", c.d_token);
        c.l_tokens = j.value("l_tokens", c.l_tokens);
        c.t_steps = j.value("t_steps", c.t_steps);
        c.enc_patch = j.value("enc_patch", c.enc_patch);
        c.enc_width = j.value("enc_width", c.enc_width);
        c.enc_blocks = j.value("enc_blocks", c.enc_blocks);
        c.dec_patch = j.value("dec_patch", c.dec_patch);
        c.dec_width = j.value("dec_width", c.dec_width);
        c.dec_blocks = j.value("dec_blocks", c.dec_blocks);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.d_sentence = j.value("d_sentence", c.d_sentence);
        c.d_face = j.value("d_face", c.d_face);
        c.noise_offset = j.value("noise_offset", c.noise_offset);
        c.id_mask_p = j.value("id_mask_p", c.id_mask_p);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("dae config: ") + e.what());
    }
    c.validate();
    return c;
}

NoiseSchedule cosine_schedule(int t_steps) {
    if (t_steps < 1) throw ValidationError("cosine_schedule: t_steps must be positive");
    NoiseSchedule s;
    s.t_steps = t_steps;
    s.kind = "cosine";
    s.alpha.resize(size_t(t_steps) + 1);
    s.sigma.resize(size_t(t_steps) + 1);
    const double half_pi = std::acos(0.0);
    for (int t = 0; t <= t_steps; ++t) {
        // endpoint pulled just short of pi/2 so 1/alpha_T stays usable
        double phase = half_pi * double(t) / double(t_steps + 1);
        s.alpha[size_t(t)] = std::cos(phase);
        s.sigma[size_t(t)] = std::sin(phase);
    }
    s.alpha[0] = 1.0;
    s.sigma[0] = 0.0;
    for (int t = 0; t <= t_steps; ++t) {
        double a = s.alpha[size_t(t)], g = s.sigma[size_t(t)];
        if (std::abs(a * a + g * g - 1.0) > 1e-12)
            throw TrainingError("cosine_schedule: not variance preserving");
        if (t > 0 && s.alpha[size_t(t)] > s.alpha[size_t(t) - 1])
            throw TrainingError("cosine_schedule: alpha not nonincreasing");
    }
    return s;
}

Tensor noisify(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (t < 0 || t > schedule.t_steps)
        throw ValidationError("noisify: t out of [0, " + std::to_string(schedule.t_steps) +
                              "]");
    if (x0.shape() != eps.shape()) throw ValidationError("noisify: shape mismatch");
    return num::add(num::scale(x0, schedule.alpha[size_t(t)]),
                    num::scale(eps, schedule.sigma[size_t(t)]));
}

DenoiserCond make_cond(Tensor tokens, std::vector<Tensor> descs, std::vector<Tensor> faces,
                       const DaeConfig& cfg) {
    if (int(descs.size()) > kMaxDescSlots)
        throw ValidationError("make_cond: more than 15 descriptions");
    if (int(faces.size()) > kMaxFaceSlots)
        throw ValidationError("make_cond: more than 5 faces");
    DenoiserCond cond;
    cond.tokens = std::move(tokens);
    cond.descs = std::move(descs);
    cond.faces = std::move(faces);
    cond.mask_flags.assign(size_t(cfg.cond_slots()), 0);
    for (int i = int(cond.descs.size()); i < kMaxDescSlots; ++i)
        cond.mask_flags[size_t(cfg.l_tokens + i)] = 1;
    for (int i = int(cond.faces.size()); i < kMaxFaceSlots; ++i)
        cond.mask_flags[size_t(cfg.l_tokens + kMaxDescSlots + i)] = 1;
    return cond;
}

DenoiserCond id_mask(const DenoiserCond& cond, double p, RngStream& rng) {
    if (p < 0.0 || p >= 1.0) throw ValidationError("id_mask: p out of [0,1)");
    std::vector<size_t> real;
    for (size_t i = 0; i < cond.mask_flags.size(); ++i)
        if (!cond.mask_flags[i]) real.push_back(i);
    DenoiserCond out = cond;
    if (p == 0.0 || real.empty()) return out;
    for (;;) {
        bool any_visible = false;
        for (size_t i : real) {
            out.mask_flags[i] = rng.bernoulli(p) ? 1 : 0;
            any_visible = any_visible || !out.mask_flags[i];
        }
        if (any_visible) return out;
    }
}

Dae::Dae(num::ParamStore& ps, const DaeConfig& cfg, RngStream& rng) : cfg_(cfg) {
    cfg_.validate();
    schedule_ = cosine_schedule(cfg_.t_steps);
    int ep = cfg_.enc_patch, dp = cfg_.dec_patch, n = cfg_.image_size;
    enc_tokens_ = (n / ep) * (n / ep);
    dec_tokens_ = (n / dp) * (n / dp);

    enc_in_ = num::Linear(ps, "dae.enc.in", 3 * ep * ep, cfg_.enc_width, rng);
    enc_pos_ = ps.create_randn("dae.enc.pos", {enc_tokens_, cfg_.enc_width}, rng, 0.02);
    for (int i = 0; i < cfg_.enc_blocks; ++i)
        enc_pre_.emplace_back(ps, "dae.enc.pre" + std::to_string(i), cfg_.enc_width,
                              cfg_.n_heads, rng);
    enc_compress_ = num::Linear(ps, "dae.enc.compress", enc_tokens_, cfg_.l_tokens, rng);
    enc_tokpos_ = ps.create_randn("dae.enc.tokpos", {cfg_.l_tokens, cfg_.enc_width}, rng, 0.02);
    for (int i = 0; i < cfg_.enc_blocks; ++i)
        enc_post_.emplace_back(ps, "dae.enc.post" + std::to_string(i), cfg_.enc_width,
                               cfg_.n_heads, rng);
    enc_out_ = num::Linear(ps, "dae.enc.out", cfg_.enc_width, cfg_.d_token, rng);

    dec_in_ = num::Linear(ps, "dae.dec.in", 3 * dp * dp, cfg_.dec_width, rng);
    dec_pos_ = ps.create_randn("dae.dec.pos", {dec_tokens_, cfg_.dec_width}, rng, 0.02);
    time_proj_ = num::Mlp(ps, "dae.dec.time", cfg_.dec_width, cfg_.dec_width, cfg_.dec_width,
                          rng);
    cond_tok_ = num::Linear(ps, "dae.dec.ctok", cfg_.d_token, cfg_.dec_width, rng);
    cond_desc_ = num::Linear(ps, "dae.dec.cdesc", cfg_.d_sentence, cfg_.dec_width, rng);
    cond_face_ = num::Linear(ps, "dae.dec.cface", cfg_.d_face, cfg_.dec_width, rng);
    cond_type_ = ps.create_randn("dae.dec.ctype", {3, cfg_.dec_width}, rng, 0.02);
    for (int i = 0; i < cfg_.dec_blocks; ++i) {
        dec_blocks_.emplace_back(ps, "dae.dec.blk" + std::to_string(i), cfg_.dec_width,
                                 cfg_.n_heads, rng);
        dec_cross_.emplace_back(ps, "dae.dec.x" + std::to_string(i), cfg_.dec_width,
                                cfg_.n_heads, rng);
    }
    // small head init: the fresh model predicts eps near 0, and the nonzero
    // weights let gradient reach the compressor during decoder-frozen warm-up
    dec_out_ = num::Linear(ps, "dae.dec.out", cfg_.dec_width, 3 * dp * dp, rng, 0.02);
}

void Dae::check_image(const Tensor& image, const char* where) const {
    if (image.shape() != num::Shape{cfg_.image_size, cfg_.image_size, 3})
        throw ValidationError(std::string(where) + ": expected a " +
                              std::to_string(cfg_.image_size) + "x" +
                              std::to_string(cfg_.image_size) + "x3 image");
}

Tensor Dae::encode(const Tensor& image) const {
    check_image(image, "dae encode");
    Tensor x = num::add_const(num::scale(image, 2.0), -1.0);
    Tensor h = num::add(enc_in_.forward(num::patchify(x, cfg_.enc_patch)), enc_pos_);
    auto full = num::full_attention_mask(enc_tokens_, enc_tokens_);
    for (const auto& blk : enc_pre_) h = blk.forward(h, full);
    // dimension interchange: sequence axis becomes the compressed axis
    h = num::transpose(enc_compress_.forward(num::transpose(h)));
    h = num::add(h, enc_tokpos_);
    auto tok_full = num::full_attention_mask(cfg_.l_tokens, cfg_.l_tokens);
    for (const auto& blk : enc_post_) h = blk.forward(h, tok_full);
    return enc_out_.forward(h);
}

Tensor Dae::cond_matrix(const DenoiserCond& cond) const {
    if (cond.tokens.shape() != num::Shape{cfg_.l_tokens, cfg_.d_token})
        throw ValidationError("denoiser cond: tokens are not L x d");
    if (int(cond.mask_flags.size()) != cfg_.cond_slots())
        throw ValidationError("denoiser cond: mask flag count mismatch");
    if (int(cond.descs.size()) > kMaxDescSlots || int(cond.faces.size()) > kMaxFaceSlots)
        throw ValidationError("denoiser cond: too many slots");
    for (int i = int(cond.descs.size()); i < kMaxDescSlots; ++i)
        if (!cond.mask_flags[size_t(cfg_.l_tokens + i)])
            throw ValidationError("denoiser cond: padding desc slot left unmasked");
    for (int i = int(cond.faces.size()); i < kMaxFaceSlots; ++i)
        if (!cond.mask_flags[size_t(cfg_.l_tokens + kMaxDescSlots + i)])
            throw ValidationError("denoiser cond: padding face slot left unmasked");

    std::vector<Tensor> rows;
    rows.reserve(size_t(cfg_.cond_slots()));
    Tensor tok_rows = num::add_rowvec(cond_tok_.forward(cond.tokens),
                                      num::gather_rows(cond_type_, {0}));
    for (int l = 0; l < cfg_.l_tokens; ++l) rows.push_back(num::gather_rows(tok_rows, {l}));
    Tensor zero_row = Tensor::zeros({1, cfg_.dec_width});
    for (int i = 0; i < kMaxDescSlots; ++i) {
        if (i < int(cond.descs.size())) {
            if (cond.descs[size_t(i)].shape() != num::Shape{1, cfg_.d_sentence})
                throw ValidationError("denoiser cond: description embedding shape");
            rows.push_back(num::add(cond_desc_.forward(cond.descs[size_t(i)]),
                                    num::gather_rows(cond_type_, {1})));
        } else {
            rows.push_back(zero_row);
        }
    }
    for (int i = 0; i < kMaxFaceSlots; ++i) {
        if (i < int(cond.faces.size())) {
            if (cond.faces[size_t(i)].shape() != num::Shape{1, cfg_.d_face})
                throw ValidationError("denoiser cond: face embedding shape");
            rows.push_back(num::add(cond_face_.forward(cond.faces[size_t(i)]),
                                    num::gather_rows(cond_type_, {2})));
        } else {
            rows.push_back(zero_row);
        }
    }
    return num::concat_rows(rows);
}

Tensor Dae::denoise_eps(const Tensor& z, int t, const DenoiserCond& cond) const {
    check_image(z, "dae denoise");
    if (t < 1 || t > cfg_.t_steps)
        throw ValidationError("dae denoise: t out of [1, " + std::to_string(cfg_.t_steps) +
                              "]");
    Tensor cmat = cond_matrix(cond);
    std::vector<uint8_t> visible(cond.mask_flags.size());
    for (size_t i = 0; i < visible.size(); ++i) visible[i] = cond.mask_flags[i] ? 0 : 1;

    Tensor h = num::add(dec_in_.forward(num::patchify(z, cfg_.dec_patch)), dec_pos_);
    Tensor temb = time_proj_.forward(num::sinusoidal_embedding(double(t), cfg_.dec_width));
    h = num::add_rowvec(h, temb);
    auto full = num::full_attention_mask(dec_tokens_, dec_tokens_);
    for (size_t i = 0; i < dec_blocks_.size(); ++i) {
        h = dec_blocks_[i].forward(h, full);
        h = dec_cross_[i].forward(h, cmat, visible);
    }
    return num::unpatchify(dec_out_.forward(h), cfg_.image_size, cfg_.image_size, 3,
                           cfg_.dec_patch);
}

Tensor Dae::eq1_loss(const Tensor& image, int t, const Tensor& eps,
                     const DenoiserCond& cond) const {
    check_image(image, "dae loss");
    Tensor x = num::add_const(num::scale(image, 2.0), -1.0);
    Tensor z = noisify(x, t, eps, schedule_);
    return num::mse(eps, denoise_eps(z, t, cond));
}

Tensor Dae::decode(const Tensor& tokens, DenoiserCond cond, int steps,
                   RngStream& rng) const {
    if (steps < 1 || steps > cfg_.t_steps)
        throw ValidationError("dae decode: steps out of [1, " +
                              std::to_string(cfg_.t_steps) + "]");
    num::NoGradGuard guard;
    cond.tokens = tokens;

    Tensor z = Tensor::randn({cfg_.image_size, cfg_.image_size, 3}, rng);
    std::vector<int> ts(size_t(steps) + 1);
    for (int i = 0; i <= steps; ++i)
        ts[size_t(i)] = int(std::lround(double(cfg_.t_steps) * double(steps - i) /
                                        double(steps)));
    for (int i = 0; i < steps; ++i) {
        int t_hi = ts[size_t(i)], t_lo = ts[size_t(i) + 1];
        Tensor eps_hat = denoise_eps(z, t_hi, cond);
        double a_hi = schedule_.alpha[size_t(t_hi)], s_hi = schedule_.sigma[size_t(t_hi)];
        double a_lo = schedule_.alpha[size_t(t_lo)], s_lo = schedule_.sigma[size_t(t_lo)];
        Tensor next = Tensor::zeros(z.shape());
        for (size_t p = 0; p < z.numel(); ++p) {
            double x0 = (z.data()[p] - s_hi * eps_hat.data()[p]) / a_hi;
            x0 = std::clamp(x0, -1.0, 1.0);
            next.data()[p] = a_lo * x0 + s_lo * eps_hat.data()[p];
        }
        z = next;
    }
    Tensor img = Tensor::zeros(z.shape());
    for (size_t p = 0; p < z.numel(); ++p)
        img.data()[p] = std::clamp((z.data()[p] + 1.0) * 0.5, 0.0, 1.0);
    return img;
}

double dae_train_step(num::ParamStore& ps, const Dae& dae,
                      const std::vector<DaeExample>& batch, const num::AdamConfig& adam,
                      RngStream& rng, bool encoder_only) {
    if (batch.empty()) throw ValidationError("dae_train_step: empty batch");
    const DaeConfig& cfg = dae.config();
    Tensor total;
    for (const auto& item : batch) {
        int t = 1 + int(rng.uniform_int(uint64_t(cfg.t_steps)));
        Tensor eps = Tensor::randn({cfg.image_size, cfg.image_size, 3}, rng);
        double offset = cfg.noise_offset * rng.normal();
        for (size_t p = 0; p < eps.numel(); ++p) eps.data()[p] += offset;

        Tensor tokens = dae.encode(item.image);
        DenoiserCond cond = make_cond(tokens, item.descs, item.faces, cfg);
        cond = id_mask(cond, cfg.id_mask_p, rng);
        Tensor item_loss = dae.eq1_loss(item.image, t, eps, cond);
        total = total.defined() ? num::add(total, item_loss) : item_loss;
    }
    total = num::div_const(total, double(batch.size()));
    double value = total.item();
    if (!std::isfinite(value)) throw TrainingError("dae_train_step: non-finite loss");
    ps.zero_grad();
    total.backward();
    ps.adam_step(adam, encoder_only ? "dae.enc" : "");
    return value;
}

}  // namespace sf::dae
