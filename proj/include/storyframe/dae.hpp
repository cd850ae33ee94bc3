#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "storyframe/nn.hpp"
#include "storyframe/param_store.hpp"
#include "storyframe/rng.hpp"
#include "storyframe/tensor.hpp"

namespace sf::dae {

constexpr int kMaxDescSlots = 15;
constexpr int kMaxFaceSlots = 5;

struct DaeConfig {
    int image_size = 32;
    int d_token = 16;
    int l_tokens = 2;
    int t_steps = 100;
    int enc_patch = 4;
    int enc_width = 48;
    int enc_blocks = 3;  // blocks on each side of the compression
    int dec_patch = 4;
    int dec_width = 64;
    int dec_blocks = 4;
    int n_heads = 4;
    int d_sentence = 24;
    int d_face = 16;
    double noise_offset = 0.05;
    double id_mask_p = 0.2;

    int cond_slots() const { return l_tokens + kMaxDescSlots + kMaxFaceSlots; }
    void validate() const;
    nlohmann::json to_json() const;
    static DaeConfig from_json(const nlohmann::json& j);
};

// Variance-preserving schedule over t in [0, t_steps].
struct NoiseSchedule {
    int t_steps = 0;
    std::string kind;
    std::vector<double> alpha;  // t_steps + 1 entries, alpha[0] == 1
    std::vector<double> sigma;
};

NoiseSchedule cosine_schedule(int t_steps);

// z_t = alpha_t * x0 + sigma_t * eps, as a graph op.
num::Tensor noisify(const num::Tensor& x0, int t, const num::Tensor& eps,
                    const NoiseSchedule& schedule);

// Conditioning bundle for the denoiser. Slot order: l_tokens frame-token
// slots, then 15 description slots, then 5 face slots. mask_flags marks
// hidden slots (padding slots are always masked).
struct DenoiserCond {
    num::Tensor tokens;               // [L, d_token]
    std::vector<num::Tensor> descs;   // each [1, d_sentence], up to 15
    std::vector<num::Tensor> faces;   // each [1, d_face], up to 5
    std::vector<uint8_t> mask_flags;  // cond_slots() long, true = masked
};

DenoiserCond make_cond(num::Tensor tokens, std::vector<num::Tensor> descs,
                       std::vector<num::Tensor> faces, const DaeConfig& cfg);

// Training-time slot dropout: every non-padding slot is masked independently
// with probability p, resampling until at least one slot stays visible.
DenoiserCond id_mask(const DenoiserCond& cond, double p, num::RngStream& rng);

class Dae {
public:
    Dae() = default;
    Dae(num::ParamStore& ps, const DaeConfig& cfg, num::RngStream& rng);

    // [image_size, image_size, 3] in [0,1] -> [L, d_token]
    num::Tensor encode(const num::Tensor& image) const;
    // eps prediction at step t on a [-1,1]-space input
    num::Tensor denoise_eps(const num::Tensor& z, int t, const DenoiserCond& cond) const;
    // DDIM (eta = 0) over a strided subset of the schedule; returns [0,1] pixels
    num::Tensor decode(const num::Tensor& tokens, DenoiserCond cond, int steps,
                       num::RngStream& rng) const;

    const DaeConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }

    // Eq. 1 term for one image with fixed draws; exposed for gradient checks.
    num::Tensor eq1_loss(const num::Tensor& image, int t, const num::Tensor& eps,
                         const DenoiserCond& cond) const;

private:
    num::Tensor cond_matrix(const DenoiserCond& cond) const;
    void check_image(const num::Tensor& image, const char* where) const;

    DaeConfig cfg_;
    NoiseSchedule schedule_;
    int enc_tokens_ = 0;
    int dec_tokens_ = 0;

    num::Linear enc_in_;
    num::Tensor enc_pos_;
    std::vector<num::TransformerBlock> enc_pre_;
    num::Linear enc_compress_;
    num::Tensor enc_tokpos_;
    std::vector<num::TransformerBlock> enc_post_;
    num::Linear enc_out_;

    num::Linear dec_in_;
    num::Tensor dec_pos_;
    num::Mlp time_proj_;
    num::Linear cond_tok_;
    num::Linear cond_desc_;
    num::Linear cond_face_;
    num::Tensor cond_type_;
    std::vector<num::TransformerBlock> dec_blocks_;
    std::vector<num::CrossAttentionBlock> dec_cross_;
    num::Linear dec_out_;
};

// One training example; desc/face tensors are built by the caller so their
// gradients reach the owning encoders.
struct DaeExample {
    num::Tensor image;
    std::vector<num::Tensor> descs;
    std::vector<num::Tensor> faces;
};

// Samples (t, eps) per item, applies id_mask, takes one Adam step over the
// mean Eq. 1 loss. encoder_only restricts the step to the compressor
// (decoder warm-up freeze). Returns the loss value.
double dae_train_step(num::ParamStore& ps, const Dae& dae,
                      const std::vector<DaeExample>& batch, const num::AdamConfig& adam,
                      num::RngStream& rng, bool encoder_only = false);

}  // namespace sf::dae
