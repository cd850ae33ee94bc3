#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "storyframe/gmm.hpp"
#include "storyframe/nn.hpp"
#include "storyframe/param_store.hpp"
#include "storyframe/rng.hpp"
#include "storyframe/script.hpp"
#include "storyframe/tensor.hpp"

namespace sf::ar {

using num::AdamConfig;
using num::ParamStore;
using num::RngStream;

struct ArConfig {
    int width = 128;
    int n_layers = 4;
    int n_heads = 4;
    int k_mix = 4;
    int d_token = 16;
    int l_tokens = 2;
    int d_word = 24;
    int d_sentence = 24;
    int context_frames = script::kDefaultContextFrames;

    void validate() const;
    nlohmann::json to_json() const;
    static ArConfig from_json(const nlohmann::json& j);
};

// Mixture parameters at every FRAME_TOKEN slot of a layout, in slot order,
// plus the teacher-forcing targets those rows are scored against.
struct ArForward {
    gmm::GmmParams params;
    num::Tensor targets;          // [n_rows, d_token], detached copies
    std::vector<int> slot_index;  // layout slot position feeding each row
};

// Per-episode training record: the scripted episode with target_tokens set
// on every frame, plus the same frames re-tokenized after a horizontal flip
// so augmentation never re-runs the tokenizer.
struct ArEpisode {
    script::Episode episode;
    std::vector<num::Tensor> flipped_tokens;  // [L, d] per frame; may be empty
};

struct ArTrainOptions {
    bool augment = true;
    bool face_randomize = true;
    double few_shot_p = 0.5;
    double token_mask_p = 0.15;
    double dropout_p = 0.5;

    static ArTrainOptions all_off();
    void validate() const;
};

struct ArStepReport {
    double nll = 0.0, l1 = 0.0, l2 = 0.0, total = 0.0;
    int eligible_keys = 0;      // slots that token masking could hide
    int masked_keys = 0;        // slots it did hide
    int few_shot_episodes = 0;  // episodes given a reference prefix
    int ref_frames = 0;         // reference frames drawn in total
};

struct GenerationRequest {
    std::vector<script::FrameScript> scripts;  // one per requested frame
    std::vector<num::Tensor> ref_tokens;       // each [L, d], at most 10
    int max_frames = 1;
    double temperature = 1.0;
    uint64_t seed = 0;
    bool strict_refs = false;  // refuse rather than slide refs out of context
};

class ArModel {
public:
    ArModel() = default;
    ArModel(ParamStore& ps, const ArConfig& cfg, std::vector<std::string> vocab,
            RngStream& rng);

    // Teacher-forcing pass. Row r of the result conditions only on slots
    // strictly before slot_index[r]; dropped_keys (when nonempty, one flag
    // per slot) removes key columns from the causal mask.
    ArForward forward(const script::SequenceLayout& layout,
                      const std::vector<uint8_t>& dropped_keys = {},
                      double dropout_p = 0.0, RngStream* drop_rng = nullptr) const;

    const ArConfig& config() const { return cfg_; }
    const script::SentenceEncoder& sentence_encoder() const { return sent_; }

private:
    num::Tensor embed_slots(const script::SequenceLayout& layout) const;

    ArConfig cfg_;
    script::SentenceEncoder sent_;
    num::Tensor table_;   // SOF, EOF, then identifier rows
    num::Tensor tokix_;   // learned shift per within-frame token index
    num::Tensor refmark_; // learned shift marking reference tokens
    num::Mlp tok_proj_, face_proj_, desc_proj_;
    std::vector<num::TransformerBlock> blocks_;
    num::LayerNorm lnf_;
    gmm::GmmHead head_;
};

// One optimizer step over a batch of episodes. Regularizers apply in order:
// flip/reverse augmentation, face re-draws from the bank, a stochastic
// same-episode reference prefix, key masking on the causal attention mask
// (SOF and EOF columns are never eligible), then sublayer dropout. The loss
// is the per-token composite from the mixture head, averaged over episodes.
ArStepReport ar_train_step(ParamStore& ps, const ArModel& model,
                           const std::vector<ArEpisode>& batch,
                           const script::FaceBank& bank, const ArTrainOptions& opts,
                           const AdamConfig& adam, RngStream& rng);

// Autoregressive sampling: one layout pass per token, teacher-forced on its
// own output, window sliding over whole frames. strict_refs refuses requests
// whose reference prefix could not stay in context for every frame.
std::vector<num::Tensor> generate(const ArModel& model, const GenerationRequest& req);

}  // namespace sf::ar
