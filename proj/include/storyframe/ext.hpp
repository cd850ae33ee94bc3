#pragma once

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "storyframe/nn.hpp"
#include "storyframe/param_store.hpp"
#include "storyframe/rng.hpp"
#include "storyframe/tensor.hpp"

namespace sf::ext {

using num::AdamConfig;
using num::ParamStore;
using num::RngStream;

struct ClipConfig {
    int image_size = 32;
    int patch = 4;
    int width = 48;
    int n_blocks = 2;
    int n_heads = 4;
    int anchor_dim = 32;       // flattened tokenizer output, L*d
    int seg_len = 8;           // frames per segment and per training clip
    double input_noise = 0.1;  // train-time pixel noise, makes the anchor load-bearing

    void validate() const;
    nlohmann::json to_json() const;
    static ClipConfig from_json(const nlohmann::json& j);
};

// Short glyph-motion clip. `anchor` is the conditioning feature of the first
// frame, filled in by the caller (the tokenizer at full scale, anything of
// the right width in tests).
struct Clip {
    std::vector<num::Tensor> frames;  // each [H,W,3] in [0,1]
    num::Tensor anchor;               // [1, anchor_dim]
    int char_id = -1;
    int style_ix = 0;
};

enum class ExtensionPolicy { AnchorOriginal, ChainLast };

// Residual next-frame predictor: patch tokens plus one anchor token through
// a bidirectional transformer; a zero-initialized head makes the untrained
// model the identity map.
class ClipModel {
public:
    ClipModel() = default;
    ClipModel(ParamStore& ps, const ClipConfig& cfg, RngStream& rng);

    // Graph-capable prediction in [-1,1] space, no clamping.
    num::Tensor predict_raw(const num::Tensor& frame01, const num::Tensor& anchor) const;
    // Evaluation prediction in [0,1], clamped, no tape.
    num::Tensor predict(const num::Tensor& frame01, const num::Tensor& anchor) const;

    const ClipConfig& config() const { return cfg_; }

private:
    ClipConfig cfg_;
    num::Linear in_, anchor_in_, out_;
    num::Tensor pos_;
    std::vector<num::TransformerBlock> blocks_;
};

struct ClipTrainResult {
    ClipModel model;
    std::vector<double> losses;  // one per step
};

// One-step-ahead MSE training over uniformly sampled (clip, step) pairs with
// additive input noise. Deterministic for a fixed stream.
ClipTrainResult train_clip_model(ParamStore& ps, const ClipConfig& cfg,
                                 const std::vector<Clip>& corpus, int steps,
                                 int batch, const AdamConfig& adam, RngStream& rng);

// Conditioning-feature extractor used when a segment re-anchors.
using AnchorFn = std::function<num::Tensor(const num::Tensor&)>;

struct ExtendResult {
    std::vector<num::Tensor> frames;   // n_segments * seg_len frames
    std::vector<num::Tensor> anchors;  // the anchor each segment ran under
};

// Rolls out n_segments segments of seg_len frames. Every segment starts from
// the last generated frame; ChainLast re-extracts the anchor from it while
// AnchorOriginal keeps the start image's anchor throughout.
ExtendResult extend(const ClipModel& model, const AnchorFn& anchor_of,
                    const num::Tensor& start_image, ExtensionPolicy policy,
                    int n_segments, int seg_len);

struct DriftCurve {
    std::vector<int> hits;            // 1 when the oracle still sees the target
    std::vector<double> segment_mean; // per seg_len block, last may be partial
    double mean = 0.0;
};

// Identity retention of `target_char` along a frame sequence.
DriftCurve measure_drift(const std::vector<num::Tensor>& frames, int target_char,
                         int n_characters, int seg_len);

// Procedural training clips: one wrapped glyph per clip translating at a
// fixed step per frame. Anchors are left empty for the caller to fill.
std::vector<Clip> make_motion_clips(int n_clips, int frames_per_clip, int n_characters,
                                    int n_styles, int step_x, uint64_t seed);

}  // namespace sf::ext
