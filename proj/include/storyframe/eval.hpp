#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "storyframe/ar.hpp"
#include "storyframe/dae.hpp"
#include "storyframe/ext.hpp"
#include "storyframe/script.hpp"
#include "storyframe/world.hpp"

namespace sf::eval {

// Short-term consistency: mean cosine over adjacent qualifying pairs.
// no_pairs flags the defined 0.0 fallback when nothing qualifies.
struct StReport {
    double value = 0.0;
    bool no_pairs = false;
};

// Core arithmetic over precomputed per-frame features; a pair qualifies when
// both endpoints have the target. Features are flattened before the cosine.
StReport st_from_features(const std::vector<num::Tensor>& features,
                          const std::vector<uint8_t>& has_target);

// Encoder-feature consistency of generated frames; presence is decided by the
// exact oracle.
StReport st_consistency(const std::vector<num::Tensor>& frames, int target_char,
                        int n_characters, const dae::Dae& model);

// Fraction of frames whose oracle identification contains the target.
double lt_consistency(const std::vector<num::Tensor>& frames, int target_char,
                      int n_characters);

// Scaled NLL averaged per frame token over the corpus, regularizers off.
// Every frame must carry target_tokens. Deterministic.
double heldout_nll(const ar::ArModel& model, const script::Corpus& corpus);

struct RoundTripOptions {
    int decode_steps = 20;
    bool conditioned = true;  // feed description and face slots to the decoder
    uint64_t seed = 0;
};

// decode(encode(x)) identity preservation: the oracle must report exactly the
// same character set on the reconstruction as on the source frame.
double id_roundtrip_accuracy(const dae::Dae& model, const script::SentenceEncoder& sent,
                             const std::vector<script::FrameScript>& frames,
                             int n_characters, const RoundTripOptions& opts);

struct MetricsReport {
    double st_consistency = 0.0;
    bool st_no_pairs = false;
    double lt_consistency = 0.0;
    double heldout_nll = 0.0;
    double id_accuracy = 0.0;
    uint64_t seed = 0;
    std::string config_hash;
    std::string checkpoint_hash;

    void validate() const;  // ratio fields stay inside [0,1]
    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

struct TrainConfig {
    double lr = 1e-3;
    int steps = 200;
    int batch = 4;
};

// One resolved experiment: world, model dimensions, training constants,
// seeds. Serialized into every run.json so runs replay bit for bit.
struct RunConfig {
    world::WorldSpec world;
    dae::DaeConfig dae;
    ar::ArConfig ar;
    ext::ClipConfig clip;

    TrainConfig dae_train{1e-3, 2000, 4};
    int dae_warmup_steps = 100;  // encoder-only steps before joint training
    TrainConfig ar_train{1e-3, 1200, 4};
    TrainConfig clip_train{1e-3, 300, 8};

    double dropout = 0.5;
    double token_mask = 0.15;
    double few_shot = 0.5;
    bool ar_regularizers = true;
    std::string ar_exclude_style;  // style_tag held out of AR training

    int clip_count = 48;
    int clip_frames = 12;
    int clip_step = 3;

    int decode_steps = 20;
    int eval_episodes = 8;   // generated episodes scored per eval run
    int eval_frames = 8;     // frames generated per scored episode
    int eval_roundtrip = 64; // frames fed to the round-trip accuracy
    double temperature = 1.0;
    uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

// A model plus the store its weights live in; movable, weights shared.
struct DaeBundle {
    num::ParamStore ps;
    dae::DaeConfig cfg;
    std::vector<std::string> vocab;
    dae::Dae model;
    script::SentenceEncoder sent;  // description encoder for conditioning
};

struct ArBundle {
    num::ParamStore ps;
    ar::ArConfig cfg;
    std::vector<std::string> vocab;
    ar::ArModel model;
};

struct ClipBundle {
    num::ParamStore ps;
    ext::ClipConfig cfg;
    ext::ClipModel model;
};

DaeBundle make_dae(const dae::DaeConfig& cfg, std::vector<std::string> vocab, uint64_t seed);
ArBundle make_ar(const ar::ArConfig& cfg, std::vector<std::string> vocab, uint64_t seed);

void save_dae(const std::string& path, const DaeBundle& bundle);
void save_ar(const std::string& path, const ArBundle& bundle);
void save_clip(const std::string& path, const ClipBundle& bundle);
DaeBundle load_dae(const std::string& path);
ArBundle load_ar(const std::string& path);
ClipBundle load_clip(const std::string& path);

num::Tensor flip_horizontal(const num::Tensor& image);

// Fills target_tokens on every frame and, when asked, encodes the mirrored
// image so the augmentation path has its precomputed tokens.
std::vector<ar::ArEpisode> tokenize_corpus(script::Corpus& corpus, const dae::Dae& model,
                                           bool with_flipped);

// Warm-up then joint diffusion-autoencoder training; returns per-step losses.
std::vector<double> train_dae(DaeBundle& bundle, const script::Corpus& corpus,
                              const RunConfig& rc, num::RngStream& rng);

std::vector<double> train_ar(ArBundle& bundle, const std::vector<ar::ArEpisode>& data,
                             const script::FaceBank& bank, const RunConfig& rc,
                             num::RngStream& rng);

ClipBundle train_clip(const std::vector<ext::Clip>& clips, const RunConfig& rc,
                      std::vector<double>* losses_out = nullptr);

struct EpisodeGeneration {
    std::vector<num::Tensor> tokens;  // [L,d] per frame
    std::vector<num::Tensor> frames;  // decoded {H,W,3} per frame
};

// Autoregressive token rollout followed by conditional decoding of every
// frame. zero_faces blanks face embeddings in both stages.
EpisodeGeneration generate_episode(const ArBundle& arb, const DaeBundle& db,
                                   std::vector<script::FrameScript> scripts,
                                   const std::vector<num::Tensor>& refs, double temperature,
                                   uint64_t seed, int decode_steps, bool zero_faces = false,
                                   bool strict_refs = false);

// Minimal request scripts naming a single character, phrased like the corpus.
std::vector<script::FrameScript> solo_scripts(int char_id, const std::vector<double>& face,
                                              const std::string& style_tag, int n_frames);

int char_index(const std::string& name, int n_characters);       // -1 when unknown
int lead_character(const script::Episode& episode, int n_characters);

struct EvalOutcome {
    MetricsReport report;
    std::vector<double> lt_per_episode;
    std::vector<double> st_per_episode;  // NaN-free; -1 marks a no-pair episode
};

// Held-out NLL plus generation metrics against each episode's lead character
// and the encoder round-trip accuracy. Hash fields are left for the caller.
EvalOutcome run_eval(const ArBundle& arb, const DaeBundle& db, const script::Corpus& heldout,
                     const RunConfig& rc);

}  // namespace sf::eval
