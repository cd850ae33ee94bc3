#include "storyframe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "storyframe/common.hpp"
#include "storyframe/gmm.hpp"
#include "storyframe/ops.hpp"

namespace sf::eval {

using nlohmann::json;
using num::NoGradGuard;
using num::RngStream;
using num::Tensor;

namespace {

double flat_cosine(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) throw ValidationError("st_consistency: feature size mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        dot += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    if (denom <= 0.0) return 0.0;
    return dot / denom;
}

gmm::GmmParams gather_gmm(const gmm::GmmParams& p, const std::vector<int>& rows) {
    gmm::GmmParams out;
    out.weights = num::gather_rows(p.weights, rows);
    out.log_weights = num::gather_rows(p.log_weights, rows);
    out.means = num::gather_rows(p.means, rows);
    out.variances = num::gather_rows(p.variances, rows);
    out.k = p.k;
    out.d = p.d;
    return out;
}

bool oracle_has(const Tensor& frame, int target_char, int n_characters) {
    auto ids = world::oracle_identify(frame, n_characters);
    return std::find(ids.begin(), ids.end(), target_char) != ids.end();
}

// Conditioning bundle from a frame script: encoded descriptions plus the
// scripted face embeddings, capped at the decoder slot counts.
dae::DenoiserCond cond_from_script(const script::FrameScript& frame, const Tensor& tokens,
                                   const script::SentenceEncoder& sent,
                                   const dae::DaeConfig& cfg, bool conditioned) {
    std::vector<Tensor> descs;
    std::vector<Tensor> faces;
    if (conditioned) {
        for (const auto& s : frame.descriptions()) {
            if (int(descs.size()) >= dae::kMaxDescSlots) break;
            descs.push_back(sent.encode(s));
        }
        for (const auto& ch : frame.characters) {
            if (int(faces.size()) >= dae::kMaxFaceSlots) break;
            if (int(ch.face_embedding.size()) != cfg.d_face)
                throw ValidationError("face embedding width does not match the decoder");
            faces.push_back(Tensor::from({1, cfg.d_face}, ch.face_embedding));
        }
    }
    return dae::make_cond(tokens, std::move(descs), std::move(faces), cfg);
}

void require_tokens(const script::FrameScript& f, int l_tokens, int d_token,
                    const char* where) {
    if (!f.target_tokens.defined())
        throw ValidationError(std::string(where) + ": frame without target tokens");
    if (f.target_tokens.shape() != num::Shape{l_tokens, d_token})
        throw ValidationError(std::string(where) + ": target token shape mismatch");
}

}  // namespace

StReport st_from_features(const std::vector<Tensor>& features,
                          const std::vector<uint8_t>& has_target) {
    if (features.empty()) throw ValidationError("st_consistency: no frames");
    if (features.size() != has_target.size())
        throw ValidationError("st_consistency: presence flags do not match features");
    for (const auto& f : features)
        if (!f.defined()) throw ValidationError("st_consistency: undefined feature");
    double sum = 0.0;
    int pairs = 0;
    for (size_t i = 0; i + 1 < features.size(); ++i) {
        if (!has_target[i] || !has_target[i + 1]) continue;
        sum += flat_cosine(features[i], features[i + 1]);
        ++pairs;
    }
    if (pairs == 0) return {0.0, true};
    return {sum / pairs, false};
}

StReport st_consistency(const std::vector<Tensor>& frames, int target_char,
                        int n_characters, const dae::Dae& model) {
    if (frames.empty()) throw ValidationError("st_consistency: no frames");
    std::vector<Tensor> features(frames.size());
    std::vector<uint8_t> has(frames.size(), 0);
    parallel_for(frames.size(), [&](size_t i) {
        NoGradGuard guard;
        features[i] = model.encode(frames[i]);
        has[i] = oracle_has(frames[i], target_char, n_characters) ? 1 : 0;
    });
    return st_from_features(features, has);
}

double lt_consistency(const std::vector<Tensor>& frames, int target_char,
                      int n_characters) {
    if (frames.empty()) throw ValidationError("lt_consistency: no frames");
    std::vector<uint8_t> hit(frames.size(), 0);
    parallel_for(frames.size(), [&](size_t i) {
        hit[i] = oracle_has(frames[i], target_char, n_characters) ? 1 : 0;
    });
    int hits = 0;
    for (uint8_t h : hit) hits += h;
    return double(hits) / double(frames.size());
}

double heldout_nll(const ar::ArModel& model, const script::Corpus& corpus) {
    if (corpus.empty()) throw ValidationError("heldout_nll: empty corpus");
    const ar::ArConfig& cfg = model.config();
    NoGradGuard guard;
    double total = 0.0;
    int64_t count = 0;
    for (const auto& ep : corpus) {
        if (ep.frames.empty()) throw ValidationError("heldout_nll: episode without frames");
        for (const auto& f : ep.frames)
            require_tokens(f, cfg.l_tokens, cfg.d_token, "heldout_nll");
        int n = int(ep.frames.size());
        auto layout = script::assemble_sequence(ep, {}, n, cfg.context_frames, cfg.l_tokens);
        if (!layout.truncated) {
            ar::ArForward fwd = model.forward(layout);
            total += gmm::nll(fwd.params, fwd.targets, true);
            count += fwd.targets.dim(0);
            continue;
        }
        // Long episodes: score each frame from its own sliding window so no
        // token is dropped and none is counted twice.
        for (int f = 0; f < n; ++f) {
            auto win = script::assemble_sequence(ep, {}, f + 1, cfg.context_frames,
                                                 cfg.l_tokens);
            ar::ArForward fwd = model.forward(win);
            std::vector<int> rows;
            for (size_t r = 0; r < fwd.slot_index.size(); ++r)
                if (win.slots[size_t(fwd.slot_index[r])].frame_index == f)
                    rows.push_back(int(r));
            if (rows.empty()) throw TrainingError("heldout_nll: frame missing from window");
            total += gmm::nll(gather_gmm(fwd.params, rows),
                              num::gather_rows(fwd.targets, rows), true);
            count += int64_t(rows.size());
        }
    }
    return total / double(count);
}

double id_roundtrip_accuracy(const dae::Dae& model, const script::SentenceEncoder& sent,
                             const std::vector<script::FrameScript>& frames,
                             int n_characters, const RoundTripOptions& opts) {
    if (frames.empty()) throw ValidationError("id_roundtrip_accuracy: no frames");
    if (opts.decode_steps < 1)
        throw ValidationError("id_roundtrip_accuracy: decode_steps must be positive");
    std::vector<uint8_t> hit(frames.size(), 0);
    RngStream root(opts.seed, "roundtrip");
    parallel_for(frames.size(), [&](size_t i) {
        NoGradGuard guard;
        const auto& f = frames[i];
        if (!f.image.defined())
            throw ValidationError("id_roundtrip_accuracy: frame without image");
        Tensor tokens = model.encode(f.image);
        auto cond = cond_from_script(f, tokens, sent, model.config(), opts.conditioned);
        RngStream rng = root.fork(uint64_t(i));
        Tensor recon = model.decode(tokens, cond, opts.decode_steps, rng);
        hit[i] = world::oracle_identify(recon, n_characters) ==
                         world::oracle_identify(f.image, n_characters)
                     ? 1
                     : 0;
    });
    int hits = 0;
    for (uint8_t h : hit) hits += h;
    return double(hits) / double(frames.size());
}

void MetricsReport::validate() const {
    auto ratio = [](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0))
            throw ValidationError(std::string("metrics: ") + name + " outside [0,1]");
    };
    ratio(lt_consistency, "lt_consistency");
    ratio(id_accuracy, "id_accuracy");
    if (!std::isfinite(st_consistency) || !std::isfinite(heldout_nll))
        throw ValidationError("metrics: non-finite value");
}

json MetricsReport::to_json() const {
    return {{"st_consistency", st_consistency}, {"st_no_pairs", st_no_pairs},
            {"lt_consistency", lt_consistency}, {"heldout_nll", heldout_nll},
            {"id_accuracy", id_accuracy},       {"seed", seed},
            {"config_hash", config_hash},       {"checkpoint_hash", checkpoint_hash}};
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport r;
    try {
        r.st_consistency = j.value("st_consistency", r.st_consistency);
        r.st_no_pairs = j.value("st_no_pairs", r.st_no_pairs);
        r.lt_consistency = j.value("lt_consistency", r.lt_consistency);
        r.heldout_nll = j.value("heldout_nll", r.heldout_nll);
        r.id_accuracy = j.value("id_accuracy", r.id_accuracy);
        r.seed = j.value("seed", r.seed);
        r.config_hash = j.value("config_hash", r.config_hash);
        r.checkpoint_hash = j.value("checkpoint_hash", r.checkpoint_hash);
    } catch (const json::exception& e) {
        throw ParseError(std::string("metrics report: ") + e.what());
    }
    r.validate();
    return r;
}

void RunConfig::validate() const {
    world.validate();
    dae.validate();
    ar.validate();
    clip.validate();
    auto prob = [](double p, const char* name) {
        if (!(p >= 0.0 && p < 1.0))
            throw ValidationError(std::string("run config: ") + name + " outside [0,1)");
    };
    prob(dropout, "dropout");
    prob(token_mask, "token_mask");
    prob(few_shot, "few_shot");
    auto train = [](const TrainConfig& t, const char* name) {
        if (t.lr <= 0.0 || t.steps < 0 || t.batch < 1)
            throw ValidationError(std::string("run config: bad ") + name + " training block");
    };
    train(dae_train, "dae");
    train(ar_train, "ar");
    train(clip_train, "clip");
    if (dae_warmup_steps < 0) throw ValidationError("run config: negative warmup");
    if (dae.d_token != ar.d_token || dae.l_tokens != ar.l_tokens)
        throw ValidationError("run config: token shape disagrees between dae and ar");
    if (clip.anchor_dim != dae.l_tokens * dae.d_token)
        throw ValidationError("run config: clip anchor_dim must equal l_tokens * d_token");
    if (clip_count < 1 || clip_frames < 2)
        throw ValidationError("run config: clip corpus needs >=1 clips of >=2 frames");
    if (decode_steps < 1 || eval_episodes < 1 || eval_frames < 1 || eval_roundtrip < 1)
        throw ValidationError("run config: eval sizes must be positive");
    if (temperature < 0.0) throw ValidationError("run config: negative temperature");
}

json RunConfig::to_json() const {
    auto train = [](const TrainConfig& t) {
        return json{{"lr", t.lr}, {"steps", t.steps}, {"batch", t.batch}};
    };
    return {{"world", world.to_json()},
            {"dae", dae.to_json()},
            {"ar", ar.to_json()},
            {"clip", clip.to_json()},
            {"dae_train", train(dae_train)},
            {"dae_warmup_steps", dae_warmup_steps},
            {"ar_train", train(ar_train)},
            {"clip_train", train(clip_train)},
            {"dropout", dropout},
            {"token_mask", token_mask},
            {"few_shot", few_shot},
            {"ar_regularizers", ar_regularizers},
            {"ar_exclude_style", ar_exclude_style},
            {"clip_count", clip_count},
            {"clip_frames", clip_frames},
            {"clip_step", clip_step},
            {"decode_steps", decode_steps},
            {"eval_episodes", eval_episodes},
            {"eval_frames", eval_frames},
            {"eval_roundtrip", eval_roundtrip},
            {"temperature", temperature},
            {"seed", seed}};
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    try {
        if (j.contains("world")) c.world = world::WorldSpec::from_json(j.at("world"));
        if (j.contains("dae")) c.dae = dae::DaeConfig::from_json(j.at("dae"));
        if (j.contains("ar")) c.ar = ar::ArConfig::from_json(j.at("ar"));
        if (j.contains("clip")) c.clip = ext::ClipConfig::from_json(j.at("clip"));
        auto train = [&](const char* key, TrainConfig& t) {
            if (!j.contains(key)) return;
            const json& b = j.at(key);
            t.lr = b.value("lr", t.lr);
            t.steps = b.value("steps", t.steps);
            t.batch = b.value("batch", t.batch);
        };
        train("dae_train", c.dae_train);
        train("ar_train", c.ar_train);
        train("clip_train", c.clip_train);
        c.dae_warmup_steps = j.value("dae_warmup_steps", c.dae_warmup_steps);
        c.dropout = j.value("dropout", c.dropout);
        c.token_mask = j.value("token_mask", c.token_mask);
        c.few_shot = j.value("few_shot", c.few_shot);
        c.ar_regularizers = j.value("ar_regularizers", c.ar_regularizers);
        c.ar_exclude_style = j.value("ar_exclude_style", c.ar_exclude_style);
        c.clip_count = j.value("clip_count", c.clip_count);
        c.clip_frames = j.value("clip_frames", c.clip_frames);
        c.clip_step = j.value("clip_step", c.clip_step);
        c.decode_steps = j.value("decode_steps", c.decode_steps);
        c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
        c.eval_frames = j.value("eval_frames", c.eval_frames);
        c.eval_roundtrip = j.value("eval_roundtrip", c.eval_roundtrip);
        c.temperature = j.value("temperature", c.temperature);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ParseError(std::string("run config: ") + e.what());
    }
    c.validate();
    return c;
}

DaeBundle make_dae(const dae::DaeConfig& cfg, std::vector<std::string> vocab, uint64_t seed) {
    cfg.validate();
    if (vocab.empty()) throw ValidationError("make_dae: empty vocabulary");
    DaeBundle b;
    b.cfg = cfg;
    b.vocab = std::move(vocab);
    RngStream rng(seed, "dae.init");
    b.model = dae::Dae(b.ps, cfg, rng);
    b.sent = script::SentenceEncoder(b.ps, "dae.sent", b.vocab, cfg.d_sentence,
                                     cfg.d_sentence, rng);
    return b;
}

ArBundle make_ar(const ar::ArConfig& cfg, std::vector<std::string> vocab, uint64_t seed) {
    cfg.validate();
    if (vocab.empty()) throw ValidationError("make_ar: empty vocabulary");
    ArBundle b;
    b.cfg = cfg;
    b.vocab = std::move(vocab);
    RngStream rng(seed, "ar.init");
    b.model = ar::ArModel(b.ps, cfg, b.vocab, rng);
    return b;
}

void save_dae(const std::string& path, const DaeBundle& bundle) {
    bundle.ps.save(path, {{"kind", "dae"},
                          {"config", bundle.cfg.to_json()},
                          {"vocab", bundle.vocab}});
}

void save_ar(const std::string& path, const ArBundle& bundle) {
    bundle.ps.save(path, {{"kind", "ar"},
                          {"config", bundle.cfg.to_json()},
                          {"vocab", bundle.vocab}});
}

void save_clip(const std::string& path, const ClipBundle& bundle) {
    bundle.ps.save(path, {{"kind", "clip"}, {"config", bundle.cfg.to_json()}});
}

namespace {

json checkpoint_meta(const std::string& path, const char* kind, num::ParamStore& ps_out) {
    json meta;
    ps_out = num::ParamStore::load(path, &meta);
    if (meta.value("kind", "") != kind)
        throw ParseError(path + ": expected a " + kind + " checkpoint");
    return meta;
}

}  // namespace

DaeBundle load_dae(const std::string& path) {
    DaeBundle b;
    json meta = checkpoint_meta(path, "dae", b.ps);
    try {
        b.cfg = dae::DaeConfig::from_json(meta.at("config"));
        b.vocab = meta.at("vocab").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    // create() returns the loaded tensors, so this rebuilds over the weights
    RngStream rng(0, "dae.load");
    b.model = dae::Dae(b.ps, b.cfg, rng);
    b.sent = script::SentenceEncoder(b.ps, "dae.sent", b.vocab, b.cfg.d_sentence,
                                     b.cfg.d_sentence, rng);
    return b;
}

ArBundle load_ar(const std::string& path) {
    ArBundle b;
    json meta = checkpoint_meta(path, "ar", b.ps);
    try {
        b.cfg = ar::ArConfig::from_json(meta.at("config"));
        b.vocab = meta.at("vocab").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    RngStream rng(0, "ar.load");
    b.model = ar::ArModel(b.ps, b.cfg, b.vocab, rng);
    return b;
}

ClipBundle load_clip(const std::string& path) {
    ClipBundle b;
    json meta = checkpoint_meta(path, "clip", b.ps);
    try {
        b.cfg = ext::ClipConfig::from_json(meta.at("config"));
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    RngStream rng(0, "clip.load");
    b.model = ext::ClipModel(b.ps, b.cfg, rng);
    return b;
}

Tensor flip_horizontal(const Tensor& image) {
    if (image.shape().size() != 3 || image.dim(2) != 3)
        throw ValidationError("flip_horizontal: expected an {H,W,3} image");
    Tensor out = Tensor::zeros(image.shape());
    int h = image.dim(0), w = image.dim(1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                out.data()[(size_t(y) * w + x) * 3 + c] =
                    image.data()[(size_t(y) * w + (w - 1 - x)) * 3 + c];
    return out;
}

std::vector<ar::ArEpisode> tokenize_corpus(script::Corpus& corpus, const dae::Dae& model,
                                           bool with_flipped) {
    if (corpus.empty()) throw ValidationError("tokenize_corpus: empty corpus");
    std::vector<script::FrameScript*> flat;
    for (auto& ep : corpus)
        for (auto& f : ep.frames) {
            if (!f.image.defined())
                throw ValidationError("tokenize_corpus: frame without image");
            flat.push_back(&f);
        }
    std::vector<Tensor> flipped(flat.size());
    parallel_for(flat.size(), [&](size_t i) {
        NoGradGuard guard;
        flat[i]->target_tokens = model.encode(flat[i]->image);
        if (with_flipped) flipped[i] = model.encode(flip_horizontal(flat[i]->image));
    });
    std::vector<ar::ArEpisode> out;
    size_t cursor = 0;
    for (auto& ep : corpus) {
        ar::ArEpisode item;
        item.episode = ep;
        if (with_flipped)
            for (size_t f = 0; f < ep.frames.size(); ++f)
                item.flipped_tokens.push_back(flipped[cursor + f]);
        cursor += ep.frames.size();
        out.push_back(std::move(item));
    }
    return out;
}

std::vector<double> train_dae(DaeBundle& bundle, const script::Corpus& corpus,
                              const RunConfig& rc, RngStream& rng) {
    std::vector<const script::FrameScript*> pool;
    for (const auto& ep : corpus)
        for (const auto& f : ep.frames) {
            if (!f.image.defined()) throw ValidationError("train_dae: frame without image");
            pool.push_back(&f);
        }
    if (pool.empty()) throw ValidationError("train_dae: empty corpus");
    num::AdamConfig adam;
    adam.lr = rc.dae_train.lr;
    int total = rc.dae_warmup_steps + rc.dae_train.steps;
    std::vector<double> losses;
    losses.reserve(size_t(total));
    for (int step = 0; step < total; ++step) {
        std::vector<dae::DaeExample> batch;
        for (int b = 0; b < rc.dae_train.batch; ++b) {
            const auto& f = *pool[rng.uniform_int(uint64_t(pool.size()))];
            dae::DaeExample ex;
            ex.image = f.image;
            for (const auto& s : f.descriptions()) {
                if (int(ex.descs.size()) >= dae::kMaxDescSlots) break;
                ex.descs.push_back(bundle.sent.encode(s));
            }
            for (const auto& ch : f.characters) {
                if (int(ex.faces.size()) >= dae::kMaxFaceSlots) break;
                ex.faces.push_back(Tensor::from({1, bundle.cfg.d_face}, ch.face_embedding));
            }
            batch.push_back(std::move(ex));
        }
        bool warm = step < rc.dae_warmup_steps;
        losses.push_back(dae::dae_train_step(bundle.ps, bundle.model, batch, adam, rng, warm));
    }
    return losses;
}

std::vector<double> train_ar(ArBundle& bundle, const std::vector<ar::ArEpisode>& data,
                             const script::FaceBank& bank, const RunConfig& rc,
                             RngStream& rng) {
    if (data.empty()) throw ValidationError("train_ar: no episodes");
    ar::ArTrainOptions opts = ar::ArTrainOptions::all_off();
    if (rc.ar_regularizers) {
        opts.augment = true;
        opts.face_randomize = true;
        opts.few_shot_p = rc.few_shot;
        opts.token_mask_p = rc.token_mask;
        opts.dropout_p = rc.dropout;
    }
    num::AdamConfig adam;
    adam.lr = rc.ar_train.lr;
    std::vector<double> losses;
    losses.reserve(size_t(rc.ar_train.steps));
    for (int step = 0; step < rc.ar_train.steps; ++step) {
        std::vector<ar::ArEpisode> batch;
        for (int b = 0; b < rc.ar_train.batch; ++b)
            batch.push_back(data[rng.uniform_int(uint64_t(data.size()))]);
        auto report = ar::ar_train_step(bundle.ps, bundle.model, batch, bank, opts, adam, rng);
        losses.push_back(report.total);
    }
    return losses;
}

ClipBundle train_clip(const std::vector<ext::Clip>& clips, const RunConfig& rc,
                      std::vector<double>* losses_out) {
    ClipBundle b;
    b.cfg = rc.clip;
    num::AdamConfig adam;
    adam.lr = rc.clip_train.lr;
    RngStream rng(rc.seed, "clip.train");
    auto res = ext::train_clip_model(b.ps, rc.clip, clips, rc.clip_train.steps,
                                     rc.clip_train.batch, adam, rng);
    b.model = res.model;
    if (losses_out) *losses_out = res.losses;
    return b;
}

EpisodeGeneration generate_episode(const ArBundle& arb, const DaeBundle& db,
                                   std::vector<script::FrameScript> scripts,
                                   const std::vector<Tensor>& refs, double temperature,
                                   uint64_t seed, int decode_steps, bool zero_faces,
                                   bool strict_refs) {
    if (scripts.empty()) throw ValidationError("generate_episode: no scripts");
    if (zero_faces)
        for (auto& f : scripts)
            for (auto& ch : f.characters)
                std::fill(ch.face_embedding.begin(), ch.face_embedding.end(), 0.0);
    ar::GenerationRequest req;
    req.scripts = scripts;
    req.ref_tokens = refs;
    req.max_frames = int(scripts.size());
    req.temperature = temperature;
    req.seed = seed;
    req.strict_refs = strict_refs;
    EpisodeGeneration out;
    out.tokens = ar::generate(arb.model, req);
    out.frames.resize(out.tokens.size());
    RngStream root(seed, "decode");
    parallel_for(out.tokens.size(), [&](size_t i) {
        NoGradGuard guard;
        auto cond = cond_from_script(scripts[i], out.tokens[i], db.sent, db.cfg, true);
        RngStream rng = root.fork(uint64_t(i));
        out.frames[i] = db.model.decode(out.tokens[i], cond, decode_steps, rng);
    });
    return out;
}

std::vector<script::FrameScript> solo_scripts(int char_id, const std::vector<double>& face,
                                              const std::string& style_tag, int n_frames) {
    if (n_frames < 1) throw ValidationError("solo_scripts: need at least one frame");
    std::vector<script::FrameScript> out;
    for (int i = 0; i < n_frames; ++i) {
        script::FrameScript f;
        f.frame_id = i;
        script::CharacterRef ref;
        ref.char_id = world::char_name(char_id);
        ref.face_embedding = face;
        f.characters.push_back(std::move(ref));
        f.scene_elements.push_back("lit in " + style_tag + " tones");
        f.identifiers = f.canonical_identifiers();
        out.push_back(std::move(f));
    }
    return out;
}

int char_index(const std::string& name, int n_characters) {
    for (int c = 0; c < n_characters; ++c)
        if (world::char_name(c) == name) return c;
    return -1;
}

int lead_character(const script::Episode& episode, int n_characters) {
    std::vector<int> counts(size_t(n_characters), 0);
    for (const auto& f : episode.frames)
        for (const auto& ch : f.characters) {
            int c = char_index(ch.char_id, n_characters);
            if (c >= 0) ++counts[size_t(c)];
        }
    int best = -1, best_count = 0;
    for (int c = 0; c < n_characters; ++c)
        if (counts[size_t(c)] > best_count) {
            best = c;
            best_count = counts[size_t(c)];
        }
    return best;
}

EvalOutcome run_eval(const ArBundle& arb, const DaeBundle& db, const script::Corpus& heldout,
                     const RunConfig& rc) {
    rc.validate();
    if (heldout.empty()) throw ValidationError("run_eval: empty corpus");
    EvalOutcome out;
    out.report.seed = rc.seed;

    script::Corpus corpus = heldout;
    tokenize_corpus(corpus, db.model, false);
    out.report.heldout_nll = heldout_nll(arb.model, corpus);

    script::FaceBank bank = script::FaceBank::build(corpus);
    int n_eps = std::min<int>(rc.eval_episodes, int(corpus.size()));
    double lt_sum = 0.0, st_sum = 0.0;
    int scored = 0, st_scored = 0;
    for (int ei = 0; ei < n_eps; ++ei) {
        const auto& ep = corpus[size_t(ei)];
        int target = lead_character(ep, rc.world.n_characters);
        if (target < 0) continue;
        std::vector<script::FrameScript> scripts;
        for (const auto& f : ep.frames) {
            if (int(scripts.size()) >= rc.eval_frames) break;
            script::FrameScript s = f;
            s.image = Tensor();
            s.target_tokens = Tensor();
            scripts.push_back(std::move(s));
        }
        auto gen = generate_episode(arb, db, scripts, {}, rc.temperature,
                                    rc.seed + uint64_t(ei) + 1, rc.decode_steps);
        double lt = lt_consistency(gen.frames, target, rc.world.n_characters);
        StReport st = st_consistency(gen.frames, target, rc.world.n_characters, db.model);
        out.lt_per_episode.push_back(lt);
        out.st_per_episode.push_back(st.no_pairs ? -1.0 : st.value);
        lt_sum += lt;
        ++scored;
        if (!st.no_pairs) {
            st_sum += st.value;
            ++st_scored;
        }
    }
    if (scored > 0) out.report.lt_consistency = lt_sum / scored;
    out.report.st_no_pairs = st_scored == 0;
    if (st_scored > 0) out.report.st_consistency = st_sum / st_scored;

    std::vector<script::FrameScript> rt_frames;
    for (const auto& ep : heldout)
        for (const auto& f : ep.frames) {
            if (int(rt_frames.size()) >= rc.eval_roundtrip) break;
            rt_frames.push_back(f);
        }
    RoundTripOptions rt;
    rt.decode_steps = rc.decode_steps;
    rt.seed = rc.seed;
    out.report.id_accuracy =
        id_roundtrip_accuracy(db.model, db.sent, rt_frames, rc.world.n_characters, rt);
    out.report.validate();
    return out;
}

}  // namespace sf::eval
