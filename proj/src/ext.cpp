#include "storyframe/ext.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "storyframe/common.hpp"
#include "storyframe/ops.hpp"
#include "storyframe/world.hpp"

namespace sf::ext {

using num::Tensor;

void ClipConfig::validate() const {
    if (image_size < 4) throw ValidationError("clip config: image_size too small");
    if (patch < 1 || image_size % patch != 0)
        throw ValidationError("clip config: patch must divide image_size");
    if (width < 1 || n_blocks < 1 || n_heads < 1)
        throw ValidationError("clip config: non-positive model size");
    if (width % n_heads != 0)
        throw ValidationError("clip config: width not divisible by heads");
    if (anchor_dim < 1) throw ValidationError("clip config: anchor_dim must be positive");
    if (seg_len < 1) throw ValidationError("clip config: seg_len must be positive");
    if (input_noise < 0.0) throw ValidationError("clip config: negative input noise");
}

nlohmann::json ClipConfig::to_json() const {
    return {{"image_size", image_size}, {"patch", patch},
            {"width", width},           {"n_blocks", n_blocks},
            {"n_heads", n_heads},       {"anchor_dim", anchor_dim},
            {"seg_len", seg_len},       {"input_noise", input_noise}};
}

ClipConfig ClipConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("clip config: expected an object");
    ClipConfig cfg;
    try {
        if (j.contains("image_size")) cfg.image_size = j.at("image_size").get<int>();
        if (j.contains("patch")) cfg.patch = j.at("patch").get<int>();
        if (j.contains("width")) cfg.width = j.at("width").get<int>();
        if (j.contains("n_blocks")) cfg.n_blocks = j.at("n_blocks").get<int>();
        if (j.contains("n_heads")) cfg.n_heads = j.at("n_heads").get<int>();
        if (j.contains("anchor_dim")) cfg.anchor_dim = j.at("anchor_dim").get<int>();
        if (j.contains("seg_len")) cfg.seg_len = j.at("seg_len").get<int>();
        if (j.contains("input_noise")) cfg.input_noise = j.at("input_noise").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("clip config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ClipModel::ClipModel(ParamStore& ps, const ClipConfig& cfg, RngStream& rng) : cfg_(cfg) {
    cfg_.validate();
    int p = cfg_.patch;
    int n_patches = (cfg_.image_size / p) * (cfg_.image_size / p);
    in_ = num::Linear(ps, "clip.in", 3 * p * p, cfg_.width, rng);
    anchor_in_ = num::Linear(ps, "clip.anchor", cfg_.anchor_dim, cfg_.width, rng);
    pos_ = ps.create_randn("clip.pos", {n_patches + 1, cfg_.width}, rng, 0.02);
    for (int i = 0; i < cfg_.n_blocks; ++i)
        blocks_.emplace_back(ps, "clip.blk" + std::to_string(i), cfg_.width, cfg_.n_heads,
                             rng);
    out_ = num::Linear(ps, "clip.out", cfg_.width, 3 * p * p, rng, 0.0);
}

num::Tensor ClipModel::predict_raw(const num::Tensor& frame01,
                                   const num::Tensor& anchor) const {
    if (frame01.shape() != num::Shape{cfg_.image_size, cfg_.image_size, 3})
        throw ValidationError("clip predict: wrong frame shape");
    if (anchor.shape() != num::Shape{1, cfg_.anchor_dim})
        throw ValidationError("clip predict: wrong anchor shape");
    Tensor x = num::add_const(num::scale(frame01, 2.0), -1.0);
    Tensor patches = num::patchify(x, cfg_.patch);
    Tensor h = num::concat_rows({anchor_in_.forward(anchor), in_.forward(patches)});
    h = num::add(h, pos_);
    int s = h.rows();
    std::vector<uint8_t> allowed = num::full_attention_mask(s, s);
    for (const auto& blk : blocks_) h = blk.forward(h, allowed);
    std::vector<int> patch_rows(size_t(s - 1));
    for (int i = 1; i < s; ++i) patch_rows[size_t(i - 1)] = i;
    Tensor delta = num::unpatchify(out_.forward(num::gather_rows(h, patch_rows)),
                                   cfg_.image_size, cfg_.image_size, 3, cfg_.patch);
    return num::add(x, delta);
}

num::Tensor ClipModel::predict(const num::Tensor& frame01, const num::Tensor& anchor) const {
    num::NoGradGuard guard;
    Tensor y = predict_raw(frame01, anchor);
    Tensor img = num::scale(num::add_const(y, 1.0), 0.5);
    for (size_t i = 0; i < img.numel(); ++i)
        img.data()[i] = std::clamp(img.data()[i], 0.0, 1.0);
    return img;
}

ClipTrainResult train_clip_model(ParamStore& ps, const ClipConfig& cfg,
                                 const std::vector<Clip>& corpus, int steps,
                                 int batch, const AdamConfig& adam, RngStream& rng) {
    if (corpus.empty()) throw ValidationError("train_clip_model: empty corpus");
    if (steps < 1 || batch < 1)
        throw ValidationError("train_clip_model: steps and batch must be positive");
    for (const auto& clip : corpus) {
        if (clip.frames.size() < 2)
            throw ValidationError("train_clip_model: clip shorter than one transition");
        if (!clip.anchor.defined() || clip.anchor.shape() != num::Shape{1, cfg.anchor_dim})
            throw ValidationError("train_clip_model: clip anchor missing or misshaped");
    }

    ClipTrainResult result;
    result.model = ClipModel(ps, cfg, rng);
    result.losses.reserve(size_t(steps));
    for (int s = 0; s < steps; ++s) {
        Tensor total;
        for (int b = 0; b < batch; ++b) {
            const Clip& clip = corpus[size_t(rng.uniform_int(uint64_t(corpus.size())))];
            int i = int(rng.uniform_int(uint64_t(clip.frames.size() - 1)));
            Tensor input = clip.frames[size_t(i)];
            if (cfg.input_noise > 0.0) {
                Tensor noisy = Tensor::from(
                    input.shape(), std::vector<double>(input.data(),
                                                       input.data() + input.numel()));
                for (size_t px = 0; px < noisy.numel(); ++px)
                    noisy.data()[px] =
                        std::clamp(noisy.data()[px] + cfg.input_noise * rng.normal(),
                                   0.0, 1.0);
                input = std::move(noisy);
            }
            Tensor pred = result.model.predict_raw(input, clip.anchor);
            Tensor target =
                num::add_const(num::scale(clip.frames[size_t(i) + 1], 2.0), -1.0);
            Tensor item = num::mse(pred, target);
            total = total.defined() ? num::add(total, item) : item;
        }
        total = num::div_const(total, double(batch));
        double value = total.item();
        if (!std::isfinite(value)) throw TrainingError("train_clip_model: non-finite loss");
        ps.zero_grad();
        total.backward();
        ps.adam_step(adam);
        result.losses.push_back(value);
    }
    return result;
}

ExtendResult extend(const ClipModel& model, const AnchorFn& anchor_of,
                    const num::Tensor& start_image, ExtensionPolicy policy,
                    int n_segments, int seg_len) {
    if (n_segments < 1) throw ValidationError("extend: n_segments must be positive");
    if (seg_len < 1) throw ValidationError("extend: seg_len must be positive");
    if (!anchor_of) throw ValidationError("extend: missing anchor extractor");

    auto check_anchor = [&model](const Tensor& a) {
        if (a.shape() != num::Shape{1, model.config().anchor_dim})
            throw ValidationError("extend: anchor extractor returned wrong shape");
        return a;
    };

    ExtendResult result;
    Tensor cur = start_image;
    Tensor anchor = check_anchor(anchor_of(start_image));
    for (int s = 0; s < n_segments; ++s) {
        if (s > 0 && policy == ExtensionPolicy::ChainLast)
            anchor = check_anchor(anchor_of(cur));
        result.anchors.push_back(anchor);
        for (int j = 0; j < seg_len; ++j) {
            cur = model.predict(cur, anchor);
            result.frames.push_back(cur);
        }
    }
    return result;
}

DriftCurve measure_drift(const std::vector<num::Tensor>& frames, int target_char,
                         int n_characters, int seg_len) {
    if (frames.empty()) throw ValidationError("measure_drift: no frames");
    if (seg_len < 1) throw ValidationError("measure_drift: seg_len must be positive");
    if (target_char < 0 || target_char >= n_characters)
        throw ValidationError("measure_drift: target_char out of range");

    DriftCurve curve;
    curve.hits.reserve(frames.size());
    for (const auto& frame : frames) {
        std::vector<int> seen = world::oracle_identify(frame, n_characters);
        bool hit = std::find(seen.begin(), seen.end(), target_char) != seen.end();
        curve.hits.push_back(hit ? 1 : 0);
    }
    int total = 0;
    for (size_t start = 0; start < curve.hits.size(); start += size_t(seg_len)) {
        size_t end = std::min(curve.hits.size(), start + size_t(seg_len));
        int seg = 0;
        for (size_t i = start; i < end; ++i) seg += curve.hits[i];
        total += seg;
        curve.segment_mean.push_back(double(seg) / double(end - start));
    }
    curve.mean = double(total) / double(curve.hits.size());
    return curve;
}

std::vector<Clip> make_motion_clips(int n_clips, int frames_per_clip, int n_characters,
                                    int n_styles, int step_x, uint64_t seed) {
    if (n_clips < 1 || frames_per_clip < 2)
        throw ValidationError("make_motion_clips: need clips of at least two frames");
    if (n_characters < 1 || n_characters > world::n_shapes() * world::n_palette())
        throw ValidationError("make_motion_clips: character count out of range");
    if (n_styles < 1 || n_styles > world::n_palette())
        throw ValidationError("make_motion_clips: style count out of range");

    RngStream root(seed, "clips");
    std::vector<Clip> clips;
    clips.reserve(size_t(n_clips));
    for (int c = 0; c < n_clips; ++c) {
        RngStream rng = root.fork(uint64_t(c));
        Clip clip;
        clip.char_id = int(rng.uniform_int(uint64_t(n_characters)));
        clip.style_ix = int(rng.uniform_int(uint64_t(n_styles)));
        world::PlacedChar ch;
        ch.char_id = clip.char_id;
        ch.cx = int(rng.uniform_int(world::kImageSize));
        ch.cy = world::kGlyphHalf +
                int(rng.uniform_int(world::kImageSize - world::kGlyphBox + 1));
        std::vector<world::PlacedChar> placed = {ch};
        for (int f = 0; f < frames_per_clip; ++f) {
            clip.frames.push_back(world::render_frame(placed, clip.style_ix, true).pixels);
            placed = world::advance_placements(placed, step_x);
        }
        clips.push_back(std::move(clip));
    }
    return clips;
}

}  // namespace sf::ext
