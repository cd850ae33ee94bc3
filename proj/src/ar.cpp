#include "storyframe/ar.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "storyframe/common.hpp"
#include "storyframe/ops.hpp"

namespace sf::ar {

using num::RngStream;
using num::Tensor;
using script::SlotType;

void ArConfig::validate() const {
    if (width < 1 || n_layers < 1 || n_heads < 1)
        throw ValidationError("ar config: non-positive model size");
    if (width % n_heads != 0) throw ValidationError("ar config: width not divisible by heads");
    if (k_mix < 1) throw ValidationError("ar config: k_mix must be positive");
    if (d_token < 1 || l_tokens < 1) throw ValidationError("ar config: bad token shape");
    if (d_word < 1 || d_sentence < 1) throw ValidationError("ar config: bad sentence dims");
    if (context_frames < 1 || context_frames > script::kMaxContextFrames)
        throw ValidationError("ar config: context_frames out of [1, " +
                              std::to_string(script::kMaxContextFrames) + "]");
}

nlohmann::json ArConfig::to_json() const {
    return {{"width", width},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"k_mix", k_mix},
            {"d_token", d_token},
            {"l_tokens", l_tokens},
            {"d_word", d_word},
            {"d_sentence", d_sentence},
            {"context_frames", context_frames}};
}

ArConfig ArConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("ar config: expected an object");
    ArConfig cfg;
    try {
        if (j.contains("width")) cfg.width = j.at("width").get<int>();
        if (j.contains("n_layers")) cfg.n_layers = j.at("n_layers").get<int>();
        if (j.contains("n_heads")) cfg.n_heads = j.at("n_heads").get<int>();
        if (j.contains("k_mix")) cfg.k_mix = j.at("k_mix").get<int>();
        if (j.contains("d_token")) cfg.d_token = j.at("d_token").get<int>();
        if (j.contains("l_tokens")) cfg.l_tokens = j.at("l_tokens").get<int>();
        if (j.contains("d_word")) cfg.d_word = j.at("d_word").get<int>();
        if (j.contains("d_sentence")) cfg.d_sentence = j.at("d_sentence").get<int>();
        if (j.contains("context_frames"))
            cfg.context_frames = j.at("context_frames").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("ar config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ArTrainOptions ArTrainOptions::all_off() {
    ArTrainOptions o;
    o.augment = false;
    o.face_randomize = false;
    o.few_shot_p = 0.0;
    o.token_mask_p = 0.0;
    o.dropout_p = 0.0;
    return o;
}

void ArTrainOptions::validate() const {
    if (few_shot_p < 0.0 || few_shot_p > 1.0)
        throw ValidationError("ar options: few_shot_p out of [0,1]");
    if (token_mask_p < 0.0 || token_mask_p >= 1.0)
        throw ValidationError("ar options: token_mask_p out of [0,1)");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw ValidationError("ar options: dropout_p out of [0,1)");
}

ArModel::ArModel(ParamStore& ps, const ArConfig& cfg, std::vector<std::string> vocab,
                 RngStream& rng)
    : cfg_(cfg) {
    cfg_.validate();
    sent_ = script::SentenceEncoder(ps, "ar.sent", std::move(vocab), cfg_.d_word,
                                    cfg_.d_sentence, rng);
    int n_idents = int(script::identifier_vocab().size());
    table_ = ps.create_randn("ar.table", {2 + n_idents, cfg_.width}, rng, 0.02);
    tokix_ = ps.create_randn("ar.tokix", {cfg_.l_tokens, cfg_.width}, rng, 0.02);
    refmark_ = ps.create_randn("ar.refmark", {1, cfg_.width}, rng, 0.02);
    tok_proj_ = num::Mlp(ps, "ar.ptok", cfg_.d_token, cfg_.width, cfg_.width, rng);
    face_proj_ = num::Mlp(ps, "ar.pface", script::kFaceDim, cfg_.width, cfg_.width, rng);
    desc_proj_ = num::Mlp(ps, "ar.pdesc", cfg_.d_sentence, cfg_.width, cfg_.width, rng);
    for (int i = 0; i < cfg_.n_layers; ++i)
        blocks_.emplace_back(ps, "ar.blk" + std::to_string(i), cfg_.width, cfg_.n_heads,
                             rng);
    lnf_ = num::LayerNorm(ps, "ar.lnf", cfg_.width);
    head_ = gmm::GmmHead(ps, "ar.head", cfg_.width, cfg_.k_mix, cfg_.d_token, rng);
}

num::Tensor ArModel::embed_slots(const script::SequenceLayout& layout) const {
    std::vector<Tensor> rows;
    rows.reserve(layout.slots.size());
    for (const auto& slot : layout.slots) {
        switch (slot.type) {
            case SlotType::Sof:
                rows.push_back(num::gather_rows(table_, {0}));
                break;
            case SlotType::Eof:
                rows.push_back(num::gather_rows(table_, {1}));
                break;
            case SlotType::Ident:
                if (slot.ident_id < 0 ||
                    slot.ident_id >= int(script::identifier_vocab().size()))
                    throw ValidationError("ar forward: identifier id out of range");
                rows.push_back(num::gather_rows(table_, {2 + slot.ident_id}));
                break;
            case SlotType::Desc:
                rows.push_back(desc_proj_.forward(sent_.encode(slot.sentence)));
                break;
            case SlotType::Face: {
                if (int(slot.face.size()) != script::kFaceDim)
                    throw ValidationError("ar forward: face slot has wrong width");
                Tensor f = Tensor::from({1, script::kFaceDim}, slot.face);
                rows.push_back(face_proj_.forward(f));
                break;
            }
            case SlotType::FrameToken:
            case SlotType::RefFrameToken: {
                if (!slot.token.defined() || slot.token.numel() != size_t(cfg_.d_token))
                    throw ValidationError("ar forward: token slot missing its value");
                if (slot.token_index < 0 || slot.token_index >= cfg_.l_tokens)
                    throw ValidationError("ar forward: token index out of range");
                Tensor t = num::stack_rows({slot.token});
                Tensor e = num::add(tok_proj_.forward(t),
                                    num::gather_rows(tokix_, {slot.token_index}));
                if (slot.type == SlotType::RefFrameToken) e = num::add(e, refmark_);
                rows.push_back(std::move(e));
                break;
            }
        }
    }
    Tensor x = num::stack_rows(rows);
    Tensor pos;
    {
        num::NoGradGuard guard;
        std::vector<Tensor> pos_rows;
        pos_rows.reserve(layout.slots.size());
        for (size_t p = 0; p < layout.slots.size(); ++p)
            pos_rows.push_back(num::sinusoidal_embedding(double(p), cfg_.width));
        pos = num::stack_rows(pos_rows);
    }
    return num::add(x, pos);
}

ArForward ArModel::forward(const script::SequenceLayout& layout,
                           const std::vector<uint8_t>& dropped_keys, double dropout_p,
                           RngStream* drop_rng) const {
    int s = int(layout.slots.size());
    if (s == 0) throw ValidationError("ar forward: empty layout");
    if (!dropped_keys.empty() && int(dropped_keys.size()) != s)
        throw ValidationError("ar forward: dropped_keys length mismatch");

    Tensor x = embed_slots(layout);
    std::vector<uint8_t> allowed = num::causal_attention_mask(s, dropped_keys);
    for (const auto& blk : blocks_) x = blk.forward(x, allowed, dropout_p, drop_rng);
    Tensor h = lnf_.forward(x);

    std::vector<int> pred_rows, slot_index;
    std::vector<double> target_data;
    for (int i = 0; i < s; ++i) {
        const auto& slot = layout.slots[size_t(i)];
        if (slot.type != SlotType::FrameToken) continue;
        if (i == 0) throw ValidationError("ar forward: frame token with no history");
        pred_rows.push_back(i - 1);
        slot_index.push_back(i);
        target_data.insert(target_data.end(), slot.token.data(),
                           slot.token.data() + slot.token.numel());
    }
    if (pred_rows.empty())
        throw ValidationError("ar forward: layout has no frame token positions");

    ArForward out;
    out.params = head_.forward(num::gather_rows(h, pred_rows));
    out.targets =
        Tensor::from({int(pred_rows.size()), cfg_.d_token}, std::move(target_data));
    out.slot_index = std::move(slot_index);
    return out;
}

namespace {

gmm::GmmParams params_row(const gmm::GmmParams& params, int row) {
    gmm::GmmParams p;
    p.weights = num::gather_rows(params.weights, {row});
    p.log_weights = num::gather_rows(params.log_weights, {row});
    p.means = num::gather_rows(params.means, {row});
    p.variances = num::gather_rows(params.variances, {row});
    p.k = params.k;
    p.d = params.d;
    return p;
}

// Fisher-Yates prefix: the first `take` entries of a shuffled [0, n) range.
std::vector<int> draw_distinct(int n, int take, RngStream& rng) {
    std::vector<int> ix(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) ix[size_t(i)] = i;
    for (int i = 0; i < take; ++i) {
        int j = i + int(rng.uniform_int(uint64_t(n - i)));
        std::swap(ix[size_t(i)], ix[size_t(j)]);
    }
    ix.resize(size_t(take));
    return ix;
}

}  // namespace

ArStepReport ar_train_step(ParamStore& ps, const ArModel& model,
                           const std::vector<ArEpisode>& batch,
                           const script::FaceBank& bank, const ArTrainOptions& opts,
                           const AdamConfig& adam, RngStream& rng) {
    opts.validate();
    if (batch.empty()) throw ValidationError("ar_train_step: empty batch");
    const ArConfig& cfg = model.config();

    ArStepReport report;
    std::vector<Tensor> episode_losses;
    for (const auto& src : batch) {
        script::Episode ep = src.episode;
        int n = int(ep.frames.size());
        if (n == 0) throw ValidationError("ar_train_step: empty episode");
        for (const auto& f : ep.frames)
            if (!f.target_tokens.defined())
                throw ValidationError("ar_train_step: frame without target tokens");

        if (opts.augment) {
            bool flip = rng.bernoulli(0.5);
            bool reverse = rng.bernoulli(0.5);
            if (flip) {
                if (int(src.flipped_tokens.size()) != n)
                    throw ValidationError("ar_train_step: missing flipped tokens");
                for (int i = 0; i < n; ++i)
                    ep.frames[size_t(i)].target_tokens = src.flipped_tokens[size_t(i)];
            }
            if (reverse) std::reverse(ep.frames.begin(), ep.frames.end());
        }

        if (opts.face_randomize)
            for (auto& f : ep.frames)
                for (auto& c : f.characters)
                    c.face_embedding = script::sample_face_embedding(bank, c.char_id, rng);

        std::vector<Tensor> refs;
        if (opts.few_shot_p > 0.0 && rng.bernoulli(opts.few_shot_p)) {
            int n_refs = 1 + int(rng.uniform_int(uint64_t(std::min(3, n))));
            for (int ix : draw_distinct(n, n_refs, rng))
                refs.push_back(ep.frames[size_t(ix)].target_tokens);
            ++report.few_shot_episodes;
            report.ref_frames += n_refs;
        }

        script::SequenceLayout layout = script::assemble_sequence(
            ep, refs, n, cfg.context_frames, cfg.l_tokens);

        std::vector<uint8_t> dropped;
        if (opts.token_mask_p > 0.0) {
            dropped.assign(layout.slots.size(), 0);
            for (size_t i = 0; i < layout.slots.size(); ++i) {
                SlotType t = layout.slots[i].type;
                if (t == SlotType::Sof || t == SlotType::Eof) continue;
                ++report.eligible_keys;
                if (rng.bernoulli(opts.token_mask_p)) {
                    dropped[i] = 1;
                    ++report.masked_keys;
                }
            }
        }

        ArForward fwd = model.forward(layout, dropped, opts.dropout_p,
                                      opts.dropout_p > 0.0 ? &rng : nullptr);
        gmm::ArLossReport lr =
            gmm::ar_loss(fwd.params, gmm::mixture_mean(fwd.params), fwd.targets);
        report.nll += lr.nll;
        report.l1 += lr.l1;
        report.l2 += lr.l2;
        episode_losses.push_back(lr.total_t);
    }

    Tensor total = episode_losses[0];
    for (size_t i = 1; i < episode_losses.size(); ++i)
        total = num::add(total, episode_losses[i]);
    total = num::div_const(total, double(episode_losses.size()));

    double b = double(batch.size());
    report.nll /= b;
    report.l1 /= b;
    report.l2 /= b;
    report.total = total.item();
    if (!std::isfinite(report.total))
        throw TrainingError("ar_train_step: non-finite loss");
    ps.zero_grad();
    total.backward();
    ps.adam_step(adam);
    return report;
}

std::vector<num::Tensor> generate(const ArModel& model, const GenerationRequest& req) {
    const ArConfig& cfg = model.config();
    if (req.max_frames < 1) throw ValidationError("generate: max_frames must be positive");
    if (int(req.scripts.size()) != req.max_frames)
        throw ValidationError("generate: expected one script per requested frame");
    if (int(req.ref_tokens.size()) > script::kMaxRefFrames)
        throw ValidationError("generate: more than " +
                              std::to_string(script::kMaxRefFrames) + " reference frames");
    if (req.temperature < 0.0) throw ValidationError("generate: negative temperature");
    for (const auto& r : req.ref_tokens)
        if (r.rows() != cfg.l_tokens || r.cols() != cfg.d_token)
            throw ValidationError("generate: reference tokens are not [L,d]");
    int n_refs = int(req.ref_tokens.size());
    if (req.strict_refs && n_refs + req.max_frames > cfg.context_frames)
        throw ValidationError(
            "generate: strict reference mode needs " + std::to_string(n_refs) +
            " reference frames plus " + std::to_string(req.max_frames) +
            " generated frames inside a " + std::to_string(cfg.context_frames) +
            "-frame context; lower max_frames or drop references");

    num::NoGradGuard guard;
    RngStream rng(req.seed, "generate");
    script::Episode ep;
    ep.episode_id = "generated";

    std::vector<Tensor> out;
    for (int t = 0; t < req.max_frames; ++t) {
        if (req.strict_refs && n_refs + t + 1 > cfg.context_frames) break;
        script::FrameScript f = req.scripts[size_t(t)];
        f.frame_id = t + 1;
        f.target_tokens = Tensor::zeros({cfg.l_tokens, cfg.d_token});
        ep.frames.push_back(std::move(f));

        Tensor& tokens = ep.frames.back().target_tokens;
        for (int i = 0; i < cfg.l_tokens; ++i) {
            script::SequenceLayout layout = script::assemble_sequence(
                ep, req.ref_tokens, t + 1, cfg.context_frames, cfg.l_tokens);
            ArForward fwd = model.forward(layout);
            int row = -1;
            for (size_t r = 0; r < fwd.slot_index.size(); ++r) {
                const auto& slot = layout.slots[size_t(fwd.slot_index[r])];
                if (slot.frame_index == t && slot.token_index == i) row = int(r);
            }
            if (row < 0) throw TrainingError("generate: current token row not found");
            Tensor draw = gmm::sample(params_row(fwd.params, row), rng, req.temperature);
            std::memcpy(tokens.data() + size_t(i) * size_t(cfg.d_token), draw.data(),
                        sizeof(double) * size_t(cfg.d_token));
        }
        out.push_back(Tensor::from(
            {cfg.l_tokens, cfg.d_token},
            std::vector<double>(tokens.data(), tokens.data() + tokens.numel())));
    }
    return out;
}

}  // namespace sf::ar
