#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "storyframe/ar.hpp"
#include "storyframe/common.hpp"
#include "storyframe/gradcheck.hpp"
#include "storyframe/ops.hpp"
#include "storyframe/world.hpp"

using namespace sf;
using namespace sf::num;
using namespace sf::ar;

namespace {

ArConfig tiny_config() {
    ArConfig cfg;
    cfg.width = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.k_mix = 2;
    cfg.d_token = 4;
    cfg.l_tokens = 2;
    cfg.d_word = 8;
    cfg.d_sentence = 8;
    return cfg;
}

std::vector<std::string> tiny_vocab() {
    return {"<unk>", "dim", "glows", "hall", "the", "tonight"};
}

// A syntactically valid corpus episode with random target tokens attached.
script::Episode fixture_episode(int n_frames, const ArConfig& cfg, RngStream& rng) {
    world::WorldSpec spec;
    spec.n_characters = 4;
    spec.n_episodes = 1;
    spec.min_frames = n_frames;
    spec.max_frames = n_frames;
    spec.seed = 77;
    script::Episode ep = world::generate_corpus(spec)[0];
    for (auto& f : ep.frames) {
        f.target_tokens = Tensor::randn({cfg.l_tokens, cfg.d_token}, rng);
        f.image = Tensor();
    }
    return ep;
}

ArEpisode fixture_ar_episode(int n_frames, const ArConfig& cfg, RngStream& rng) {
    ArEpisode e;
    e.episode = fixture_episode(n_frames, cfg, rng);
    for (size_t i = 0; i < e.episode.frames.size(); ++i)
        e.flipped_tokens.push_back(Tensor::randn({cfg.l_tokens, cfg.d_token}, rng));
    return e;
}

bool rows_equal(const Tensor& a, const Tensor& b, int row) {
    return std::memcmp(a.data() + size_t(row) * size_t(a.cols()),
                       b.data() + size_t(row) * size_t(b.cols()),
                       sizeof(double) * size_t(a.cols())) == 0;
}

// The mixture head starts at zero (constant output); bump it so perturbation
// tests see a live conditioning path.
void wake_head(ParamStore& ps, RngStream& rng) {
    Tensor w = ps.get("ar.head.out.w");
    for (size_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal() * 0.05;
}

}  // namespace

TEST_CASE("ar config: validation and JSON round trip") {
    ArConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    ArConfig back = ArConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    ArConfig bad = cfg;
    bad.width = 130;  // not divisible by 4 heads
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = cfg;
    bad.context_frames = script::kMaxContextFrames + 1;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK_THROWS_AS(ArConfig::from_json({{"k_mix", 0}}), ValidationError);
}

TEST_CASE("ar forward: untrained single-frame layout satisfies mixture invariants") {
    ParamStore ps;
    RngStream rng(1, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(2, "data");
    script::Episode ep = fixture_episode(1, cfg, data_rng);
    script::SequenceLayout layout =
        script::assemble_sequence(ep, {}, 1, cfg.context_frames, cfg.l_tokens);

    ArForward fwd = model.forward(layout);
    REQUIRE(fwd.params.weights.shape() == Shape{cfg.l_tokens, cfg.k_mix});
    REQUIRE(fwd.targets.shape() == Shape{cfg.l_tokens, cfg.d_token});
    for (size_t i = 0; i < fwd.params.weights.numel(); ++i)
        CHECK(std::isfinite(fwd.params.weights.data()[i]));
    for (int r = 0; r < fwd.params.weights.rows(); ++r) {
        double sum = 0.0;
        for (int c = 0; c < cfg.k_mix; ++c) sum += fwd.params.weights.at(r, c);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    for (size_t i = 0; i < fwd.params.variances.numel(); ++i)
        CHECK(fwd.params.variances.data()[i] >= gmm::kVarianceFloor);

    // targets are copies of the layout's token values
    for (size_t r = 0; r < fwd.slot_index.size(); ++r) {
        const auto& slot = layout.slots[size_t(fwd.slot_index[size_t(r)])];
        for (int c = 0; c < cfg.d_token; ++c)
            CHECK(fwd.targets.at(int(r), c) == slot.token.at(c));
    }
}

TEST_CASE("ar forward: causality is exact under future-slot permutation") {
    ParamStore ps;
    RngStream rng(3, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    wake_head(ps, rng);
    RngStream data_rng(4, "data");
    script::Episode ep = fixture_episode(3, cfg, data_rng);
    script::SequenceLayout layout =
        script::assemble_sequence(ep, {}, 3, cfg.context_frames, cfg.l_tokens);
    ArForward base = model.forward(layout);
    REQUIRE(base.slot_index.size() == 6);

    // frame 0's rows are immune to any rewrite of frame 1 and 2 slots
    int cut = base.slot_index[size_t(cfg.l_tokens - 1)];  // last frame-0 token slot
    script::SequenceLayout mutated = layout;
    RngStream noise(5, "noise");
    for (size_t i = size_t(cut) + 1; i < mutated.slots.size(); ++i) {
        auto& slot = mutated.slots[i];
        switch (slot.type) {
            case script::SlotType::Desc: slot.sentence = "glows dim tonight"; break;
            case script::SlotType::Face:
                for (auto& v : slot.face) v += noise.normal();
                break;
            case script::SlotType::FrameToken:
            case script::SlotType::RefFrameToken:
                for (size_t j = 0; j < slot.token.numel(); ++j)
                    slot.token.data()[j] += noise.normal();
                break;
            default: break;
        }
    }
    std::swap(mutated.slots[size_t(cut) + 2], mutated.slots[size_t(cut) + 3]);
    ArForward moved = model.forward(mutated);

    for (int r = 0; r < cfg.l_tokens; ++r) {
        CHECK(rows_equal(base.params.weights, moved.params.weights, r));
        CHECK(rows_equal(base.params.means, moved.params.means, r));
        CHECK(rows_equal(base.params.variances, moved.params.variances, r));
    }
    // while the rewritten later frames do respond
    bool later_changed = false;
    for (size_t r = cfg.l_tokens; r < base.slot_index.size(); ++r)
        later_changed = later_changed ||
                        !rows_equal(base.params.means, moved.params.means, int(r));
    CHECK(later_changed);
}

TEST_CASE("ar forward: face conditioning is live at the owning frame") {
    ParamStore ps;
    RngStream rng(6, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    wake_head(ps, rng);
    RngStream data_rng(7, "data");
    script::Episode ep = fixture_episode(2, cfg, data_rng);
    script::SequenceLayout layout =
        script::assemble_sequence(ep, {}, 2, cfg.context_frames, cfg.l_tokens);
    ArForward base = model.forward(layout);

    script::SequenceLayout touched = layout;
    for (auto& slot : touched.slots)
        if (slot.type == script::SlotType::Face && slot.frame_index == 1) {
            for (auto& v : slot.face) v += 0.5;
            break;
        }
    ArForward moved = model.forward(touched);
    bool frame1_changed = false;
    for (size_t r = 0; r < base.slot_index.size(); ++r) {
        int slot_ix = base.slot_index[r];
        if (layout.slots[size_t(slot_ix)].frame_index != 1) continue;
        frame1_changed = frame1_changed ||
                         !rows_equal(base.params.means, moved.params.means, int(r));
    }
    CHECK(frame1_changed);
}

TEST_CASE("ar forward: malformed layouts are rejected") {
    ParamStore ps;
    RngStream rng(8, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(9, "data");
    script::Episode ep = fixture_episode(1, cfg, data_rng);
    script::SequenceLayout layout =
        script::assemble_sequence(ep, {}, 1, cfg.context_frames, cfg.l_tokens);

    CHECK_THROWS_AS(model.forward(script::SequenceLayout{}), ValidationError);
    CHECK_THROWS_AS(model.forward(layout, std::vector<uint8_t>(3, 0)), ValidationError);

    script::SequenceLayout no_tokens = layout;
    for (auto& slot : no_tokens.slots)
        if (slot.type == script::SlotType::FrameToken)
            slot.type = script::SlotType::RefFrameToken;
    CHECK_THROWS_AS(model.forward(no_tokens), ValidationError);

    script::SequenceLayout bare = layout;
    for (auto& slot : bare.slots)
        if (slot.type == script::SlotType::FrameToken) slot.token = Tensor();
    CHECK_THROWS_AS(model.forward(bare), ValidationError);
}

TEST_CASE("ar_train_step: deterministic with regularizers off, loss decreases") {
    ArConfig cfg = tiny_config();
    auto run = [&cfg](int steps) {
        ParamStore ps;
        RngStream rng(10, "ar");
        ArModel model(ps, cfg, tiny_vocab(), rng);
        RngStream data_rng(11, "data");
        std::vector<ArEpisode> batch = {fixture_ar_episode(2, cfg, data_rng),
                                        fixture_ar_episode(3, cfg, data_rng)};
        script::FaceBank bank = script::FaceBank::build({batch[0].episode});
        AdamConfig adam;
        adam.lr = 3e-3;
        RngStream step_rng(12, "steps");
        std::vector<double> losses;
        for (int s = 0; s < steps; ++s)
            losses.push_back(ar_train_step(ps, model, batch, bank,
                                           ArTrainOptions::all_off(), adam, step_rng)
                                 .total);
        return losses;
    };
    auto a = run(40);
    auto b = run(40);
    CHECK(a == b);
    CHECK(a.back() < a.front());
}

TEST_CASE("ar_train_step: L_ar gradient passes the finite difference check") {
    ParamStore ps;
    RngStream rng(13, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(14, "data");
    script::Episode ep = fixture_episode(2, cfg, data_rng);
    script::SequenceLayout layout =
        script::assemble_sequence(ep, {}, 2, cfg.context_frames, cfg.l_tokens);

    auto loss_fn = [&]() {
        ArForward fwd = model.forward(layout);
        return gmm::ar_loss(fwd.params, gmm::mixture_mean(fwd.params), fwd.targets)
            .total_t;
    };
    std::vector<Tensor> params;
    for (const auto& name : ps.names()) params.push_back(ps.get(name));
    RngStream probe_rng(15, "probes");
    double worst = finite_difference_check(loss_fn, params, 1e-4, 120, probe_rng);
    CHECK(worst < 1e-4);
}

TEST_CASE("ar_train_step: masking audit and few-shot rate") {
    ParamStore ps;
    RngStream rng(16, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(17, "data");
    std::vector<ArEpisode> batch = {fixture_ar_episode(3, cfg, data_rng)};
    script::FaceBank bank = script::FaceBank::build({batch[0].episode});
    AdamConfig adam;
    adam.lr = 1e-4;

    ArTrainOptions opts = ArTrainOptions::all_off();
    opts.token_mask_p = 0.15;
    opts.few_shot_p = 0.5;

    // SOF/EOF columns are never eligible: first step's layout is ref-free only
    // if the few-shot draw says so, so count eligibility per step instead.
    RngStream step_rng(18, "steps");
    long eligible = 0, masked = 0, few_shot = 0, steps = 0;
    while (eligible < 10000) {
        ArStepReport rep = ar_train_step(ps, model, batch, bank, opts, adam, step_rng);
        eligible += rep.eligible_keys;
        masked += rep.masked_keys;
        few_shot += rep.few_shot_episodes;
        ++steps;
        if (rep.few_shot_episodes == 0) {
            // ref-free layout: every slot except one SOF and one EOF per frame
            int n_frames = int(batch[0].episode.frames.size());
            int n_slots = 0;
            for (const auto& f : batch[0].episode.frames)
                n_slots += 2 + int(f.canonical_identifiers().size()) +
                           int(f.descriptions().size()) + int(f.characters.size()) +
                           cfg.l_tokens;
            CHECK(rep.eligible_keys == n_slots - 2 * n_frames);
        }
    }
    double mask_rate = double(masked) / double(eligible);
    CHECK(mask_rate == doctest::Approx(0.15).epsilon(0.0667));  // 0.15 +/- 0.01
    double few_shot_rate = double(few_shot) / double(steps);
    CHECK(few_shot_rate > 0.35);
    CHECK(few_shot_rate < 0.65);
}

TEST_CASE("ar_train_step: validation failures") {
    ParamStore ps;
    RngStream rng(19, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(20, "data");
    script::FaceBank bank;
    AdamConfig adam;
    RngStream step_rng(21, "steps");

    CHECK_THROWS_AS(
        ar_train_step(ps, model, {}, bank, ArTrainOptions::all_off(), adam, step_rng),
        ValidationError);

    ArEpisode missing = fixture_ar_episode(2, cfg, data_rng);
    missing.episode.frames[0].target_tokens = Tensor();
    CHECK_THROWS_AS(ar_train_step(ps, model, {missing}, bank, ArTrainOptions::all_off(),
                                  adam, step_rng),
                    ValidationError);

    // augmentation demands the flipped view
    ArEpisode unflipped = fixture_ar_episode(2, cfg, data_rng);
    unflipped.flipped_tokens.clear();
    ArTrainOptions aug = ArTrainOptions::all_off();
    aug.augment = true;
    script::FaceBank real_bank = script::FaceBank::build({unflipped.episode});
    RngStream flip_rng(22, "flips");
    bool threw = false;
    for (int s = 0; s < 16 && !threw; ++s) {
        try {
            ar_train_step(ps, model, {unflipped}, real_bank, aug, adam, flip_rng);
        } catch (const ValidationError&) {
            threw = true;
        }
    }
    CHECK(threw);

    ArTrainOptions bad = ArTrainOptions::all_off();
    bad.token_mask_p = 1.0;
    CHECK_THROWS_AS(ar_train_step(ps, model, {fixture_ar_episode(2, cfg, data_rng)},
                                  bank, bad, adam, step_rng),
                    ValidationError);
}

TEST_CASE("ar_train_step: full regularizer suite runs and stays finite") {
    ParamStore ps;
    RngStream rng(23, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(24, "data");
    std::vector<ArEpisode> batch = {fixture_ar_episode(3, cfg, data_rng),
                                    fixture_ar_episode(2, cfg, data_rng)};
    script::Corpus for_bank = {batch[0].episode, batch[1].episode};
    script::FaceBank bank = script::FaceBank::build(for_bank);
    AdamConfig adam;
    adam.lr = 1e-3;
    ArTrainOptions opts;  // defaults: everything on
    RngStream step_rng(25, "steps");
    for (int s = 0; s < 10; ++s) {
        ArStepReport rep = ar_train_step(ps, model, batch, bank, opts, adam, step_rng);
        CHECK(std::isfinite(rep.total));
        CHECK(std::isfinite(rep.nll));
        CHECK(rep.l1 >= 0.0);
        CHECK(rep.l2 >= 0.0);
    }
}

TEST_CASE("generate: shape, determinism, and degenerate temperature") {
    ParamStore ps;
    RngStream rng(26, "ar");
    ArConfig cfg = tiny_config();
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(27, "data");
    script::Episode ep = fixture_episode(3, cfg, data_rng);

    GenerationRequest req;
    req.scripts = {ep.frames[0], ep.frames[1], ep.frames[2]};
    for (auto& f : req.scripts) f.target_tokens = Tensor();
    req.max_frames = 3;
    req.temperature = 1.0;
    req.seed = 5;

    auto out = generate(model, req);
    REQUIRE(out.size() == 3);
    for (const auto& t : out) {
        REQUIRE(t.shape() == Shape{cfg.l_tokens, cfg.d_token});
        for (size_t i = 0; i < t.numel(); ++i) CHECK(std::isfinite(t.data()[i]));
    }

    auto again = generate(model, req);
    for (size_t f = 0; f < out.size(); ++f)
        CHECK(std::memcmp(out[f].data(), again[f].data(),
                          sizeof(double) * out[f].numel()) == 0);

    GenerationRequest other = req;
    other.seed = 6;
    auto different = generate(model, other);
    bool any_diff = false;
    for (size_t f = 0; f < out.size(); ++f)
        any_diff = any_diff || std::memcmp(out[f].data(), different[f].data(),
                                           sizeof(double) * out[f].numel()) != 0;
    CHECK(any_diff);

    GenerationRequest cold = req;
    cold.temperature = 0.0;
    cold.seed = 100;
    GenerationRequest cold2 = cold;
    cold2.seed = 200;
    auto mode1 = generate(model, cold);
    auto mode2 = generate(model, cold2);
    for (size_t f = 0; f < mode1.size(); ++f)
        CHECK(std::memcmp(mode1[f].data(), mode2[f].data(),
                          sizeof(double) * mode1[f].numel()) == 0);

    GenerationRequest one = req;
    one.scripts = {req.scripts[0]};
    one.max_frames = 1;
    CHECK(generate(model, one).size() == 1);
}

TEST_CASE("generate: reference handling and refusal") {
    ParamStore ps;
    RngStream rng(28, "ar");
    ArConfig cfg = tiny_config();
    cfg.context_frames = 6;
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(29, "data");
    script::Episode ep = fixture_episode(4, cfg, data_rng);

    GenerationRequest req;
    req.scripts = {ep.frames[0], ep.frames[1], ep.frames[2], ep.frames[3]};
    req.max_frames = 4;
    req.seed = 1;
    for (int i = 0; i < 2; ++i)
        req.ref_tokens.push_back(Tensor::randn({cfg.l_tokens, cfg.d_token}, data_rng));

    req.strict_refs = true;
    CHECK(generate(model, req).size() == 4);  // 2 + 4 == 6 fits

    GenerationRequest tight = req;
    tight.ref_tokens.push_back(Tensor::randn({cfg.l_tokens, cfg.d_token}, data_rng));
    CHECK_THROWS_WITH_AS(generate(model, tight),
                         doctest::Contains("strict reference mode"), ValidationError);
    tight.strict_refs = false;
    CHECK(generate(model, tight).size() == 4);  // window slides instead

    GenerationRequest bad = req;
    bad.scripts.pop_back();
    CHECK_THROWS_AS(generate(model, bad), ValidationError);
    bad = req;
    bad.max_frames = 0;
    CHECK_THROWS_AS(generate(model, bad), ValidationError);
    bad = req;
    bad.temperature = -0.1;
    CHECK_THROWS_AS(generate(model, bad), ValidationError);
    bad = req;
    bad.ref_tokens[0] = Tensor::zeros({cfg.l_tokens, cfg.d_token + 1});
    CHECK_THROWS_AS(generate(model, bad), ValidationError);
    bad = req;
    bad.strict_refs = false;
    for (int i = 0; i < 9; ++i)
        bad.ref_tokens.push_back(Tensor::zeros({cfg.l_tokens, cfg.d_token}));
    CHECK_THROWS_AS(generate(model, bad), ValidationError);  // 11 refs
}

TEST_CASE("generate: long requests slide the window over whole frames") {
    ParamStore ps;
    RngStream rng(30, "ar");
    ArConfig cfg = tiny_config();
    cfg.context_frames = 3;
    ArModel model(ps, cfg, tiny_vocab(), rng);
    RngStream data_rng(31, "data");
    script::Episode ep = fixture_episode(4, cfg, data_rng);

    GenerationRequest req;
    for (int i = 0; i < 10; ++i) req.scripts.push_back(ep.frames[size_t(i % 4)]);
    req.max_frames = 10;
    req.seed = 9;
    auto out = generate(model, req);
    CHECK(out.size() == 10);
}
