#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "storyframe/common.hpp"
#include "storyframe/script.hpp"
#include "storyframe/world.hpp"

using namespace sf;
using namespace sf::num;
using namespace sf::world;

namespace {

int parse_char_id(const std::string& name) {
    REQUIRE(name.rfind("char_", 0) == 0);
    return std::stoi(name.substr(5));
}

std::vector<int> scripted_ids(const script::FrameScript& f) {
    std::vector<int> ids;
    for (const auto& c : f.characters) ids.push_back(parse_char_id(c.char_id));
    std::sort(ids.begin(), ids.end());
    return ids;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
}

Tensor flip_image(const Tensor& img) {
    Tensor out = Tensor::zeros(img.shape());
    int h = img.dim(0), w = img.dim(1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                out.data()[(size_t(y) * w + x) * 3 + c] =
                    img.data()[(size_t(y) * w + (w - 1 - x)) * 3 + c];
    return out;
}

bool images_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * a.numel()) == 0;
}

}  // namespace

TEST_CASE("world spec: validation bounds") {
    WorldSpec ok;
    ok.validate();
    WorldSpec s = ok;
    s.n_characters = 0;
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s = ok;
    s.n_characters = n_shapes() * n_palette() + 1;  // would break unique appearance
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s = ok;
    s.n_styles = n_palette() + 1;
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s = ok;
    s.min_frames = 5;
    s.max_frames = 4;
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s = ok;
    s.n_episodes = 0;
    CHECK_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("world spec: JSON round trip and defaults") {
    WorldSpec s;
    s.n_characters = 9;
    s.n_episodes = 3;
    s.seed = 77;
    WorldSpec back = WorldSpec::from_json(s.to_json());
    CHECK(back.n_characters == 9);
    CHECK(back.n_styles == s.n_styles);
    CHECK(back.n_episodes == 3);
    CHECK(back.seed == 77);
    WorldSpec defaults = WorldSpec::from_json(nlohmann::json::object());
    CHECK(defaults.n_characters == WorldSpec{}.n_characters);
    CHECK_THROWS_AS(WorldSpec::from_json({{"n_characters", "many"}}), ParseError);
    CHECK_THROWS_AS(WorldSpec::from_json({{"n_characters", 0}}), ValidationError);
}

TEST_CASE("appearance alphabet: bijection onto shape x color") {
    std::set<std::pair<int, int>> seen;
    for (int c = 0; c < n_shapes() * n_palette(); ++c) {
        CHECK(char_shape(c) >= 0);
        CHECK(char_shape(c) < n_shapes());
        CHECK(char_color(c) >= 0);
        CHECK(char_color(c) < n_palette());
        seen.insert({char_shape(c), char_color(c)});
    }
    CHECK(int(seen.size()) == n_shapes() * n_palette());
}

TEST_CASE("glyph masks: in-box, mirror-symmetric, expected pixel counts") {
    const std::vector<size_t> want_sizes = {49, 40, 41, 45};
    for (int s = 0; s < n_shapes(); ++s) {
        const auto& mask = glyph_mask(s);
        CHECK(mask.size() == want_sizes[size_t(s)]);
        std::set<std::pair<int, int>> px(mask.begin(), mask.end());
        CHECK(px.size() == mask.size());
        for (auto [dx, dy] : mask) {
            CHECK(std::abs(dx) <= kGlyphHalf);
            CHECK(std::abs(dy) <= kGlyphHalf);
            // x-mirror symmetry keeps flipped frames identifiable
            CHECK(px.count({-dx, dy}) == 1);
        }
    }
}

TEST_CASE("identity vectors: fixed norm, orthogonal under the face dim") {
    auto ids = identity_vectors(6, 42);
    REQUIRE(ids.size() == 6);
    for (const auto& v : ids) {
        REQUIRE(int(v.size()) == script::kFaceDim);
        double n2 = 0.0;
        for (double x : v) n2 += x * x;
        CHECK(std::sqrt(n2) == doctest::Approx(kIdentityNorm).epsilon(1e-12));
    }
    for (size_t i = 0; i < ids.size(); ++i)
        for (size_t j = i + 1; j < ids.size(); ++j)
            CHECK(std::abs(cosine(ids[i], ids[j])) < 1e-9);
    auto again = identity_vectors(6, 42);
    for (size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == again[i]);
}

TEST_CASE("identity vectors: beyond the dimension, pairwise cosine stays low") {
    for (int n : {24, 32}) {
        auto ids = identity_vectors(n, 7);
        REQUIRE(int(ids.size()) == n);
        for (const auto& v : ids) {
            double n2 = 0.0;
            for (double x : v) n2 += x * x;
            CHECK(std::sqrt(n2) == doctest::Approx(kIdentityNorm).epsilon(1e-12));
        }
        for (size_t i = 0; i < ids.size(); ++i)
            for (size_t j = i + 1; j < ids.size(); ++j)
                CHECK(std::abs(cosine(ids[i], ids[j])) <= 0.25 + 1e-12);
    }
    CHECK_THROWS_AS(identity_vectors(33, 7), ValidationError);
}

TEST_CASE("render_frame: background fill, glyph colors, bounds policy") {
    RenderedFrame blank = render_frame({}, 2);
    auto bg = style_background(2);
    for (int i = 0; i < kImageSize * kImageSize; ++i)
        for (int c = 0; c < 3; ++c) CHECK(blank.pixels.data()[size_t(i) * 3 + c] == bg[size_t(c)]);
    CHECK(blank.style_tag == style_name(2));

    PlacedChar p;
    p.char_id = 3;
    p.cx = 16;
    p.cy = 16;
    RenderedFrame one = render_frame({p}, 0);
    auto color = palette_color(char_color(3));
    for (auto [dx, dy] : glyph_mask(char_shape(3)))
        for (int c = 0; c < 3; ++c)
            CHECK(one.pixels.data()[(size_t(16 + dy) * kImageSize + size_t(16 + dx)) * 3 + c] ==
                  color[size_t(c)]);

    PlacedChar edge;
    edge.char_id = 0;
    edge.cx = 1;  // glyph would spill out at x = -3
    edge.cy = 16;
    CHECK_THROWS_AS(render_frame({edge}, 0), ValidationError);
    RenderedFrame wrapped = render_frame({edge}, 0, true);
    auto c0 = palette_color(char_color(0));
    // disc pixel at dx=-4 wraps to column 29
    CHECK(wrapped.pixels.data()[(size_t(16) * kImageSize + 29) * 3 + 0] == c0[0]);

    std::vector<PlacedChar> four(4, p);
    CHECK_THROWS_AS(render_frame(four, 0), ValidationError);
}

TEST_CASE("oracle: every character is the unique identification of its own render") {
    for (int c = 0; c < n_shapes() * n_palette(); ++c) {
        PlacedChar p;
        p.char_id = c;
        p.cx = 10 + (c % 3) * 6;
        p.cy = 9 + (c % 4) * 4;
        RenderedFrame f = render_frame({p}, c % 3);
        CHECK(oracle_score(f.pixels, c) > kOracleThreshold);
        auto found = oracle_identify(f.pixels, n_shapes() * n_palette());
        CHECK(found == std::vector<int>{c});
    }
}

TEST_CASE("oracle: a two-character frame identifies exactly that pair") {
    PlacedChar a, b;
    a.char_id = 1;
    a.cx = 8;
    a.cy = 8;
    b.char_id = 9;  // same color as 1, different shape
    b.cx = 23;
    b.cy = 23;
    RenderedFrame f = render_frame({a, b}, 1);
    auto found = oracle_identify(f.pixels, 32);
    CHECK(found == std::vector<int>{1, 9});
}

TEST_CASE("oracle: blank frames identify nobody in any style") {
    for (int s = 0; s < n_palette(); ++s) {
        RenderedFrame blank = render_frame({}, s);
        CHECK(oracle_identify(blank.pixels, n_shapes() * n_palette()).empty());
    }
}

TEST_CASE("oracle: wrapped glyphs are still found") {
    PlacedChar p;
    p.char_id = 4;
    p.cx = 31;
    p.cy = 2;
    RenderedFrame f = render_frame({p}, 0, true);
    CHECK(oracle_score(f.pixels, 4) > kOracleThreshold);
    CHECK(oracle_identify(f.pixels, 32) == std::vector<int>{4});
}

TEST_CASE("generate_corpus: same seed twice is byte-identical") {
    WorldSpec spec;
    spec.n_episodes = 6;
    spec.seed = 31;
    auto a = generate_corpus(spec);
    auto b = generate_corpus(spec);
    CHECK(script::serialize_corpus(a) == script::serialize_corpus(b));
    REQUIRE(a.size() == b.size());
    for (size_t e = 0; e < a.size(); ++e) {
        REQUIRE(a[e].frames.size() == b[e].frames.size());
        for (size_t f = 0; f < a[e].frames.size(); ++f)
            CHECK(images_equal(a[e].frames[f].image, b[e].frames[f].image));
    }
    WorldSpec other = spec;
    other.seed = 32;
    CHECK(script::serialize_corpus(generate_corpus(other)) != script::serialize_corpus(a));
}

TEST_CASE("generate_corpus: a one-character world names that character everywhere") {
    WorldSpec spec;
    spec.n_characters = 1;
    spec.n_episodes = 4;
    spec.seed = 5;
    auto corpus = generate_corpus(spec);
    REQUIRE(corpus.size() == 4);
    for (const auto& e : corpus)
        for (const auto& f : e.frames) {
            REQUIRE(f.characters.size() == 1);
            CHECK(f.characters[0].char_id == "char_00");
        }
}

TEST_CASE("generate_corpus: structural invariants hold on every frame") {
    WorldSpec spec;
    spec.n_episodes = 10;
    spec.seed = 11;
    auto corpus = generate_corpus(spec);
    REQUIRE(int(corpus.size()) == spec.n_episodes);
    std::set<std::string> styles;
    for (const auto& e : corpus) {
        styles.insert(e.style_tag);
        CHECK(int(e.frames.size()) >= spec.min_frames);
        CHECK(int(e.frames.size()) <= spec.max_frames);
        for (const auto& f : e.frames) {
            CHECK(f.identifiers == f.canonical_identifiers());
            CHECK(!f.characters.empty());
            CHECK(int(f.characters.size()) <= kMaxCharsPerFrame);
            CHECK(int(f.descriptions().size()) <= script::kMaxDescriptions);
            REQUIRE(f.image.defined());
            CHECK(f.image.shape() == Shape{kImageSize, kImageSize, 3});
            for (const auto& c : f.characters)
                CHECK(int(c.face_embedding.size()) == script::kFaceDim);
        }
    }
    for (const auto& tag : styles) {
        bool known = false;
        for (int s = 0; s < spec.n_styles; ++s) known = known || tag == style_name(s);
        CHECK(known);
    }
}

TEST_CASE("generate_corpus: oracle recovers the scripted cast of every frame") {
    WorldSpec spec;
    spec.n_episodes = 100;
    spec.min_frames = 4;
    spec.max_frames = 6;
    spec.seed = 2;
    auto corpus = generate_corpus(spec);
    int frames = 0;
    for (const auto& e : corpus)
        for (const auto& f : e.frames) {
            ++frames;
            REQUIRE(oracle_identify(f.image, spec.n_characters) == scripted_ids(f));
        }
    CHECK(frames >= 400);
}

TEST_CASE("face embeddings: same character coherent, different characters apart") {
    WorldSpec spec;
    spec.n_episodes = 30;
    spec.seed = 13;
    auto corpus = generate_corpus(spec);
    script::FaceBank bank = script::FaceBank::build(corpus);
    REQUIRE(!bank.ids().empty());
    for (const auto& id : bank.ids()) {
        const auto& obs = bank.observations(id);
        for (size_t i = 0; i < obs.size(); ++i)
            for (size_t j = i + 1; j < obs.size(); ++j)
                REQUIRE(cosine(obs[i], obs[j]) > 0.95);
    }
    for (size_t a = 0; a < bank.ids().size(); ++a)
        for (size_t b = a + 1; b < bank.ids().size(); ++b) {
            const auto& oa = bank.observations(bank.ids()[a]);
            const auto& ob = bank.observations(bank.ids()[b]);
            for (size_t i = 0; i < oa.size(); ++i)
                for (size_t j = 0; j < ob.size(); ++j)
                    REQUIRE(cosine(oa[i], ob[j]) < 0.5);
        }
}

TEST_CASE("augment: outputs are flip/reverse combinations, all four reachable") {
    WorldSpec spec;
    spec.n_episodes = 1;
    spec.min_frames = 4;
    spec.max_frames = 4;
    spec.seed = 21;
    auto corpus = generate_corpus(spec);
    const script::Episode& orig = corpus[0];

    std::vector<Tensor> flipped;
    for (const auto& f : orig.frames) flipped.push_back(flip_image(f.image));

    std::set<std::pair<bool, bool>> combos;
    for (uint64_t seed = 0; seed < 24; ++seed) {
        RngStream rng(seed, "augment");
        script::Episode out = augment(orig, rng);
        REQUIRE(out.frames.size() == orig.frames.size());

        std::vector<int> ids, fwd, rev;
        for (const auto& f : out.frames) ids.push_back(f.frame_id);
        for (const auto& f : orig.frames) fwd.push_back(f.frame_id);
        rev = fwd;
        std::reverse(rev.begin(), rev.end());
        REQUIRE((ids == fwd || ids == rev));
        bool reversed = ids == rev;

        bool flip_all = true, keep_all = true;
        for (size_t i = 0; i < out.frames.size(); ++i) {
            size_t src = reversed ? out.frames.size() - 1 - i : i;
            flip_all = flip_all && images_equal(out.frames[i].image, flipped[src]);
            keep_all = keep_all && images_equal(out.frames[i].image, orig.frames[src].image);
            // scripts ride along untouched
            CHECK(out.frames[i].scene_elements == orig.frames[src].scene_elements);
            CHECK(out.frames[i].characters.size() == orig.frames[src].characters.size());
        }
        REQUIRE((flip_all || keep_all));
        combos.insert({flip_all && !keep_all, reversed});
    }
    CHECK(combos.size() == 4);
}

TEST_CASE("augment: double flip restores the original images") {
    WorldSpec spec;
    spec.n_episodes = 1;
    spec.seed = 3;
    auto corpus = generate_corpus(spec);
    for (const auto& f : corpus[0].frames)
        CHECK(images_equal(flip_image(flip_image(f.image)), f.image));
}

TEST_CASE("augment: deterministic under a fixed stream") {
    WorldSpec spec;
    spec.n_episodes = 1;
    spec.seed = 8;
    auto corpus = generate_corpus(spec);
    RngStream r1(4, "augment");
    RngStream r2(4, "augment");
    auto a = augment(corpus[0], r1);
    auto b = augment(corpus[0], r2);
    REQUIRE(a.frames.size() == b.frames.size());
    for (size_t i = 0; i < a.frames.size(); ++i) {
        CHECK(a.frames[i].frame_id == b.frames[i].frame_id);
        CHECK(images_equal(a.frames[i].image, b.frames[i].image));
    }
}

TEST_CASE("augment: flipped frames keep their oracle identities") {
    WorldSpec spec;
    spec.n_episodes = 5;
    spec.seed = 17;
    auto corpus = generate_corpus(spec);
    for (const auto& e : corpus)
        for (const auto& f : e.frames)
            CHECK(oracle_identify(flip_image(f.image), spec.n_characters) == scripted_ids(f));
}

TEST_CASE("advance_placements: horizontal translation on the torus") {
    PlacedChar p;
    p.char_id = 2;
    p.cx = 30;
    p.cy = 12;
    auto moved = advance_placements({p}, 5);
    REQUIRE(moved.size() == 1);
    CHECK(moved[0].cx == 3);
    CHECK(moved[0].cy == 12);
    auto back = advance_placements(moved, -5);
    CHECK(back[0].cx == 30);
    // a wrapped placement still renders and identifies
    RenderedFrame f = render_frame(moved, 0, true);
    CHECK(oracle_identify(f.pixels, 32) == std::vector<int>{2});
}
