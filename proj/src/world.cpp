#include "storyframe/world.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "storyframe/common.hpp"
#include "storyframe/ops.hpp"

namespace sf::world {

using num::RngStream;
using num::Tensor;
using script::Corpus;
using script::Episode;
using script::FrameScript;

void WorldSpec::validate() const {
    if (n_characters < 1 || n_characters > n_shapes() * n_palette())
        throw ValidationError("world spec: n_characters must be in [1, " +
                              std::to_string(n_shapes() * n_palette()) +
                              "] for unique appearances");
    if (n_styles < 1 || n_styles > n_palette())
        throw ValidationError("world spec: n_styles out of range");
    if (min_frames < 1 || max_frames < min_frames)
        throw ValidationError("world spec: bad frames_per_episode range");
    if (n_episodes < 1) throw ValidationError("world spec: n_episodes must be positive");
}

nlohmann::json WorldSpec::to_json() const {
    return {{"n_characters", n_characters}, {"n_styles", n_styles},
            {"n_episodes", n_episodes},     {"min_frames", min_frames},
            {"max_frames", max_frames},     {"seed", seed}};
}

WorldSpec WorldSpec::from_json(const nlohmann::json& j) {
    WorldSpec s;
    try {
        s.n_characters = j.value("n_characters", s.n_characters);
        s.n_styles = j.value("n_styles", s.n_styles);
        s.n_episodes = j.value("n_episodes", s.n_episodes);
        s.min_frames = j.value("min_frames", s.min_frames);
        s.max_frames = j.value("max_frames", s.max_frames);
        s.seed = j.value("seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("world spec: ") + e.what());
    }
    s.validate();
    return s;
}

int n_shapes() { return 4; }
int n_palette() { return 8; }
int char_shape(int char_id) { return char_id / n_palette(); }
int char_color(int char_id) { return char_id % n_palette(); }

std::array<double, 3> palette_color(int ix) {
    static const std::array<std::array<double, 3>, 8> palette = {{{1.0, 0.1, 0.1},
                                                                  {0.1, 1.0, 0.1},
                                                                  {0.2, 0.4, 1.0},
                                                                  {1.0, 1.0, 0.1},
                                                                  {1.0, 0.1, 1.0},
                                                                  {0.1, 1.0, 1.0},
                                                                  {1.0, 1.0, 1.0},
                                                                  {1.0, 0.55, 0.1}}};
    if (ix < 0 || ix >= 8) throw ValidationError("palette index out of range");
    return palette[size_t(ix)];
}

std::array<double, 3> style_background(int style_ix) {
    auto c = palette_color(style_ix);
    return {0.03 + 0.07 * c[0], 0.03 + 0.07 * c[1], 0.03 + 0.07 * c[2]};
}

std::string char_name(int char_id) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "char_%02d", char_id);
    return buf;
}

std::string style_name(int style_ix) {
    static const char* names[8] = {"ember", "moss",  "tide", "amber",
                                   "orchid", "glacier", "chalk", "rust"};
    if (style_ix < 0 || style_ix >= 8) throw ValidationError("style index out of range");
    return names[style_ix];
}

const std::vector<std::pair<int, int>>& glyph_mask(int shape_ix) {
    static const std::array<std::vector<std::pair<int, int>>, 4> masks = [] {
        std::array<std::vector<std::pair<int, int>>, 4> m;
        for (int dy = -kGlyphHalf; dy <= kGlyphHalf; ++dy)
            for (int dx = -kGlyphHalf; dx <= kGlyphHalf; ++dx) {
                if (dx * dx + dy * dy <= 16) m[0].push_back({dx, dy});  // disc
                if (std::max(std::abs(dx), std::abs(dy)) <= 3 &&
                    std::max(std::abs(dx), std::abs(dy)) >= 2)
                    m[1].push_back({dx, dy});  // ring
                if (2 * std::abs(dx) <= dy + 4) m[2].push_back({dx, dy});  // triangle
                if (std::abs(dx) <= 1 || std::abs(dy) <= 1) m[3].push_back({dx, dy});  // cross
            }
        return m;
    }();
    if (shape_ix < 0 || shape_ix >= 4) throw ValidationError("shape index out of range");
    return masks[size_t(shape_ix)];
}

std::vector<std::vector<double>> identity_vectors(int n_characters, uint64_t seed) {
    const int d = script::kFaceDim;
    if (n_characters > 2 * d)
        throw ValidationError("identity vectors: at most " + std::to_string(2 * d) +
                              " supported");
    RngStream rng(seed, "identity");

    // Random orthonormal basis via Gram-Schmidt over Gaussian draws.
    std::vector<std::vector<double>> basis;
    for (int i = 0; i < d; ++i) {
        std::vector<double> v(static_cast<size_t>(d));
        for (double& x : v) x = rng.normal();
        for (const auto& u : basis) {
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += v[size_t(c)] * u[size_t(c)];
            for (int c = 0; c < d; ++c) v[size_t(c)] -= dot * u[size_t(c)];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-8) throw TrainingError("identity vectors: degenerate basis draw");
        for (double& x : v) x /= norm;
        basis.push_back(std::move(v));
    }

    std::vector<std::vector<double>> ids;
    for (int i = 0; i < std::min(n_characters, d); ++i) {
        std::vector<double> v = basis[size_t(i)];
        for (double& x : v) x *= kIdentityNorm;
        ids.push_back(std::move(v));
    }
    // Past the dimension: the Hadamard rotation of the same basis is mutually
    // unbiased with it, so every cross pair lands at |cos| = 1/4 exactly.
    for (int i = d; i < n_characters; ++i) {
        int h = i - d;
        std::vector<double> v(static_cast<size_t>(d), 0.0);
        for (int j = 0; j < d; ++j) {
            double sign = (std::popcount(unsigned(h & j)) & 1) ? -1.0 : 1.0;
            for (int c = 0; c < d; ++c)
                v[size_t(c)] += sign * basis[size_t(j)][size_t(c)];
        }
        for (double& x : v) x *= kIdentityNorm / std::sqrt(double(d));
        ids.push_back(std::move(v));
    }
    return ids;
}

RenderedFrame render_frame(const std::vector<PlacedChar>& placed, int style_ix, bool wrap) {
    if (int(placed.size()) > kMaxCharsPerFrame)
        throw ValidationError("render_frame: more than 3 characters");
    RenderedFrame frame;
    frame.placed = placed;
    frame.style_tag = style_name(style_ix);
    frame.pixels = Tensor::zeros({kImageSize, kImageSize, 3});
    auto bg = style_background(style_ix);
    double* px = frame.pixels.data();
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            for (int c = 0; c < 3; ++c)
                px[(size_t(y) * kImageSize + x) * 3 + c] = bg[size_t(c)];

    for (const auto& p : placed) {
        auto color = palette_color(char_color(p.char_id));
        for (auto [dx, dy] : glyph_mask(char_shape(p.char_id))) {
            int x = p.cx + dx, y = p.cy + dy;
            if (wrap) {
                x = ((x % kImageSize) + kImageSize) % kImageSize;
                y = ((y % kImageSize) + kImageSize) % kImageSize;
            } else if (x < 0 || x >= kImageSize || y < 0 || y >= kImageSize) {
                throw ValidationError("render_frame: glyph out of bounds without wrap");
            }
            for (int c = 0; c < 3; ++c)
                px[(size_t(y) * kImageSize + x) * 3 + c] = color[size_t(c)];
        }
    }
    return frame;
}

namespace {

// Pixel-to-color affinity, sharply peaked so background and off-palette
// colors score near zero.
inline double color_sim(const double* px, const std::array<double, 3>& color) {
    double d0 = px[0] - color[0], d1 = px[1] - color[1], d2 = px[2] - color[2];
    return std::exp(-8.0 * (d0 * d0 + d1 * d1 + d2 * d2));
}

}  // namespace

double oracle_score(const Tensor& pixels, int char_id) {
    if (pixels.shape() != num::Shape{kImageSize, kImageSize, 3})
        throw ValidationError("oracle: expected a 32x32x3 image");
    auto color = palette_color(char_color(char_id));
    const auto& mask = glyph_mask(char_shape(char_id));

    // per-pixel affinity field for this character's color
    std::array<double, size_t(kImageSize) * kImageSize> sim;
    const double* px = pixels.data();
    for (int i = 0; i < kImageSize * kImageSize; ++i)
        sim[size_t(i)] = color_sim(px + size_t(i) * 3, color);

    // Centers are searched on the torus so wrapped clip glyphs still match.
    auto wrapped = [&sim](int y, int x) {
        y = ((y % kImageSize) + kImageSize) % kImageSize;
        x = ((x % kImageSize) + kImageSize) % kImageSize;
        return sim[size_t(y) * kImageSize + size_t(x)];
    };
    double best = -1.0;
    for (int cy = 0; cy < kImageSize; ++cy)
        for (int cx = 0; cx < kImageSize; ++cx) {
            double on = 0.0, box = 0.0;
            for (int dy = -kGlyphHalf; dy <= kGlyphHalf; ++dy)
                for (int dx = -kGlyphHalf; dx <= kGlyphHalf; ++dx)
                    box += wrapped(cy + dy, cx + dx);
            for (auto [dx, dy] : mask) on += wrapped(cy + dy, cx + dx);
            double off = box - on;
            double score = on / double(mask.size()) -
                           off / double(kGlyphBox * kGlyphBox - int(mask.size()));
            best = std::max(best, score);
        }
    return best;
}

std::vector<int> oracle_identify(const Tensor& pixels, int n_characters) {
    std::vector<int> found;
    for (int c = 0; c < n_characters; ++c)
        if (oracle_score(pixels, c) > kOracleThreshold) found.push_back(c);
    return found;
}

namespace {

const std::vector<std::string>& scene_words() {
    static const std::vector<std::string> v = {"harbor", "market", "rooftop",
                                               "garden", "archive", "station"};
    return v;
}
const std::vector<std::string>& mood_words() {
    static const std::vector<std::string> v = {"quiet", "restless", "bright", "fading"};
    return v;
}
const std::vector<std::string>& action_words() {
    static const std::vector<std::string> v = {"crosses", "watches", "leaves", "enters",
                                               "circles"};
    return v;
}

// Quadrant anchors with +/-3 jitter keep glyph boxes inside the frame and
// pairwise disjoint.
constexpr int kAnchors[4][2] = {{8, 8}, {23, 8}, {8, 23}, {23, 23}};

}  // namespace

Corpus generate_corpus(const WorldSpec& spec) {
    spec.validate();
    auto identities = identity_vectors(spec.n_characters, spec.seed);
    RngStream root(spec.seed, "world");

    Corpus corpus;
    for (int ei = 0; ei < spec.n_episodes; ++ei) {
        RngStream ep = root.fork("episode").fork(uint64_t(ei));
        Episode episode;
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "ep_%04d", ei);
        episode.episode_id = idbuf;
        int style = int(ep.uniform_int(uint64_t(spec.n_styles)));
        episode.style_tag = style_name(style);

        // per-episode cast, recurring across frames
        int cast_size = 1 + int(ep.uniform_int(
                                uint64_t(std::min(kMaxCharsPerFrame, spec.n_characters))));
        std::vector<int> cast;
        while (int(cast.size()) < cast_size) {
            int c = int(ep.uniform_int(uint64_t(spec.n_characters)));
            if (std::find(cast.begin(), cast.end(), c) == cast.end()) cast.push_back(c);
        }

        int n_frames = spec.min_frames +
                       int(ep.uniform_int(uint64_t(spec.max_frames - spec.min_frames + 1)));
        int scene = int(ep.uniform_int(scene_words().size()));

        for (int fi = 0; fi < n_frames; ++fi) {
            RngStream fr = ep.fork("frame").fork(uint64_t(fi));

            std::vector<int> present;
            for (int c : cast)
                if (fr.uniform() < 0.9) present.push_back(c);
            if (present.empty()) present.push_back(cast[0]);

            // one distinct quadrant per character
            std::vector<int> quads = {0, 1, 2, 3};
            for (int i = 3; i > 0; --i)
                std::swap(quads[size_t(i)], quads[size_t(fr.uniform_int(uint64_t(i + 1)))]);
            std::vector<PlacedChar> placed;
            for (size_t i = 0; i < present.size(); ++i) {
                PlacedChar p;
                p.char_id = present[i];
                p.cx = kAnchors[quads[i]][0] + int(fr.uniform_int(7)) - 3;
                p.cy = kAnchors[quads[i]][1] + int(fr.uniform_int(7)) - 3;
                placed.push_back(p);
            }
            RenderedFrame rendered = render_frame(placed, style);

            FrameScript f;
            f.frame_id = fi;
            char pathbuf[48];
            std::snprintf(pathbuf, sizeof pathbuf, "images/ep%04d_f%03d.png", ei, fi);
            f.image_path = pathbuf;
            f.image = rendered.pixels;

            for (int c : present) {
                script::CharacterRef ref;
                ref.char_id = char_name(c);
                ref.face_embedding = identities[size_t(c)];
                for (double& x : ref.face_embedding) x += fr.normal() * kFaceNoiseSigma;
                f.characters.push_back(std::move(ref));
            }
            const auto& mood = mood_words()[fr.uniform_int(mood_words().size())];
            f.scene_elements.push_back("the " + scene_words()[size_t(scene)] + " is " + mood +
                                       " tonight");
            f.scene_elements.push_back("lit in " + episode.style_tag + " tones");
            const auto& act = action_words()[fr.uniform_int(action_words().size())];
            f.plot.push_back("someone " + act + " the " + scene_words()[size_t(scene)]);
            if (present.size() > 1) f.plot.push_back("the others keep their distance");
            f.identifiers = f.canonical_identifiers();
            episode.frames.push_back(std::move(f));
        }
        corpus.push_back(std::move(episode));
    }
    return corpus;
}

Episode augment(const Episode& episode, RngStream& rng) {
    Episode out = episode;
    bool flip = rng.uniform() < 0.5;
    bool reverse = rng.uniform() < 0.5;
    if (flip) {
        for (auto& f : out.frames) {
            if (!f.image.defined()) throw ValidationError("augment: frame without image");
            Tensor flipped = Tensor::zeros(f.image.shape());
            int h = f.image.dim(0), w = f.image.dim(1);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int c = 0; c < 3; ++c)
                        flipped.data()[(size_t(y) * w + x) * 3 + c] =
                            f.image.data()[(size_t(y) * w + (w - 1 - x)) * 3 + c];
            f.image = flipped;
        }
    }
    if (reverse) std::reverse(out.frames.begin(), out.frames.end());
    return out;
}

std::vector<PlacedChar> advance_placements(const std::vector<PlacedChar>& placed, int step) {
    std::vector<PlacedChar> out = placed;
    for (auto& p : out) p.cx = ((p.cx + step) % kImageSize + kImageSize) % kImageSize;
    return out;
}

}  // namespace sf::world
