#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "storyframe/rng.hpp"
#include "storyframe/script.hpp"
#include "storyframe/tensor.hpp"

namespace sf::world {

constexpr int kImageSize = 32;
constexpr int kGlyphBox = 9;  // odd stencil box, glyph centered
constexpr int kGlyphHalf = kGlyphBox / 2;
constexpr double kOracleThreshold = 0.8;
constexpr double kFaceNoiseSigma = 0.05;
// Identity vectors carry norm 4 so the per-coordinate noise above perturbs
// same-character cosines by well under the 0.95 floor.
constexpr double kIdentityNorm = 4.0;
constexpr double kIdentityNorm2 = kIdentityNorm * kIdentityNorm;
constexpr int kMaxCharsPerFrame = 3;

struct WorldSpec {
    int n_characters = 6;
    int n_styles = 3;
    int n_episodes = 24;
    int min_frames = 4;
    int max_frames = 8;
    uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static WorldSpec from_json(const nlohmann::json& j);
};

struct PlacedChar {
    int char_id = 0;
    int cx = 0;
    int cy = 0;
    double scale = 1.0;  // glyphs render at a single fixed scale
};

struct RenderedFrame {
    num::Tensor pixels;  // {32,32,3} in [0,1]
    std::vector<PlacedChar> placed;
    std::string style_tag;
};

// Fixed appearance alphabet: four shape stencils by eight saturated colors.
// Character identity maps bijectively onto (shape, color).
int n_shapes();
int n_palette();
int char_shape(int char_id);
int char_color(int char_id);
std::array<double, 3> palette_color(int ix);
std::array<double, 3> style_background(int style_ix);
std::string char_name(int char_id);
std::string style_name(int style_ix);
// (dx, dy) offsets of lit pixels relative to the glyph center
const std::vector<std::pair<int, int>>& glyph_mask(int shape_ix);

// Deterministic identity vectors of norm kIdentityNorm: orthogonal for
// n <= face dim, then a mutually unbiased second basis keeps every further
// pair at |cos| = 1/4. Supports up to 2 * face dim characters.
std::vector<std::vector<double>> identity_vectors(int n_characters, uint64_t seed);

// wrap=true draws glyphs on the 32x32 torus (clip motion support).
RenderedFrame render_frame(const std::vector<PlacedChar>& placed, int style_ix,
                           bool wrap = false);

// Best template-match score for one character over all glyph positions.
double oracle_score(const num::Tensor& pixels, int char_id);
// Character ids whose best score exceeds the 0.8 threshold, ascending.
std::vector<int> oracle_identify(const num::Tensor& pixels, int n_characters);

// Deterministic corpus of episodes: scripted frames, rendered images, noisy
// per-occurrence face embeddings.
script::Corpus generate_corpus(const WorldSpec& spec);

// Training augmentation: p=0.5 horizontal flip of all images (scripts kept)
// and, independently, p=0.5 reversal of frame order.
script::Episode augment(const script::Episode& episode, num::RngStream& rng);

// Clip dynamics: every glyph translates by (step, 0) pixels on the torus.
std::vector<PlacedChar> advance_placements(const std::vector<PlacedChar>& placed, int step);

}  // namespace sf::world
