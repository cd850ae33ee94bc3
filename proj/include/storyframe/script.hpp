#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "storyframe/nn.hpp"
#include "storyframe/param_store.hpp"
#include "storyframe/rng.hpp"
#include "storyframe/tensor.hpp"

namespace sf::script {

constexpr int kFaceDim = 16;
constexpr int kMaxDescriptions = 15;
constexpr int kMaxCharacters = 5;
constexpr int kMaxRefFrames = 10;
constexpr int kDefaultContextFrames = 16;
constexpr int kMaxContextFrames = 128;

// Closed identifier vocabulary; ids are indices into this list.
const std::vector<std::string>& identifier_vocab();
int identifier_id(const std::string& ident);

struct CharacterRef {
    std::string char_id;
    std::vector<double> face_embedding;  // kFaceDim wide
};

struct FrameScript {
    int frame_id = 0;
    std::string image_path;  // relative to the corpus file
    std::vector<std::string> identifiers;
    std::vector<std::string> scene_elements;
    std::vector<std::string> plot;
    std::vector<CharacterRef> characters;

    num::Tensor image;          // {H,W,3}, filled when images are loaded
    num::Tensor target_tokens;  // [L,d], filled by the tokenizer stage

    // scene_elements then plot, the flat ordered description list
    std::vector<std::string> descriptions() const;
    // canonical identifier list: one per nonempty section, fixed order
    std::vector<std::string> canonical_identifiers() const;
};

struct Episode {
    std::string episode_id;
    std::string style_tag;
    std::vector<FrameScript> frames;
};

using Corpus = std::vector<Episode>;

// One JSON object per line; round-trips losslessly including float bits.
std::string serialize_corpus(const Corpus& corpus);
Corpus parse_corpus(const std::string& bytes);

// corpus.jsonl plus one PNG per frame (from frame.image) under dir.
void write_corpus_dir(const std::string& dir, const Corpus& corpus);
Corpus read_corpus_file(const std::string& jsonl_path, bool load_images);

class FaceBank {
public:
    void add(const std::string& char_id, std::vector<double> emb);
    bool has(const std::string& char_id) const;
    const std::vector<std::vector<double>>& observations(const std::string& char_id) const;
    const std::vector<std::string>& ids() const { return ids_; }

    static FaceBank build(const Corpus& corpus);

private:
    std::vector<std::string> ids_;
    std::unordered_map<std::string, std::vector<std::vector<double>>> obs_;
};

// Uniform observation draw (training augmentation).
std::vector<double> sample_face_embedding(const FaceBank& bank, const std::string& char_id,
                                          num::RngStream& rng);
// Per-character arithmetic mean (evaluation mode).
std::vector<double> mean_face_embedding(const FaceBank& bank, const std::string& char_id);

enum class SlotType { Sof, Ident, Desc, Face, FrameToken, Eof, RefFrameToken };

// Typed slot of the flattened sequence. Exactly one payload field is
// meaningful per slot type; the rest stay defaulted.
struct Slot {
    SlotType type;
    int frame_index = -1;      // episode frame; -1 on reference slots
    int ident_id = -1;         // Ident
    std::string sentence;      // Desc
    std::vector<double> face;  // Face
    num::Tensor token;         // [d] FrameToken / RefFrameToken target (may be empty)
    int token_index = -1;      // 0..L-1 within the owning frame
};

struct SequenceLayout {
    std::vector<Slot> slots;
    bool truncated = false;
    int first_frame = 0;  // first episode frame present after any truncation
};

// Flattens frames [0, upto_frame) after optional reference-frame tokens
// (each [L,d]). Reference frames count toward the frame budget; overflow
// slides the window over whole episode frames, oldest first.
SequenceLayout assemble_sequence(const Episode& episode,
                                 const std::vector<num::Tensor>& ref_frames, int upto_frame,
                                 int context_frames = kDefaultContextFrames, int l_tokens = 2);

// Learned bag-of-words sentence embedding: mean of word vectors fed through
// a two-layer GELU projection. Vocabulary is fixed at construction; unknown
// words map to the reserved index 0.
class SentenceEncoder {
public:
    SentenceEncoder() = default;
    SentenceEncoder(num::ParamStore& ps, const std::string& prefix,
                    std::vector<std::string> vocab, int d_word, int d_out,
                    num::RngStream& rng);

    num::Tensor encode(const std::string& sentence) const;               // [1, d_out]
    num::Tensor pre_projection_mean(const std::string& sentence) const;  // [1, d_word]

    const std::vector<std::string>& vocab() const { return vocab_; }
    int word_index(const std::string& word) const;

private:
    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> index_;
    num::Tensor table_;
    num::Mlp proj_;
};

std::vector<std::string> tokenize_sentence(const std::string& sentence);
// Sorted unique words over every description in the corpus, "<unk>" first.
std::vector<std::string> build_vocab(const Corpus& corpus);

}  // namespace sf::script
