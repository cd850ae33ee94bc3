#include "storyframe/script.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <set>
#include <sstream>

#include "json.hpp"
#include "storyframe/common.hpp"
#include "storyframe/ops.hpp"
#include "storyframe/png_io.hpp"

namespace sf::script {

using nlohmann::json;
using num::RngStream;
using num::Tensor;

const std::vector<std::string>& identifier_vocab() {
    static const std::vector<std::string> v = {"Characters:", "Scene Elements:", "Plot:"};
    return v;
}

int identifier_id(const std::string& ident) {
    const auto& v = identifier_vocab();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == ident) return int(i);
    throw ValidationError("unknown identifier '" + ident + "'");
}

std::vector<std::string> FrameScript::descriptions() const {
    std::vector<std::string> out = scene_elements;
    out.insert(out.end(), plot.begin(), plot.end());
    return out;
}

std::vector<std::string> FrameScript::canonical_identifiers() const {
    std::vector<std::string> out;
    if (!characters.empty()) out.push_back(identifier_vocab()[0]);
    if (!scene_elements.empty()) out.push_back(identifier_vocab()[1]);
    if (!plot.empty()) out.push_back(identifier_vocab()[2]);
    return out;
}

namespace {

void validate_frame(const FrameScript& f, const std::string& where) {
    if (int(f.descriptions().size()) > kMaxDescriptions)
        throw ValidationError(where + ": more than " + std::to_string(kMaxDescriptions) +
                              " descriptions");
    if (int(f.characters.size()) > kMaxCharacters)
        throw ValidationError(where + ": more than " + std::to_string(kMaxCharacters) +
                              " characters");
    for (const auto& c : f.characters)
        if (int(c.face_embedding.size()) != kFaceDim)
            throw ValidationError(where + ": face embedding of '" + c.char_id +
                                  "' is not " + std::to_string(kFaceDim) + "-dim");
    if (f.identifiers != f.canonical_identifiers())
        throw ValidationError(where + ": identifiers not in canonical section order");
}

json frame_to_json(const FrameScript& f) {
    json chars = json::array();
    for (const auto& c : f.characters)
        chars.push_back({{"name", c.char_id}, {"face_embedding", c.face_embedding}});
    return {{"frame_id", f.frame_id},
            {"image", f.image_path},
            {"script",
             {{"characters", chars},
              {"scene_elements", f.scene_elements},
              {"plot", f.plot}}}};
}

FrameScript frame_from_json(const json& j, const std::string& where) {
    FrameScript f;
    try {
        f.frame_id = j.at("frame_id").get<int>();
        f.image_path = j.at("image").get<std::string>();
        const json& s = j.at("script");
        for (const auto& c : s.at("characters")) {
            CharacterRef r;
            r.char_id = c.at("name").get<std::string>();
            r.face_embedding = c.at("face_embedding").get<std::vector<double>>();
            f.characters.push_back(std::move(r));
        }
        f.scene_elements = s.at("scene_elements").get<std::vector<std::string>>();
        f.plot = s.at("plot").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ParseError(where + ": bad frame record: " + e.what());
    }
    f.identifiers = f.canonical_identifiers();
    validate_frame(f, where);
    return f;
}

}  // namespace

std::string serialize_corpus(const Corpus& corpus) {
    std::string out;
    for (size_t ei = 0; ei < corpus.size(); ++ei) {
        const Episode& e = corpus[ei];
        if (e.frames.empty())
            throw ValidationError("episode '" + e.episode_id + "' has no frames");
        json frames = json::array();
        for (const auto& f : e.frames) {
            validate_frame(f, "episode '" + e.episode_id + "'");
            frames.push_back(frame_to_json(f));
        }
        json rec = {{"episode_id", e.episode_id}, {"style", e.style_tag}, {"frames", frames}};
        out += rec.dump();
        out.push_back('\n');
    }
    return out;
}

Corpus parse_corpus(const std::string& bytes) {
    Corpus corpus;
    size_t pos = 0;
    int line_no = 0;
    while (pos < bytes.size()) {
        size_t nl = bytes.find('\n', pos);
        ++line_no;
        std::string where = "line " + std::to_string(line_no);
        if (nl == std::string::npos)
            throw ParseError(where + ": truncated record (missing trailing newline)");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(where + ": invalid JSON: " + e.what());
        }
        Episode e;
        try {
            e.episode_id = rec.at("episode_id").get<std::string>();
            e.style_tag = rec.at("style").get<std::string>();
            for (const auto& fj : rec.at("frames")) e.frames.push_back(frame_from_json(fj, where));
        } catch (const json::exception& ex) {
            throw ParseError(where + ": bad episode record: " + ex.what());
        }
        if (e.frames.empty()) throw ParseError(where + ": episode has no frames");
        corpus.push_back(std::move(e));
    }
    return corpus;
}

void write_corpus_dir(const std::string& dir, const Corpus& corpus) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    for (const auto& e : corpus)
        for (const auto& f : e.frames) {
            if (!f.image.defined())
                throw ValidationError("write_corpus_dir: frame without image pixels");
            write_png((fs::path(dir) / f.image_path).string(), f.image);
        }
    write_file((fs::path(dir) / "corpus.jsonl").string(), serialize_corpus(corpus));
}

Corpus read_corpus_file(const std::string& jsonl_path, bool load_images) {
    Corpus corpus = parse_corpus(read_file(jsonl_path));
    if (load_images) {
        auto base = std::filesystem::path(jsonl_path).parent_path();
        for (auto& e : corpus)
            for (auto& f : e.frames) f.image = read_png((base / f.image_path).string());
    }
    return corpus;
}

void FaceBank::add(const std::string& char_id, std::vector<double> emb) {
    if (int(emb.size()) != kFaceDim)
        throw ValidationError("face bank: embedding for '" + char_id + "' is not " +
                              std::to_string(kFaceDim) + "-dim");
    auto it = obs_.find(char_id);
    if (it == obs_.end()) {
        ids_.push_back(char_id);
        obs_[char_id].push_back(std::move(emb));
    } else {
        it->second.push_back(std::move(emb));
    }
}

bool FaceBank::has(const std::string& char_id) const { return obs_.count(char_id) > 0; }

const std::vector<std::vector<double>>& FaceBank::observations(
    const std::string& char_id) const {
    auto it = obs_.find(char_id);
    if (it == obs_.end())
        throw ValidationError("face bank: unknown character '" + char_id + "'");
    return it->second;
}

FaceBank FaceBank::build(const Corpus& corpus) {
    FaceBank bank;
    for (const auto& e : corpus)
        for (const auto& f : e.frames)
            for (const auto& c : f.characters) bank.add(c.char_id, c.face_embedding);
    return bank;
}

std::vector<double> sample_face_embedding(const FaceBank& bank, const std::string& char_id,
                                          RngStream& rng) {
    const auto& obs = bank.observations(char_id);
    return obs[size_t(rng.uniform_int(obs.size()))];
}

std::vector<double> mean_face_embedding(const FaceBank& bank, const std::string& char_id) {
    const auto& obs = bank.observations(char_id);
    std::vector<double> mean(kFaceDim, 0.0);
    for (const auto& o : obs)
        for (int i = 0; i < kFaceDim; ++i) mean[size_t(i)] += o[size_t(i)];
    for (double& v : mean) v /= double(obs.size());
    return mean;
}

SequenceLayout assemble_sequence(const Episode& episode,
                                 const std::vector<num::Tensor>& ref_frames, int upto_frame,
                                 int context_frames, int l_tokens) {
    if (upto_frame < 0 || upto_frame > int(episode.frames.size()))
        throw ValidationError("assemble_sequence: upto_frame out of range");
    if (int(ref_frames.size()) > kMaxRefFrames)
        throw ValidationError("assemble_sequence: more than " +
                              std::to_string(kMaxRefFrames) + " reference frames");
    if (context_frames < 1 || context_frames > kMaxContextFrames)
        throw ValidationError("assemble_sequence: context_frames out of [1, " +
                              std::to_string(kMaxContextFrames) + "]");
    for (const auto& r : ref_frames)
        if (r.rows() != l_tokens)
            throw ValidationError("assemble_sequence: reference frame is not L tokens");

    SequenceLayout layout;
    int budget = context_frames - int(ref_frames.size());
    if (budget < 1)
        throw ValidationError("assemble_sequence: reference frames exhaust the context");
    int start = 0;
    if (upto_frame > budget) {
        start = upto_frame - budget;
        layout.truncated = true;
    }
    layout.first_frame = start;

    for (size_t r = 0; r < ref_frames.size(); ++r)
        for (int t = 0; t < l_tokens; ++t) {
            Slot s;
            s.type = SlotType::RefFrameToken;
            s.frame_index = -1;
            s.token_index = t;
            s.token = Tensor::from({ref_frames[r].cols()},
                                   std::vector<double>(ref_frames[r].data() +
                                                           size_t(t) * ref_frames[r].cols(),
                                                       ref_frames[r].data() +
                                                           size_t(t + 1) * ref_frames[r].cols()));
            layout.slots.push_back(std::move(s));
        }

    for (int fi = start; fi < upto_frame; ++fi) {
        const FrameScript& f = episode.frames[size_t(fi)];
        validate_frame(f, "frame " + std::to_string(fi));

        Slot sof;
        sof.type = SlotType::Sof;
        sof.frame_index = fi;
        layout.slots.push_back(std::move(sof));

        for (const auto& ident : f.identifiers) {
            Slot s;
            s.type = SlotType::Ident;
            s.frame_index = fi;
            s.ident_id = identifier_id(ident);
            layout.slots.push_back(std::move(s));
        }
        for (const auto& sentence : f.descriptions()) {
            Slot s;
            s.type = SlotType::Desc;
            s.frame_index = fi;
            s.sentence = sentence;
            layout.slots.push_back(std::move(s));
        }
        for (const auto& c : f.characters) {
            Slot s;
            s.type = SlotType::Face;
            s.frame_index = fi;
            s.face = c.face_embedding;
            layout.slots.push_back(std::move(s));
        }
        for (int t = 0; t < l_tokens; ++t) {
            Slot s;
            s.type = SlotType::FrameToken;
            s.frame_index = fi;
            s.token_index = t;
            if (f.target_tokens.defined()) {
                if (f.target_tokens.rows() != l_tokens)
                    throw ValidationError("assemble_sequence: frame tokens are not L rows");
                int d = f.target_tokens.cols();
                s.token = Tensor::from(
                    {d}, std::vector<double>(f.target_tokens.data() + size_t(t) * d,
                                             f.target_tokens.data() + size_t(t + 1) * d));
            }
            layout.slots.push_back(std::move(s));
        }

        Slot eof;
        eof.type = SlotType::Eof;
        eof.frame_index = fi;
        layout.slots.push_back(std::move(eof));
    }
    return layout;
}

std::vector<std::string> tokenize_sentence(const std::string& sentence) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : sentence) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

std::vector<std::string> build_vocab(const Corpus& corpus) {
    std::set<std::string> words;
    for (const auto& e : corpus)
        for (const auto& f : e.frames)
            for (const auto& s : f.descriptions())
                for (const auto& w : tokenize_sentence(s)) words.insert(w);
    std::vector<std::string> vocab = {"<unk>"};
    vocab.insert(vocab.end(), words.begin(), words.end());
    return vocab;
}

SentenceEncoder::SentenceEncoder(num::ParamStore& ps, const std::string& prefix,
                                 std::vector<std::string> vocab, int d_word, int d_out,
                                 num::RngStream& rng)
    : vocab_(std::move(vocab)) {
    if (vocab_.empty() || vocab_[0] != "<unk>")
        throw ValidationError("sentence encoder: vocab must start with <unk>");
    for (size_t i = 0; i < vocab_.size(); ++i) index_[vocab_[i]] = int(i);
    table_ = ps.create_randn(prefix + ".words", {int(vocab_.size()), d_word}, rng,
                             1.0 / std::sqrt(double(d_word)));
    proj_ = num::Mlp(ps, prefix + ".proj", d_word, 2 * d_out, d_out, rng);
}

int SentenceEncoder::word_index(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? 0 : it->second;
}

num::Tensor SentenceEncoder::pre_projection_mean(const std::string& sentence) const {
    auto words = tokenize_sentence(sentence);
    if (words.empty()) throw ValidationError("encode_sentence: empty sentence");
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(word_index(w));
    Tensor rows = num::gather_rows(table_, ids);
    Tensor avg = Tensor::full({1, int(ids.size())}, 1.0 / double(ids.size()));
    return num::matmul(avg, rows);
}

num::Tensor SentenceEncoder::encode(const std::string& sentence) const {
    return proj_.forward(pre_projection_mean(sentence));
}

}  // namespace sf::script
