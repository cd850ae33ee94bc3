#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "storyframe/common.hpp"
#include "storyframe/ops.hpp"
#include "storyframe/png_io.hpp"
#include "storyframe/script.hpp"

using namespace sf;
using namespace sf::num;
using namespace sf::script;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

FrameScript make_frame(int id, int n_chars, int n_scene, int n_plot) {
    FrameScript f;
    f.frame_id = id;
    f.image_path = "images/f" + std::to_string(id) + ".png";
    for (int c = 0; c < n_chars; ++c) {
        CharacterRef r;
        r.char_id = "char_" + std::to_string(c);
        r.face_embedding.assign(size_t(kFaceDim), 0.0);
        r.face_embedding[size_t(c % kFaceDim)] = 1.0 + 0.25 * id;
        f.characters.push_back(std::move(r));
    }
    for (int s = 0; s < n_scene; ++s)
        f.scene_elements.push_back("scene line " + std::to_string(s));
    for (int p = 0; p < n_plot; ++p) f.plot.push_back("plot line " + std::to_string(p));
    f.identifiers = f.canonical_identifiers();
    return f;
}

Episode make_episode(const std::string& id, int n_frames) {
    Episode e;
    e.episode_id = id;
    e.style_tag = "ember";
    for (int i = 0; i < n_frames; ++i) e.frames.push_back(make_frame(i + 1, 2, 2, 1));
    return e;
}

bool frames_equal(const FrameScript& a, const FrameScript& b) {
    if (a.frame_id != b.frame_id || a.image_path != b.image_path) return false;
    if (a.identifiers != b.identifiers || a.scene_elements != b.scene_elements ||
        a.plot != b.plot)
        return false;
    if (a.characters.size() != b.characters.size()) return false;
    for (size_t i = 0; i < a.characters.size(); ++i) {
        if (a.characters[i].char_id != b.characters[i].char_id) return false;
        const auto& fa = a.characters[i].face_embedding;
        const auto& fb = b.characters[i].face_embedding;
        if (fa.size() != fb.size()) return false;
        // bit-pattern equality, not approximate
        if (std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("identifier vocabulary is closed and indexable") {
    CHECK(identifier_vocab().size() == 3);
    for (size_t i = 0; i < identifier_vocab().size(); ++i)
        CHECK(identifier_id(identifier_vocab()[i]) == int(i));
    CHECK_THROWS_AS(identifier_id("Props:"), ValidationError);
}

TEST_CASE("descriptions are scene elements then plot, in script order") {
    FrameScript f = make_frame(1, 1, 2, 2);
    auto d = f.descriptions();
    REQUIRE(d.size() == 4);
    CHECK(d[0] == "scene line 0");
    CHECK(d[1] == "scene line 1");
    CHECK(d[2] == "plot line 0");
    CHECK(d[3] == "plot line 1");
}

TEST_CASE("canonical identifiers cover exactly the nonempty sections") {
    CHECK(make_frame(1, 1, 1, 1).canonical_identifiers() ==
          std::vector<std::string>{"Characters:", "Scene Elements:", "Plot:"});
    CHECK(make_frame(1, 0, 1, 0).canonical_identifiers() ==
          std::vector<std::string>{"Scene Elements:"});
    CHECK(make_frame(1, 1, 0, 1).canonical_identifiers() ==
          std::vector<std::string>{"Characters:", "Plot:"});
    CHECK(make_frame(1, 0, 0, 0).canonical_identifiers().empty());
}

TEST_CASE("sentence encoder: same sentence twice gives identical embeddings") {
    ParamStore ps;
    RngStream rng(5, "enc");
    SentenceEncoder enc(ps, "enc", {"<unk>", "harbor", "quiet", "the"}, 8, 6, rng);
    Tensor a = enc.encode("the quiet harbor");
    Tensor b = enc.encode("the quiet harbor");
    REQUIRE(a.numel() == 6);
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * 6) == 0);
}

TEST_CASE("sentence encoder: one-word mean equals that word's embedding row") {
    ParamStore ps;
    RngStream rng(5, "enc");
    SentenceEncoder enc(ps, "enc", {"<unk>", "harbor", "quiet"}, 8, 6, rng);
    Tensor mean = enc.pre_projection_mean("Harbor");
    Tensor table = ps.get("enc.words");
    int row = enc.word_index("harbor");
    REQUIRE(row == 1);
    for (int c = 0; c < 8; ++c) CHECK(mean.at(0, c) == table.at(row, c));
}

TEST_CASE("sentence encoder: disjoint sentences under orthogonal init have zero cosine") {
    ParamStore ps;
    RngStream rng(5, "enc");
    SentenceEncoder enc(ps, "enc", {"<unk>", "aa", "bb", "cc", "dd"}, 5, 4, rng);
    // overwrite the word table with one-hot rows, exactly orthogonal
    Tensor table = ps.get("enc.words");
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 5; ++c) table.data()[size_t(r) * 5 + c] = (r == c) ? 1.0 : 0.0;
    Tensor u = enc.pre_projection_mean("aa bb");
    Tensor v = enc.pre_projection_mean("cc dd");
    double dot = 0.0;
    for (int c = 0; c < 5; ++c) dot += u.at(0, c) * v.at(0, c);
    CHECK(dot == 0.0);
}

TEST_CASE("sentence encoder: empty sentence rejected, unknown words hit <unk>") {
    ParamStore ps;
    RngStream rng(5, "enc");
    SentenceEncoder enc(ps, "enc", {"<unk>", "aa"}, 4, 4, rng);
    CHECK_THROWS_AS(enc.encode("   "), ValidationError);
    CHECK(enc.word_index("never-seen") == 0);
    Tensor a = enc.encode("zz");
    Tensor b = enc.encode("<unk>");
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * 4) == 0);
}

TEST_CASE("tokenize lowercases and splits on whitespace") {
    auto words = tokenize_sentence("  The Harbor\tIS quiet\n");
    REQUIRE(words.size() == 4);
    CHECK(words[0] == "the");
    CHECK(words[1] == "harbor");
    CHECK(words[2] == "is");
    CHECK(words[3] == "quiet");
}

TEST_CASE("build_vocab: sorted unique words with <unk> first") {
    Corpus corpus = {make_episode("ep", 1)};
    auto vocab = build_vocab(corpus);
    REQUIRE(!vocab.empty());
    CHECK(vocab[0] == "<unk>");
    for (size_t i = 2; i < vocab.size(); ++i) CHECK(vocab[i - 1] < vocab[i]);
    // "scene line 0", "scene line 1", "plot line 0" -> {0,1,line,plot,scene}
    CHECK(vocab == std::vector<std::string>{"<unk>", "0", "1", "line", "plot", "scene"});
}

TEST_CASE("assemble_sequence: single frame, no refs, canonical slot order") {
    Episode e;
    e.episode_id = "ep";
    e.style_tag = "moss";
    e.frames.push_back(make_frame(1, 2, 2, 1));
    SequenceLayout layout = assemble_sequence(e, {}, 1);
    CHECK(!layout.truncated);
    CHECK(layout.first_frame == 0);
    std::vector<SlotType> want = {SlotType::Sof,   SlotType::Ident, SlotType::Ident,
                                  SlotType::Ident, SlotType::Desc,  SlotType::Desc,
                                  SlotType::Desc,  SlotType::Face,  SlotType::Face,
                                  SlotType::FrameToken, SlotType::FrameToken, SlotType::Eof};
    REQUIRE(layout.slots.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) {
        CHECK(layout.slots[i].type == want[i]);
        CHECK(layout.slots[i].frame_index == 0);
    }
    CHECK(layout.slots[1].ident_id == 0);
    CHECK(layout.slots[4].sentence == "scene line 0");
    CHECK(layout.slots[7].face.size() == size_t(kFaceDim));
    CHECK(layout.slots[9].token_index == 0);
    CHECK(layout.slots[10].token_index == 1);
}

TEST_CASE("assemble_sequence: three refs put six ref token slots first") {
    Episode e = make_episode("ep", 2);
    std::vector<Tensor> refs;
    for (int r = 0; r < 3; ++r) refs.push_back(Tensor::full({2, 4}, double(r + 1)));
    SequenceLayout layout = assemble_sequence(e, refs, 2, kDefaultContextFrames, 2);
    REQUIRE(layout.slots.size() >= 6);
    for (int i = 0; i < 6; ++i) {
        CHECK(layout.slots[size_t(i)].type == SlotType::RefFrameToken);
        CHECK(layout.slots[size_t(i)].frame_index == -1);
        CHECK(layout.slots[size_t(i)].token.numel() == 4);
        CHECK(layout.slots[size_t(i)].token.at(0) == double(i / 2 + 1));
    }
    CHECK(layout.slots[6].type == SlotType::Sof);
}

TEST_CASE("assemble_sequence: 20 frames against limit 16 keeps frames 5..20") {
    Episode e = make_episode("ep", 20);  // frame_id runs 1..20
    SequenceLayout layout = assemble_sequence(e, {}, 20, 16);
    CHECK(layout.truncated);
    CHECK(layout.first_frame == 4);
    int lo = 1 << 30, hi = -1, frames_seen = 0;
    for (const auto& s : layout.slots)
        if (s.type == SlotType::Sof) {
            ++frames_seen;
            int id = e.frames[size_t(s.frame_index)].frame_id;
            lo = std::min(lo, id);
            hi = std::max(hi, id);
        }
    CHECK(frames_seen == 16);
    CHECK(lo == 5);
    CHECK(hi == 20);
}

TEST_CASE("assemble_sequence: refs count toward the context budget") {
    Episode e = make_episode("ep", 20);
    std::vector<Tensor> refs(4, Tensor::full({2, 4}, 1.0));
    SequenceLayout layout = assemble_sequence(e, refs, 20, 16);
    CHECK(layout.truncated);
    CHECK(layout.first_frame == 8);  // budget 12 of 20
    std::vector<Tensor> too_many(16, Tensor::full({2, 4}, 1.0));
    CHECK_THROWS_AS(assemble_sequence(e, too_many, 20, 16), ValidationError);
}

TEST_CASE("assemble_sequence: exactly L frame token slots per frame") {
    Episode e = make_episode("ep", 6);
    for (int l : {1, 2, 3}) {
        SequenceLayout layout = assemble_sequence(e, {}, 6, kDefaultContextFrames, l);
        std::vector<int> counts(6, 0);
        for (const auto& s : layout.slots)
            if (s.type == SlotType::FrameToken) ++counts[size_t(s.frame_index)];
        for (int f = 0; f < 6; ++f) CHECK(counts[size_t(f)] == l);
    }
}

TEST_CASE("assemble_sequence: frame tokens copy target token rows") {
    Episode e = make_episode("ep", 1);
    e.frames[0].target_tokens = Tensor::from({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    SequenceLayout layout = assemble_sequence(e, {}, 1);
    std::vector<const Slot*> toks;
    for (const auto& s : layout.slots)
        if (s.type == SlotType::FrameToken) toks.push_back(&s);
    REQUIRE(toks.size() == 2);
    CHECK(toks[0]->token.at(0) == 1.0);
    CHECK(toks[0]->token.at(2) == 3.0);
    CHECK(toks[1]->token.at(0) == 4.0);
    CHECK(toks[1]->token.at(2) == 6.0);
}

TEST_CASE("assemble_sequence: validation failures") {
    Episode e = make_episode("ep", 3);
    CHECK_THROWS_AS(assemble_sequence(e, {}, 4), ValidationError);  // upto past end
    std::vector<Tensor> eleven(11, Tensor::full({2, 4}, 1.0));
    CHECK_THROWS_AS(assemble_sequence(e, eleven, 3), ValidationError);
    std::vector<Tensor> bad_rows = {Tensor::full({3, 4}, 1.0)};
    CHECK_THROWS_AS(assemble_sequence(e, bad_rows, 3, kDefaultContextFrames, 2),
                    ValidationError);
    CHECK_THROWS_AS(assemble_sequence(e, {}, 3, 0), ValidationError);
    CHECK_THROWS_AS(assemble_sequence(e, {}, 3, kMaxContextFrames + 1), ValidationError);
}

TEST_CASE("corpus serialization: empty corpus is zero bytes and parses back") {
    CHECK(serialize_corpus({}).empty());
    CHECK(parse_corpus("").empty());
}

TEST_CASE("corpus serialization: one-episode round trip preserves float bits") {
    Episode e = make_episode("ep_0001", 3);
    e.frames[1].characters[0].face_embedding[3] = 0.1 + 0.2;  // not exactly 0.3
    e.frames[2].characters[1].face_embedding[7] = -1.0 / 3.0;
    Corpus corpus = {e};
    std::string bytes = serialize_corpus(corpus);
    Corpus back = parse_corpus(bytes);
    REQUIRE(back.size() == 1);
    CHECK(back[0].episode_id == "ep_0001");
    CHECK(back[0].style_tag == "ember");
    REQUIRE(back[0].frames.size() == 3);
    for (size_t i = 0; i < 3; ++i) CHECK(frames_equal(back[0].frames[i], e.frames[i]));
    // serialize . parse . serialize is the identity on bytes
    CHECK(serialize_corpus(back) == bytes);
}

TEST_CASE("corpus parsing: truncated final line names its line number") {
    Corpus corpus = {make_episode("a", 1), make_episode("b", 1)};
    std::string bytes = serialize_corpus(corpus);
    std::string cut = bytes.substr(0, bytes.size() - 10);  // drop newline and tail
    CHECK_THROWS_WITH_AS(parse_corpus(cut), doctest::Contains("line 2"), ParseError);
}

TEST_CASE("corpus parsing: malformed JSON names its line number") {
    Corpus corpus = {make_episode("a", 1)};
    std::string bytes = serialize_corpus(corpus) + "{nope}\n";
    CHECK_THROWS_WITH_AS(parse_corpus(bytes), doctest::Contains("line 2"), ParseError);
    CHECK_THROWS_WITH_AS(parse_corpus("{\"episode_id\": 3}\n"),
                         doctest::Contains("line 1"), ParseError);
}

TEST_CASE("corpus validation: description, character, and face-dim caps") {
    Episode e = make_episode("ep", 1);
    for (int i = 0; i < 16; ++i) e.frames[0].plot.push_back("overflow " + std::to_string(i));
    CHECK_THROWS_AS(serialize_corpus({e}), ValidationError);

    Episode e2 = make_episode("ep", 1);
    e2.frames[0] = make_frame(1, 6, 1, 1);
    CHECK_THROWS_AS(serialize_corpus({e2}), ValidationError);

    Episode e3 = make_episode("ep", 1);
    e3.frames[0].characters[0].face_embedding.resize(4);
    CHECK_THROWS_AS(serialize_corpus({e3}), ValidationError);

    Episode e4 = make_episode("ep", 1);
    e4.frames[0].identifiers = {"Plot:", "Characters:"};
    CHECK_THROWS_AS(serialize_corpus({e4}), ValidationError);
}

TEST_CASE("face bank: build order, counts, and lookup errors") {
    Corpus corpus = {make_episode("a", 3), make_episode("b", 2)};
    FaceBank bank = FaceBank::build(corpus);
    REQUIRE(bank.ids() == std::vector<std::string>{"char_0", "char_1"});
    CHECK(bank.observations("char_0").size() == 5);
    CHECK(bank.observations("char_1").size() == 5);
    CHECK(bank.has("char_0"));
    CHECK(!bank.has("char_9"));
    CHECK_THROWS_AS(bank.observations("char_9"), ValidationError);
    RngStream rng(1, "draw");
    CHECK_THROWS_AS(sample_face_embedding(bank, "char_9", rng), ValidationError);
}

TEST_CASE("face bank: single observation is always returned") {
    FaceBank bank;
    std::vector<double> emb(size_t(kFaceDim), 0.5);
    emb[2] = -2.25;
    bank.add("solo", emb);
    RngStream rng(9, "draw");
    for (int i = 0; i < 50; ++i) CHECK(sample_face_embedding(bank, "solo", rng) == emb);
}

TEST_CASE("face bank: two observations split 10000 draws 5000 +/- 200") {
    FaceBank bank;
    std::vector<double> a(size_t(kFaceDim), 0.0), b(size_t(kFaceDim), 1.0);
    bank.add("dup", a);
    bank.add("dup", b);
    RngStream rng(123, "draw");
    int count_a = 0;
    for (int i = 0; i < 10000; ++i)
        if (sample_face_embedding(bank, "dup", rng) == a) ++count_a;
    CHECK(count_a >= 4800);
    CHECK(count_a <= 5200);
}

TEST_CASE("face bank: evaluation mean is the exact arithmetic mean") {
    FaceBank bank;
    std::vector<double> a(size_t(kFaceDim), 1.0), b(size_t(kFaceDim), 3.0);
    a[5] = -0.5;
    b[5] = 0.75;
    bank.add("m", a);
    bank.add("m", b);
    auto mean = mean_face_embedding(bank, "m");
    for (int i = 0; i < kFaceDim; ++i)
        CHECK(mean[size_t(i)] == (a[size_t(i)] + b[size_t(i)]) / 2.0);
}

TEST_CASE("face bank: rejects wrong-dimension observations") {
    FaceBank bank;
    CHECK_THROWS_AS(bank.add("x", std::vector<double>(4, 0.0)), ValidationError);
}

TEST_CASE("png round trip: grid values exact, off-grid within half a step") {
    Tensor img = Tensor::zeros({32, 32, 3});
    RngStream rng(3, "png");
    for (size_t i = 0; i < img.numel(); ++i)
        img.data()[i] = double(rng.uniform_int(256)) / 255.0;
    std::string path = temp_path("sf_png_grid.png");
    write_png(path, img);
    Tensor back = read_png(path);
    REQUIRE(back.shape() == img.shape());
    for (size_t i = 0; i < img.numel(); ++i) REQUIRE(back.data()[i] == img.data()[i]);

    for (size_t i = 0; i < img.numel(); ++i) img.data()[i] = rng.uniform();
    write_png(path, img);
    back = read_png(path);
    for (size_t i = 0; i < img.numel(); ++i)
        REQUIRE(std::abs(back.data()[i] - img.data()[i]) <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("corpus dir: images write out and load back exactly") {
    Episode e = make_episode("ep_0000", 2);
    for (auto& f : e.frames) {
        f.image = Tensor::zeros({32, 32, 3});
        for (size_t i = 0; i < f.image.numel(); ++i)
            f.image.data()[i] = double((i * 7 + size_t(f.frame_id)) % 256) / 255.0;
        f.image_path = "images/ep0000_f" + std::to_string(f.frame_id) + ".png";
    }
    std::string dir = temp_path("sf_corpus_dir");
    std::filesystem::remove_all(dir);
    write_corpus_dir(dir, {e});
    Corpus back = read_corpus_file(dir + "/corpus.jsonl", true);
    REQUIRE(back.size() == 1);
    REQUIRE(back[0].frames.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(frames_equal(back[0].frames[i], e.frames[i]));
        REQUIRE(back[0].frames[i].image.defined());
        CHECK(std::memcmp(back[0].frames[i].image.data(), e.frames[i].image.data(),
                          sizeof(double) * e.frames[i].image.numel()) == 0);
    }
    std::filesystem::remove_all(dir);
}
