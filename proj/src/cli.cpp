#include "storyframe/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "storyframe/common.hpp"
#include "storyframe/eval.hpp"
#include "storyframe/gmm.hpp"
#include "storyframe/gradcheck.hpp"
#include "storyframe/nn.hpp"
#include "storyframe/ops.hpp"
#include "storyframe/png_io.hpp"

namespace fs = std::filesystem;

namespace sf {

namespace {

using nlohmann::json;
using num::RngStream;
using num::Tensor;

json load_json_file(const std::string& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
}

// Content hash of a directory tree: per-file digests combined over the
// sorted relative paths, so identical outputs hash identically anywhere.
std::string hash_tree(const std::string& dir) {
    std::vector<std::string> rels;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file())
            rels.push_back(fs::relative(entry.path(), dir).generic_string());
    std::sort(rels.begin(), rels.end());
    std::string acc;
    for (const auto& rel : rels)
        acc += rel + ":" + sha256_file_hex((fs::path(dir) / rel).string()) + "\n";
    return sha256_hex(acc);
}

void write_run_json(const std::string& out_dir, const std::string& command,
                    const json& config, uint64_t seed, const json& inputs,
                    const json& outputs, const json& metrics = json::object()) {
    json run = {{"command", command}, {"seed", seed},       {"config", config},
                {"inputs", inputs},   {"outputs", outputs}, {"metrics", metrics}};
    write_file((fs::path(out_dir) / "run.json").string(), run.dump(2) + "\n");
}

std::string prepare_out(const std::string& out_dir) {
    if (out_dir.empty()) throw ValidationError("--out directory is required");
    fs::create_directories(out_dir);
    return out_dir;
}

eval::RunConfig load_run_config(const std::string& path, bool seed_set, uint64_t seed) {
    json j = load_json_file(path);
    if (j.contains("config")) j = j.at("config");  // accept a previous run.json
    eval::RunConfig rc = eval::RunConfig::from_json(j);
    if (seed_set) {
        rc.seed = seed;
        rc.validate();
    }
    return rc;
}

// Flattened encoder tokens as the [1, L*d] clip anchor.
Tensor flat_anchor(const dae::Dae& model, const Tensor& image) {
    num::NoGradGuard guard;
    Tensor tokens = model.encode(image);
    std::vector<double> v(tokens.data(), tokens.data() + tokens.numel());
    return Tensor::from({1, int(tokens.numel())}, v);
}

std::string frame_name(size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%03zu.png", i);
    return buf;
}

// ---- report plotting -------------------------------------------------------

void draw_line(Tensor& img, double x0, double y0, double x1, double y1,
               const std::array<double, 3>& color) {
    int h = img.dim(0), w = img.dim(1);
    int steps = int(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int s = 0; s <= steps; ++s) {
        double t = steps == 0 ? 0.0 : double(s) / steps;
        int x = int(std::lround(x0 + (x1 - x0) * t));
        int y = int(std::lround(y0 + (y1 - y0) * t));
        if (x < 0 || x >= w || y < 0 || y >= h) continue;
        for (int c = 0; c < 3; ++c) img.data()[(size_t(y) * w + x) * 3 + c] = color[c];
    }
}

Tensor plot_series(const std::vector<std::vector<double>>& series) {
    const int h = 200, w = 320, margin = 20;
    Tensor img = Tensor::full({h, w, 3}, 1.0);
    const std::array<double, 3> axis{0.55, 0.55, 0.55};
    draw_line(img, margin, h - margin, w - margin, h - margin, axis);
    draw_line(img, margin, margin, margin, h - margin, axis);
    double lo = 0.0, hi = 1.0;
    bool first = true;
    size_t longest = 0;
    for (const auto& ys : series)
        for (double v : ys) {
            if (first || v < lo) lo = first ? v : std::min(lo, v);
            if (first || v > hi) hi = first ? v : std::max(hi, v);
            first = false;
        }
    for (const auto& ys : series) longest = std::max(longest, ys.size());
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const std::array<std::array<double, 3>, 4> palette{
        {{0.12, 0.29, 0.69}, {0.80, 0.25, 0.15}, {0.10, 0.55, 0.25}, {0.55, 0.20, 0.60}}};
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& ys = series[si];
        if (ys.empty()) continue;
        auto color = palette[si % palette.size()];
        double px = 0.0, py = 0.0;
        for (size_t i = 0; i < ys.size(); ++i) {
            double fx = longest <= 1 ? 0.0 : double(i) / double(longest - 1);
            double fy = (ys[i] - lo) / (hi - lo);
            double x = margin + fx * (w - 2 * margin);
            double y = (h - margin) - fy * (h - 2 * margin);
            if (i > 0) draw_line(img, px, py, x, y, color);
            px = x;
            py = y;
        }
    }
    return img;
}

// Numeric rows of a two-or-more column CSV; the first column is the x index.
std::vector<std::vector<double>> parse_csv_series(const std::string& text) {
    std::vector<std::vector<double>> cols;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ls(line);
        std::string cell;
        bool numeric = true;
        while (std::getline(ls, cell, ',')) {
            try {
                size_t used = 0;
                double v = std::stod(cell, &used);
                if (used != cell.size()) throw std::invalid_argument(cell);
                row.push_back(v);
            } catch (...) {
                numeric = false;
                break;
            }
        }
        if (!numeric || row.size() < 2) continue;  // header or ragged line
        if (cols.size() < row.size() - 1) cols.resize(row.size() - 1);
        for (size_t c = 1; c < row.size(); ++c) cols[c - 1].push_back(row[c]);
    }
    return cols;
}

// ---- subcommands -----------------------------------------------------------

int cmd_synth(const std::string& spec_path, bool seed_set, uint64_t seed,
              const std::string& out_dir) {
    prepare_out(out_dir);
    world::WorldSpec spec = world::WorldSpec::from_json(load_json_file(spec_path));
    if (seed_set) spec.seed = seed;
    spec.validate();
    script::Corpus corpus = world::generate_corpus(spec);
    std::string corpus_dir = (fs::path(out_dir) / "corpus").string();
    fs::create_directories(corpus_dir);
    script::write_corpus_dir(corpus_dir, corpus);
    json outputs = {{"corpus", hash_tree(corpus_dir)},
                    {"corpus/corpus.jsonl",
                     sha256_file_hex((fs::path(corpus_dir) / "corpus.jsonl").string())}};
    write_run_json(out_dir, "synth", {{"world", spec.to_json()}}, spec.seed,
                   json::object(), outputs,
                   {{"episodes", corpus.size()}});
    std::cout << "synth: " << corpus.size() << " episodes -> " << corpus_dir << "\n";
    return 0;
}

int cmd_train_dae(const std::string& config_path, const std::string& corpus_path,
                  bool seed_set, uint64_t seed, const std::string& out_dir) {
    prepare_out(out_dir);
    eval::RunConfig rc = load_run_config(config_path, seed_set, seed);
    script::Corpus corpus = script::read_corpus_file(corpus_path, true);
    auto vocab = script::build_vocab(corpus);
    eval::DaeBundle bundle = eval::make_dae(rc.dae, vocab, rc.seed);
    RngStream rng(rc.seed, "train-dae");
    auto losses = eval::train_dae(bundle, corpus, rc, rng);
    std::string ckpt = (fs::path(out_dir) / "dae.ckpt").string();
    eval::save_dae(ckpt, bundle);
    double head = losses.empty() ? 0.0 : losses.front();
    double tail = 0.0;
    size_t tail_n = std::min<size_t>(50, losses.size());
    for (size_t i = losses.size() - tail_n; i < losses.size(); ++i) tail += losses[i];
    if (tail_n > 0) tail /= double(tail_n);
    write_run_json(out_dir, "train-dae", rc.to_json(), rc.seed,
                   {{"corpus", sha256_file_hex(corpus_path)}},
                   {{"dae.ckpt", sha256_file_hex(ckpt)}},
                   {{"loss_first", head}, {"loss_tail", tail}, {"steps", losses.size()}});
    std::cout << "train-dae: " << losses.size() << " steps, loss " << head << " -> " << tail
              << "\n";
    return 0;
}

int cmd_train_ar(const std::string& config_path, const std::string& corpus_path,
                 const std::string& dae_path, bool seed_set, uint64_t seed,
                 const std::string& out_dir) {
    prepare_out(out_dir);
    eval::RunConfig rc = load_run_config(config_path, seed_set, seed);
    script::Corpus corpus = script::read_corpus_file(corpus_path, true);
    eval::DaeBundle db = eval::load_dae(dae_path);
    auto vocab = script::build_vocab(corpus);
    script::FaceBank bank = script::FaceBank::build(corpus);
    script::Corpus train_corpus;
    for (const auto& ep : corpus)
        if (rc.ar_exclude_style.empty() || ep.style_tag != rc.ar_exclude_style)
            train_corpus.push_back(ep);
    if (train_corpus.empty())
        throw ValidationError("train-ar: style exclusion removed every episode");
    auto data = eval::tokenize_corpus(train_corpus, db.model, true);
    eval::ArBundle bundle = eval::make_ar(rc.ar, vocab, rc.seed);
    RngStream rng(rc.seed, "train-ar");
    auto losses = eval::train_ar(bundle, data, bank, rc, rng);
    std::string ckpt = (fs::path(out_dir) / "ar.ckpt").string();
    eval::save_ar(ckpt, bundle);
    double head = losses.empty() ? 0.0 : losses.front();
    double tail = losses.empty() ? 0.0 : losses.back();
    write_run_json(out_dir, "train-ar", rc.to_json(), rc.seed,
                   {{"corpus", sha256_file_hex(corpus_path)},
                    {"dae.ckpt", sha256_file_hex(dae_path)}},
                   {{"ar.ckpt", sha256_file_hex(ckpt)}},
                   {{"loss_first", head},
                    {"loss_last", tail},
                    {"episodes", data.size()},
                    {"steps", losses.size()}});
    std::cout << "train-ar: " << losses.size() << " steps over " << data.size()
              << " episodes, loss " << head << " -> " << tail << "\n";
    return 0;
}

int cmd_train_clip(const std::string& config_path, const std::string& dae_path,
                   bool seed_set, uint64_t seed, const std::string& out_dir) {
    prepare_out(out_dir);
    eval::RunConfig rc = load_run_config(config_path, seed_set, seed);
    eval::DaeBundle db = eval::load_dae(dae_path);
    auto clips = ext::make_motion_clips(rc.clip_count, rc.clip_frames,
                                        rc.world.n_characters, rc.world.n_styles,
                                        rc.clip_step, rc.seed);
    parallel_for(clips.size(), [&](size_t i) {
        num::NoGradGuard guard;
        clips[i].anchor = flat_anchor(db.model, clips[i].frames.front());
    });
    std::vector<double> losses;
    eval::ClipBundle bundle = eval::train_clip(clips, rc, &losses);
    std::string ckpt = (fs::path(out_dir) / "clip.ckpt").string();
    eval::save_clip(ckpt, bundle);
    write_run_json(out_dir, "train-clip", rc.to_json(), rc.seed,
                   {{"dae.ckpt", sha256_file_hex(dae_path)}},
                   {{"clip.ckpt", sha256_file_hex(ckpt)}},
                   {{"loss_first", losses.empty() ? 0.0 : losses.front()},
                    {"loss_last", losses.empty() ? 0.0 : losses.back()},
                    {"clips", clips.size()}});
    std::cout << "train-clip: " << losses.size() << " steps over " << clips.size()
              << " clips\n";
    return 0;
}

int cmd_generate(const std::string& request_path, const std::string& ar_path,
                 const std::string& dae_path, bool seed_set, uint64_t seed,
                 const std::string& out_dir) {
    prepare_out(out_dir);
    json req_json = load_json_file(request_path);
    if (!req_json.contains("episode"))
        throw ValidationError("generate: request needs an \"episode\" object");
    script::Corpus parsed = script::parse_corpus(req_json.at("episode").dump() + "\n");
    script::Episode episode = parsed.at(0);
    if (episode.frames.empty()) throw ValidationError("generate: episode has no frames");

    eval::ArBundle arb = eval::load_ar(ar_path);
    eval::DaeBundle db = eval::load_dae(dae_path);

    int max_frames = req_json.value("max_frames", int(episode.frames.size()));
    if (max_frames < 1 || max_frames > int(episode.frames.size()))
        throw ValidationError("generate: max_frames outside the scripted range");
    double temperature = req_json.value("temperature", 1.0);
    uint64_t gen_seed = seed_set ? seed : req_json.value("seed", uint64_t(0));
    bool strict_refs = req_json.value("strict_refs", false);
    int decode_steps = req_json.value("decode_steps", 20);

    std::vector<Tensor> refs;
    if (req_json.contains("ref_images")) {
        fs::path base = fs::path(request_path).parent_path();
        for (const auto& rel : req_json.at("ref_images")) {
            fs::path p = rel.get<std::string>();
            if (p.is_relative()) p = base / p;
            refs.push_back(db.model.encode(read_png(p.string())));
        }
    }

    std::vector<script::FrameScript> scripts(episode.frames.begin(),
                                             episode.frames.begin() + max_frames);
    auto gen = eval::generate_episode(arb, db, scripts, refs, temperature, gen_seed,
                                      decode_steps, false, strict_refs);

    json outputs = json::object();
    json tokens = json::array();
    for (size_t i = 0; i < gen.frames.size(); ++i) {
        std::string name = frame_name(i);
        write_png((fs::path(out_dir) / name).string(), gen.frames[i]);
        outputs[name] = sha256_file_hex((fs::path(out_dir) / name).string());
        const Tensor& t = gen.tokens[i];
        tokens.push_back(std::vector<double>(t.data(), t.data() + t.numel()));
    }
    std::string tokens_path = (fs::path(out_dir) / "tokens.json").string();
    write_file(tokens_path, tokens.dump() + "\n");
    outputs["tokens.json"] = sha256_file_hex(tokens_path);

    json config = {{"request", req_json},
                   {"max_frames", max_frames},
                   {"temperature", temperature},
                   {"decode_steps", decode_steps},
                   {"strict_refs", strict_refs}};
    write_run_json(out_dir, "generate", config, gen_seed,
                   {{"ar.ckpt", sha256_file_hex(ar_path)},
                    {"dae.ckpt", sha256_file_hex(dae_path)}},
                   outputs, {{"frames", gen.frames.size()}});
    std::cout << "generate: " << gen.frames.size() << " frames -> " << out_dir << "\n";
    return 0;
}

int cmd_extend(const std::string& config_path, const std::string& clip_path,
               const std::string& dae_path, const std::string& policy_name, int segments,
               int target_char, int style_ix, bool seed_set, uint64_t seed,
               const std::string& out_dir) {
    prepare_out(out_dir);
    eval::RunConfig rc = load_run_config(config_path, seed_set, seed);
    if (target_char < 0 || target_char >= rc.world.n_characters)
        throw ValidationError("extend: --char outside the world's character range");
    if (style_ix < 0 || style_ix >= rc.world.n_styles)
        throw ValidationError("extend: --style outside the world's style range");
    ext::ExtensionPolicy policy;
    if (policy_name == "anchor")
        policy = ext::ExtensionPolicy::AnchorOriginal;
    else if (policy_name == "chain")
        policy = ext::ExtensionPolicy::ChainLast;
    else
        throw ValidationError("extend: --policy must be 'anchor' or 'chain'");

    eval::ClipBundle cb = eval::load_clip(clip_path);
    eval::DaeBundle db = eval::load_dae(dae_path);

    world::PlacedChar start_char;
    start_char.char_id = target_char;
    start_char.cx = world::kImageSize / 2;
    start_char.cy = world::kImageSize / 2;
    Tensor start = world::render_frame({start_char}, style_ix, true).pixels;
    ext::AnchorFn anchor_of = [&](const Tensor& img) { return flat_anchor(db.model, img); };
    ext::ExtendResult rolled =
        ext::extend(cb.model, anchor_of, start, policy, segments, cb.cfg.seg_len);
    ext::DriftCurve drift =
        ext::measure_drift(rolled.frames, target_char, rc.world.n_characters, cb.cfg.seg_len);

    json outputs = json::object();
    write_png((fs::path(out_dir) / "start.png").string(), start);
    outputs["start.png"] = sha256_file_hex((fs::path(out_dir) / "start.png").string());
    for (size_t i = 0; i < rolled.frames.size(); ++i) {
        std::string name = frame_name(i);
        write_png((fs::path(out_dir) / name).string(), rolled.frames[i]);
        outputs[name] = sha256_file_hex((fs::path(out_dir) / name).string());
    }
    std::string drift_csv = "segment,mean\n";
    for (size_t s = 0; s < drift.segment_mean.size(); ++s)
        drift_csv += std::to_string(s) + "," + std::to_string(drift.segment_mean[s]) + "\n";
    write_file((fs::path(out_dir) / "drift.csv").string(), drift_csv);
    outputs["drift.csv"] = sha256_file_hex((fs::path(out_dir) / "drift.csv").string());
    std::string hits_csv = "frame,hit\n";
    for (size_t i = 0; i < drift.hits.size(); ++i)
        hits_csv += std::to_string(i) + "," + std::to_string(drift.hits[i]) + "\n";
    write_file((fs::path(out_dir) / "hits.csv").string(), hits_csv);
    outputs["hits.csv"] = sha256_file_hex((fs::path(out_dir) / "hits.csv").string());

    json config = rc.to_json();
    config["extend"] = {{"policy", policy_name},
                        {"segments", segments},
                        {"char", target_char},
                        {"style", style_ix}};
    write_run_json(out_dir, "extend", config, rc.seed,
                   {{"clip.ckpt", sha256_file_hex(clip_path)},
                    {"dae.ckpt", sha256_file_hex(dae_path)}},
                   outputs,
                   {{"drift_mean", drift.mean}, {"segment_means", drift.segment_mean}});
    std::cout << "extend: " << rolled.frames.size() << " frames, drift mean " << drift.mean
              << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& corpus_path,
             const std::string& ar_path, const std::string& dae_path, bool seed_set,
             uint64_t seed, const std::string& out_dir) {
    prepare_out(out_dir);
    eval::RunConfig rc = load_run_config(config_path, seed_set, seed);
    script::Corpus corpus = script::read_corpus_file(corpus_path, true);
    eval::ArBundle arb = eval::load_ar(ar_path);
    eval::DaeBundle db = eval::load_dae(dae_path);

    eval::EvalOutcome outcome = eval::run_eval(arb, db, corpus, rc);
    outcome.report.config_hash = sha256_hex(rc.to_json().dump());
    outcome.report.checkpoint_hash = sha256_file_hex(ar_path);

    std::string metrics_path = (fs::path(out_dir) / "metrics.json").string();
    write_file(metrics_path, outcome.report.to_json().dump(2) + "\n");
    std::string rows = "episode,lt,st\n";
    for (size_t i = 0; i < outcome.lt_per_episode.size(); ++i)
        rows += std::to_string(i) + "," + std::to_string(outcome.lt_per_episode[i]) + "," +
                std::to_string(outcome.st_per_episode[i]) + "\n";
    std::string csv_path = (fs::path(out_dir) / "consistency.csv").string();
    write_file(csv_path, rows);

    write_run_json(out_dir, "eval", rc.to_json(), rc.seed,
                   {{"corpus", sha256_file_hex(corpus_path)},
                    {"ar.ckpt", sha256_file_hex(ar_path)},
                    {"dae.ckpt", sha256_file_hex(dae_path)}},
                   {{"metrics.json", sha256_file_hex(metrics_path)},
                    {"consistency.csv", sha256_file_hex(csv_path)}},
                   outcome.report.to_json());
    std::cout << "eval: lt " << outcome.report.lt_consistency << ", st "
              << outcome.report.st_consistency << ", nll " << outcome.report.heldout_nll
              << ", id " << outcome.report.id_accuracy << "\n";
    return 0;
}

// Small fixed battery of finite-difference probes across the layer stack,
// the mixture loss, and both diffusion and autoregressive objectives.
double run_gradcheck(uint64_t seed) {
    double worst = 0.0;
    const double eps = 1e-4;

    {
        num::ParamStore ps;
        RngStream rng(seed, "gc.layers");
        num::Linear lin(ps, "gc.lin", 8, 8, rng);
        num::TransformerBlock blk(ps, "gc.blk", 8, 2, rng);
        num::LayerNorm ln(ps, "gc.ln", 8);
        Tensor x = Tensor::randn({3, 8}, rng, 1.0, false);
        Tensor target = Tensor::randn({3, 8}, rng, 1.0, false);
        auto loss = [&] {
            Tensor h = lin.forward(x);
            h = blk.forward(h, num::full_attention_mask(3, 3));
            h = ln.forward(h);
            return num::mse(h, target);
        };
        std::vector<Tensor> params;
        for (const auto& name : ps.names()) params.push_back(ps.get(name));
        RngStream probe(seed, "gc.layers.probe");
        worst = std::max(worst, num::finite_difference_check(loss, params, eps, 60, probe));
    }
    {
        num::ParamStore ps;
        RngStream rng(seed, "gc.gmm");
        num::Linear pre(ps, "gc.pre", 6, 8, rng);
        gmm::GmmHead head(ps, "gc.head", 8, 2, 4, rng);
        Tensor w = ps.get("gc.head.out.w");
        for (size_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal() * 0.05;
        Tensor x = Tensor::randn({5, 6}, rng, 1.0, false);
        Tensor target = Tensor::randn({5, 4}, rng, 1.0, false);
        auto loss = [&] {
            auto params = head.forward(pre.forward(x));
            auto report = gmm::ar_loss(params, gmm::mixture_mean(params), target);
            return report.total_t;
        };
        std::vector<Tensor> params;
        for (const auto& name : ps.names()) params.push_back(ps.get(name));
        RngStream probe(seed, "gc.gmm.probe");
        worst = std::max(worst, num::finite_difference_check(loss, params, eps, 60, probe));
    }
    {
        num::ParamStore ps;
        RngStream rng(seed, "gc.dae");
        dae::DaeConfig cfg;
        cfg.image_size = 8;
        cfg.enc_patch = 2;
        cfg.dec_patch = 2;
        cfg.enc_width = 8;
        cfg.dec_width = 8;
        cfg.enc_blocks = 1;
        cfg.dec_blocks = 1;
        cfg.n_heads = 2;
        cfg.d_token = 4;
        cfg.l_tokens = 2;
        cfg.d_sentence = 4;
        cfg.d_face = 4;
        cfg.t_steps = 10;
        dae::Dae model(ps, cfg, rng);
        Tensor image = Tensor::zeros({8, 8, 3});
        for (size_t i = 0; i < image.numel(); ++i) image.data()[i] = rng.uniform();
        Tensor eps_draw = Tensor::randn({8, 8, 3}, rng, 1.0, false);
        Tensor desc = Tensor::randn({1, 4}, rng, 1.0, false);
        Tensor face = Tensor::randn({1, 4}, rng, 1.0, false);
        auto loss = [&] {
            auto cond = dae::make_cond(model.encode(image), {desc}, {face}, cfg);
            return model.eq1_loss(image, 5, eps_draw, cond);
        };
        std::vector<Tensor> params;
        for (const auto& name : ps.names()) params.push_back(ps.get(name));
        RngStream probe(seed, "gc.dae.probe");
        worst = std::max(worst, num::finite_difference_check(loss, params, eps, 40, probe));
    }
    {
        num::ParamStore ps;
        RngStream rng(seed, "gc.ar");
        ar::ArConfig cfg;
        cfg.width = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.k_mix = 2;
        cfg.d_token = 4;
        cfg.l_tokens = 2;
        cfg.d_word = 8;
        cfg.d_sentence = 8;
        std::vector<std::string> vocab = {"<unk>", "dim", "hall", "the"};
        ar::ArModel model(ps, cfg, vocab, rng);
        Tensor w = ps.get("ar.head.out.w");
        for (size_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal() * 0.05;
        world::WorldSpec spec;
        spec.n_characters = 3;
        spec.n_episodes = 1;
        spec.min_frames = 2;
        spec.max_frames = 2;
        spec.seed = seed + 11;
        script::Episode ep = world::generate_corpus(spec).at(0);
        for (auto& f : ep.frames) {
            f.image = Tensor();
            f.target_tokens = Tensor::randn({2, 4}, rng, 1.0, false);
        }
        auto layout = script::assemble_sequence(ep, {}, int(ep.frames.size()),
                                                cfg.context_frames, cfg.l_tokens);
        auto loss = [&] {
            auto fwd = model.forward(layout);
            auto report = gmm::ar_loss(fwd.params, gmm::mixture_mean(fwd.params), fwd.targets);
            return report.total_t;
        };
        std::vector<Tensor> params;
        for (const auto& name : ps.names()) params.push_back(ps.get(name));
        RngStream probe(seed, "gc.ar.probe");
        worst = std::max(worst, num::finite_difference_check(loss, params, eps, 40, probe));
    }
    return worst;
}

int cmd_gradcheck(bool seed_set, uint64_t seed, const std::string& out_dir) {
    uint64_t s = seed_set ? seed : 1;
    double worst = run_gradcheck(s);
    bool pass = worst < 1e-4;
    std::cout << "gradcheck: max relative error " << worst << (pass ? " (pass)" : " (FAIL)")
              << "\n";
    if (!out_dir.empty()) {
        prepare_out(out_dir);
        write_run_json(out_dir, "gradcheck", {{"epsilon", 1e-4}}, s, json::object(),
                       json::object(),
                       {{"max_relative_error", worst}, {"pass", pass}});
    }
    return pass ? 0 : 2;
}

int cmd_report(const std::string& in_dir, const std::string& out_dir) {
    prepare_out(out_dir);
    if (in_dir.empty() || !fs::is_directory(in_dir))
        throw ValidationError("report: --in must name an existing directory");
    std::vector<fs::path> csvs, metric_files;
    for (const auto& entry : fs::recursive_directory_iterator(in_dir)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name.size() > 4 && name.substr(name.size() - 4) == ".csv")
            csvs.push_back(entry.path());
        else if (name == "metrics.json")
            metric_files.push_back(entry.path());
    }
    std::sort(csvs.begin(), csvs.end());
    std::sort(metric_files.begin(), metric_files.end());

    json outputs = json::object();
    std::string summary = "source,st_consistency,lt_consistency,heldout_nll,id_accuracy,seed\n";
    for (const auto& p : metric_files) {
        auto r = eval::MetricsReport::from_json(load_json_file(p.string()));
        summary += fs::relative(p, in_dir).generic_string() + "," +
                   std::to_string(r.st_consistency) + "," + std::to_string(r.lt_consistency) +
                   "," + std::to_string(r.heldout_nll) + "," + std::to_string(r.id_accuracy) +
                   "," + std::to_string(r.seed) + "\n";
    }
    std::string summary_path = (fs::path(out_dir) / "summary.csv").string();
    write_file(summary_path, summary);
    outputs["summary.csv"] = sha256_file_hex(summary_path);

    for (const auto& p : csvs) {
        auto series = parse_csv_series(read_file(p.string()));
        bool has_points = false;
        for (const auto& s : series) has_points = has_points || !s.empty();
        if (!has_points) continue;
        std::string name = "plot_" + p.stem().string() + ".png";
        std::string path = (fs::path(out_dir) / name).string();
        write_png(path, plot_series(series));
        outputs[name] = sha256_file_hex(path);
    }
    write_run_json(out_dir, "report", {{"in", in_dir}}, 0,
                   {{"in", hash_tree(in_dir)}}, outputs,
                   {{"tables", metric_files.size()}, {"plots", csvs.size()}});
    std::cout << "report: " << metric_files.size() << " metric files, " << csvs.size()
              << " curves -> " << out_dir << "\n";
    return 0;
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"storyframe: tokenize, predict, decode and extend synthetic movie frames"};
    app.require_subcommand(1);

    std::string config_path, out_dir, corpus_path, ckpt_path, dae_path, spec_path,
        request_path, in_dir;
    std::string policy = "anchor";
    int segments = 8, target_char = 0, style_ix = 0;
    uint64_t seed = 0;

    auto add_seed = [&](CLI::App* cmd) { return cmd->add_option("--seed", seed, "seed override"); };

    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    synth->add_option("--spec", spec_path, "world spec json")->required();
    synth->add_option("--out", out_dir, "output directory")->required();
    auto* synth_seed = add_seed(synth);

    auto* tdae = app.add_subcommand("train-dae", "train the diffusion autoencoder");
    tdae->add_option("--config", config_path, "run config json")->required();
    tdae->add_option("--corpus", corpus_path, "corpus jsonl")->required();
    tdae->add_option("--out", out_dir, "output directory")->required();
    auto* tdae_seed = add_seed(tdae);

    auto* tar = app.add_subcommand("train-ar", "train the autoregressive token model");
    tar->add_option("--config", config_path, "run config json")->required();
    tar->add_option("--corpus", corpus_path, "corpus jsonl")->required();
    tar->add_option("--dae", dae_path, "tokenizer checkpoint")->required();
    tar->add_option("--out", out_dir, "output directory")->required();
    auto* tar_seed = add_seed(tar);

    auto* tclip = app.add_subcommand("train-clip", "train the clip extension model");
    tclip->add_option("--config", config_path, "run config json")->required();
    tclip->add_option("--dae", dae_path, "tokenizer checkpoint")->required();
    tclip->add_option("--out", out_dir, "output directory")->required();
    auto* tclip_seed = add_seed(tclip);

    auto* gen = app.add_subcommand("generate", "generate frames from a scripted request");
    gen->add_option("--request", request_path, "generation request json")->required();
    gen->add_option("--ckpt", ckpt_path, "autoregressive checkpoint")->required();
    gen->add_option("--dae", dae_path, "tokenizer checkpoint")->required();
    gen->add_option("--out", out_dir, "output directory")->required();
    auto* gen_seed = add_seed(gen);

    auto* extend = app.add_subcommand("extend", "roll a clip forward under an anchor policy");
    extend->add_option("--config", config_path, "run config json")->required();
    extend->add_option("--ckpt", ckpt_path, "clip checkpoint")->required();
    extend->add_option("--dae", dae_path, "tokenizer checkpoint")->required();
    extend->add_option("--out", out_dir, "output directory")->required();
    extend->add_option("--policy", policy, "anchor|chain");
    extend->add_option("--segments", segments, "segments to roll");
    extend->add_option("--char", target_char, "target character id");
    extend->add_option("--style", style_ix, "background style index");
    auto* extend_seed = add_seed(extend);

    auto* ev = app.add_subcommand("eval", "score a checkpoint against a held-out corpus");
    ev->add_option("--config", config_path, "run config json")->required();
    ev->add_option("--corpus", corpus_path, "held-out corpus jsonl")->required();
    ev->add_option("--ckpt", ckpt_path, "autoregressive checkpoint")->required();
    ev->add_option("--dae", dae_path, "tokenizer checkpoint")->required();
    ev->add_option("--out", out_dir, "output directory")->required();
    auto* ev_seed = add_seed(ev);

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gc->add_option("--out", out_dir, "optional output directory");
    auto* gc_seed = add_seed(gc);

    auto* rep = app.add_subcommand("report", "render metrics tables and drift plots");
    rep->add_option("--in", in_dir, "directory holding prior run outputs")->required();
    rep->add_option("--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (synth->parsed())
            return cmd_synth(spec_path, !synth_seed->empty(), seed, out_dir);
        if (tdae->parsed())
            return cmd_train_dae(config_path, corpus_path, !tdae_seed->empty(), seed, out_dir);
        if (tar->parsed())
            return cmd_train_ar(config_path, corpus_path, dae_path, !tar_seed->empty(), seed,
                                out_dir);
        if (tclip->parsed())
            return cmd_train_clip(config_path, dae_path, !tclip_seed->empty(), seed, out_dir);
        if (gen->parsed())
            return cmd_generate(request_path, ckpt_path, dae_path, !gen_seed->empty(), seed,
                                out_dir);
        if (extend->parsed())
            return cmd_extend(config_path, ckpt_path, dae_path, policy, segments, target_char,
                              style_ix, !extend_seed->empty(), seed, out_dir);
        if (ev->parsed())
            return cmd_eval(config_path, corpus_path, ckpt_path, dae_path, !ev_seed->empty(),
                            seed, out_dir);
        if (gc->parsed()) return cmd_gradcheck(!gc_seed->empty(), seed, out_dir);
        if (rep->parsed()) return cmd_report(in_dir, out_dir);
        std::cerr << "error: no subcommand\n\n" << app.help();
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace sf
