#include "storyframe/param_store.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "storyframe/common.hpp"

namespace sf::num {

const ParamStore::Slot* ParamStore::find(const std::string& name) const {
    for (size_t i = 0; i < order_.size(); ++i)
        if (order_[i] == name) return &slots_[i];
    return nullptr;
}

Tensor ParamStore::create(const std::string& name, Shape shape) {
    if (const Slot* s = find(name)) {
        if (s->param.shape() != shape)
            throw ValidationError("parameter '" + name + "' re-created with a different shape");
        return s->param;
    }
    Tensor t = Tensor::zeros(std::move(shape), true);
    order_.push_back(name);
    slots_.push_back(Slot{t, std::vector<double>(t.numel(), 0.0),
                          std::vector<double>(t.numel(), 0.0)});
    return t;
}

Tensor ParamStore::create_randn(const std::string& name, Shape shape, RngStream& rng,
                                double stddev) {
    bool fresh = find(name) == nullptr;
    Tensor t = create(name, std::move(shape));
    if (fresh) {
        double* d = t.data();
        for (size_t i = 0; i < t.numel(); ++i) d[i] = rng.normal() * stddev;
    }
    return t;
}

bool ParamStore::has(const std::string& name) const { return find(name) != nullptr; }

Tensor ParamStore::get(const std::string& name) const {
    const Slot* s = find(name);
    if (!s) throw ValidationError("unknown parameter '" + name + "'");
    return s->param;
}

void ParamStore::zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
}

void ParamStore::adam_step(const AdamConfig& cfg, const std::string& prefix) {
    step_ += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(step_));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(step_));
    for (size_t i = 0; i < slots_.size(); ++i) {
        Slot& s = slots_[i];
        if (!order_[i].starts_with(prefix)) {
            s.param.zero_grad();
            continue;
        }
        double* p = s.param.data();
        const double* g = s.param.grad();
        for (size_t j = 0; j < s.param.numel(); ++j) {
            double gj = g[j];
            if (!std::isfinite(gj))
                throw TrainingError("non-finite gradient in parameter '" + order_[i] + "'");
            if (cfg.weight_decay != 0.0) gj += cfg.weight_decay * p[j];
            s.m[j] = cfg.beta1 * s.m[j] + (1.0 - cfg.beta1) * gj;
            s.v[j] = cfg.beta2 * s.v[j] + (1.0 - cfg.beta2) * gj * gj;
            double mh = s.m[j] / bc1;
            double vh = s.v[j] / bc2;
            p[j] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
        }
        s.param.zero_grad();
    }
}

namespace {

void put_f32_le(std::string& out, float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    out.push_back(char(u & 0xff));
    out.push_back(char((u >> 8) & 0xff));
    out.push_back(char((u >> 16) & 0xff));
    out.push_back(char((u >> 24) & 0xff));
}

float get_f32_le(const char* p) {
    uint32_t u = uint32_t(uint8_t(p[0])) | uint32_t(uint8_t(p[1])) << 8 |
                 uint32_t(uint8_t(p[2])) << 16 | uint32_t(uint8_t(p[3])) << 24;
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

constexpr int kCheckpointVersion = 1;

}  // namespace

void ParamStore::save(const std::string& path, const nlohmann::json& meta) const {
    nlohmann::json header;
    header["version"] = kCheckpointVersion;
    header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
    nlohmann::json manifest = nlohmann::json::array();
    size_t offset = 0;
    for (size_t i = 0; i < order_.size(); ++i) {
        const Tensor& t = slots_[i].param;
        manifest.push_back({{"name", order_[i]}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel() * 4;
    }
    header["tensors"] = manifest;

    std::string blob = header.dump();
    blob.push_back('\n');
    blob.reserve(blob.size() + offset);
    for (const auto& s : slots_) {
        const double* d = s.param.data();
        for (size_t j = 0; j < s.param.numel(); ++j) put_f32_le(blob, float(d[j]));
    }
    write_file(path, blob);
}

ParamStore ParamStore::load(const std::string& path, nlohmann::json* meta_out) {
    std::string blob = read_file(path);
    size_t nl = blob.find('\n');
    if (nl == std::string::npos) throw ParseError("checkpoint '" + path + "': missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint '" + path + "': bad header: " + e.what());
    }
    if (!header.contains("version") || !header["version"].is_number_integer())
        throw ParseError("checkpoint '" + path + "': header has no integer version");
    int version = header["version"].get<int>();
    if (version != kCheckpointVersion)
        throw ParseError("checkpoint '" + path + "': unsupported format version " +
                         std::to_string(version));
    if (meta_out) *meta_out = header.value("meta", nlohmann::json::object());

    ParamStore store;
    const char* base = blob.data() + nl + 1;
    size_t payload = blob.size() - nl - 1;
    for (const auto& entry : header.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<Shape>();
        size_t offset = entry.at("offset").get<size_t>();
        Tensor t = store.create(name, shape);
        if (offset + t.numel() * 4 > payload)
            throw ParseError("checkpoint '" + path + "': tensor '" + name +
                             "' extends past end of file");
        double* d = t.data();
        for (size_t j = 0; j < t.numel(); ++j) d[j] = double(get_f32_le(base + offset + j * 4));
    }
    return store;
}

}  // namespace sf::num
