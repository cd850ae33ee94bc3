#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace sf::num {

// Counter-based splittable generator. Every draw is a pure function of
// (seed, label, draw index), so streams replay identically across runs and
// platforms regardless of how sibling streams are consumed.
class RngStream {
public:
    RngStream() : RngStream(0, "") {}

    RngStream(uint64_t seed, std::string_view label) : label_(label) {
        key_ = mix(seed ^ 0x6A09E667F3BCC909ULL);
        key_ = mix(key_ ^ fnv1a(label));
    }

    // Independent substream; same (parent, label) always forks the same stream.
    RngStream fork(std::string_view label) const {
        RngStream s;
        s.key_ = mix(key_ ^ (fnv1a(label) | 1ULL));
        s.label_ = label_ + "/" + std::string(label);
        return s;
    }

    RngStream fork(uint64_t index) const {
        RngStream s;
        s.key_ = mix(rotl(key_, 17) + (index + 1) * 0xD1B54A32D192ED03ULL);
        s.label_ = label_ + "/" + std::to_string(index);
        return s;
    }

    uint64_t next_u64() {
        ++counter_;
        return mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    // [0, 1), 53-bit resolution
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; consumes exactly two draws per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // [0, n)
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    const std::string& label() const { return label_; }

private:
    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xCBF29CE484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001B3ULL;
        }
        return h;
    }

    static uint64_t rotl(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    // splitmix64 finalizer
    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    uint64_t key_ = 0;
    uint64_t counter_ = 0;
    std::string label_;
};

}  // namespace sf::num
