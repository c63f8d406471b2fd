#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>
#include <vector>

namespace remed {

// Deterministic PRNG with named substream derivation. Every random draw in
// the project flows from one root seed; substreams are derived by hashing the
// parent seed with a label so that independent pipeline stages (generation,
// init, shuffling, ...) never share a stream.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix(seed ^ 0x9e3779b97f4a7c15ULL)) {
        // warm up so nearby seeds decorrelate
        next();
        next();
    }

    static uint64_t hash_label(uint64_t seed, std::string_view label) {
        uint64_t h = 0xcbf29ce484222325ULL ^ splitmix(seed);
        for (char c : label) {
            h ^= static_cast<uint8_t>(c);
            h *= 0x100000001b3ULL;
        }
        return splitmix(h);
    }

    Rng derive(std::string_view label) const {
        return Rng(hash_label(state_, label));
    }
    Rng derive(std::string_view label, uint64_t index) const {
        uint64_t h = hash_label(state_, label);
        return Rng(splitmix(h + 0x632be59bd9b4e019ULL * (index + 1)));
    }

    uint64_t next() {
        // xorshift64* core
        state_ ^= state_ >> 12;
        state_ ^= state_ << 25;
        state_ ^= state_ >> 27;
        return state_ * 0x2545f4914f6cdd1dULL;
    }

    // uniform in [0,1)
    double uniform() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        // rejection sampling keeps this exactly uniform
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_int(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    double normal() {
        // Box-Muller, fresh pair each call (no cached spare: keeps substream
        // splitting independent of call parity)
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(static_cast<uint64_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t state_;
};

}  // namespace remed
