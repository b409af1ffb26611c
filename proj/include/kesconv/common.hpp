// SPDX-License-Identifier: Apache-2.0
//
// Shared error types, deterministic RNG, and small utilities.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace kesconv {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

// Exit-code contract for the CLI: 2 config, 3 data, 4 numerical.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Deterministic RNG. mt19937_64 is bit-exact across platforms; the
// transforms below are hand-rolled because the standard distributions are
// implementation-defined, and checkpoints / corpora must be reproducible
// byte-for-byte from a seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed), base_(seed) {}

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() {
        const std::uint64_t bits = gen_() >> 11;
        return static_cast<double>(bits) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double stdev) { return normal() * stdev; }

    // Uniform integer in [0, n). Rejection sampling, unbiased.
    std::uint64_t randint(std::uint64_t n) {
        if (n == 0) {
            throw NumericError("randint: n must be positive");
        }
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = gen_();
        while (v >= limit) {
            v = gen_();
        }
        return v % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(randint(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Derives an independent stream keyed on the base seed only, so e.g. the
    // knowledge base does not depend on how many dialogues were drawn first.
    Rng stream(std::uint64_t salt) const { return Rng(seed_mix(salt)); }

private:
    std::uint64_t seed_mix(std::uint64_t salt) const {
        // splitmix64 over (base seed, salt)
        std::uint64_t z = base_ + salt * 0x9e3779b97f4a7c15ULL + 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }


    std::mt19937_64 gen_;
    std::uint64_t base_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a 64-bit, used for byte-identity checks (frozen parameters, vocab files).
inline std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

}  // namespace kesconv
