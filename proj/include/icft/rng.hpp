#pragma once

#include <cstdint>
#include <cstring>
#include <cmath>
#include <string_view>
#include <utility>

namespace icft {

// splitmix64 step; also the workhorse for seed derivation.
inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline uint64_t fnv1a(const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

// Derive a child seed from a base seed and any number of mix-ins (ints or strings).
inline uint64_t derive_seed(uint64_t base) { return base; }

template <class T, class... Rest>
uint64_t derive_seed(uint64_t base, T first, Rest... rest) {
    uint64_t h;
    if constexpr (std::is_convertible_v<T, std::string_view>) {
        h = fnv1a(std::string_view(first));
    } else {
        h = static_cast<uint64_t>(first);
    }
    return derive_seed(hash_mix(base, h), rest...);
}

// Deterministic PRNG with platform-independent output. std::mt19937 itself is
// portable but the standard distributions are not, so we roll our own helpers.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x5851f42d4c957f2dull) {}

    uint64_t next_u64() { return splitmix64(state_); }
    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // uniform integer in [0, n), n > 0
    uint64_t uniform_u64(uint64_t n) {
        // modulo with rejection to avoid bias
        uint64_t limit = ~uint64_t(0) - (~uint64_t(0) % n);
        uint64_t v;
        do { v = next_u64(); } while (v >= limit);
        return v % n;
    }
    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_u64(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double a, double b) { return a + (b - a) * uniform01(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do { u1 = uniform01(); } while (u1 <= 0.0);
        u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <class RandomIt>
    void shuffle(RandomIt first, RandomIt last) {
        auto n = last - first;
        for (decltype(n) i = n - 1; i > 0; --i) {
            auto j = static_cast<decltype(n)>(uniform_u64(static_cast<uint64_t>(i + 1)));
            std::swap(first[i], first[j]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace icft
