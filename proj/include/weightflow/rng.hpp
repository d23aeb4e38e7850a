#pragma once

// Seeded, splittable random generator. Every stochastic operation in the
// library takes an Rng& explicitly; there is no global state. Streams are
// identified by a 64-bit key; fork() derives an independent child stream
// from (parent key, label) without consuming parent entropy, so artifact
// pipelines stay reproducible regardless of call order.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string_view>
#include <vector>

namespace wf {

namespace detail {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(uint64_t seed, const void* data, size_t len) {
    uint64_t h = 0xcbf29ce484222325ull ^ seed;
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace detail

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : key_(seed) { reseed_state(); }

    // Child stream derived from this stream's identity plus a label.
    Rng fork(std::string_view label) const {
        uint64_t child = detail::fnv1a64(key_, label.data(), label.size());
        return Rng(child);
    }

    Rng fork(std::string_view label, uint64_t index) const {
        uint64_t child = detail::fnv1a64(key_, label.data(), label.size());
        child = detail::fnv1a64(child, &index, sizeof index);
        return Rng(child);
    }

    uint64_t key() const { return key_; }

    // xoshiro256++ core
    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform double in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller with a cached spare draw.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    // Unbiased integer in [0, n) via rejection.
    int64_t uniform_int(int64_t n) {
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return static_cast<int64_t>(v % un);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // First k elements of a shuffled [0, n) index range.
    std::vector<int> sample_indices(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        for (int i = 0; i < k; ++i) {
            int j = i + static_cast<int>(uniform_int(n - i));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        idx.resize(static_cast<size_t>(k));
        return idx;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    void reseed_state() {
        uint64_t sm = key_;
        for (auto& s : s_) s = detail::splitmix64(sm);
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t key_;
    std::array<uint64_t, 4> s_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace wf
