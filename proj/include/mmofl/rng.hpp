#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mmofl {

// 64-bit finalizer used to derive independent stream seeds from a master seed.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Stable per-purpose sub-seed: mix(master, fnv1a(tag)).
inline uint64_t derive_seed(uint64_t master, std::string_view tag) {
    uint64_t h = 1469598103934665603ull;
    for (char ch : tag) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ull;
    }
    return splitmix64(master ^ h);
}

// mt19937_64 engine with hand-rolled distributions. std:: distributions are
// implementation-defined, which would break bit-reproducibility across
// toolchains; everything here is pinned down to the exact arithmetic.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1), 53-bit resolution
    double next_unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // unbiased draw from [0, n)
    uint64_t uniform_index(uint64_t n) {
        assert(n > 0);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    // Marsaglia polar method with cached spare
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_unit() - 1.0;
            v = 2.0 * next_unit() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    // Marsaglia-Tsang; shape < 1 boosted via gamma(shape+1) * u^(1/shape)
    double gamma(double shape) {
        assert(shape > 0.0);
        if (shape < 1.0) {
            const double u = next_unit();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = next_unit();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    std::vector<double> dirichlet(double alpha, size_t k) {
        std::vector<double> w(k);
        double sum = 0.0;
        for (auto& x : w) {
            x = gamma(alpha);
            sum += x;
        }
        if (sum <= 0.0) {
            // all draws underflowed (tiny alpha); fall back to a single atom
            w.assign(k, 0.0);
            w[uniform_index(k)] = 1.0;
            return w;
        }
        for (auto& x : w) x /= sum;
        return w;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace mmofl
