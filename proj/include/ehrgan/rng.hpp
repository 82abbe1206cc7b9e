#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ehrgan {

/// Mix a root seed with a stream name and index into an independent seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index = 0);

/// Seeded pseudo-random source. All randomness in the library flows through
/// instances of this class so every run is reproducible from its seeds.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    Rng child(std::string_view stream, std::uint64_t index = 0) {
        return Rng(derive_seed(engine_(), stream, index));
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    bool bernoulli(double p) { return uniform() < p; }
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }
    double gamma(double shape, double scale) { return std::gamma_distribution<double>(shape, scale)(engine_); }
    std::uint64_t next() { return engine_(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace ehrgan
