#pragma once

#include <cstdint>

namespace prefalign {

// Counter-based splittable generator. The i-th draw of a stream with key `k`
// is `mix64(k + (i+1) * GOLDEN)` where mix64 is the SplitMix64 finalizer and
// GOLDEN = 0x9E3779B97F4A7C15. Child streams are derived as
// `child_key = mix64(k ^ mix64(stream_id + GOLDEN))`. State is exactly
// (key, counter), so streams replay bit-exact from a stored counter and the
// same (seed, draw sequence) yields the same outputs on any platform.
class Rng {
public:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

    explicit Rng(std::uint64_t seed) : key_(seed), counter_(0) {}
    Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

    static std::uint64_t mix64(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ULL;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBULL;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t next_u64() {
        counter_ += 1;
        return mix64(key_ + counter_ * kGolden);
    }

    // [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; draws exactly two uniforms per call
    // (no cached spare, so the state stays (key, counter)).
    double normal();

    // Uniform in [0, n) by 128-bit multiply-shift. Bias is n / 2^64.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Independent child stream; does not advance this stream.
    Rng split(std::uint64_t stream_id) const { return Rng(mix64(key_ ^ mix64(stream_id + kGolden))); }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

}  // namespace prefalign
