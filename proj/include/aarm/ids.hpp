#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <random>
#include <string>

namespace aarm {

// Version-4 UUIDs. A seeded source yields the same sequence on every run,
// which keeps test-mode receipt files byte-identical.
class IdSource {
public:
    IdSource();                                // OS entropy
    explicit IdSource(std::uint64_t seed);     // deterministic
    std::string next_uuid();
    bool seeded() const { return seeded_; }

private:
    std::mutex mutex_;
    std::mt19937_64 rng_;
    bool seeded_;
};

} // namespace aarm
