#include "aarm/ids.hpp"

#include <cstdio>

#include <sodium.h>

namespace aarm {

IdSource::IdSource() : seeded_(false) {
    std::uint64_t seed = 0;
    if (sodium_init() < 0) throw std::runtime_error("libsodium initialisation failed");
    randombytes_buf(&seed, sizeof seed);
    rng_.seed(seed);
}

IdSource::IdSource(std::uint64_t seed) : rng_(seed), seeded_(true) {}

std::string IdSource::next_uuid() {
    std::uint64_t hi = 0, lo = 0;
    {
        std::lock_guard lock(mutex_);
        hi = rng_();
        lo = rng_();
    }
    hi = (hi & 0xFFFFFFFFFFFF0FFFULL) | 0x0000000000004000ULL;
    lo = (lo & 0x3FFFFFFFFFFFFFFFULL) | 0x8000000000000000ULL;
    char buf[37];
    std::snprintf(buf, sizeof buf, "%08x-%04x-%04x-%04x-%012llx", static_cast<unsigned>(hi >> 32),
                  static_cast<unsigned>((hi >> 16) & 0xFFFF), static_cast<unsigned>(hi & 0xFFFF),
                  static_cast<unsigned>(lo >> 48), static_cast<unsigned long long>(lo & 0xFFFFFFFFFFFFULL));
    return buf;
}

} // namespace aarm
