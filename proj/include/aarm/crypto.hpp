#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace aarm::crypto {

class CryptoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Sha256Digest = std::array<std::uint8_t, 32>;

Sha256Digest sha256(std::string_view data);
std::string sha256_hex(std::string_view data);
std::string to_hex(std::span<const std::uint8_t> bytes);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);  // throws CryptoError

inline constexpr std::size_t kPublicKeySize = 32;
inline constexpr std::size_t kSeedSize = 32;
inline constexpr std::size_t kSignatureSize = 64;

using PublicKey = std::array<std::uint8_t, kPublicKeySize>;

// First 8 hex characters of SHA-256 over the raw public key.
std::string key_id_for(const PublicKey& pk);

class SigningKey {
public:
    static SigningKey generate();
    static SigningKey from_seed(std::span<const std::uint8_t> seed);
    // Key file: {"algorithm":"Ed25519","seed":"<base64 32-byte seed>"}
    static SigningKey load(const std::filesystem::path& file);
    void save(const std::filesystem::path& file) const;

    const PublicKey& public_key() const { return public_key_; }
    const std::string& key_id() const { return key_id_; }
    std::string sign_base64(std::string_view message) const;

private:
    SigningKey() = default;
    std::array<std::uint8_t, 64> secret_{};
    std::array<std::uint8_t, kSeedSize> seed_{};
    PublicKey public_key_{};
    std::string key_id_;
};

bool verify_signature(const PublicKey& pk, std::string_view message, std::string_view signature_base64);

// keys.json: {"<key_id>": "<base64 raw Ed25519 public key>"}
using PublicKeyRing = std::map<std::string, PublicKey>;
PublicKeyRing parse_key_ring(const std::string& json_text);
std::string serialize_key_ring(const PublicKeyRing& ring);

} // namespace aarm::crypto
