#include "aarm/crypto.hpp"

#include "aarm/canonical_json.hpp"

#include <fstream>
#include <mutex>
#include <sstream>

#include <sodium.h>

namespace aarm::crypto {

namespace {

void ensure_sodium() {
    static std::once_flag once;
    std::call_once(once, [] {
        if (sodium_init() < 0) throw CryptoError("libsodium initialisation failed");
    });
}

} // namespace

Sha256Digest sha256(std::string_view data) {
    ensure_sodium();
    Sha256Digest out{};
    crypto_hash_sha256(out.data(), reinterpret_cast<const unsigned char*>(data.data()), data.size());
    return out;
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (auto b : bytes) {
        out.push_back(hex[b >> 4]);
        out.push_back(hex[b & 0xF]);
    }
    return out;
}

std::string sha256_hex(std::string_view data) { return to_hex(sha256(data)); }

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    ensure_sodium();
    const auto len = sodium_base64_encoded_len(bytes.size(), sodium_base64_VARIANT_ORIGINAL);
    std::string out(len, '\0');
    sodium_bin2base64(out.data(), len, bytes.data(), bytes.size(), sodium_base64_VARIANT_ORIGINAL);
    out.resize(len - 1);  // drop NUL
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    ensure_sodium();
    std::vector<std::uint8_t> out(text.size() * 3 / 4 + 3);
    std::size_t written = 0;
    const char* end = nullptr;
    if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &written, &end,
                          sodium_base64_VARIANT_ORIGINAL) != 0 ||
        end != text.data() + text.size())
        throw CryptoError("invalid base64");
    out.resize(written);
    return out;
}

std::string key_id_for(const PublicKey& pk) {
    return sha256_hex(std::string_view(reinterpret_cast<const char*>(pk.data()), pk.size())).substr(0, 8);
}

SigningKey SigningKey::generate() {
    ensure_sodium();
    std::array<std::uint8_t, kSeedSize> seed{};
    randombytes_buf(seed.data(), seed.size());
    return from_seed(seed);
}

SigningKey SigningKey::from_seed(std::span<const std::uint8_t> seed) {
    ensure_sodium();
    if (seed.size() != kSeedSize) throw CryptoError("Ed25519 seed must be 32 bytes");
    SigningKey k;
    std::copy(seed.begin(), seed.end(), k.seed_.begin());
    crypto_sign_seed_keypair(k.public_key_.data(), k.secret_.data(), k.seed_.data());
    k.key_id_ = key_id_for(k.public_key_);
    return k;
}

SigningKey SigningKey::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw CryptoError("cannot open signing key file " + file.string());
    Json doc;
    try {
        doc = Json::parse(in);
    } catch (const Json::exception& e) {
        throw CryptoError("malformed signing key file: " + std::string(e.what()));
    }
    if (doc.value("algorithm", "") != "Ed25519") throw CryptoError("signing key algorithm must be Ed25519");
    return from_seed(base64_decode(doc.at("seed").get<std::string>()));
}

void SigningKey::save(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw CryptoError("cannot write signing key file " + file.string());
    Json doc{{"algorithm", "Ed25519"}, {"seed", base64_encode(seed_)}, {"key_id", key_id_}};
    out << doc.dump(2) << '\n';
}

std::string SigningKey::sign_base64(std::string_view message) const {
    std::array<std::uint8_t, kSignatureSize> sig{};
    crypto_sign_detached(sig.data(), nullptr, reinterpret_cast<const unsigned char*>(message.data()), message.size(),
                         secret_.data());
    return base64_encode(sig);
}

bool verify_signature(const PublicKey& pk, std::string_view message, std::string_view signature_base64) {
    std::vector<std::uint8_t> sig;
    try {
        sig = base64_decode(signature_base64);
    } catch (const CryptoError&) {
        return false;
    }
    if (sig.size() != kSignatureSize) return false;
    return crypto_sign_verify_detached(sig.data(), reinterpret_cast<const unsigned char*>(message.data()),
                                       message.size(), pk.data()) == 0;
}

PublicKeyRing parse_key_ring(const std::string& json_text) {
    PublicKeyRing ring;
    Json doc;
    try {
        doc = Json::parse(json_text);
    } catch (const Json::exception& e) {
        throw CryptoError("malformed keys file: " + std::string(e.what()));
    }
    if (!doc.is_object()) throw CryptoError("keys file must be a JSON object");
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        auto raw = base64_decode(it.value().get<std::string>());
        if (raw.size() != kPublicKeySize) throw CryptoError("public key for " + it.key() + " is not 32 bytes");
        PublicKey pk{};
        std::copy(raw.begin(), raw.end(), pk.begin());
        ring.emplace(it.key(), pk);
    }
    return ring;
}

std::string serialize_key_ring(const PublicKeyRing& ring) {
    Json doc = Json::object();
    for (const auto& [id, pk] : ring) doc[id] = base64_encode(pk);
    return canonical_serialize(doc);
}

} // namespace aarm::crypto
