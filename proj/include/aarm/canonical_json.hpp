#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

namespace aarm {

using Json = nlohmann::json;

class CanonicalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Canonical UTF-8 JSON: keys sorted by code point, no whitespace, shortest
// round-trip numbers, minimal string escaping. Everything that is hashed or
// signed goes through this function.
//
// Throws CanonicalError on non-finite numbers, invalid UTF-8 or discarded
// values. Those indicate a bug upstream and must never reach a signer.
std::string canonical_serialize(const Json& value);

// Parses `text` and re-serializes it; true iff the input already was canonical.
bool is_canonical(const std::string& text);

} // namespace aarm
