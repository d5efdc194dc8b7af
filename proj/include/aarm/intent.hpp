#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "aarm/model.hpp"

namespace aarm::intent {

using Vector = std::vector<double>;

class EmbedderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Embedder {
public:
    virtual ~Embedder() = default;
    // Unit-length vector of dimension(), or the zero vector when the text has no tokens.
    virtual Vector embed(std::string_view text) const = 0;
    virtual std::size_t dimension() const = 0;
};

// Lowercased maximal ASCII-alphanumeric runs.
std::vector<std::string> tokenize(std::string_view text);
std::uint64_t fnv1a64(std::string_view bytes);

// Hashed bag of tokens: each token lands in bucket fnv1a64(token) % dimension,
// the count vector is L2-normalised.
class BagOfTokensEmbedder final : public Embedder {
public:
    explicit BagOfTokensEmbedder(std::size_t dimension = 256);
    Vector embed(std::string_view text) const override;
    std::size_t dimension() const override { return dimension_; }
    std::size_t bucket(std::string_view token) const { return fnv1a64(token) % dimension_; }

private:
    std::size_t dimension_;
};

// Runs `command` through /bin/sh, writes the text on stdin and expects
// `dimension` comma-separated decimals on stdout. The result is re-normalised.
class ExecEmbedder final : public Embedder {
public:
    ExecEmbedder(std::string command, std::size_t dimension);
    Vector embed(std::string_view text) const override;
    std::size_t dimension() const override { return dimension_; }

private:
    std::string command_;
    std::size_t dimension_;
};

// {"embedder": "builtin-bag" | {"exec": "<command>"}, "dimension": D}
std::unique_ptr<Embedder> make_embedder(const Json& config);

double cosine(const Vector& a, const Vector& b);

// "tool operation v1 v2 ..." with parameter string/number values flattened in
// key-sorted order, lowercased.
std::string action_descriptor(const Action& a);

class NoBaselineError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// 1 - max(0, cosine(embed(original_request), embed(descriptor(a)))), in [0,1].
double distance(std::string_view original_request, const Action& a, const Embedder& e);
double text_distance(std::string_view original_request, std::string_view text, const Embedder& e);

// Running maximum of per-action distances. update() reports an escalation
// only on the call where running_max first exceeds the threshold.
class DriftTracker {
public:
    explicit DriftTracker(double threshold = 0.6) : threshold_(threshold) {}

    bool update(double d);  // throws std::domain_error outside [0,1]
    double running_max() const { return running_max_; }
    const std::vector<double>& distances() const { return distances_; }
    double threshold() const { return threshold_; }
    bool escalated() const { return running_max_ > threshold_; }

private:
    double threshold_;
    std::vector<double> distances_;
    double running_max_ = 0.0;
};

} // namespace aarm::intent
