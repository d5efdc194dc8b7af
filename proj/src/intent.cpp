#include "aarm/intent.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <sys/wait.h>
#include <unistd.h>

namespace aarm::intent {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (c < 0x80 && std::isalnum(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

void normalise(Vector& v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm == 0.0) return;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
}

} // namespace

BagOfTokensEmbedder::BagOfTokensEmbedder(std::size_t dimension) : dimension_(dimension) {
    if (dimension == 0) throw EmbedderError("embedder dimension must be positive");
}

Vector BagOfTokensEmbedder::embed(std::string_view text) const {
    Vector v(dimension_, 0.0);
    for (const auto& t : tokenize(text)) v[bucket(t)] += 1.0;
    normalise(v);
    return v;
}

ExecEmbedder::ExecEmbedder(std::string command, std::size_t dimension)
    : command_(std::move(command)), dimension_(dimension) {
    if (dimension == 0) throw EmbedderError("embedder dimension must be positive");
}

Vector ExecEmbedder::embed(std::string_view text) const {
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0) throw EmbedderError("pipe failed");
    if (pipe(out_pipe) != 0) {
        close(in_pipe[0]);
        close(in_pipe[1]);
        throw EmbedderError("pipe failed");
    }
    const pid_t pid = fork();
    if (pid < 0) throw EmbedderError("fork failed");
    if (pid == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[1]);
        close(out_pipe[0]);
        execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    std::size_t off = 0;
    while (off < text.size()) {
        const auto n = write(in_pipe[1], text.data() + off, text.size() - off);
        if (n <= 0) break;
        off += static_cast<std::size_t>(n);
    }
    close(in_pipe[1]);
    std::string output;
    char buf[4096];
    for (;;) {
        const auto n = read(out_pipe[0], buf, sizeof buf);
        if (n <= 0) break;
        output.append(buf, static_cast<std::size_t>(n));
    }
    close(out_pipe[0]);
    int status = 0;
    waitpid(pid, &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) throw EmbedderError("embedder command failed: " + command_);

    Vector v;
    std::stringstream ss(output);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            v.push_back(std::stod(cell));
        } catch (const std::exception&) {
            throw EmbedderError("embedder produced a non-numeric component");
        }
    }
    if (v.size() != dimension_) throw EmbedderError("embedder produced wrong dimension");
    for (double x : v)
        if (!std::isfinite(x)) throw EmbedderError("embedder produced a non-finite component");
    normalise(v);
    return v;
}

std::unique_ptr<Embedder> make_embedder(const Json& config) {
    const std::size_t dim = config.value("dimension", std::size_t{256});
    const auto choice = config.value("embedder", Json("builtin-bag"));
    if (choice.is_string() && choice.get<std::string>() == "builtin-bag") return std::make_unique<BagOfTokensEmbedder>(dim);
    if (choice.is_object() && choice.contains("exec"))
        return std::make_unique<ExecEmbedder>(choice.at("exec").get<std::string>(), dim);
    throw EmbedderError("unknown embedder configuration");
}

double cosine(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw EmbedderError("vector dimensions differ");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

void flatten(const Json& v, std::vector<std::string>& out) {
    switch (v.type()) {
        case Json::value_t::string: out.push_back(v.get<std::string>()); break;
        case Json::value_t::number_integer:
        case Json::value_t::number_unsigned:
        case Json::value_t::number_float: out.push_back(canonical_serialize(v)); break;
        case Json::value_t::array:
            for (const auto& e : v) flatten(e, out);
            break;
        case Json::value_t::object:
            for (auto it = v.begin(); it != v.end(); ++it) flatten(it.value(), out);  // std::map: key-sorted
            break;
        default: break;
    }
}

} // namespace

std::string action_descriptor(const Action& a) {
    std::vector<std::string> parts{a.tool, a.operation};
    flatten(a.parameters, parts);
    std::string out;
    for (const auto& p : parts) {
        if (p.empty()) continue;
        if (!out.empty()) out.push_back(' ');
        out += p;
    }
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
        return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
    });
    return out;
}

double text_distance(std::string_view original_request, std::string_view text, const Embedder& e) {
    if (original_request.empty()) throw NoBaselineError("no original request to measure drift against");
    const double c = std::clamp(cosine(e.embed(original_request), e.embed(text)), 0.0, 1.0);
    return 1.0 - c;
}

double distance(std::string_view original_request, const Action& a, const Embedder& e) {
    return text_distance(original_request, action_descriptor(a), e);
}

bool DriftTracker::update(double d) {
    if (!(d >= 0.0 && d <= 1.0)) throw std::domain_error("distance must lie in [0,1]");
    const bool was_over = escalated();
    distances_.push_back(d);
    running_max_ = std::max(running_max_, d);
    return !was_over && escalated();
}

} // namespace aarm::intent
