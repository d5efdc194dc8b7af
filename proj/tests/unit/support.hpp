#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "aarm/clock.hpp"
#include "aarm/model.hpp"

namespace aarm::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("aarm-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

inline TimePoint epoch() { return *parse_rfc3339("2025-01-15T10:00:00Z"); }

inline Identity identity(const std::string& session = "sess_abc123") {
    return Identity{"alice@company.com", "agent-svc@iam", "agent-7", session, {"crm.read", "email.send"}};
}

inline Action action(std::string tool, std::string operation, Json params, std::uint64_t seq = 1,
                     const std::string& session = "sess_abc123") {
    Action a;
    a.tool = std::move(tool);
    a.operation = std::move(operation);
    a.parameters = std::move(params);
    a.identity = identity(session);
    a.context_ref = {session, seq - 1};
    a.timestamp = "2025-01-15T10:30:00.000Z";
    a.seq = seq;
    return a;
}

} // namespace aarm::test
