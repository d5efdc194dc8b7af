#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "aarm/canonical_json.hpp"

namespace aarm::conformance {

enum class Status { Pass, Fail, Skipped };
std::string_view to_string(Status s);

struct Check {
    std::string name;
    bool ok = false;
    std::string detail;
};

struct Result {
    std::string id;
    Status status = Status::Skipped;
    std::string reason;  // why SKIPPED, or the first failed check
    std::vector<Check> checks;
    Json transcript = Json::array();
};

struct Report {
    std::vector<Result> requirements;
    std::vector<Result> scenarios;
    std::string level;  // "none" | "AARM Core" | "AARM Extended"
    bool complete = false;  // every requirement R1-R8 was run

    Json to_json() const;
    std::string to_text() const;
    bool passed() const;  // exit status 0 when true
};

// Core iff R1-R6 pass; Extended iff R1-R8 pass. R9 is never required.
std::string level_for(const std::vector<Result>& requirements);

struct Options {
    std::optional<std::string> target;           // running gateway in test mode; in-process when absent
    std::optional<std::filesystem::path> target_data_dir;  // file-level checks against a remote target
    std::vector<std::string> requirements;       // R1..R9; empty with no scenarios = everything
    std::vector<std::string> scenarios;
    std::filesystem::path scenario_dir;          // defaults to the bundled scenarios/
    std::filesystem::path work_dir;              // defaults to a directory under the system temp dir
    bool parallel = false;
    std::uint64_t seed = 7;
};

const std::vector<std::string>& requirement_ids();
std::vector<std::string> scenario_ids(const std::filesystem::path& scenario_dir);

Report run(Options options);

} // namespace aarm::conformance
