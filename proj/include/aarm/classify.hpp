#pragma once

#include <optional>
#include <regex>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "aarm/model.hpp"

namespace aarm {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using LabelSet = std::set<std::string>;

// Ordered sensitivity lattice, lowest first.
std::vector<std::string> default_lattice();

struct PatternRule {
    std::string pattern;
    std::regex regex;
    std::string label;
};

struct MappingRule {
    std::string tool;
    std::optional<std::string> operation;  // nullopt: any operation of the tool
    LabelSet labels;
};

struct ClassificationRules {
    std::vector<std::string> lattice = default_lattice();
    std::vector<PatternRule> patterns;
    std::vector<MappingRule> mappings;
    bool luhn_pii = true;  // 13-19 digit runs passing the Luhn check -> highest label "PII"

    const std::string& highest() const { return lattice.back(); }

    // Email and SSN patterns; both map to PII.
    static ClassificationRules defaults(std::vector<std::string> lattice = default_lattice());
    // {"patterns":[{"regex","label"}], "mappings":[{"tool","operation"?,"labels"}]}
    // merged on top of the defaults. Throws ConfigError on a bad regex or unknown label.
    static ClassificationRules from_json(const Json& doc, std::vector<std::string> lattice);
};

bool luhn_valid(std::string_view digits);

// Labels for an action's request parameters. Unlabelled parameters stay unlabelled.
LabelSet classify_action(const Action& a, const ClassificationRules& rules);

// Labels for a tool output: explicit `_classification` labels, pattern hits
// and tool/operation mappings. When none fire, the highest lattice label.
LabelSet classify_output(const Action& a, const Json& output, const ClassificationRules& rules);

// Emails, DNS-name-shaped tokens and values of keys named id/user/account.
std::set<std::string> extract_entities(const Json& value);

} // namespace aarm
