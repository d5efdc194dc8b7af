#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "aarm/canonical_json.hpp"

namespace aarm {

// The four identity layers plus privilege scope bound to every action.
struct Identity {
    std::string human_principal;
    std::string service_identity;
    std::string agent_identity;
    std::string session_id;
    std::vector<std::string> privilege_scope;

    bool operator==(const Identity&) const = default;
};

void to_json(Json& j, const Identity& id);
void from_json(const Json& j, Identity& id);

struct ContextRef {
    std::string session_id;
    std::uint64_t seq = 0;  // latest ledger entry visible when the action was submitted

    bool operator==(const ContextRef&) const = default;
};

struct Action {
    std::string tool;
    std::string operation;
    Json parameters = Json::object();
    Identity identity;
    ContextRef context_ref;
    std::string timestamp;  // RFC 3339 UTC, informational
    std::uint64_t seq = 0;  // server-assigned, authoritative ordering

    bool operator==(const Action&) const = default;
};

void to_json(Json& j, const Action& a);
void from_json(const Json& j, Action& a);

enum class DecisionKind { Allow, Deny, Modify, StepUp, Defer };

std::string_view to_string(DecisionKind k);
std::optional<DecisionKind> parse_decision_kind(std::string_view s);

enum class DeferReason {
    MissingContextField,
    PriorityConflict,
    LowConfidence,
    DependsOnPending,   // blocked behind a parked action it references
    PolicyDirected,     // a policy whose decision is DEFER matched
};

std::string_view to_string(DeferReason r);
std::optional<DeferReason> parse_defer_reason(std::string_view s);

class DecisionInvariantError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Construct through the factories; each one checks the invariants that tie
// kind, modified_parameters, defer_reason and reason together.
struct Decision {
    DecisionKind kind = DecisionKind::Deny;
    std::vector<std::string> matched_policies;  // priority descending
    std::string reason;
    std::optional<Json> modified_parameters;    // iff Modify
    std::optional<DeferReason> defer_reason;    // iff Defer
    double confidence = 0.0;
    bool forbidden = false;                     // produced by the static stage

    static Decision allow(std::vector<std::string> matched, std::string reason, double confidence);
    static Decision deny(std::vector<std::string> matched, std::string reason, double confidence,
                         bool forbidden = false);
    static Decision modify(std::vector<std::string> matched, std::string reason, Json modified, double confidence);
    static Decision step_up(std::vector<std::string> matched, std::string reason, double confidence);
    static Decision defer(std::vector<std::string> matched, std::string reason, DeferReason why, double confidence);

    void check() const;  // throws DecisionInvariantError
    bool operator==(const Decision&) const = default;
};

void to_json(Json& j, const Decision& d);

struct Violation {
    std::string field;
    std::string message;
    bool operator==(const Violation&) const = default;
};

// Empty result means the action is acceptable for evaluation.
// `previous_seq` is the seq of the session's prior action, if any.
std::vector<Violation> validate_action(const Action& a, std::optional<std::uint64_t> previous_seq = std::nullopt);
std::vector<Violation> validate_identity(const Identity& id, std::string_view prefix = "identity");

} // namespace aarm
