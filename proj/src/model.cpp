#include "aarm/model.hpp"

#include "aarm/clock.hpp"

#include <array>
#include <cmath>

namespace aarm {

void to_json(Json& j, const Identity& id) {
    j = Json{{"human_principal", id.human_principal},
             {"service_identity", id.service_identity},
             {"agent_identity", id.agent_identity},
             {"session_id", id.session_id},
             {"privilege_scope", id.privilege_scope}};
}

void from_json(const Json& j, Identity& id) {
    id.human_principal = j.value("human_principal", "");
    id.service_identity = j.value("service_identity", "");
    id.agent_identity = j.value("agent_identity", "");
    id.session_id = j.value("session_id", "");
    id.privilege_scope = j.value("privilege_scope", std::vector<std::string>{});
}

void to_json(Json& j, const Action& a) {
    j = Json{{"tool", a.tool},
             {"operation", a.operation},
             {"parameters", a.parameters},
             {"identity", a.identity},
             {"context_ref", {{"session_id", a.context_ref.session_id}, {"seq", a.context_ref.seq}}},
             {"timestamp", a.timestamp},
             {"seq", a.seq}};
}

void from_json(const Json& j, Action& a) {
    a.tool = j.value("tool", "");
    a.operation = j.value("operation", "");
    a.parameters = j.value("parameters", Json::object());
    a.identity = j.value("identity", Identity{});
    if (auto it = j.find("context_ref"); it != j.end()) {
        a.context_ref.session_id = it->value("session_id", "");
        a.context_ref.seq = it->value("seq", std::uint64_t{0});
    }
    a.timestamp = j.value("timestamp", "");
    a.seq = j.value("seq", std::uint64_t{0});
}

namespace {

constexpr std::array<std::pair<DecisionKind, std::string_view>, 5> kKinds{{
    {DecisionKind::Allow, "ALLOW"},
    {DecisionKind::Deny, "DENY"},
    {DecisionKind::Modify, "MODIFY"},
    {DecisionKind::StepUp, "STEP_UP"},
    {DecisionKind::Defer, "DEFER"},
}};

constexpr std::array<std::pair<DeferReason, std::string_view>, 5> kReasons{{
    {DeferReason::MissingContextField, "MISSING_CONTEXT_FIELD"},
    {DeferReason::PriorityConflict, "PRIORITY_CONFLICT"},
    {DeferReason::LowConfidence, "LOW_CONFIDENCE"},
    {DeferReason::DependsOnPending, "DEPENDS_ON_PENDING"},
    {DeferReason::PolicyDirected, "POLICY_DIRECTED"},
}};

} // namespace

std::string_view to_string(DecisionKind k) {
    for (const auto& [kind, name] : kKinds)
        if (kind == k) return name;
    return "DENY";
}

std::optional<DecisionKind> parse_decision_kind(std::string_view s) {
    for (const auto& [kind, name] : kKinds)
        if (name == s) return kind;
    return std::nullopt;
}

std::string_view to_string(DeferReason r) {
    for (const auto& [reason, name] : kReasons)
        if (reason == r) return name;
    return "MISSING_CONTEXT_FIELD";
}

std::optional<DeferReason> parse_defer_reason(std::string_view s) {
    for (const auto& [reason, name] : kReasons)
        if (name == s) return reason;
    return std::nullopt;
}

void Decision::check() const {
    if ((kind == DecisionKind::Modify) != modified_parameters.has_value())
        throw DecisionInvariantError("modified_parameters must be present iff kind is MODIFY");
    if ((kind == DecisionKind::Defer) != defer_reason.has_value())
        throw DecisionInvariantError("defer_reason must be present iff kind is DEFER");
    if ((kind == DecisionKind::Deny || kind == DecisionKind::Defer || kind == DecisionKind::StepUp) && reason.empty())
        throw DecisionInvariantError("reason is required for DENY, DEFER and STEP_UP");
    if (!(confidence >= 0.0 && confidence <= 1.0)) throw DecisionInvariantError("confidence must lie in [0,1]");
    if (forbidden && kind != DecisionKind::Deny) throw DecisionInvariantError("forbidden decisions are always DENY");
}

Decision Decision::allow(std::vector<std::string> matched, std::string reason, double confidence) {
    Decision d{DecisionKind::Allow, std::move(matched), std::move(reason), std::nullopt, std::nullopt, confidence};
    d.check();
    return d;
}

Decision Decision::deny(std::vector<std::string> matched, std::string reason, double confidence, bool forbidden) {
    Decision d{DecisionKind::Deny, std::move(matched), std::move(reason), std::nullopt, std::nullopt, confidence};
    d.forbidden = forbidden;
    d.check();
    return d;
}

Decision Decision::modify(std::vector<std::string> matched, std::string reason, Json modified, double confidence) {
    Decision d{DecisionKind::Modify, std::move(matched), std::move(reason), std::move(modified), std::nullopt,
               confidence};
    d.check();
    return d;
}

Decision Decision::step_up(std::vector<std::string> matched, std::string reason, double confidence) {
    Decision d{DecisionKind::StepUp, std::move(matched), std::move(reason), std::nullopt, std::nullopt, confidence};
    d.check();
    return d;
}

Decision Decision::defer(std::vector<std::string> matched, std::string reason, DeferReason why, double confidence) {
    Decision d{DecisionKind::Defer, std::move(matched), std::move(reason), std::nullopt, why, confidence};
    d.check();
    return d;
}

void to_json(Json& j, const Decision& d) {
    j = Json{{"kind", to_string(d.kind)},
             {"matched_policies", d.matched_policies},
             {"reason", d.reason},
             {"confidence", d.confidence},
             {"forbidden", d.forbidden}};
    if (d.modified_parameters) j["modified_parameters"] = *d.modified_parameters;
    if (d.defer_reason) j["defer_reason"] = to_string(*d.defer_reason);
}

std::vector<Violation> validate_identity(const Identity& id, std::string_view prefix) {
    std::vector<Violation> out;
    const std::string p(prefix);
    auto need = [&](const std::string& value, const char* field) {
        if (value.empty()) out.push_back({p + "." + field, std::string(field) + " must be non-empty"});
    };
    need(id.human_principal, "human_principal");
    need(id.service_identity, "service_identity");
    need(id.agent_identity, "agent_identity");
    need(id.session_id, "session_id");
    return out;
}

std::vector<Violation> validate_action(const Action& a, std::optional<std::uint64_t> previous_seq) {
    std::vector<Violation> out;
    if (a.tool.empty()) out.push_back({"tool", "tool must be non-empty"});
    if (a.operation.empty()) out.push_back({"operation", "operation must be non-empty"});
    if (!a.parameters.is_object()) out.push_back({"parameters", "parameters must be an object"});
    auto identity = validate_identity(a.identity);
    out.insert(out.end(), identity.begin(), identity.end());
    if (!parse_rfc3339(a.timestamp)) out.push_back({"timestamp", "timestamp must be RFC 3339 UTC"});
    if (a.seq == 0) out.push_back({"seq", "seq must be positive"});
    else if (previous_seq && a.seq <= *previous_seq)
        out.push_back({"seq", "seq must strictly increase within a session"});
    if (!a.context_ref.session_id.empty() && a.context_ref.session_id != a.identity.session_id)
        out.push_back({"context_ref.session_id", "context reference names a different session"});
    return out;
}

} // namespace aarm
