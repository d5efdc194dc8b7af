#include "aarm/orchestrator.hpp"

#include <algorithm>
#include <iostream>

namespace aarm {

namespace {

using receipts::OutcomeStatus;

constexpr std::pair<PendingStatus, std::string_view> kStatuses[] = {
    {PendingStatus::Pending, "PENDING"},
    {PendingStatus::ResolvedAllow, "RESOLVED_ALLOW"},
    {PendingStatus::ResolvedDeny, "RESOLVED_DENY"},
    {PendingStatus::TimedOut, "TIMED_OUT"},
};

void collect_strings(const Json& v, std::vector<const std::string*>& out) {
    if (v.is_string()) out.push_back(v.get_ptr<const std::string*>());
    else if (v.is_object() || v.is_array())
        for (const auto& x : v) collect_strings(x, out);
}

receipts::Materials materials(const Action& a, const ledger::ContextSnapshot& snap, const Decision& d,
                              const std::string& digest) {
    receipts::Materials m;
    m.action = a;
    m.context = receipts::ContextSummary::of(snap);
    m.decision = d;
    m.policy_set_digest = digest;
    return m;
}

std::string join(const std::vector<std::string>& v, std::string_view sep) {
    std::string out;
    for (const auto& s : v) {
        if (!out.empty()) out += sep;
        out += s;
    }
    return out;
}

} // namespace

std::string_view to_string(PendingStatus s) {
    for (auto [v, n] : kStatuses)
        if (v == s) return n;
    return "PENDING";
}

Json PendingItem::to_json() const {
    Json j{{"item_id", item_id},
           {"session_id", session_id},
           {"action", action},
           {"kind", to_string(kind)},
           {"created_at", created_at},
           {"deadline", deadline},
           {"defer_reason", defer_reason ? Json(to_string(*defer_reason)) : Json()},
           {"context_snapshot_digest", context_snapshot_digest},
           {"status", to_string(status)},
           {"resolver", resolver ? Json(*resolver) : Json()},
           {"decision", decision},
           {"receipt_id", receipt_id},
           {"depends_on", depends_on ? Json(*depends_on) : Json()},
           {"follow_up_receipt_id", follow_up_receipt_id ? Json(*follow_up_receipt_id) : Json()},
           {"final_decision", final_decision ? Json(*final_decision) : Json()},
           {"outcome", outcome ? Json(receipts::to_string(*outcome)) : Json()},
           {"output", output ? *output : Json()},
           {"error", error ? Json(*error) : Json()}};
    return j;
}

const std::vector<std::string>& primary_resource_keys() {
    static const std::vector<std::string> keys{"resource", "table", "path", "file", "url", "account", "document", "id"};
    return keys;
}

std::optional<std::uint64_t> classify_dependency(const Action& a, const std::vector<PendingItem>& pending) {
    std::vector<const std::string*> strings;
    collect_strings(a.parameters, strings);
    for (const auto& item : pending) {
        if (item.terminal()) continue;
        for (const auto* s : strings)
            if (s->find(item.item_id) != std::string::npos) return item.action.seq;
        if (item.action.tool != a.tool || !a.parameters.is_object() || !item.action.parameters.is_object()) continue;
        for (const auto& key : primary_resource_keys()) {
            auto x = a.parameters.find(key), y = item.action.parameters.find(key);
            if (x != a.parameters.end() && y != item.action.parameters.end() && *x == *y) return item.action.seq;
        }
    }
    return std::nullopt;
}

struct Orchestrator::Session {
    mutable std::mutex mutex;
    mutable std::condition_variable cv;
    std::string id;
    Identity identity;
    std::optional<std::string> original_request;
    std::optional<intent::Vector> baseline;
    intent::DriftTracker drift;
    std::uint64_t next_seq = 1;
    std::map<std::uint64_t, PendingItem> items;  // by action seq
    std::set<std::string> used_tools;

    PendingItem* find_item(const std::string& item_id) {
        for (auto& [seq, item] : items)
            if (item.item_id == item_id) return &item;
        return nullptr;
    }
};

Orchestrator::Orchestrator(ledger::ContextLedger& ledger, receipts::ReceiptVault& vault, telemetry::Hub& telemetry,
                           std::shared_ptr<const policy::PolicySet> policies,
                           std::shared_ptr<const intent::Embedder> embedder, ToolForwarder& forwarder,
                           std::shared_ptr<const Clock> clock, std::shared_ptr<IdSource> ids, OrchestratorConfig config)
    : ledger_(ledger),
      vault_(vault),
      telemetry_(telemetry),
      embedder_(std::move(embedder)),
      forwarder_(forwarder),
      clock_(std::move(clock)),
      ids_(std::move(ids)),
      policies_(std::move(policies)),
      config_(std::move(config)) {
    if (!config_.journal_file.empty()) journal_.open(config_.journal_file, std::ios::app | std::ios::binary);
}

void Orchestrator::set_policies(std::shared_ptr<const policy::PolicySet> policies) {
    std::lock_guard lock(config_mutex_);
    policies_ = std::move(policies);
}

std::shared_ptr<const policy::PolicySet> Orchestrator::policies() const {
    std::lock_guard lock(config_mutex_);
    return policies_;
}

void Orchestrator::set_config(OrchestratorConfig config) {
    std::lock_guard lock(config_mutex_);
    config_ = std::move(config);
}

OrchestratorConfig Orchestrator::config() const {
    std::lock_guard lock(config_mutex_);
    return config_;
}

std::shared_ptr<Orchestrator::Session> Orchestrator::session(const std::string& session_id) const {
    std::lock_guard lock(sessions_mutex_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw OrchestratorError(OrchestratorError::Code::NoSession, "unknown session " + session_id);
    return it->second;
}

bool Orchestrator::has_session(const std::string& session_id) const {
    std::lock_guard lock(sessions_mutex_);
    return sessions_.count(session_id) != 0;
}

std::vector<std::string> Orchestrator::sessions() const {
    std::lock_guard lock(sessions_mutex_);
    std::vector<std::string> out;
    for (const auto& [id, s] : sessions_) out.push_back(id);
    return out;
}

std::string Orchestrator::init_session(const std::string& session_id, const Identity& identity,
                                       std::optional<std::string> original_request) {
    if (auto v = validate_identity(identity); !v.empty()) {
        std::vector<std::string> fields;
        for (const auto& x : v) fields.push_back(x.field);
        throw OrchestratorError(OrchestratorError::Code::Invalid, "identity incomplete: " + join(fields, ", "));
    }
    if (identity.session_id != session_id)
        throw OrchestratorError(OrchestratorError::Code::Invalid, "identity.session_id does not match session_id");
    if (original_request && original_request->empty()) original_request.reset();

    const auto ps = policies();
    auto s = std::make_shared<Session>();
    s->id = session_id;
    s->identity = identity;
    s->original_request = original_request;
    s->drift = intent::DriftTracker(ps->defaults().drift_threshold);
    if (original_request) s->baseline = embedder_->embed(*original_request);

    {
        std::lock_guard lock(sessions_mutex_);
        if (sessions_.count(session_id))
            throw OrchestratorError(OrchestratorError::Code::SessionExists, "session " + session_id + " already exists");
        try {
            ledger_.init_session({session_id, original_request, identity, format_rfc3339(clock_->now()), ps->digest()});
        } catch (const ledger::LedgerError& e) {
            if (e.code() == ledger::LedgerError::Code::SessionExists)
                throw OrchestratorError(OrchestratorError::Code::SessionExists, e.what());
            throw OrchestratorError(OrchestratorError::Code::Invalid, e.what());
        }
        sessions_.emplace(session_id, s);
    }
    return ps->digest();
}

std::optional<double> Orchestrator::distance_for(const Session& s, const Action& a) const {
    if (!s.baseline) return std::nullopt;
    const double c = std::clamp(intent::cosine(*s.baseline, embedder_->embed(intent::action_descriptor(a))), 0.0, 1.0);
    return 1.0 - c;
}

std::size_t Orchestrator::pending_defers_locked(const Session& s) const {
    std::size_t n = 0;
    for (const auto& [seq, item] : s.items)
        if (!item.terminal() && item.kind == DecisionKind::Defer) ++n;
    return n;
}

std::vector<PendingItem> Orchestrator::pending_locked(const Session& s) const {
    std::vector<PendingItem> out;
    for (const auto& [seq, item] : s.items)
        if (!item.terminal()) out.push_back(item);
    return out;
}

ledger::ContextSnapshot Orchestrator::snapshot_locked(Session& s, std::optional<double> prospective) const {
    auto snap = ledger_.current_context(s.id);
    snap.deferred_count = pending_defers_locked(s);
    if (s.baseline) {
        double cum = s.drift.running_max();
        if (prospective) cum = std::max(cum, *prospective);
        snap.cumulative_drift = cum;
        snap.confidence = 1.0 - cum;
    }
    return snap;
}

ledger::DerivedSignals Orchestrator::signals_locked(Session& s, const Action& a, const std::optional<Json>& output,
                                                    std::optional<double> distance, bool executed,
                                                    const policy::PolicySet& ps) const {
    ledger::DerivedSignals sig;
    sig.semantic_distance = distance;
    if (s.baseline) {
        sig.cumulative_drift = s.drift.running_max();
        sig.confidence = 1.0 - s.drift.running_max();
    }
    sig.scope_expansion = !s.used_tools.count(a.tool) && s.drift.escalated();
    if (executed) {
        sig.data_classifications = classify_action(a, ps.classification());
        sig.entities = extract_entities(a.parameters);
        if (output) {
            auto more = classify_output(a, *output, ps.classification());
            sig.data_classifications.insert(more.begin(), more.end());
            auto ents = extract_entities(*output);
            sig.entities.insert(ents.begin(), ents.end());
        }
    }
    return sig;
}

std::optional<std::string> Orchestrator::issue(const receipts::Materials& m, const std::string& session_id,
                                               const Identity& identity, const std::string& tool) {
    Json r;
    try {
        r = vault_.issue(m);
    } catch (const receipts::VaultError& e) {
        std::cerr << "ERROR receipt not issued: " << e.what() << '\n';
        return std::nullopt;
    }
    telemetry::Event ev;
    ev.kind = telemetry::EventKind::Decision;
    ev.session_id = session_id;
    ev.receipt_id = r["receipt_id"].get<std::string>();
    ev.decision = m.decision.kind;
    ev.severity = m.decision.kind != DecisionKind::Deny ? telemetry::Severity::Info
                  : m.decision.forbidden                ? telemetry::Severity::Critical
                                                        : telemetry::Severity::Warn;
    ev.attributes = {{"tool", tool},
                     {"operation", m.action.operation},
                     {"seq", std::to_string(m.action.seq)},
                     {"human_principal", identity.human_principal},
                     {"agent_identity", identity.agent_identity},
                     {"reason", m.decision.reason},
                     {"matched_policies", join(m.decision.matched_policies, ",")}};
    if (m.outcome) ev.attributes["outcome"] = std::string(receipts::to_string(m.outcome->status));
    if (m.deferral) ev.attributes["resolution_method"] = m.deferral->resolution_method;
    telemetry_.emit(std::move(ev));
    return r["receipt_id"].get<std::string>();
}

void Orchestrator::journal(const Json& record) {
    std::lock_guard lock(journal_mutex_);
    if (!journal_.is_open()) return;
    journal_ << canonical_serialize(record) << '\n';
    journal_.flush();
}

void Orchestrator::notify(Session& s) { s.cv.notify_all(); }

void Orchestrator::emit_pending_resolved(const PendingItem& item) {
    telemetry::Event ev;
    ev.kind = telemetry::EventKind::PendingResolved;
    ev.session_id = item.session_id;
    ev.receipt_id = item.follow_up_receipt_id;
    ev.decision = item.final_decision ? std::optional(item.final_decision->kind) : std::nullopt;
    ev.severity = item.status == PendingStatus::TimedOut ? telemetry::Severity::Warn : telemetry::Severity::Info;
    ev.attributes = {{"item_id", item.item_id},
                     {"status", std::string(to_string(item.status))},
                     {"resolver", item.resolver.value_or("")},
                     {"tool", item.action.tool},
                     {"human_principal", item.action.identity.human_principal}};
    telemetry_.emit(std::move(ev));
}

bool Orchestrator::identity_agrees(const Session& s, const Identity& id) const {
    if (id.human_principal != s.identity.human_principal || id.service_identity != s.identity.service_identity ||
        id.agent_identity != s.identity.agent_identity || id.session_id != s.identity.session_id)
        return false;
    for (const auto& scope : id.privilege_scope)
        if (std::find(s.identity.privilege_scope.begin(), s.identity.privilege_scope.end(), scope) ==
            s.identity.privilege_scope.end())
            return false;
    return true;
}

SubmitResult Orchestrator::submit(const std::string& session_id, const std::string& tool, const std::string& operation,
                                  const Json& parameters, const std::optional<Identity>& identity) {
    auto s = session(session_id);
    std::lock_guard lock(s->mutex);
    Action a;
    a.tool = tool;
    a.operation = operation;
    a.parameters = parameters;
    // A per-call identity that is incomplete or foreign is refused; the receipt
    // keeps the session's identity so it still names all four layers.
    std::optional<std::string> refusal;
    a.identity = s->identity;
    if (identity) {
        if (auto v = validate_identity(*identity); !v.empty()) {
            std::vector<std::string> fields;
            for (const auto& x : v) fields.push_back(x.field);
            refusal = "identity incomplete: " + join(fields, ", ");
        } else if (!identity_agrees(*s, *identity)) {
            refusal = "identity does not match session";
        } else {
            a.identity = *identity;
        }
    }
    a.timestamp = format_rfc3339(clock_->now());
    a.seq = s->next_seq++;
    a.context_ref = {session_id, ledger_.current_context(session_id).ledger_seq};
    auto r = enforce_locked(*s, std::move(a), refusal);
    if (r.status == OutcomeStatus::Executed || r.status == OutcomeStatus::ExecutedWithError) settle_locked(*s);
    notify(*s);
    return r;
}

SubmitResult Orchestrator::enforce_locked(Session& s, Action action, const std::optional<std::string>& refusal) {
    const auto ps = policies();
    const auto cfg = config();
    SubmitResult r;

    const auto d = distance_for(s, action);
    auto snap = snapshot_locked(s, d);
    const double conf = snap.confidence.value_or(0.0);
    std::optional<std::uint64_t> previous;
    if (action.seq > 1) previous = action.seq - 1;

    Decision decision;
    if (refusal) {
        decision = Decision::deny({}, *refusal, conf);
    } else if (!forwarder_.knows(action.tool)) {
        decision = Decision::deny({}, "unknown tool", conf);
    } else if (auto v = validate_action(action, previous); !v.empty()) {
        std::vector<std::string> fields;
        for (const auto& x : v) fields.push_back(x.field);
        decision = Decision::deny({}, "invalid action: " + join(fields, ", "), conf);
    } else if (!identity_agrees(s, action.identity)) {
        decision = Decision::deny({}, "identity does not match session", conf);
    } else {
        try {
            decision = policy::evaluate(action, snap, *ps);
        } catch (const std::exception& e) {
            decision = Decision::deny({}, std::string("policy evaluation failed: ") + e.what(), conf);
        }
    }

    std::optional<std::uint64_t> depends_on;
    if (decision.kind != DecisionKind::Deny) depends_on = classify_dependency(action, pending_locked(s));
    if (depends_on && decision.kind != DecisionKind::Defer)
        decision = Decision::defer(decision.matched_policies,
                                   "depends on pending action " + std::to_string(*depends_on),
                                   DeferReason::DependsOnPending, decision.confidence);
    if (decision.kind == DecisionKind::Defer && pending_defers_locked(s) >= cfg.cascade_limit)
        decision = Decision::deny(decision.matched_policies, "cascade bound exceeded", decision.confidence);

    if (d && s.drift.update(*d)) {
        telemetry::Event ev;
        ev.kind = telemetry::EventKind::DriftEscalation;
        ev.session_id = s.id;
        ev.severity = telemetry::Severity::Warn;
        ev.attributes = {{"running_max", std::to_string(s.drift.running_max())},
                         {"threshold", std::to_string(s.drift.threshold())},
                         {"seq", std::to_string(action.seq)},
                         {"tool", action.tool},
                         {"human_principal", action.identity.human_principal}};
        telemetry_.emit(std::move(ev));
    }

    r.action = action;
    r.decision = decision;

    if (!vault_.available()) {
        r.decision = Decision::deny(decision.matched_policies, "receipt store unavailable", decision.confidence);
        r.status = OutcomeStatus::Blocked;
        r.error = "receipt store unavailable";
        ledger_.append_entry(s.id, action, std::nullopt, signals_locked(s, action, std::nullopt, d, false, *ps),
                             ledger::Disposition::Blocked);
        return r;
    }

    auto m = materials(action, snap, decision, ps->digest());
    switch (decision.kind) {
    case DecisionKind::Deny: {
        ledger_.append_entry(s.id, action, std::nullopt, signals_locked(s, action, std::nullopt, d, false, *ps),
                             ledger::Disposition::Blocked);
        r.status = OutcomeStatus::Blocked;
        m.outcome = receipts::Outcome{OutcomeStatus::Blocked, std::nullopt, std::nullopt};
        r.receipt_id = issue(m, s.id, action.identity, action.tool);
        return r;
    }
    case DecisionKind::Allow:
    case DecisionKind::Modify: {
        Action executed = action;
        if (decision.modified_parameters) executed.parameters = *decision.modified_parameters;
        journal({{"phase", "authorized"},
                 {"session_id", s.id},
                 {"seq", action.seq},
                 {"decision", to_string(decision.kind)},
                 {"context_snapshot_digest", snap.digest()},
                 {"at", format_rfc3339(clock_->now())}});
        auto fr = forwarder_.call(executed.tool, executed.operation, executed.parameters);
        std::optional<Json> output;
        if (fr.ok) output = fr.output;
        else output = Json{{"error", fr.error}};
        const auto disp = fr.ok ? ledger::Disposition::Executed : ledger::Disposition::ExecutedWithError;
        ledger_.append_entry(s.id, executed, output, signals_locked(s, executed, fr.ok ? output : std::nullopt, d, true, *ps),
                             disp);
        s.used_tools.insert(action.tool);
        r.status = fr.ok ? OutcomeStatus::Executed : OutcomeStatus::ExecutedWithError;
        if (fr.ok) r.output = fr.output;
        else r.error = fr.error;
        m.outcome = receipts::Outcome{r.status, r.error, std::nullopt};
        r.receipt_id = issue(m, s.id, action.identity, action.tool);
        journal({{"phase", "completed"}, {"session_id", s.id}, {"seq", action.seq}, {"status", to_string(r.status)}});
        return r;
    }
    case DecisionKind::StepUp:
    case DecisionKind::Defer: {
        const auto now = clock_->now();
        PendingItem item;
        item.item_id = ids_->next_uuid();
        item.session_id = s.id;
        item.action = action;
        item.kind = decision.kind;
        item.created_at = format_rfc3339(now);
        item.deadline = format_rfc3339(now + (decision.kind == DecisionKind::StepUp ? cfg.step_up_timeout
                                                                                     : cfg.defer_timeout));
        item.defer_reason = decision.defer_reason;
        item.context_snapshot_digest = snap.digest();
        item.decision = decision;
        item.depends_on = depends_on;
        ledger_.append_entry(s.id, action, std::nullopt, signals_locked(s, action, std::nullopt, d, false, *ps),
                             ledger::Disposition::Parked);
        m.outcome = receipts::Outcome{OutcomeStatus::Parked, std::nullopt, item.item_id};
        auto rid = issue(m, s.id, action.identity, action.tool);
        if (!rid) {
            r.decision = Decision::deny(decision.matched_policies, "receipt store unavailable", decision.confidence);
            r.status = OutcomeStatus::Blocked;
            r.error = "receipt store unavailable";
            return r;
        }
        item.receipt_id = *rid;
        r.status = OutcomeStatus::Parked;
        r.receipt_id = rid;
        r.item_id = item.item_id;
        {
            std::lock_guard lock(sessions_mutex_);
            item_sessions_[item.item_id] = s.id;
        }
        telemetry::Event ev;
        ev.kind = telemetry::EventKind::PendingCreated;
        ev.session_id = s.id;
        ev.receipt_id = rid;
        ev.decision = decision.kind;
        ev.attributes = {{"item_id", item.item_id},
                         {"deadline", item.deadline},
                         {"tool", action.tool},
                         {"human_principal", action.identity.human_principal}};
        if (decision.defer_reason) ev.attributes["defer_reason"] = std::string(to_string(*decision.defer_reason));
        telemetry_.emit(std::move(ev));
        s.items.emplace(action.seq, std::move(item));
        return r;
    }
    }
    return r;
}

void Orchestrator::execute_item_locked(Session& s, PendingItem& item, const Decision& decision,
                                       const std::string& method, std::optional<receipts::Approval> approval,
                                       const std::string& resolver) {
    const auto ps = policies();
    const auto d = distance_for(s, item.action);
    const auto snap = snapshot_locked(s, d);

    Action executed = item.action;
    if (decision.modified_parameters) executed.parameters = *decision.modified_parameters;
    journal({{"phase", "authorized"},
             {"session_id", s.id},
             {"seq", item.action.seq},
             {"item_id", item.item_id},
             {"decision", to_string(decision.kind)},
             {"context_snapshot_digest", snap.digest()},
             {"at", format_rfc3339(clock_->now())}});
    auto fr = forwarder_.call(executed.tool, executed.operation, executed.parameters);
    std::optional<Json> output = fr.ok ? std::optional<Json>(fr.output) : std::optional<Json>(Json{{"error", fr.error}});
    ledger_.append_entry(s.id, executed, output,
                         signals_locked(s, executed, fr.ok ? output : std::nullopt, d, true, *ps),
                         fr.ok ? ledger::Disposition::ResumedExecuted : ledger::Disposition::ResumedWithError);
    s.used_tools.insert(item.action.tool);

    auto m = materials(item.action, snap, decision, ps->digest());
    m.approval = std::move(approval);
    m.deferral = receipts::Deferral{item.defer_reason, method, format_rfc3339(clock_->now()), item.receipt_id};
    const auto status = fr.ok ? OutcomeStatus::Executed : OutcomeStatus::ExecutedWithError;
    m.outcome = receipts::Outcome{status, fr.ok ? std::nullopt : std::optional(fr.error), std::nullopt};

    item.status = PendingStatus::ResolvedAllow;
    item.resolver = resolver;
    item.final_decision = decision;
    item.outcome = status;
    if (fr.ok) item.output = fr.output;
    else item.error = fr.error;
    item.follow_up_receipt_id = issue(m, s.id, item.action.identity, item.action.tool);
    journal({{"phase", "completed"}, {"session_id", s.id}, {"seq", item.action.seq}, {"status", to_string(status)}});
    emit_pending_resolved(item);
}

void Orchestrator::block_item_locked(Session& s, PendingItem& item, const Decision& decision, PendingStatus status,
                                     const std::string& method, std::optional<receipts::Approval> approval,
                                     const std::string& resolver) {
    const auto ps = policies();
    const auto snap = snapshot_locked(s, distance_for(s, item.action));
    auto m = materials(item.action, snap, decision, ps->digest());
    m.approval = std::move(approval);
    m.deferral = receipts::Deferral{item.defer_reason, method, format_rfc3339(clock_->now()), item.receipt_id};
    m.outcome = receipts::Outcome{OutcomeStatus::Blocked, std::nullopt, std::nullopt};

    item.status = status;
    item.resolver = resolver;
    item.final_decision = decision;
    item.outcome = OutcomeStatus::Blocked;
    item.follow_up_receipt_id = issue(m, s.id, item.action.identity, item.action.tool);
    emit_pending_resolved(item);
}

void Orchestrator::convert_to_step_up_locked(Session& s, PendingItem& item, const Decision& decision) {
    const auto ps = policies();
    const auto cfg = config();
    const auto snap = snapshot_locked(s, distance_for(s, item.action));
    auto m = materials(item.action, snap, decision, ps->digest());
    const auto now = clock_->now();
    m.deferral = receipts::Deferral{item.defer_reason, "re-evaluation", format_rfc3339(now), item.receipt_id};
    m.outcome = receipts::Outcome{OutcomeStatus::Parked, std::nullopt, item.item_id};
    auto rid = issue(m, s.id, item.action.identity, item.action.tool);
    if (!rid) return;

    item.kind = DecisionKind::StepUp;
    item.decision = decision;
    item.deadline = format_rfc3339(now + cfg.step_up_timeout);
    item.receipt_id = *rid;
    item.context_snapshot_digest = snap.digest();

    telemetry::Event ev;
    ev.kind = telemetry::EventKind::PendingCreated;
    ev.session_id = s.id;
    ev.receipt_id = rid;
    ev.decision = DecisionKind::StepUp;
    ev.attributes = {{"item_id", item.item_id},
                     {"deadline", item.deadline},
                     {"tool", item.action.tool},
                     {"human_principal", item.action.identity.human_principal},
                     {"converted_from", "DEFER"}};
    telemetry_.emit(std::move(ev));
}

bool Orchestrator::reevaluate_locked(Session& s, PendingItem& item, std::vector<Resolution>* out) {
    if (item.terminal() || item.kind != DecisionKind::Defer || !vault_.available()) return false;
    const auto ps = policies();

    if (item.depends_on) {
        auto parent = s.items.find(*item.depends_on);
        if (parent != s.items.end()) {
            if (!parent->second.terminal()) return false;
            if (parent->second.status != PendingStatus::ResolvedAllow) {
                auto dec = Decision::deny(item.decision.matched_policies,
                                          "dependency on action " + std::to_string(*item.depends_on) + " was denied",
                                          item.decision.confidence);
                block_item_locked(s, item, dec, PendingStatus::ResolvedDeny, "re-evaluation", std::nullopt,
                                  "auto:dependency");
                if (out) out->push_back({item.item_id, dec});
                return true;
            }
        }
    }

    const auto snap = snapshot_locked(s, distance_for(s, item.action));
    Decision dec;
    try {
        dec = policy::evaluate(item.action, snap, *ps);
    } catch (const std::exception&) {
        return false;
    }

    if (dec.kind != DecisionKind::Deny) {
        std::vector<PendingItem> earlier;
        for (const auto& [seq, other] : s.items)
            if (seq < item.action.seq && !other.terminal()) earlier.push_back(other);
        if (auto dep = classify_dependency(item.action, earlier)) {
            item.depends_on = dep;
            return false;
        }
    }

    switch (dec.kind) {
    case DecisionKind::Defer: return false;
    case DecisionKind::Allow:
    case DecisionKind::Modify: execute_item_locked(s, item, dec, "re-evaluation", std::nullopt, "auto:re-evaluation"); break;
    case DecisionKind::Deny:
        block_item_locked(s, item, dec, PendingStatus::ResolvedDeny, "re-evaluation", std::nullopt, "auto:re-evaluation");
        break;
    case DecisionKind::StepUp: convert_to_step_up_locked(s, item, dec); break;
    }
    if (out) out->push_back({item.item_id, dec});
    return true;
}

void Orchestrator::settle_locked(Session& s) {
    // Each pass either resolves an item or stops; an item changes state at most twice.
    for (std::size_t pass = 0; pass <= 2 * s.items.size() + 1; ++pass) {
        bool progress = false;
        for (auto& [seq, item] : s.items)
            if (reevaluate_locked(s, item, nullptr)) progress = true;
        if (!progress) break;
    }
}

std::vector<Resolution> Orchestrator::resolve_deferred_auto(const std::string& session_id) {
    auto s = session(session_id);
    std::lock_guard lock(s->mutex);
    std::vector<Resolution> out;
    for (std::size_t pass = 0; pass <= 2 * s->items.size() + 1; ++pass) {
        bool progress = false;
        for (auto& [seq, item] : s->items)
            if (reevaluate_locked(*s, item, &out)) progress = true;
        if (!progress) break;
    }
    notify(*s);
    return out;
}

PendingItem Orchestrator::submit_approval_decision(const std::string& item_id, const std::string& approver,
                                                   DecisionKind verdict, const std::string& note) {
    std::string session_id;
    {
        std::lock_guard lock(sessions_mutex_);
        auto it = item_sessions_.find(item_id);
        if (it == item_sessions_.end()) throw OrchestratorError(OrchestratorError::Code::NotFound, "unknown item " + item_id);
        session_id = it->second;
    }
    if (verdict != DecisionKind::Allow && verdict != DecisionKind::Deny)
        throw OrchestratorError(OrchestratorError::Code::Invalid, "verdict must be ALLOW or DENY");
    if (!config().approvers.count(approver)) {
        telemetry::Event ev;
        ev.kind = telemetry::EventKind::ApproverRejected;
        ev.session_id = session_id;
        ev.severity = telemetry::Severity::Warn;
        ev.attributes = {{"item_id", item_id}, {"approver", approver}};
        telemetry_.emit(std::move(ev));
        throw OrchestratorError(OrchestratorError::Code::Forbidden, "not an authorized approver");
    }

    auto s = session(session_id);
    std::lock_guard lock(s->mutex);
    PendingItem* item = s->find_item(item_id);
    if (!item) throw OrchestratorError(OrchestratorError::Code::NotFound, "unknown item " + item_id);
    if (item->terminal())
        throw OrchestratorError(OrchestratorError::Code::Conflict,
                                "item already " + std::string(to_string(item->status)));
    if (!vault_.available()) throw OrchestratorError(OrchestratorError::Code::Conflict, "receipt store unavailable");

    receipts::Approval approval{approver, std::string(to_string(verdict)), format_rfc3339(clock_->now()), note};
    if (verdict == DecisionKind::Allow) {
        if (item->depends_on) {
            auto parent = s->items.find(*item->depends_on);
            if (parent != s->items.end() && !parent->second.terminal())
                throw OrchestratorError(OrchestratorError::Code::Conflict,
                                        "depends on pending item " + parent->second.item_id);
        }
        auto dec = Decision::allow(item->decision.matched_policies, "approved by " + approver, item->decision.confidence);
        execute_item_locked(*s, *item, dec, "human_allow", approval, approver);
    } else {
        auto dec = Decision::deny(item->decision.matched_policies,
                                  note.empty() ? "denied by " + approver : "denied by " + approver + ": " + note,
                                  item->decision.confidence);
        block_item_locked(*s, *item, dec, PendingStatus::ResolvedDeny, "human_deny", approval, approver);
    }
    PendingItem result = *item;
    settle_locked(*s);
    notify(*s);
    return result;
}

std::vector<std::string> Orchestrator::expire_timeouts(TimePoint now) {
    std::vector<std::shared_ptr<Session>> all;
    {
        std::lock_guard lock(sessions_mutex_);
        for (const auto& [id, s] : sessions_) all.push_back(s);
    }
    std::vector<std::string> expired;
    for (auto& s : all) {
        std::lock_guard lock(s->mutex);
        bool changed = false;
        for (auto& [seq, item] : s->items) {
            if (item.terminal()) continue;
            auto deadline = parse_rfc3339(item.deadline);
            if (!deadline || *deadline > now) continue;
            if (!vault_.available()) continue;
            auto dec = Decision::deny(item.decision.matched_policies,
                                      item.kind == DecisionKind::StepUp ? "approval timed out" : "deferral timed out",
                                      item.decision.confidence);
            std::optional<receipts::Approval> approval;
            if (item.kind == DecisionKind::StepUp)
                approval = receipts::Approval{"timeout", "DENY", format_rfc3339(clock_->now()), ""};
            block_item_locked(*s, item, dec, PendingStatus::TimedOut, "timeout", approval, "timeout");
            expired.push_back(item.item_id);
            changed = true;
        }
        if (changed) settle_locked(*s);
        notify(*s);
    }
    return expired;
}

PendingItem Orchestrator::item(const std::string& item_id) const {
    std::string session_id;
    {
        std::lock_guard lock(sessions_mutex_);
        auto it = item_sessions_.find(item_id);
        if (it == item_sessions_.end()) throw OrchestratorError(OrchestratorError::Code::NotFound, "unknown item " + item_id);
        session_id = it->second;
    }
    auto s = session(session_id);
    std::lock_guard lock(s->mutex);
    return *s->find_item(item_id);
}

std::vector<PendingItem> Orchestrator::pending(const std::optional<std::string>& session_id, bool include_terminal) const {
    std::vector<std::shared_ptr<Session>> selected;
    {
        std::lock_guard lock(sessions_mutex_);
        for (const auto& [id, s] : sessions_)
            if (!session_id || id == *session_id) selected.push_back(s);
    }
    std::vector<PendingItem> out;
    for (const auto& s : selected) {
        std::lock_guard lock(s->mutex);
        for (const auto& [seq, item] : s->items)
            if (include_terminal || !item.terminal()) out.push_back(item);
    }
    return out;
}

PendingItem Orchestrator::wait_terminal(const std::string& item_id, std::chrono::milliseconds hold) const {
    std::string session_id;
    {
        std::lock_guard lock(sessions_mutex_);
        auto it = item_sessions_.find(item_id);
        if (it == item_sessions_.end()) throw OrchestratorError(OrchestratorError::Code::NotFound, "unknown item " + item_id);
        session_id = it->second;
    }
    auto s = session(session_id);
    std::unique_lock lock(s->mutex);
    auto* item = s->find_item(item_id);
    s->cv.wait_for(lock, hold, [&] { return item->terminal(); });
    return *item;
}

std::optional<intent::DriftTracker> Orchestrator::drift(const std::string& session_id) const {
    auto s = session(session_id);
    std::lock_guard lock(s->mutex);
    if (!s->baseline) return std::nullopt;
    return s->drift;
}

} // namespace aarm
