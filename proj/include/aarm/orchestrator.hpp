#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "aarm/clock.hpp"
#include "aarm/ids.hpp"
#include "aarm/intent.hpp"
#include "aarm/ledger.hpp"
#include "aarm/model.hpp"
#include "aarm/policy.hpp"
#include "aarm/receipts.hpp"
#include "aarm/telemetry.hpp"

namespace aarm {

struct ForwardResult {
    bool ok = false;
    Json output;
    std::string error;
};

// The path to the real tool. Only the orchestrator calls it, and only for a
// terminal ALLOW or MODIFY.
class ToolForwarder {
public:
    virtual ~ToolForwarder() = default;
    virtual bool knows(const std::string& tool) const = 0;
    virtual ForwardResult call(const std::string& tool, const std::string& operation, const Json& parameters) = 0;
};

enum class PendingStatus { Pending, ResolvedAllow, ResolvedDeny, TimedOut };
std::string_view to_string(PendingStatus s);

struct PendingItem {
    std::string item_id;
    std::string session_id;
    Action action;
    DecisionKind kind = DecisionKind::Defer;  // StepUp or Defer
    std::string created_at;
    std::string deadline;
    std::optional<DeferReason> defer_reason;
    std::string context_snapshot_digest;
    PendingStatus status = PendingStatus::Pending;
    std::optional<std::string> resolver;  // approver principal, "auto:<rule>" or "timeout"
    Decision decision;                    // the decision that parked it
    std::string receipt_id;               // latest PARKED receipt
    std::optional<std::uint64_t> depends_on;  // action seq of the parked parent

    // Terminal data
    std::optional<std::string> follow_up_receipt_id;
    std::optional<Decision> final_decision;
    std::optional<receipts::OutcomeStatus> outcome;
    std::optional<Json> output;
    std::optional<std::string> error;

    bool terminal() const { return status != PendingStatus::Pending; }
    Json to_json() const;
};

struct OrchestratorConfig {
    std::chrono::milliseconds step_up_timeout = std::chrono::seconds(300);
    std::chrono::milliseconds defer_timeout = std::chrono::seconds(120);
    std::size_t cascade_limit = 8;
    std::set<std::string> approvers;  // human principals allowed to decide pending items
    std::filesystem::path journal_file;  // empty: no journal
};

class OrchestratorError : public std::runtime_error {
public:
    enum class Code { NotFound, Conflict, Forbidden, NoSession, SessionExists, Invalid };
    OrchestratorError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

struct SubmitResult {
    Action action;
    Decision decision;
    receipts::OutcomeStatus status = receipts::OutcomeStatus::Blocked;
    std::optional<Json> output;
    std::optional<std::string> error;
    std::optional<std::string> receipt_id;  // absent only when no receipt could be issued
    std::optional<std::string> item_id;
};

struct Resolution {
    std::string item_id;
    Decision decision;
};

// Same tool and same value under one of these parameter keys makes two
// actions touch the same resource.
const std::vector<std::string>& primary_resource_keys();

// Dependent when a string parameter mentions a pending item's id or its
// `${pending:<id>}` placeholder, or when tool and primary resource coincide.
// Returns the action seq of the first such pending item.
std::optional<std::uint64_t> classify_dependency(const Action& a, const std::vector<PendingItem>& pending);

class Orchestrator {
public:
    Orchestrator(ledger::ContextLedger& ledger, receipts::ReceiptVault& vault, telemetry::Hub& telemetry,
                 std::shared_ptr<const policy::PolicySet> policies, std::shared_ptr<const intent::Embedder> embedder,
                 ToolForwarder& forwarder, std::shared_ptr<const Clock> clock, std::shared_ptr<IdSource> ids,
                 OrchestratorConfig config = {});

    void set_policies(std::shared_ptr<const policy::PolicySet> policies);
    std::shared_ptr<const policy::PolicySet> policies() const;
    void set_config(OrchestratorConfig config);
    OrchestratorConfig config() const;

    // Opens a session; returns the policy set digest bound to it.
    std::string init_session(const std::string& session_id, const Identity& identity,
                             std::optional<std::string> original_request);
    bool has_session(const std::string& session_id) const;
    std::vector<std::string> sessions() const;

    // Builds the action (seq, identity, timestamp), evaluates and enforces it.
    // A per-call identity replaces the session's for this action; it is
    // validated like any other and must agree with the session.
    SubmitResult submit(const std::string& session_id, const std::string& tool, const std::string& operation,
                        const Json& parameters, const std::optional<Identity>& identity = std::nullopt);

    PendingItem submit_approval_decision(const std::string& item_id, const std::string& approver,
                                         DecisionKind verdict, const std::string& note);
    std::vector<Resolution> resolve_deferred_auto(const std::string& session_id);
    std::vector<std::string> expire_timeouts(TimePoint now);

    PendingItem item(const std::string& item_id) const;
    std::vector<PendingItem> pending(const std::optional<std::string>& session_id, bool include_terminal = false) const;
    // Blocks until the item is terminal or `hold` elapses (wall time).
    PendingItem wait_terminal(const std::string& item_id, std::chrono::milliseconds hold) const;

    std::optional<intent::DriftTracker> drift(const std::string& session_id) const;

private:
    struct Session;

    std::shared_ptr<Session> session(const std::string& session_id) const;
    SubmitResult enforce_locked(Session& s, Action action, const std::optional<std::string>& refusal = std::nullopt);
    bool identity_agrees(const Session& s, const Identity& id) const;
    void settle_locked(Session& s);
    bool reevaluate_locked(Session& s, PendingItem& item, std::vector<Resolution>* out);
    void execute_item_locked(Session& s, PendingItem& item, const Decision& decision, const std::string& method,
                             std::optional<receipts::Approval> approval, const std::string& resolver);
    void block_item_locked(Session& s, PendingItem& item, const Decision& decision, PendingStatus status,
                           const std::string& method, std::optional<receipts::Approval> approval,
                           const std::string& resolver);
    void convert_to_step_up_locked(Session& s, PendingItem& item, const Decision& decision);

    ledger::ContextSnapshot snapshot_locked(Session& s, std::optional<double> prospective_distance) const;
    ledger::DerivedSignals signals_locked(Session& s, const Action& a, const std::optional<Json>& output,
                                          std::optional<double> distance, bool executed,
                                          const policy::PolicySet& ps) const;
    std::optional<double> distance_for(const Session& s, const Action& a) const;
    std::size_t pending_defers_locked(const Session& s) const;
    std::vector<PendingItem> pending_locked(const Session& s) const;

    std::optional<std::string> issue(const receipts::Materials& m, const std::string& session_id,
                                     const Identity& identity, const std::string& tool);
    void journal(const Json& record);
    void emit_pending_resolved(const PendingItem& item);
    void notify(Session& s);

    ledger::ContextLedger& ledger_;
    receipts::ReceiptVault& vault_;
    telemetry::Hub& telemetry_;
    std::shared_ptr<const intent::Embedder> embedder_;
    ToolForwarder& forwarder_;
    std::shared_ptr<const Clock> clock_;
    std::shared_ptr<IdSource> ids_;

    mutable std::mutex config_mutex_;
    std::shared_ptr<const policy::PolicySet> policies_;
    OrchestratorConfig config_;

    mutable std::mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::map<std::string, std::string> item_sessions_;  // item_id -> session_id

    std::mutex journal_mutex_;
    std::ofstream journal_;
};

} // namespace aarm
