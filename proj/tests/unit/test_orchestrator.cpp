#include <gtest/gtest.h>

#include <random>

#include "aarm/orchestrator.hpp"
#include "support.hpp"

using namespace aarm;
using receipts::OutcomeStatus;

namespace {

const char* kPolicy = R"({
  "version": 1,
  "named_lists": {"internal_domains": ["company.com"]},
  "policies": [
    {"id": "block_drop_database", "match": ["MATCHES", "action.params.sql", "DROP\\s+DATABASE", "i"],
     "decision": "DENY", "priority": 1000, "forbidden": true, "reason": "Forbidden: DROP DATABASE"},
    {"id": "block_external_after_pii",
     "match": ["AND", ["==", "action.tool", "email"], ["NOT_IN", "action.params.to", "@internal_domains"],
               ["CONTAINS", "context.data_classification", "PII"]],
     "decision": "DENY", "priority": 100, "reason": "External email after PII access"},
    {"id": "redact_chat", "match": ["==", "action.tool", "chat"], "decision": "MODIFY", "priority": 20,
     "reason": "chat text is redacted", "transform": [{"path": "action.params.body", "value": "[redacted]"}]},
    {"id": "approve_payments", "match": ["==", "action.tool", "payments"], "decision": "STEP_UP", "priority": 50,
     "reason": "payments need approval"},
    {"id": "rotate_when_on_task", "match": ["AND", ["==", "action.tool", "secrets"], [">=", "context.confidence", 0.8]],
     "decision": "ALLOW", "priority": 50},
    {"id": "deny_rotate", "match": ["==", "action.tool", "secrets"], "decision": "DENY", "priority": 10,
     "reason": "Credential rotation outside a routine maintenance window"},
    {"id": "crm_needs_login", "match": ["AND", ["==", "action.tool", "crm"],
                                        ["NOT", ["CONTAINS", "context.prior_tools", "auth"]]],
     "decision": "DENY", "priority": 40, "reason": "log in first"},
    {"id": "crm_export_review", "match": ["AND", ["==", "action.tool", "crm"], ["==", "action.operation", "export"]],
     "decision": "STEP_UP", "priority": 40, "reason": "exports are reviewed"},
    {"id": "crm_read", "match": ["AND", ["==", "action.tool", "crm"], ["==", "action.operation", "read"]],
     "decision": "ALLOW", "priority": 40},
    {"id": "allow_db", "match": ["==", "action.tool", "db"], "decision": "ALLOW", "priority": 10},
    {"id": "allow_email", "match": ["==", "action.tool", "email"], "decision": "ALLOW", "priority": 10},
    {"id": "allow_web", "match": ["==", "action.tool", "web"], "decision": "ALLOW", "priority": 10},
    {"id": "allow_auth", "match": ["==", "action.tool", "auth"], "decision": "ALLOW", "priority": 10}
  ]
})";

class FakeTools final : public ToolForwarder {
public:
    struct Call {
        std::string tool, operation;
        Json parameters;
    };
    std::vector<Call> calls;
    std::set<std::string> failing;
    std::map<std::string, Json> outputs;

    bool knows(const std::string& tool) const override { return tool != "unregistered"; }
    ForwardResult call(const std::string& tool, const std::string& operation, const Json& parameters) override {
        calls.push_back({tool, operation, parameters});
        if (failing.count(tool)) return {false, nullptr, "upstream unreachable"};
        if (auto it = outputs.find(tool); it != outputs.end()) return {true, it->second, ""};
        return {true, Json{{"ok", true}, {"_classification", "PUBLIC"}}, ""};
    }
};

struct Rig {
    test::TempDir dir;
    std::shared_ptr<ManualClock> clock = std::make_shared<ManualClock>(test::epoch());
    std::shared_ptr<IdSource> ids = std::make_shared<IdSource>(7);
    std::shared_ptr<crypto::SigningKey> key = std::make_shared<crypto::SigningKey>(crypto::SigningKey::generate());
    ledger::ContextLedger ledger{dir / "data"};
    receipts::ReceiptVault vault{dir / "data", key, clock, ids};
    telemetry::Hub hub{dir / "data", clock, ids};
    FakeTools tools;
    std::unique_ptr<Orchestrator> orch;

    explicit Rig(const std::string& policy = kPolicy, std::size_t cascade = 8) {
        OrchestratorConfig cfg;
        cfg.approvers = {"approver@company.com"};
        cfg.cascade_limit = cascade;
        cfg.journal_file = dir / "data" / "journal.jsonl";
        orch = std::make_unique<Orchestrator>(
            ledger, vault, hub, std::make_shared<policy::PolicySet>(policy::parse_policy_set(policy)),
            std::make_shared<intent::BagOfTokensEmbedder>(), tools, clock, ids, cfg);
    }

    void open(const std::string& id, std::optional<std::string> request = std::nullopt) {
        orch->init_session(id, test::identity(id), std::move(request));
    }
    SubmitResult call(const std::string& id, const std::string& tool, const std::string& op, Json params = Json::object()) {
        return orch->submit(id, tool, op, params);
    }
    std::vector<Json> receipts(const std::string& id) { return vault.query({.session_id = id}); }
    std::size_t events(telemetry::EventKind k, std::optional<DecisionKind> d = std::nullopt) {
        telemetry::Filter f;
        f.kinds = {k};
        if (d) f.decisions = {*d};
        return hub.events(f).size();
    }
};

} // namespace

TEST(Dependency, Examples) {
    PendingItem parked;
    parked.item_id = "item-42";
    parked.action = test::action("email", "send", {{"to", "x@partner.com"}}, 3);
    auto placeholder = test::action("email", "send", {{"body", "see ${pending:item-42}"}}, 4);
    EXPECT_EQ(classify_dependency(placeholder, {parked}), 3u);

    PendingItem update;
    update.item_id = "0b7c2f6e-5d1a-4c3e-9f00-1a2b3c4d5e6f";
    update.action = test::action("db", "update", {{"table", "orders"}, {"set", "x"}}, 5);
    EXPECT_EQ(classify_dependency(test::action("db", "query", {{"table", "orders"}}, 6), {update}), 5u);
    EXPECT_FALSE(classify_dependency(test::action("db", "query", {{"table", "users"}}, 6), {update}));
    EXPECT_FALSE(classify_dependency(test::action("web", "search", {{"q", "orders"}}, 6), {parked}));

    update.status = PendingStatus::ResolvedDeny;
    EXPECT_FALSE(classify_dependency(test::action("db", "query", {{"table", "orders"}}, 6), {update}));
}

TEST(Orchestrator, DenyNeverReachesTool) {
    Rig r;
    r.open("s1");
    auto res = r.call("s1", "db", "execute", {{"sql", "drop database production"}});
    EXPECT_EQ(res.status, OutcomeStatus::Blocked);
    EXPECT_EQ(res.decision.kind, DecisionKind::Deny);
    EXPECT_TRUE(r.tools.calls.empty());
    auto rs = r.receipts("s1");
    ASSERT_EQ(rs.size(), 1u);
    EXPECT_EQ(rs[0]["decision"]["matched_policies"], Json::array({"block_drop_database"}));
    EXPECT_EQ(rs[0]["outcome"]["status"], "BLOCKED");
    auto ev = r.hub.events();
    ASSERT_EQ(ev.size(), 1u);
    EXPECT_EQ(ev[0].severity, telemetry::Severity::Critical);
    EXPECT_EQ(ev[0].receipt_id, rs[0]["receipt_id"].get<std::string>());
}

TEST(Orchestrator, ExfiltrationBlockedInternalAllowed) {
    Rig r;
    r.open("s1", "Summarize Q3 sales for leadership");
    r.tools.outputs["db"] = Json{{"rows", {"alice@company.com", "4111111111111111"}}};
    EXPECT_EQ(r.call("s1", "db", "query", {{"sql", "SELECT * FROM customers"}}).status, OutcomeStatus::Executed);
    EXPECT_EQ(r.ledger.current_context("s1").data_classifications, LabelSet{"PII"});
    auto ext = r.call("s1", "email", "send", {{"to", "analyst@partner.com"}});
    EXPECT_EQ(ext.decision.kind, DecisionKind::Deny);
    EXPECT_EQ(ext.decision.reason, "External email after PII access");
    auto internal = r.call("s1", "email", "send", {{"to", "bob@company.com"}});
    EXPECT_EQ(internal.decision.kind, DecisionKind::Allow);
    ASSERT_EQ(r.tools.calls.size(), 2u);
    EXPECT_EQ(r.tools.calls[1].parameters["to"], "bob@company.com");
    EXPECT_EQ(r.events(telemetry::EventKind::Decision, DecisionKind::Deny), 1u);
}

TEST(Orchestrator, ModifyForwardsTransformedParameters) {
    Rig r;
    r.open("s1");
    auto res = r.call("s1", "chat", "post", {{"channel", "general"}, {"body", "the password is hunter2"}});
    EXPECT_EQ(res.decision.kind, DecisionKind::Modify);
    ASSERT_EQ(r.tools.calls.size(), 1u);
    EXPECT_EQ(r.tools.calls[0].parameters["body"], "[redacted]");
    auto rc = r.receipts("s1").at(0);
    EXPECT_EQ(rc["action"]["parameters"]["body"], "the password is hunter2");
    EXPECT_EQ(rc["decision"]["modified_parameters"]["body"], "[redacted]");
}

TEST(Orchestrator, ToolErrorIsAnOutcome) {
    Rig r;
    r.open("s1");
    r.tools.failing.insert("web");
    auto res = r.call("s1", "web", "search", {{"q", "x"}});
    EXPECT_EQ(res.status, OutcomeStatus::ExecutedWithError);
    auto rc = r.receipts("s1").at(0);
    EXPECT_EQ(rc["outcome"]["status"], "EXECUTED_WITH_ERROR");
    EXPECT_EQ(rc["outcome"]["error"], "upstream unreachable");
}

TEST(Orchestrator, UnknownToolDenied) {
    Rig r;
    r.open("s1");
    auto res = r.call("s1", "unregistered", "op");
    EXPECT_EQ(res.decision.kind, DecisionKind::Deny);
    EXPECT_EQ(res.decision.reason, "unknown tool");
    EXPECT_TRUE(r.tools.calls.empty());
}

TEST(Orchestrator, SessionErrors) {
    Rig r;
    r.open("s1");
    try {
        r.open("s1");
        FAIL();
    } catch (const OrchestratorError& e) {
        EXPECT_EQ(e.code(), OrchestratorError::Code::SessionExists);
    }
    auto id = test::identity("s2");
    id.human_principal.clear();
    EXPECT_THROW(r.orch->init_session("s2", id, std::nullopt), OrchestratorError);
    EXPECT_FALSE(r.orch->has_session("s2"));
    try {
        r.call("nope", "db", "query");
        FAIL();
    } catch (const OrchestratorError& e) {
        EXPECT_EQ(e.code(), OrchestratorError::Code::NoSession);
    }
}

TEST(Orchestrator, PerCallIdentityMissingLayerDenied) {
    Rig r;
    r.open("s1");
    auto id = test::identity("s1");
    id.agent_identity.clear();
    auto res = r.orch->submit("s1", "db", "query", {{"sql", "select 1"}}, id);
    EXPECT_EQ(res.decision.kind, DecisionKind::Deny);
    EXPECT_NE(res.decision.reason.find("identity.agent_identity"), std::string::npos);
    auto foreign = test::identity("s1");
    foreign.human_principal = "mallory@company.com";
    EXPECT_EQ(r.orch->submit("s1", "db", "query", {{"sql", "select 1"}}, foreign).decision.kind, DecisionKind::Deny);
    EXPECT_TRUE(r.tools.calls.empty());
    for (const auto& rc : r.receipts("s1"))
        for (const char* layer : {"human_principal", "service_identity", "agent_identity", "session_id"})
            EXPECT_FALSE(rc["identity"][layer].get<std::string>().empty());
}

TEST(Orchestrator, CascadeBound) {
    Rig r;
    r.open("s1");
    for (int i = 0; i < 8; ++i) {
        auto res = r.call("s1", "secrets", "rotate", {{"name", "key" + std::to_string(i)}});
        ASSERT_EQ(res.decision.kind, DecisionKind::Defer) << i;
        EXPECT_EQ(res.decision.defer_reason, DeferReason::MissingContextField);
    }
    auto ninth = r.call("s1", "secrets", "rotate", {{"name", "key9"}});
    EXPECT_EQ(ninth.decision.kind, DecisionKind::Deny);
    EXPECT_EQ(ninth.decision.reason, "cascade bound exceeded");
    EXPECT_EQ(r.orch->pending("s1").size(), 8u);
    EXPECT_EQ(r.ledger.current_context("s1").history.size(), 9u);
    // step-ups are not defers and do not count against the bound
    EXPECT_EQ(r.call("s1", "payments", "send", {{"amount", 5}}).decision.kind, DecisionKind::StepUp);
}

TEST(Orchestrator, ApproveStepUpExecutes) {
    Rig r;
    r.open("s1");
    auto parked = r.call("s1", "payments", "send", {{"amount", 5}});
    ASSERT_EQ(parked.status, OutcomeStatus::Parked);
    EXPECT_TRUE(r.tools.calls.empty());
    auto item = r.orch->submit_approval_decision(*parked.item_id, "approver@company.com", DecisionKind::Allow, "ok");
    EXPECT_EQ(item.status, PendingStatus::ResolvedAllow);
    EXPECT_EQ(item.resolver, "approver@company.com");
    ASSERT_EQ(r.tools.calls.size(), 1u);
    auto rs = r.receipts("s1");
    ASSERT_EQ(rs.size(), 2u);
    EXPECT_EQ(rs[1]["approval"]["approver"], "approver@company.com");
    EXPECT_EQ(rs[1]["approval"]["verdict"], "ALLOW");
    EXPECT_EQ(rs[1]["deferral"]["parent_receipt_id"], rs[0]["receipt_id"]);
    EXPECT_EQ(rs[1]["deferral"]["resolution_method"], "human_allow");
    EXPECT_EQ(rs[1]["outcome"]["status"], "EXECUTED");
    try {
        r.orch->submit_approval_decision(*parked.item_id, "approver@company.com", DecisionKind::Deny, "");
        FAIL();
    } catch (const OrchestratorError& e) {
        EXPECT_EQ(e.code(), OrchestratorError::Code::Conflict);
    }
    EXPECT_EQ(r.receipts("s1").size(), 2u);
}

TEST(Orchestrator, DenyDeferredRotation) {
    Rig r;
    r.open("s1");
    auto parked = r.call("s1", "secrets", "rotate", {{"name", "prod"}});
    auto item = r.orch->submit_approval_decision(*parked.item_id, "approver@company.com", DecisionKind::Deny, "no");
    EXPECT_EQ(item.status, PendingStatus::ResolvedDeny);
    EXPECT_EQ(item.outcome, OutcomeStatus::Blocked);
    auto follow = r.receipts("s1").back();
    EXPECT_EQ(follow["deferral"]["resolution_method"], "human_deny");
    EXPECT_EQ(follow["deferral"]["defer_reason"], "MISSING_CONTEXT_FIELD");
    EXPECT_TRUE(r.tools.calls.empty());
}

TEST(Orchestrator, ApprovalErrors) {
    Rig r;
    r.open("s1");
    auto parked = r.call("s1", "payments", "send", {{"amount", 5}});
    try {
        r.orch->submit_approval_decision("missing", "approver@company.com", DecisionKind::Allow, "");
        FAIL();
    } catch (const OrchestratorError& e) {
        EXPECT_EQ(e.code(), OrchestratorError::Code::NotFound);
    }
    try {
        r.orch->submit_approval_decision(*parked.item_id, "mallory@company.com", DecisionKind::Allow, "");
        FAIL();
    } catch (const OrchestratorError& e) {
        EXPECT_EQ(e.code(), OrchestratorError::Code::Forbidden);
    }
    EXPECT_EQ(r.events(telemetry::EventKind::ApproverRejected), 1u);
    EXPECT_TRUE(r.tools.calls.empty());
    EXPECT_EQ(r.orch->item(*parked.item_id).status, PendingStatus::Pending);
}

TEST(Orchestrator, StepUpTimesOutToDeny) {
    Rig r;
    r.open("s1");
    auto parked = r.call("s1", "payments", "send", {{"amount", 5}});
    EXPECT_TRUE(r.orch->expire_timeouts(r.clock->now()).empty());
    r.clock->advance(std::chrono::seconds(299));
    EXPECT_TRUE(r.orch->expire_timeouts(r.clock->now()).empty());
    r.clock->advance(std::chrono::seconds(2));
    auto expired = r.orch->expire_timeouts(r.clock->now());
    ASSERT_EQ(expired, std::vector<std::string>{*parked.item_id});
    auto item = r.orch->item(*parked.item_id);
    EXPECT_EQ(item.status, PendingStatus::TimedOut);
    EXPECT_EQ(item.final_decision->kind, DecisionKind::Deny);
    auto follow = r.receipts("s1").back();
    EXPECT_EQ(follow["decision"]["kind"], "DENY");
    EXPECT_EQ(follow["deferral"]["resolution_method"], "timeout");
    EXPECT_EQ(follow["outcome"]["status"], "BLOCKED");
    EXPECT_TRUE(r.tools.calls.empty());
}

TEST(Orchestrator, DependentFollowsParentTimeout) {
    Rig r;
    r.open("s1");
    auto parent = r.call("s1", "secrets", "rotate", {{"name", "prod"}});
    auto child = r.call("s1", "email", "send", {{"to", "ops@company.com"}, {"body", "new key ${pending:" + *parent.item_id + "}"}});
    ASSERT_EQ(child.decision.kind, DecisionKind::Defer);
    EXPECT_EQ(child.decision.defer_reason, DeferReason::DependsOnPending);
    auto independent = r.call("s1", "web", "search", {{"q", "weather"}});
    EXPECT_EQ(independent.status, OutcomeStatus::Executed);

    r.clock->advance(std::chrono::seconds(121));
    r.orch->expire_timeouts(r.clock->now());
    EXPECT_EQ(r.orch->item(*parent.item_id).status, PendingStatus::TimedOut);
    EXPECT_EQ(r.orch->item(*child.item_id).final_decision->kind, DecisionKind::Deny);

    std::vector<std::string> parents;
    for (const auto& rc : r.receipts("s1"))
        if (!rc["deferral"].is_null()) parents.push_back(rc["deferral"]["parent_receipt_id"]);
    ASSERT_EQ(parents.size(), 2u);
    EXPECT_EQ(parents[0], *parent.receipt_id);
    EXPECT_EQ(parents[1], *child.receipt_id);
    ASSERT_EQ(r.tools.calls.size(), 1u);
    EXPECT_EQ(r.tools.calls[0].tool, "web");
}

TEST(Orchestrator, DependentRunsAfterParentApproval) {
    Rig r;
    r.open("s1");
    auto parent = r.call("s1", "payments", "send", {{"account", "acme"}, {"amount", 5}});
    auto child = r.call("s1", "db", "insert", {{"note", "paid via " + *parent.item_id}});
    ASSERT_EQ(child.decision.kind, DecisionKind::Defer);
    r.orch->submit_approval_decision(*parent.item_id, "approver@company.com", DecisionKind::Allow, "");
    EXPECT_EQ(r.orch->item(*child.item_id).status, PendingStatus::ResolvedAllow);
    ASSERT_EQ(r.tools.calls.size(), 2u);
    EXPECT_EQ(r.tools.calls[0].tool, "payments");
    EXPECT_EQ(r.tools.calls[1].tool, "db");
}

TEST(Orchestrator, ReevaluationAfterContextGrows) {
    Rig r;
    r.open("s1");
    // crm_needs_login (DENY) and crm_read (ALLOW) tie at priority 40 until auth has run
    auto read = r.call("s1", "crm", "read", {{"account", "johnson"}});
    ASSERT_EQ(read.decision.kind, DecisionKind::Defer);
    EXPECT_EQ(read.decision.defer_reason, DeferReason::PriorityConflict);
    auto exp = r.call("s1", "crm", "export", {{"segment", "all"}});
    ASSERT_EQ(exp.decision.kind, DecisionKind::Defer);
    EXPECT_TRUE(r.orch->resolve_deferred_auto("s1").empty());  // conflict persists

    r.call("s1", "auth", "login", {{"user", "alice"}});  // enrichment triggers re-evaluation
    auto read_item = r.orch->item(*read.item_id);
    EXPECT_EQ(read_item.status, PendingStatus::ResolvedAllow);
    EXPECT_EQ(read_item.resolver, "auto:re-evaluation");
    auto exp_item = r.orch->item(*exp.item_id);
    EXPECT_EQ(exp_item.status, PendingStatus::Pending);
    EXPECT_EQ(exp_item.kind, DecisionKind::StepUp);
    EXPECT_EQ(exp_item.deadline, format_rfc3339(r.clock->now() + std::chrono::seconds(300)));

    std::vector<std::string> methods;
    for (const auto& rc : r.receipts("s1"))
        if (!rc["deferral"].is_null()) methods.push_back(rc["deferral"]["resolution_method"]);
    EXPECT_EQ(methods, (std::vector<std::string>{"re-evaluation", "re-evaluation"}));
    EXPECT_EQ(r.events(telemetry::EventKind::PendingCreated, DecisionKind::StepUp), 1u);
}

TEST(Orchestrator, FailClosedWithoutReceiptStore) {
    Rig r;
    r.open("s1");
    r.vault.set_store_available(false);
    auto res = r.call("s1", "db", "query", {{"sql", "select 1"}});
    EXPECT_EQ(res.status, OutcomeStatus::Blocked);
    EXPECT_EQ(res.decision.kind, DecisionKind::Deny);
    EXPECT_TRUE(r.tools.calls.empty());
    EXPECT_EQ(r.call("s1", "payments", "send", {{"amount", 1}}).status, OutcomeStatus::Blocked);
}

TEST(Orchestrator, JournalRecordsAuthorizationBeforeCompletion) {
    Rig r;
    r.open("s1");
    r.call("s1", "web", "search", {{"q", "x"}});
    auto text = test::read_file(r.dir / "data" / "journal.jsonl");
    auto authorized = text.find("\"authorized\""), completed = text.find("\"completed\"");
    ASSERT_NE(authorized, std::string::npos);
    ASSERT_NE(completed, std::string::npos);
    EXPECT_LT(authorized, completed);
}

TEST(Orchestrator, DriftEscalationAndConfidence) {
    Rig r;
    r.open("s1", "Prepare a meeting brief for the Johnson account renewal");
    r.call("s1", "db", "query", {{"account", "johnson"}, {"fields", "account renewal meeting brief"}});
    EXPECT_EQ(r.events(telemetry::EventKind::DriftEscalation), 0u);
    r.call("s1", "web", "search", {{"q", "competitor pricing"}});
    EXPECT_EQ(r.events(telemetry::EventKind::DriftEscalation), 1u);
    r.call("s1", "web", "search", {{"q", "more competitor pricing"}});
    EXPECT_EQ(r.events(telemetry::EventKind::DriftEscalation), 1u);
    auto tracker = r.orch->drift("s1");
    ASSERT_TRUE(tracker);
    EXPECT_DOUBLE_EQ(*r.ledger.current_context("s1").confidence, 1.0 - tracker->running_max());
    EXPECT_TRUE(r.ledger.entries("s1").back().signals.scope_expansion == false);  // web already used
}

TEST(Orchestrator, NoBaselineMeansZeroConfidence) {
    Rig r;
    r.open("s1");
    r.call("s1", "web", "search", {{"q", "x"}});
    auto e = r.ledger.entries("s1").back();
    EXPECT_FALSE(e.signals.semantic_distance);
    EXPECT_EQ(e.signals.confidence, 0.0);
    EXPECT_FALSE(r.orch->drift("s1"));
}

TEST(Orchestrator, TelemetryMatchesReceipts) {
    Rig r;
    r.open("s1");
    r.call("s1", "web", "search", {{"q", "a"}});
    r.call("s1", "db", "query", {{"sql", "select 1"}});
    r.call("s1", "secrets", "rotate", {{"name", "k"}});
    r.call("s1", "payments", "send", {{"amount", 1}});
    r.call("s1", "db", "execute", {{"sql", "DROP DATABASE x"}});
    telemetry::Filter decisions;
    decisions.kinds = {telemetry::EventKind::Decision};
    EXPECT_EQ(r.hub.export_batch(decisions, r.dir / "decisions.jsonl"), 5u);
    telemetry::Filter defers;
    defers.kinds = {telemetry::EventKind::PendingCreated};
    defers.decisions = {DecisionKind::Defer};
    EXPECT_EQ(r.hub.export_batch(defers, r.dir / "defers.jsonl"), 1u);
    EXPECT_EQ(r.events(telemetry::EventKind::PendingCreated), 2u);
    std::set<std::string> ids;
    for (const auto& rc : r.vault.query({})) ids.insert(rc["receipt_id"].get<std::string>());
    for (const auto& ev : r.hub.events(decisions)) EXPECT_TRUE(ids.count(*ev.receipt_id));
    EXPECT_EQ(r.vault.query({.kinds = {DecisionKind::Defer}}).size(), 1u);
}

// Random interleavings of calls, approvals, denials, sweeps and clock jumps.
TEST(Orchestrator, PropertyLifecycleInvariants) {
    for (int seed = 0; seed < 12; ++seed) {
        Rig r(kPolicy, 4);
        r.open("s1", seed % 2 ? std::optional<std::string>("rotate the signing keys") : std::nullopt);
        std::mt19937 rng(seed);
        std::size_t decisions = 0;
        for (int step = 0; step < 40; ++step) {
            const auto pick = rng() % 10;
            if (pick < 6) {
                static const std::vector<std::pair<std::string, std::string>> ops{
                    {"secrets", "rotate"}, {"payments", "send"}, {"web", "search"}, {"db", "query"},
                    {"crm", "read"},       {"email", "send"},    {"auth", "login"}, {"db", "execute"}};
                const auto& [tool, op] = ops[rng() % ops.size()];
                Json params{{"n", static_cast<int>(rng() % 3)}};
                if (tool == "db" && op == "execute") params["sql"] = "DROP DATABASE z";
                if (tool == "email") params["to"] = rng() % 2 ? "x@partner.com" : "bob@company.com";
                r.call("s1", tool, op, params);
                ++decisions;
            } else if (pick < 8) {
                auto pending = r.orch->pending("s1");
                if (pending.empty()) continue;
                const auto& item = pending[rng() % pending.size()];
                try {
                    r.orch->submit_approval_decision(item.item_id, "approver@company.com",
                                                     rng() % 2 ? DecisionKind::Allow : DecisionKind::Deny, "");
                } catch (const OrchestratorError& e) {
                    EXPECT_EQ(e.code(), OrchestratorError::Code::Conflict);  // blocked behind a parent
                }
            } else if (pick == 8) {
                r.clock->advance(std::chrono::seconds(rng() % 200));
                r.orch->expire_timeouts(r.clock->now());
            } else {
                r.orch->resolve_deferred_auto("s1");
            }
            std::size_t defers = 0;
            for (const auto& p : r.orch->pending("s1")) defers += p.kind == DecisionKind::Defer;
            ASSERT_LE(defers, 4u);
        }
        r.clock->advance(std::chrono::hours(1));
        r.orch->expire_timeouts(r.clock->now());

        auto items = r.orch->pending("s1", true);
        std::map<std::string, int> follow_ups;  // parent receipt -> count
        std::size_t resolutions = 0;
        for (const auto& rc : r.vault.query({})) {
            if (rc["deferral"].is_null()) continue;
            ++resolutions;
            follow_ups[rc["deferral"]["parent_receipt_id"].get<std::string>()]++;
        }
        std::size_t terminal_follow_ups = 0;
        for (const auto& item : items) {
            EXPECT_TRUE(item.terminal());
            ASSERT_TRUE(item.follow_up_receipt_id);
            terminal_follow_ups++;
        }
        for (const auto& [parent, n] : follow_ups) EXPECT_GE(n, 1);
        // one receipt per decision plus one per resolution step
        EXPECT_EQ(r.vault.size(), decisions + resolutions);
        EXPECT_GE(resolutions, terminal_follow_ups);

        // the tool saw exactly the executed actions, in ledger order
        std::vector<std::string> executed;
        for (const auto& e : r.ledger.entries("s1"))
            if (ledger::is_execution(e.disposition)) executed.push_back(e.action.tool);
        std::vector<std::string> called;
        for (const auto& c : r.tools.calls) called.push_back(c.tool);
        EXPECT_EQ(called, executed);
        for (const auto& c : r.tools.calls) EXPECT_NE(c.tool + c.operation, "dbexecute");
        EXPECT_TRUE(r.ledger.verify_chain("s1").ok);
        telemetry::Filter f;
        f.kinds = {telemetry::EventKind::Decision};
        EXPECT_EQ(r.hub.events(f).size(), r.vault.size());
    }
}
