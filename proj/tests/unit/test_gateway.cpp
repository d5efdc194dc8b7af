#include <gtest/gtest.h>

#include <httplib.h>

#include "aarm/gateway.hpp"
#include "aarm/mock_upstream.hpp"
#include "support.hpp"

using namespace aarm;

namespace {

const char* kPolicy = R"({
  "version": 1,
  "named_lists": {"internal_domains": ["company.com"]},
  "policies": [
    {"id": "block_external_after_pii",
     "match": ["AND", ["==", "action.tool", "email"], ["NOT_IN", "action.params.to", "@internal_domains"],
               ["CONTAINS", "context.data_classification", "PII"]],
     "decision": "DENY", "priority": 100, "reason": "External email after PII access"},
    {"id": "approve_payments", "match": ["==", "action.tool", "payments"], "decision": "STEP_UP", "priority": 50,
     "reason": "payments need approval"},
    {"id": "rotate_when_on_task", "match": ["AND", ["==", "action.tool", "secrets"], [">=", "context.confidence", 0.8]],
     "decision": "ALLOW", "priority": 50},
    {"id": "deny_rotate", "match": ["==", "action.tool", "secrets"], "decision": "DENY", "priority": 10,
     "reason": "rotation outside maintenance"},
    {"id": "allow_rest", "match": ["IN", "action.tool", ["db", "email", "web"]], "decision": "ALLOW", "priority": 1}
  ]
})";

class Tools final : public ToolForwarder {
public:
    std::vector<std::string> calls;
    bool knows(const std::string& tool) const override { return tool != "unregistered"; }
    ForwardResult call(const std::string& tool, const std::string&, const Json&) override {
        calls.push_back(tool);
        if (tool == "db") return {true, Json{{"rows", {{{"email", "carol@company.com"}}}}}, ""};
        return {true, Json{{"ok", true}}, ""};
    }
};

Json identity_json(const std::string& session) {
    return {{"human_principal", "alice@company.com"},
            {"service_identity", "agent-svc@iam"},
            {"agent_identity", "agent-7"},
            {"session_id", session},
            {"privilege_scope", {"crm.read"}}};
}

struct GatewayRig {
    test::TempDir dir;
    std::shared_ptr<Tools> tools = std::make_shared<Tools>();
    std::unique_ptr<Gateway> gw;
    int next_id = 1;

    GatewayRig() {
        GatewayConfig c;
        c.port = 0;
        c.policy_document = kPolicy;
        c.data_dir = dir / "data";
        c.signing_key = (dir / "gateway.key").string();
        c.hold = std::chrono::milliseconds(0);
        c.approver_tokens = {{"tok-approver", "approver@company.com"}};
        c.sweep_interval = std::chrono::milliseconds(0);
        c.test_mode = true;
        c.id_seed = 11;
        gw = std::make_unique<Gateway>(c, tools);
    }

    Json rpc(const std::string& method, Json params) {
        return gw->handle_rpc({{"jsonrpc", "2.0"}, {"id", next_id++}, {"method", method}, {"params", std::move(params)}});
    }
    Json init(const std::string& session) {
        return rpc("session/initialize", {{"session_id", session}, {"identity", identity_json(session)}});
    }
    Json call(const std::string& session, const std::string& name, Json args) {
        return rpc("tools/call", {{"session_id", session}, {"name", name}, {"arguments", std::move(args)}});
    }
};

int code(const Json& reply) { return reply.contains("error") ? reply["error"]["code"].get<int>() : 0; }

} // namespace

TEST(Gateway, InitializeRequiresIdentity) {
    GatewayRig g;
    auto id = identity_json("s1");
    id.erase("human_principal");
    auto r = g.rpc("session/initialize", {{"session_id", "s1"}, {"identity", id}});
    EXPECT_EQ(code(r), rpc::kIdentityRequired);
    EXPECT_EQ(r["error"]["data"]["missing"], Json::array({"identity.human_principal"}));
    auto ok = g.init("s1");
    EXPECT_EQ(ok["result"]["session_id"], "s1");
    EXPECT_EQ(ok["result"]["policy_set_digest"].get<std::string>().size(), 64u);
    EXPECT_EQ(code(g.init("s1")), rpc::kInvalidRequest);
}

TEST(Gateway, ProtocolErrors) {
    GatewayRig g;
    EXPECT_EQ(code(g.gw->handle_rpc(Json{{"id", 1}})), rpc::kInvalidRequest);
    EXPECT_EQ(code(g.rpc("nope", Json::object())), rpc::kMethodNotFound);
    EXPECT_EQ(code(g.call("ghost", "db.query", Json::object())), rpc::kUnknownSession);
    g.init("s1");
    auto r = g.call("s1", "unregistered.op", Json::object());
    EXPECT_EQ(code(r), rpc::kDeny);
    EXPECT_EQ(r["error"]["message"], "unknown tool");
}

TEST(Gateway, ExfiltrationIsDeniedWithReceipt) {
    GatewayRig g;
    g.init("s1");
    auto q = g.call("s1", "db.query", {{"sql", "select email from customers"}});
    EXPECT_EQ(q["result"]["status"], "EXECUTED");
    auto ext = g.call("s1", "email.send", {{"to", "x@partner.com"}});
    EXPECT_EQ(code(ext), rpc::kDeny);
    EXPECT_EQ(ext["error"]["message"], "External email after PII access");
    EXPECT_EQ(ext["error"]["data"]["matched_policies"], Json::array({"block_external_after_pii", "allow_rest"}));
    EXPECT_EQ(ext["error"]["data"]["status"], "BLOCKED");
    EXPECT_EQ(g.tools->calls, std::vector<std::string>{"db"});
    auto receipts = Json::parse(g.gw->receipts({{"session_id", "s1"}, {"kind", "DENY"}}).body);
    ASSERT_EQ(receipts.size(), 1u);
    EXPECT_EQ(receipts[0]["receipt_id"], ext["error"]["data"]["receipt_id"]);
}

TEST(Gateway, ParkedItemsAndPolling) {
    GatewayRig g;
    g.init("s1");
    g.init("s2");
    auto pay = g.call("s1", "payments.send", {{"amount", 10}});
    EXPECT_EQ(code(pay), rpc::kStepUpParked);
    auto rot = g.call("s1", "secrets.rotate", {{"name", "prod"}});
    EXPECT_EQ(code(rot), rpc::kDeferParked);
    EXPECT_EQ(rot["error"]["data"]["defer_reason"], "MISSING_CONTEXT_FIELD");
    const auto item = pay["error"]["data"]["item_id"].get<std::string>();

    auto status = g.rpc("pending/status", {{"session_id", "s1"}, {"item_id", item}});
    EXPECT_EQ(status["result"]["status"], "PENDING");
    EXPECT_EQ(code(g.rpc("pending/status", {{"session_id", "s2"}, {"item_id", item}})), rpc::kForbidden);

    auto listed = g.gw->list_pending("s1", "tok-approver", false);
    ASSERT_EQ(listed.status, 200);
    auto items = Json::parse(listed.body);
    ASSERT_EQ(items.size(), 2u);
    EXPECT_EQ(items[0]["timeline"].size(), 2u);
    EXPECT_EQ(g.gw->list_pending("s1", "wrong", false).status, 403);

    EXPECT_EQ(g.gw->decide(item, {{"verdict", "ALLOW"}, {"approver_token", "nope"}}).status, 403);
    EXPECT_EQ(g.gw->decide("missing", {{"verdict", "ALLOW"}, {"approver_token", "tok-approver"}}).status, 404);
    EXPECT_EQ(g.gw->decide(item, {{"verdict", "MAYBE"}, {"approver_token", "tok-approver"}}).status, 400);
    auto ok = g.gw->decide(item, {{"verdict", "ALLOW"}, {"approver_token", "tok-approver"}, {"note", "fine"}});
    EXPECT_EQ(ok.status, 200);
    EXPECT_EQ(Json::parse(ok.body)["resolution"], "human_allow");
    EXPECT_EQ(g.gw->decide(item, {{"verdict", "DENY"}, {"approver_token", "tok-approver"}}).status, 409);
    auto done = g.rpc("pending/status", {{"session_id", "s1"}, {"item_id", item}});
    EXPECT_EQ(done["result"]["status"], "RESOLVED_ALLOW");
    EXPECT_EQ(done["result"]["outcome"], "EXECUTED");

    const auto rot_item = rot["error"]["data"]["item_id"].get<std::string>();
    g.gw->decide(rot_item, {{"verdict", "DENY"}, {"approver_token", "tok-approver"}});
    auto denied = g.rpc("pending/status", {{"session_id", "s1"}, {"item_id", rot_item}});
    EXPECT_EQ(code(denied), rpc::kDeny);
    EXPECT_EQ(denied["error"]["data"]["resolution"], "human_deny");
}

TEST(Gateway, ReceiptsKeysAndVerification) {
    GatewayRig g;
    g.init("s1");
    g.call("s1", "web.search", {{"q", "a"}});
    g.call("s1", "db.query", {{"sql", "select 1"}});
    auto all = Json::parse(g.gw->receipts({}).body);
    ASSERT_EQ(all.size(), 2u);
    EXPECT_EQ(Json::parse(g.gw->receipts({{"tool", "web"}}).body).size(), 1u);
    EXPECT_EQ(g.gw->receipts({{"kind", "SOMETIMES"}}).status, 400);
    EXPECT_EQ(g.gw->receipts({{"from", "yesterday"}}).status, 400);
    const auto ring = crypto::parse_key_ring(crypto::serialize_key_ring(g.gw->vault().public_keys()));
    for (const auto& r : all) EXPECT_TRUE(receipts::verify_receipt(r, ring).valid);

    auto v = Json::parse(g.gw->verify_session("s1").body);
    EXPECT_TRUE(v["ok"].get<bool>());
    EXPECT_EQ(g.gw->verify_session("zz").status, 404);
    auto ndjson = g.gw->telemetry_export({{"kind", "DECISION"}});
    EXPECT_EQ(std::count(ndjson.body.begin(), ndjson.body.end(), '\n'), 2);
    EXPECT_EQ(g.gw->telemetry_export({{"kind", "BOGUS"}}).status, 400);
}

TEST(Gateway, TestConfigureRejectsBadPolicy) {
    GatewayRig g;
    auto bad = g.gw->test_configure({{"policy", R"({"version": 1, "policies": [{"id": "x", "match": ["==", "action.nope", 1], "decision": "ALLOW"}]})"}});
    EXPECT_EQ(bad.status, 400);
    auto issues = Json::parse(bad.body)["issues"];
    ASSERT_FALSE(issues.empty());
    EXPECT_EQ(issues[0]["pointer"].get<std::string>().rfind("/policies/0/match", 0), 0u);
    EXPECT_EQ(g.gw->test_configure({{"receipt_store", "down"}}).status, 200);
    g.init("s1");
    EXPECT_EQ(code(g.call("s1", "web.search", {{"q", "a"}})), rpc::kDeny);
    EXPECT_TRUE(g.tools->calls.empty());
}

TEST(Gateway, StepUpTimesOutViaSweep) {
    GatewayRig g;
    g.gw->test_configure({{"timeouts", {{"step_up_seconds", 0.05}}}});
    g.init("s1");
    auto pay = g.call("s1", "payments.send", {{"amount", 10}});
    std::this_thread::sleep_for(std::chrono::milliseconds(80));
    auto sweep = Json::parse(g.gw->test_sweep().body);
    EXPECT_EQ(sweep["expired"], Json::array({pay["error"]["data"]["item_id"]}));
    auto st = g.rpc("pending/status", {{"session_id", "s1"}, {"item_id", pay["error"]["data"]["item_id"]}});
    EXPECT_EQ(code(st), rpc::kDeny);
    EXPECT_EQ(st["error"]["data"]["status"], "TIMED_OUT");
    EXPECT_TRUE(g.tools->calls.empty());
}

TEST(GatewayConfigTest, FromJson) {
    auto c = GatewayConfig::from_json(
        {{"listen", "0.0.0.0:9100"}, {"timeouts", {{"step_up_seconds", 10}}}, {"cascade_limit", 3}, {"policy_file", "p.json"}},
        "/etc/aarm");
    EXPECT_EQ(c.host, "0.0.0.0");
    EXPECT_EQ(c.port, 9100);
    EXPECT_EQ(c.step_up_timeout, std::chrono::seconds(10));
    EXPECT_EQ(c.cascade_limit, 3u);
    EXPECT_EQ(c.policy_file, "/etc/aarm/p.json");
    EXPECT_THROW(GatewayConfig::from_json({{"fail_mode", "OPEN"}}), ConfigError);
    EXPECT_THROW(GatewayConfig::from_json({{"cascade_limit", -1}}), ConfigError);
    EXPECT_THROW(GatewayConfig::from_json({{"timeouts", {{"defer_seconds", "soon"}}}}), ConfigError);
}

// Full loop over sockets: agent -> gateway -> mock upstream, approver over HTTP.
TEST(Gateway, EndToEndOverHttp) {
    test::TempDir dir;
    MockUpstream upstream(dir / "upstream_calls.jsonl", test::epoch());
    upstream.start();
    GatewayConfig c;
    c.port = 0;
    c.policy_document = kPolicy;
    c.data_dir = dir / "data";
    c.upstreams = {{"db", upstream.rpc_url()}, {"payments", upstream.rpc_url()}, {"email", upstream.rpc_url()}};
    c.hold = std::chrono::milliseconds(0);
    c.approver_tokens = {{"tok", "approver@company.com"}};
    c.test_mode = true;
    c.test_clock = upstream.clock_url();
    Gateway gw(c);
    gw.start();

    httplib::Client cli("127.0.0.1", gw.port());
    auto post = [&](const Json& body) {
        auto res = cli.Post("/rpc", body.dump(), "application/json");
        return Json::parse(res->body);
    };
    post({{"jsonrpc", "2.0"}, {"id", 1}, {"method", "session/initialize"},
          {"params", {{"session_id", "e2e"}, {"identity", identity_json("e2e")}}}});
    auto pay = post({{"jsonrpc", "2.0"}, {"id", 2}, {"method", "tools/call"},
                     {"params", {{"session_id", "e2e"}, {"name", "payments.send"}, {"arguments", {{"amount", 3}}}}}});
    ASSERT_EQ(code(pay), rpc::kStepUpParked);
    EXPECT_EQ(pay["error"]["data"]["deadline"], "2025-01-15T10:05:00.000Z");
    EXPECT_TRUE(upstream.calls().empty());

    auto pending = cli.Get("/v1/pending?session_id=e2e", {{"Authorization", "Bearer tok"}});
    ASSERT_EQ(pending->status, 200);
    EXPECT_EQ(Json::parse(pending->body).size(), 1u);
    EXPECT_EQ(cli.Get("/v1/pending")->status, 403);
    const auto item = pay["error"]["data"]["item_id"].get<std::string>();
    auto decided = cli.Post("/v1/pending/" + item + "/decision", Json{{"verdict", "ALLOW"}, {"approver_token", "tok"}}.dump(),
                            "application/json");
    EXPECT_EQ(decided->status, 200);
    ASSERT_EQ(upstream.calls().size(), 1u);
    EXPECT_EQ(cli.Post("/v1/pending/" + item + "/decision", Json{{"verdict", "ALLOW"}, {"approver_token", "tok"}}.dump(),
                       "application/json")->status, 409);

    auto keys = crypto::parse_key_ring(cli.Get("/v1/keys")->body);
    auto receipts = Json::parse(cli.Get("/v1/receipts?session_id=e2e")->body);
    ASSERT_EQ(receipts.size(), 2u);
    for (const auto& r : receipts) EXPECT_TRUE(receipts::verify_receipt(r, keys).valid);
    EXPECT_TRUE(Json::parse(cli.Get("/v1/sessions/e2e/verify")->body)["ok"].get<bool>());
    EXPECT_EQ(Json::parse(cli.Post("/rpc", "{not json", "application/json")->body)["error"]["code"], rpc::kParseError);
    gw.stop();
    upstream.stop();
}
