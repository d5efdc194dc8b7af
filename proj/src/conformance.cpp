#include "aarm/conformance.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "aarm/crypto.hpp"
#include "aarm/gateway.hpp"
#include "aarm/mock_upstream.hpp"
#include "aarm/receipts.hpp"

namespace fs = std::filesystem;

namespace aarm::conformance {

std::string_view to_string(Status s) {
    switch (s) {
        case Status::Pass: return "PASS";
        case Status::Fail: return "FAIL";
        case Status::Skipped: return "SKIPPED";
    }
    return "SKIPPED";
}

namespace {

const TimePoint kEpoch = *parse_rfc3339("2025-01-15T10:00:00Z");
const std::string kApproverToken = "token-approver";
const std::string kApprover = "approver@corp.example";
const std::vector<std::string> kTools{"db", "email", "files", "web", "crm", "docs", "secrets",
                                      "storage", "calendar", "chat", "payments"};

// The target could not be reached; the requirement is SKIPPED, never PASS.
struct TargetDown {
    std::string detail;
};

// The requirement needs file access the harness does not have.
struct NoFileAccess {
    std::string detail;
};

struct Reply {
    int status = 0;
    Json body;
    std::string text;
};

Json default_identity(const std::string& session_id) {
    return Json{{"human_principal", "alice@corp.example"},
                {"service_identity", "svc-agent-gateway"},
                {"agent_identity", "agent-research-01"},
                {"session_id", session_id},
                {"privilege_scope", {"db:read", "email:send", "files:read"}}};
}

Json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return Json::parse(in);
}

std::string short_json(const Json& j, std::size_t limit = 240) {
    auto s = j.dump();
    if (s.size() > limit) s = s.substr(0, limit) + "...";
    return s;
}

// Outcome of a tools/call or pending/status reply as a single word.
std::string outcome_of(const Json& resp) {
    if (resp.contains("result")) {
        const auto& r = resp["result"];
        if (r.contains("resolution")) return "ALLOW";
        if (r.contains("decision")) return r["decision"].get<std::string>();
        return r.value("status", std::string("UNKNOWN"));
    }
    if (resp.contains("error")) {
        switch (resp["error"].value("code", 0)) {
            case rpc::kDeny: return "DENY";
            case rpc::kDeferParked: return "DEFER";
            case rpc::kStepUpParked: return "STEP_UP";
            case rpc::kIdentityRequired: return "IDENTITY_REQUIRED";
            case rpc::kUnknownSession: return "UNKNOWN_SESSION";
            case rpc::kForbidden: return "FORBIDDEN";
            default: return "ERROR";
        }
    }
    return "UNKNOWN";
}

Json data_of(const Json& resp) {
    if (resp.contains("result")) return resp["result"];
    if (resp.contains("error")) return resp["error"].value("data", Json::object());
    return Json::object();
}

std::string reason_of(const Json& resp) {
    if (resp.contains("error")) return resp["error"].value("message", std::string());
    return resp.contains("result") ? resp["result"].value("reason", std::string()) : std::string();
}

class Evidence {
public:
    bool expect(bool ok, std::string name, std::string detail = {}) {
        checks.push_back({std::move(name), ok, std::move(detail)});
        return ok;
    }
    std::vector<Check> checks;
};

Result finish(std::string id, Evidence ev, Json transcript) {
    Result r;
    r.id = std::move(id);
    r.checks = std::move(ev.checks);
    r.transcript = std::move(transcript);
    r.status = r.checks.empty() ? Status::Fail : Status::Pass;
    for (const auto& c : r.checks)
        if (!c.ok) {
            r.status = Status::Fail;
            r.reason = c.name + (c.detail.empty() ? "" : ": " + c.detail);
            break;
        }
    return r;
}

// One gateway under test plus the mock tool server and clock it talks to.
// Everything goes over HTTP or through the target's data directory.
class Rig {
public:
    Rig(const Options& opt, const std::string& name) : opt_(opt) {
        dir_ = opt.work_dir / name;
        std::error_code ec;
        fs::remove_all(dir_, ec);
        fs::create_directories(dir_);
        mock_ = std::make_unique<MockUpstream>(dir_ / "upstream_calls.jsonl", kEpoch);
        mock_->start();
        if (opt.target) {
            url_ = *opt.target;
            while (!url_.empty() && url_.back() == '/') url_.pop_back();
            data_dir_ = opt.target_data_dir;
            std::random_device rd;
            std::ostringstream os;
            os << std::hex << (rd() & 0xffffff) << '-';
            nonce_ = os.str();
        } else {
            GatewayConfig c;
            c.port = 0;
            c.data_dir = dir_ / "gateway";
            c.test_mode = true;
            c.test_clock = mock_->clock_url();
            c.id_seed = opt.seed;
            c.hold = std::chrono::milliseconds(0);
            c.sweep_interval = std::chrono::milliseconds(0);
            c.approver_tokens = {{kApproverToken, kApprover}};
            gateway_ = std::make_unique<Gateway>(c);
            gateway_->start();
            url_ = gateway_->url();
            data_dir_ = c.data_dir;
        }
    }

    ~Rig() {
        if (gateway_) gateway_->stop();
        mock_->stop();
    }

    const fs::path& dir() const { return dir_; }
    MockUpstream& mock() { return *mock_; }
    std::string sid(const std::string& local) const { return nonce_ + local; }
    Json transcript() const { return transcript_; }

    Json policy(const std::string& file) const { return read_json_file(opt_.scenario_dir / "policies" / file); }

    // Points the target at this rig's mock and clock with default timeouts, then applies `extra`.
    void reset(const Json& policy_doc, const Json& extra = Json::object()) {
        Json upstreams = Json::object();
        for (const auto& t : kTools) upstreams[t] = mock_->rpc_url();
        Json body{{"policy", policy_doc},
                  {"upstreams", upstreams},
                  {"clock", mock_->clock_url()},
                  {"timeouts", {{"step_up_seconds", 300}, {"defer_seconds", 120}, {"hold_seconds", 0}}},
                  {"cascade_limit", 8},
                  {"approvers", {{kApproverToken, kApprover}}},
                  {"receipt_store", "up"}};
        for (auto it = extra.begin(); it != extra.end(); ++it) body[it.key()] = it.value();
        configure(body);
    }

    void configure(const Json& body) {
        auto r = http("POST", "/v1/test/configure", body.dump());
        record("configure", Json{{"keys", keys_of(body)}}, r);
        if (r.status != 200) throw std::runtime_error("target refused configuration: " + r.text);
    }

    Json initialize(const std::string& local, const std::optional<std::string>& original_request,
                    const Json& identity = nullptr) {
        Json params{{"session_id", sid(local)}, {"identity", identity.is_null() ? default_identity(sid(local)) : identity}};
        if (original_request) params["original_request"] = *original_request;
        return rpc("session/initialize", params);
    }

    Json call(const std::string& local, const std::string& tool, const std::string& operation, const Json& parameters,
              const Json& identity = nullptr) {
        Json params{{"session_id", sid(local)}, {"tool", tool}, {"operation", operation}, {"parameters", parameters}};
        if (!identity.is_null()) params["identity"] = identity;
        return rpc("tools/call", params);
    }

    Json poll(const std::string& local, const std::string& item_id) {
        return rpc("pending/status", Json{{"session_id", sid(local)}, {"item_id", item_id}});
    }

    Reply decide(const std::string& item_id, const std::string& verdict, const std::string& token = kApproverToken,
                 const std::string& note = {}) {
        Json body{{"verdict", verdict}, {"approver_token", token}, {"note", note}};
        auto r = http("POST", "/v1/pending/" + item_id + "/decision", body.dump());
        record("decision", Json{{"item_id", item_id}, {"verdict", verdict}, {"note", note}}, r);
        return r;
    }

    void advance(double seconds) {
        mock_->clock().advance(std::chrono::milliseconds(static_cast<std::int64_t>(seconds * 1000)));
        transcript_.push_back({{"op", "advance_clock"}, {"seconds", seconds}});
    }

    Reply sweep() {
        auto r = http("POST", "/v1/test/sweep", "{}");
        record("sweep", nullptr, r);
        return r;
    }

    std::vector<Json> pending(const std::string& local, bool all = false) {
        auto r = http("GET", "/v1/pending?session_id=" + sid(local) + (all ? "&include=all" : ""), {},
                      {{"Authorization", "Bearer " + kApproverToken}});
        if (r.status != 200 || !r.body.is_array()) throw std::runtime_error("pending listing failed: " + r.text);
        return r.body.get<std::vector<Json>>();
    }

    std::vector<Json> receipts(const std::string& local) {
        auto r = http("GET", "/v1/receipts?session_id=" + sid(local));
        if (r.status != 200 || !r.body.is_array()) throw std::runtime_error("receipt query failed: " + r.text);
        return r.body.get<std::vector<Json>>();
    }

    crypto::PublicKeyRing keys() {
        auto r = http("GET", "/v1/keys");
        if (r.status != 200) throw std::runtime_error("keys endpoint failed: " + r.text);
        return crypto::parse_key_ring(r.text);
    }

    Json verify(const std::string& local) {
        auto r = http("GET", "/v1/sessions/" + sid(local) + "/verify");
        if (r.status != 200) throw std::runtime_error("verify failed: " + r.text);
        return r.body;
    }

    std::vector<Json> events(const std::string& query) {
        auto r = http("GET", "/v1/telemetry?" + query);
        if (r.status != 200) throw std::runtime_error("telemetry export failed: " + r.text);
        std::vector<Json> out;
        std::istringstream in(r.text);
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) out.push_back(Json::parse(line));
        return out;
    }

    std::vector<Json> upstream_calls() const { return mock_->calls(); }

    std::optional<fs::path> data_dir() const { return data_dir_; }
    fs::path ledger_file(const std::string& local) const {
        if (!data_dir_) throw NoFileAccess{"no data directory for the target"};
        return *data_dir_ / "ledger" / (sid(local) + ".ctx.jsonl");
    }

private:
    static Json keys_of(const Json& body) {
        Json k = Json::array();
        for (auto it = body.begin(); it != body.end(); ++it) k.push_back(it.key());
        return k;
    }

    Json rpc(const std::string& method, const Json& params) {
        Json req{{"jsonrpc", "2.0"}, {"id", ++rpc_id_}, {"method", method}, {"params", params}};
        auto r = http("POST", "/rpc", req.dump());
        if (r.status != 200 || !r.body.is_object()) throw std::runtime_error("rpc transport failure: " + r.text);
        transcript_.push_back({{"op", method}, {"request", params}, {"response", r.body}});
        return r.body;
    }

    void record(const std::string& op, const Json& request, const Reply& r) {
        transcript_.push_back({{"op", op}, {"request", request}, {"status", r.status}, {"response", r.body}});
    }

    Reply http(const std::string& method, const std::string& path, const std::string& body = {},
               const httplib::Headers& headers = {}) {
        httplib::Client cli(url_);
        cli.set_connection_timeout(5);
        cli.set_read_timeout(60);
        httplib::Result res = method == "GET" ? cli.Get(path, headers)
                                              : cli.Post(path, headers, body, "application/json");
        if (!res) throw TargetDown{url_ + ": " + httplib::to_string(res.error())};
        Reply r;
        r.status = res->status;
        r.text = res->body;
        try {
            r.body = res->body.empty() ? Json() : Json::parse(res->body);
        } catch (const Json::exception&) {
            r.body = nullptr;
        }
        return r;
    }

    const Options& opt_;
    fs::path dir_;
    std::unique_ptr<MockUpstream> mock_;
    std::unique_ptr<Gateway> gateway_;
    std::string url_;
    std::optional<fs::path> data_dir_;
    std::string nonce_;
    std::uint64_t rpc_id_ = 0;
    Json transcript_ = Json::array();
};

// ---------------------------------------------------------------------------
// checks shared by requirements and scenarios

Json effective_parameters(const Json& receipt) {
    const auto& d = receipt["decision"];
    if (d.contains("modified_parameters") && !d["modified_parameters"].is_null()) return d["modified_parameters"];
    return receipt["action"]["parameters"];
}

bool executed(const Json& receipt) {
    if (!receipt["outcome"].is_object()) return false;
    const auto s = receipt["outcome"].value("status", "");
    return s == "EXECUTED" || s == "EXECUTED_WITH_ERROR";
}

std::string call_key(const std::string& tool, const std::string& op, const Json& params) {
    return tool + "." + op + " " + canonical_serialize(params);
}

// Every receipt verifies, every upstream call is backed by exactly one
// executed receipt, and every follow-up names a distinct PARKED parent.
void invariants(Rig& rig, const std::vector<std::string>& sessions, Evidence& ev) {
    const auto ring = rig.keys();
    std::vector<Json> all;
    for (const auto& s : sessions)
        for (auto& r : rig.receipts(s)) all.push_back(std::move(r));

    std::size_t bad = 0;
    std::string first_bad;
    for (const auto& r : all)
        if (auto v = receipts::verify_receipt(r, ring); !v.valid && bad++ == 0)
            first_bad = r.value("receipt_id", "?") + ": " + v.reason;
    ev.expect(bad == 0, "every receipt verifies against the published keys", first_bad);

    std::multiset<std::string> backed, seen;
    for (const auto& r : all)
        if (executed(r)) backed.insert(call_key(r["action"]["tool"], r["action"]["operation"], effective_parameters(r)));
    for (const auto& c : rig.upstream_calls()) seen.insert(call_key(c["tool"], c["operation"], c["parameters"]));
    std::string diff;
    for (const auto& k : seen)
        if (seen.count(k) > backed.count(k)) {
            diff = "unbacked upstream call " + k;
            break;
        }
    for (const auto& k : backed)
        if (diff.empty() && backed.count(k) > seen.count(k)) diff = "executed receipt without upstream call " + k;
    ev.expect(diff.empty(), "upstream calls match executed receipts one to one", diff);

    std::map<std::string, const Json*> by_id;
    for (const auto& r : all) by_id[r.value("receipt_id", "")] = &r;
    std::set<std::string> parents;
    std::string parent_issue;
    for (const auto& r : all) {
        if (!r["deferral"].is_object()) continue;
        const auto parent = r["deferral"].value("parent_receipt_id", "");
        auto it = by_id.find(parent);
        if (it == by_id.end()) parent_issue = "follow-up " + r.value("receipt_id", "") + " names unknown parent";
        else if (!(*it->second)["outcome"].is_object() || (*it->second)["outcome"].value("status", "") != "PARKED")
            parent_issue = "parent " + parent + " is not PARKED";
        else if (!parents.insert(parent).second) parent_issue = "parent " + parent + " has two follow-ups";
        if (!parent_issue.empty()) break;
    }
    ev.expect(parent_issue.empty(), "each follow-up receipt names its own PARKED parent", parent_issue);
}

const Json* find_receipt(const std::vector<Json>& rs, const std::string& id) {
    for (const auto& r : rs)
        if (r.value("receipt_id", "") == id) return &r;
    return nullptr;
}

std::vector<std::string> kinds_of(const std::vector<Json>& rs) {
    std::vector<std::string> out;
    for (const auto& r : rs) out.push_back(r["decision"].value("kind", ""));
    return out;
}

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : ",") + s;
    return out;
}

std::string top_policy(const Json& receipt) {
    const auto& m = receipt["decision"]["matched_policies"];
    return m.is_array() && !m.empty() ? m[0].get<std::string>() : std::string();
}

bool has_all_layers(const Json& identity) {
    for (const char* k : {"human_principal", "service_identity", "agent_identity", "session_id"})
        if (!identity.contains(k) || !identity[k].is_string() || identity[k].get<std::string>().empty()) return false;
    return identity.contains("privilege_scope") && identity["privilege_scope"].is_array();
}

// Flip one byte of `file` at `offset`, run `probe`, restore.
template <typename F>
auto with_flipped_byte(const fs::path& file, std::size_t offset, std::uint8_t mask, F probe) {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    if (!f) throw NoFileAccess{"cannot open " + file.string()};
    f.seekg(static_cast<std::streamoff>(offset));
    char original = 0;
    f.get(original);
    const char flipped = static_cast<char>(static_cast<std::uint8_t>(original) ^ mask);
    f.seekp(static_cast<std::streamoff>(offset));
    f.put(flipped);
    f.flush();
    f.close();
    auto result = probe();
    std::fstream g(file, std::ios::in | std::ios::out | std::ios::binary);
    g.seekp(static_cast<std::streamoff>(offset));
    g.put(original);
    return result;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw NoFileAccess{"cannot read " + p.string()};
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// requirements

Result r1(const Options& o) {
    Rig rig(o, "R1");
    Evidence ev;
    rig.reset(rig.policy("r1_interception.json"));
    const auto start = std::chrono::steady_clock::now();

    rig.initialize("s1", std::string("Summarize my notes"));
    auto resp = rig.call("s1", "files", "read", {{"path", "/etc/shadow"}});
    ev.expect(outcome_of(resp) == "DENY", "matching action is denied", outcome_of(resp));
    auto calls = rig.upstream_calls();
    ev.expect(calls.empty(), "denied action never reaches the tool", calls.empty() ? "" : short_json(calls.front()));
    auto rs = rig.receipts("s1");
    ev.expect(rs.size() == 1 && rs[0]["decision"].value("kind", "") == "DENY", "one DENY receipt",
              join(kinds_of(rs)));
    if (!rs.empty()) {
        ev.expect(top_policy(rs[0]) == "deny_system_config_reads", "receipt names the deny policy", top_policy(rs[0]));
        ev.expect(rs[0]["outcome"].value("status", "") == "BLOCKED", "receipt records the block",
                  short_json(rs[0]["outcome"]));
    }
    // the detail stays empty on success so repeated reports are identical
    const auto elapsed = std::chrono::steady_clock::now() - start;
    const bool quick = elapsed < std::chrono::seconds(5);
    ev.expect(quick, "deny path completes within 5 s",
              quick ? "" : std::to_string(std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count()) + " ms");

    resp = rig.call("s1", "files", "read", {{"path", "/home/alice/notes.txt"}});
    ev.expect(outcome_of(resp) == "ALLOW" && rig.upstream_calls().size() == 1, "permitted action is forwarded",
              outcome_of(resp));

    resp = rig.call("s1", "shell", "exec", {{"cmd", "id"}});
    ev.expect(outcome_of(resp) == "DENY" && rig.upstream_calls().size() == 1, "unknown tool is denied",
              outcome_of(resp));

    rig.configure({{"receipt_store", "down"}});
    resp = rig.call("s1", "files", "read", {{"path", "/home/alice/todo.txt"}});
    ev.expect(outcome_of(resp) == "DENY", "action is blocked while receipts cannot be recorded", outcome_of(resp));
    ev.expect(rig.upstream_calls().size() == 1, "nothing reaches the tool while receipts cannot be recorded",
              std::to_string(rig.upstream_calls().size()) + " calls");
    rig.configure({{"receipt_store", "up"}});

    invariants(rig, {"s1"}, ev);
    return finish("R1", std::move(ev), rig.transcript());
}

Result r2(const Options& o) {
    Rig rig(o, "R2");
    Evidence ev;
    rig.reset(rig.policy("r2_context.json"));
    rig.mock().set_response("db.query", {{"rows", {{{"name", "Ada Lovelace"}, {"email", "ada@customer.example"}}}},
                                         {"_classification", {"CONFIDENTIAL"}}});
    rig.initialize("s1", std::string("Email a summary of the customer list"));
    auto a1 = rig.call("s1", "db", "query", {{"table", "customers"}});
    auto a2 = rig.call("s1", "web", "search", {{"query", "customer retention benchmarks"}});
    auto a3 = rig.call("s1", "email", "send",
                       {{"to", "team@partner.example"}, {"subject", "Customer summary"}, {"body", "see attached"}});
    ev.expect(outcome_of(a1) == "ALLOW" && outcome_of(a2) == "ALLOW", "first two actions execute",
              outcome_of(a1) + "," + outcome_of(a2));
    ev.expect(outcome_of(a3) == "STEP_UP", "third action is held for review", outcome_of(a3));

    const auto items = rig.pending("s1");
    ev.expect(items.size() == 1, "one pending item", std::to_string(items.size()));
    if (!items.empty()) {
        const auto seq = items[0]["action"].value("seq", std::uint64_t{0});
        std::vector<std::string> prior;
        for (const auto& h : items[0]["timeline"])
            if (h.value("seq", std::uint64_t{0}) < seq) prior.push_back(h.value("tool", "") + "." + h.value("operation", ""));
        ev.expect(prior == std::vector<std::string>{"db.query", "web.search"},
                  "third evaluation's context lists the two prior actions", join(prior));
        const auto& labels = items[0]["data_classifications"];
        ev.expect(labels.is_array() && std::find(labels.begin(), labels.end(), "PII") != labels.end(),
                  "context carries the PII label", short_json(labels));
    }

    auto v = rig.verify("s1");
    ev.expect(v.value("ok", false), "untouched ledger verifies", short_json(v));

    const auto file = rig.ledger_file("s1");
    const auto bytes = read_file(file);
    std::vector<std::size_t> line_of(bytes.size());
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0, line = 0; i < bytes.size(); ++i) {
        line_of[i] = line;
        if (bytes[i] == '\n') ++line;
        else candidates.push_back(i);
    }
    std::mt19937_64 rng(o.seed);
    int detected = 0;
    std::string miss;
    constexpr int kTrials = 100;
    for (int t = 0; t < kTrials; ++t) {
        const auto off = candidates[rng() % candidates.size()];
        const auto mask = static_cast<std::uint8_t>(1 + rng() % 255);
        auto report = with_flipped_byte(file, off, mask, [&] { return rig.verify("s1"); });
        const bool ok = !report.value("ok", true) && report["corrupt_seq"].is_number() &&
                        report["corrupt_seq"].get<std::uint64_t>() <= line_of[off] + 1;
        if (ok) ++detected;
        else if (miss.empty())
            miss = "byte " + std::to_string(off) + " of line " + std::to_string(line_of[off]) + ": " + short_json(report);
    }
    ev.expect(detected == kTrials, "single-byte ledger tampering is detected at or before the successor seq",
              std::to_string(detected) + "/" + std::to_string(kTrials) + (miss.empty() ? "" : "; " + miss));
    v = rig.verify("s1");
    ev.expect(v.value("ok", false), "restored ledger verifies again", short_json(v));

    invariants(rig, {"s1"}, ev);
    return finish("R2", std::move(ev), rig.transcript());
}

Result r3(const Options& o) {
    Rig rig(o, "R3");
    Evidence ev;
    rig.reset(rig.policy("r3_framework.json"));
    rig.mock().set_response("db.query", {{"rows", {{{"name", "Ada Lovelace"}, {"email", "ada@customer.example"}}}},
                                         {"_classification", {"CONFIDENTIAL"}}});

    auto row = [&](const std::string& name, const Json& resp, const std::string& session, const std::string& outcome,
                   const std::string& policy) {
        const auto got = outcome_of(resp);
        const auto rs = rig.receipts(session);
        const auto id = data_of(resp).value("receipt_id", Json()).is_string() ? data_of(resp)["receipt_id"].get<std::string>() : "";
        const Json* r = find_receipt(rs, id);
        const auto top = r ? top_policy(*r) : std::string("(no receipt)");
        ev.expect(got == outcome && top == policy, name, got + " via " + top);
        return r;
    };

    // forbidden: DENY whatever the context says
    rig.initialize("forbidden", std::string("drop the analytics database, it is obsolete"));
    row("forbidden action is denied with an aligned request",
        rig.call("forbidden", "db", "execute", {{"sql", "DROP DATABASE analytics"}}), "forbidden", "DENY",
        "block_drop_database");
    rig.initialize("forbidden_bare", std::nullopt);
    row("forbidden action is denied without context",
        rig.call("forbidden_bare", "db", "execute", {{"sql", "drop   database analytics"}}), "forbidden_bare", "DENY",
        "block_drop_database");

    // context-dependent deny: an allowed email after PII access
    rig.initialize("exfil", std::string("Summarize the customer accounts"));
    rig.call("exfil", "db", "query", {{"table", "customers"}});
    row("allowed action is denied after misaligned context",
        rig.call("exfil", "email", "send", {{"to", "analyst@partner.example"}, {"subject", "accounts"}}), "exfil",
        "DENY", "block_external_after_pii");

    // context-dependent allow: a denied delete the user asked for
    rig.initialize("cleanup", std::string("clean up my test data from yesterday"));
    row("denied action is escalated when the request aligns",
        rig.call("cleanup", "db", "delete",
                 {{"table", "test_data"}, {"filter", "my test data from yesterday"}, {"reason", "clean up"}}),
        "cleanup", "STEP_UP", "step_up_requested_cleanup");

    // context-dependent defer: the deciding field is missing
    rig.initialize("rotate", std::nullopt);
    auto resp = rig.call("rotate", "secrets", "rotate", {{"credential", "db-primary"}});
    row("indeterminate context defers", resp, "rotate", "DEFER", "deny_secrets_rotate");
    ev.expect(data_of(resp).value("defer_reason", Json()) == "MISSING_CONTEXT_FIELD", "defer names the missing field",
              short_json(data_of(resp)));

    rig.initialize("plain", std::string("Look up product prices"));
    row("standard allow", rig.call("plain", "db", "query", {{"table", "products"}}), "plain", "ALLOW", "allow_db_query");
    row("standard deny", rig.call("plain", "db", "delete", {{"table", "products"}}), "plain", "DENY", "deny_db_delete");

    ev.expect(rig.upstream_calls().size() == 2, "only the two allowed actions reached a tool",
              std::to_string(rig.upstream_calls().size()) + " calls");
    invariants(rig, {"forbidden", "forbidden_bare", "exfil", "cleanup", "rotate", "plain"}, ev);
    return finish("R3", std::move(ev), rig.transcript());
}

std::size_t count_calls(const std::vector<Json>& calls, const std::string& tool, const std::string& op) {
    return static_cast<std::size_t>(std::count_if(calls.begin(), calls.end(), [&](const Json& c) {
        return c.value("tool", "") == tool && c.value("operation", "") == op;
    }));
}

std::string cite_calls(const std::vector<Json>& calls, const std::string& tool) {
    for (const auto& c : calls)
        if (c.value("tool", "") == tool) return "upstream call " + short_json(c);
    return {};
}

Result r4(const Options& o) {
    Rig rig(o, "R4");
    Evidence ev;
    rig.reset(rig.policy("r4_deferral.json"));

    // (a) timeouts deny
    rig.initialize("timeout", std::nullopt);
    auto d = rig.call("timeout", "secrets", "rotate", {{"credential", "db-primary"}});
    auto s = rig.call("timeout", "payments", "send", {{"amount", 120}, {"payee", "acme"}});
    ev.expect(outcome_of(d) == "DEFER" && outcome_of(s) == "STEP_UP", "deferral and step-up park",
              outcome_of(d) + "," + outcome_of(s));
    const auto d_item = data_of(d).value("item_id", ""), s_item = data_of(s).value("item_id", "");
    rig.advance(119);
    rig.sweep();
    ev.expect(outcome_of(rig.poll("timeout", d_item)) == "PENDING", "deferral still pending before its deadline");
    rig.advance(2);
    rig.sweep();
    auto dp = rig.poll("timeout", d_item);
    ev.expect(outcome_of(dp) == "DENY" && data_of(dp).value("resolution", "") == "timeout",
              "deferral is denied on timeout", short_json(dp));
    ev.expect(outcome_of(rig.poll("timeout", s_item)) == "PENDING", "step-up still pending before its deadline");
    rig.advance(180);
    rig.sweep();
    auto sp = rig.poll("timeout", s_item);
    ev.expect(outcome_of(sp) == "DENY" && data_of(sp).value("resolution", "") == "timeout",
              "step-up is denied on timeout", short_json(sp));
    auto calls = rig.upstream_calls();
    ev.expect(count_calls(calls, "secrets", "rotate") == 0 && count_calls(calls, "payments", "send") == 0,
              "timed-out actions never execute", cite_calls(calls, "secrets") + cite_calls(calls, "payments"));
    auto rs = rig.receipts("timeout");
    int timeout_denials = 0;
    for (const auto& r : rs)
        if (r["decision"].value("kind", "") == "DENY" && r["deferral"].is_object() &&
            r["deferral"].value("resolution_method", "") == "timeout")
            ++timeout_denials;
    ev.expect(timeout_denials == 2, "two DENY follow-up receipts record the timeout", join(kinds_of(rs)));

    // (b) dependent actions wait, independent ones run
    auto since = [&rig](std::size_t from) {
        auto all = rig.upstream_calls();
        return std::vector<Json>(all.begin() + static_cast<std::ptrdiff_t>(std::min(from, all.size())), all.end());
    };
    std::size_t mark = rig.upstream_calls().size();
    rig.initialize("deps", std::nullopt);
    auto parent = rig.call("deps", "db", "update", {{"table", "orders"}, {"set", "status=shipped"}});
    const auto parent_item = data_of(parent).value("item_id", "");
    auto same = rig.call("deps", "db", "query", {{"table", "orders"}});
    auto ref = rig.call("deps", "email", "send",
                        {{"to", "ops@corp.example"}, {"body", "result of ${pending:" + parent_item + "}"}});
    auto indep = rig.call("deps", "web", "search", {{"query", "carrier status"}});
    ev.expect(outcome_of(parent) == "DEFER", "parent action defers", outcome_of(parent));
    ev.expect(outcome_of(same) == "DEFER" && data_of(same).value("defer_reason", Json()) == "DEPENDS_ON_PENDING",
              "action on the same resource auto-defers", short_json(data_of(same)));
    ev.expect(outcome_of(ref) == "DEFER" && data_of(ref).value("defer_reason", Json()) == "DEPENDS_ON_PENDING",
              "action referencing the pending item auto-defers", short_json(data_of(ref)));
    ev.expect(outcome_of(indep) == "ALLOW", "independent action executes meanwhile", outcome_of(indep));
    calls = since(mark);
    ev.expect(calls.size() == 1 && calls[0].value("tool", "") == "web", "only the independent action ran",
              std::to_string(calls.size()) + " calls");

    ev.expect(rig.decide(parent_item, "ALLOW", "not-a-token").status == 403, "unknown approver is refused");
    ev.expect(rig.decide("no-such-item", "ALLOW").status == 404, "unknown item is not found");
    ev.expect(rig.decide(parent_item, "ALLOW", kApproverToken, "approved after review").status == 200,
              "approver resolves the parent");
    ev.expect(rig.decide(parent_item, "DENY").status == 409, "second decision conflicts");
    calls = since(mark);
    std::vector<std::string> order;
    for (const auto& c : calls) order.push_back(c.value("tool", "") + "." + c.value("operation", ""));
    ev.expect(order == std::vector<std::string>{"web.search", "db.update", "db.query", "email.send"},
              "dependents run after their parent", join(order));

    // parent timeout takes the dependents with it
    mark = rig.upstream_calls().size();
    rig.initialize("deps_timeout", std::nullopt);
    auto p2 = rig.call("deps_timeout", "db", "update", {{"table", "invoices"}, {"set", "paid=true"}});
    auto c2 = rig.call("deps_timeout", "db", "query", {{"table", "invoices"}});
    rig.advance(121);
    rig.sweep();
    ev.expect(outcome_of(rig.poll("deps_timeout", data_of(p2).value("item_id", ""))) == "DENY" &&
                  outcome_of(rig.poll("deps_timeout", data_of(c2).value("item_id", ""))) == "DENY",
              "dependent is denied with its timed-out parent");
    ev.expect(since(mark).empty(), "nothing executed after the parent timed out", cite_calls(since(mark), "db"));

    // (c) cascade bound
    rig.initialize("cascade", std::nullopt);
    int deferred = 0;
    for (int i = 1; i <= 8; ++i)
        if (outcome_of(rig.call("cascade", "secrets", "rotate", {{"credential", "key-" + std::to_string(i)}})) == "DEFER")
            ++deferred;
    ev.expect(deferred == 8, "eight concurrent defers are accepted", std::to_string(deferred));
    auto ninth = rig.call("cascade", "secrets", "rotate", {{"credential", "key-9"}});
    ev.expect(outcome_of(ninth) == "DENY" && reason_of(ninth) == "cascade bound exceeded",
              "the ninth concurrent defer is denied", outcome_of(ninth) + ": " + reason_of(ninth));
    ev.expect(rig.pending("cascade").size() == 8, "eight items are pending");

    invariants(rig, {"timeout", "deps", "deps_timeout", "cascade"}, ev);
    return finish("R4", std::move(ev), rig.transcript());
}

// 50 actions over every outcome, with approvals, denials and timeouts.
std::vector<std::string> run_mixed_session(Rig& rig, const std::string& local) {
    rig.initialize(local, std::nullopt);
    for (int i = 0; i < 50; ++i) {
        const auto n = std::to_string(i);
        Json resp;
        switch (i % 5) {
            case 0: resp = rig.call(local, "db", "query", {{"table", "t" + n}}); break;
            case 1: resp = rig.call(local, "chat", "post", {{"channel", "ops"}, {"text", "status " + n}}); break;
            case 2: resp = rig.call(local, "files", "delete", {{"path", "/srv/data/" + n}}); break;
            case 3: resp = rig.call(local, "payments", "send", {{"amount", 10 + i}, {"payee", "vendor-" + n}}); break;
            default: resp = rig.call(local, "secrets", "rotate", {{"credential", "key-" + n}}); break;
        }
        const auto item = data_of(resp).value("item_id", "");
        if (item.empty()) continue;
        if (i % 10 == 3) rig.decide(item, "ALLOW", kApproverToken, "ok " + n);
        else if (i % 10 == 8) rig.decide(item, "DENY", kApproverToken, "no " + n);
        else if (i % 10 == 4) rig.decide(item, "ALLOW");
        else {
            rig.advance(301);
            rig.sweep();
        }
    }
    return {local};
}

Result r5(const Options& o) {
    Rig rig(o, "R5");
    Evidence ev;
    rig.reset(rig.policy("r5_mixed.json"));
    run_mixed_session(rig, "mixed");

    const auto receipts_path = rig.data_dir() ? *rig.data_dir() / "receipts.jsonl" : fs::path();
    const auto keys_path = rig.data_dir() ? *rig.data_dir() / "keys.json" : fs::path();
    if (!rig.data_dir()) throw NoFileAccess{"receipts.jsonl is not reachable"};
    const auto ring = crypto::parse_key_ring(read_file(keys_path));

    std::vector<std::string> lines;
    {
        std::istringstream in(read_file(receipts_path));
        for (std::string line; std::getline(in, line);)
            if (!line.empty() && Json::parse(line)["context"].value("session_id", "") == rig.sid("mixed"))
                lines.push_back(line);
    }
    std::set<std::uint64_t> seqs;
    std::set<std::string> kinds;
    for (const auto& l : lines) {
        auto j = Json::parse(l);
        seqs.insert(j["action"].value("seq", std::uint64_t{0}));
        kinds.insert(j["decision"].value("kind", ""));
    }
    ev.expect(seqs.size() == 50, "50 actions were receipted", std::to_string(seqs.size()));
    ev.expect(kinds == std::set<std::string>{"ALLOW", "DENY", "MODIFY", "STEP_UP", "DEFER"},
              "the session covers all five outcomes", join({kinds.begin(), kinds.end()}));

    std::size_t valid = 0;
    std::string first_bad;
    for (const auto& l : lines) {
        auto v = receipts::verify_receipt_line(l, ring);
        if (v.valid) ++valid;
        else if (first_bad.empty()) first_bad = v.reason;
    }
    ev.expect(valid == lines.size() && !lines.empty(), "every receipt verifies offline",
              std::to_string(valid) + "/" + std::to_string(lines.size()) + (first_bad.empty() ? "" : " " + first_bad));

    std::size_t fields_ok = 0;
    for (const auto& l : lines) {
        const auto j = Json::parse(l);
        const bool ok = j.contains("action") && j["action"].contains("tool") && j["action"].contains("parameters") &&
                        j.contains("context") && j["context"].contains("context_snapshot_digest") &&
                        has_all_layers(j["identity"]) && j.contains("decision") &&
                        j["decision"].contains("policy_set_digest") && j["decision"].contains("matched_policies") &&
                        j.contains("approval") && j.contains("deferral") && j.contains("outcome") &&
                        j.contains("issued_at") && j.contains("signature");
        if (ok) ++fields_ok;
    }
    ev.expect(fields_ok == lines.size(), "every receipt carries action, context, identity, decision and outcome",
              std::to_string(fields_ok) + "/" + std::to_string(lines.size()));

    bool approval_seen = false, deferral_seen = false;
    for (const auto& l : lines) {
        const auto j = Json::parse(l);
        if (j["approval"].is_object() && j["approval"].value("approver", "") == kApprover &&
            !j["approval"].value("timestamp", "").empty())
            approval_seen = true;
        if (j["deferral"].is_object() && j["deferral"].value("resolution_method", "") == "timeout") deferral_seen = true;
    }
    ev.expect(approval_seen, "approver identity, verdict and time are receipted");
    ev.expect(deferral_seen, "deferral resolution is receipted");

    std::mt19937_64 rng(o.seed);
    std::size_t detected = 0;
    const std::size_t trials = std::min<std::size_t>(50, lines.size());
    std::string miss;
    for (std::size_t t = 0; t < trials; ++t) {
        auto mutated = lines[t];
        const auto pos = rng() % mutated.size();
        mutated[pos] = static_cast<char>(static_cast<std::uint8_t>(mutated[pos]) ^ static_cast<std::uint8_t>(1 + rng() % 255));
        if (!receipts::verify_receipt_line(mutated, ring).valid) ++detected;
        else if (miss.empty()) miss = "receipt " + std::to_string(t) + " byte " + std::to_string(pos);
    }
    ev.expect(trials == 50 && detected == trials, "every single-byte receipt mutation fails verification",
              std::to_string(detected) + "/" + std::to_string(trials) + (miss.empty() ? "" : "; " + miss));

    invariants(rig, {"mixed"}, ev);
    return finish("R5", std::move(ev), rig.transcript());
}

Result r6(const Options& o) {
    Rig rig(o, "R6");
    Evidence ev;
    rig.reset(rig.policy("r1_interception.json"));

    for (const char* layer : {"human_principal", "service_identity", "agent_identity"}) {
        const auto local = std::string("missing_") + layer;
        auto id = default_identity(rig.sid(local));
        id.erase(layer);
        auto resp = rig.initialize(local, std::string("Summarize my notes"), id);
        ev.expect(outcome_of(resp) == "IDENTITY_REQUIRED", std::string("session without ") + layer + " is refused",
                  short_json(resp));
        auto call = rig.call(local, "files", "read", {{"path", "/home/alice/notes.txt"}});
        ev.expect(outcome_of(call) != "ALLOW", std::string("no action runs without ") + layer, outcome_of(call));
    }

    rig.initialize("s1", std::string("Summarize my notes"));
    for (const char* layer : {"human_principal", "service_identity", "agent_identity", "session_id"}) {
        auto id = default_identity(rig.sid("s1"));
        id.erase(layer);
        auto resp = rig.call("s1", "files", "read", {{"path", "/home/alice/notes.txt"}}, id);
        ev.expect(outcome_of(resp) == "DENY", std::string("action lacking ") + layer + " is denied", outcome_of(resp));
    }
    auto other = default_identity(rig.sid("s1"));
    other["human_principal"] = "mallory@corp.example";
    ev.expect(outcome_of(rig.call("s1", "files", "read", {{"path", "/home/alice/notes.txt"}}, other)) == "DENY",
              "action under another principal is denied");
    auto ok = rig.call("s1", "files", "read", {{"path", "/home/alice/notes.txt"}});
    ev.expect(outcome_of(ok) == "ALLOW", "fully identified action executes", outcome_of(ok));
    ev.expect(rig.upstream_calls().size() == 1, "only the identified action reached the tool",
              std::to_string(rig.upstream_calls().size()) + " calls");

    const auto rs = rig.receipts("s1");
    std::size_t complete = 0;
    for (const auto& r : rs)
        if (has_all_layers(r["identity"]) && r["identity"]["session_id"] == rig.sid("s1")) ++complete;
    ev.expect(!rs.empty() && complete == rs.size(), "every receipt carries all four identity layers and the scope",
              std::to_string(complete) + "/" + std::to_string(rs.size()));

    invariants(rig, {"s1"}, ev);
    return finish("R6", std::move(ev), rig.transcript());
}

std::string fmt(double x) {
    std::ostringstream os;
    os.precision(6);
    os << x;
    return os.str();
}

std::optional<double> drift_of(const Json& receipt) {
    const auto& d = receipt["context"]["cumulative_drift"];
    if (d.is_number()) return d.get<double>();
    return std::nullopt;
}

Result r7(const Options& o) {
    Rig rig(o, "R7");
    Evidence ev;
    rig.reset(rig.policy("r1_interception.json"));
    constexpr double kTol = 1e-9;

    // identical text: the action descriptor reproduces the request tokens
    rig.initialize("same", std::string("files read notes"));
    rig.call("same", "files", "read", {{"path", "notes"}});
    auto rs = rig.receipts("same");
    auto d = rs.empty() ? std::nullopt : drift_of(rs.back());
    ev.expect(d && std::abs(*d) <= kTol, "distance of a request to itself is 0", d ? fmt(*d) : "none");

    rig.initialize("disjoint", std::string("alpha beta gamma"));
    rig.call("disjoint", "files", "read", {{"path", "/home/x"}});
    rs = rig.receipts("disjoint");
    d = rs.empty() ? std::nullopt : drift_of(rs.back());
    ev.expect(d && std::abs(*d - 1.0) <= kTol, "distance of disjoint token sets is 1", d ? fmt(*d) : "none");

    auto sc = read_json_file(o.scenario_dir / "intent_drift_johnson.json");
    rig.reset(rig.policy("threat_corpus.json"));
    std::string request;
    std::vector<Json> steps;
    for (const auto& s : sc["steps"]) {
        if (s["op"] == "initialize") request = s.value("original_request", "");
        if (s["op"] == "call") steps.push_back(s);
    }
    rig.initialize("johnson", request);
    for (const auto& s : steps) rig.call("johnson", s["tool"], s["operation"], s["parameters"]);
    rs = rig.receipts("johnson");
    std::vector<double> running;
    for (const auto& r : rs)
        if (r["deferral"].is_null())
            if (auto x = drift_of(r)) running.push_back(*x);
    bool nondecreasing = running.size() == steps.size();
    for (std::size_t i = 1; i < running.size(); ++i) nondecreasing = nondecreasing && running[i] + kTol >= running[i - 1];
    std::string series;
    for (auto x : running) series += (series.empty() ? "" : ",") + fmt(x);
    ev.expect(nondecreasing, "running maximum never decreases", series);
    ev.expect(!running.empty() && running.back() > 0.6, "running maximum crosses 0.6", series);

    auto escalations = rig.events("kind=DRIFT_ESCALATION&session_id=" + rig.sid("johnson"));
    ev.expect(escalations.size() == 1, "one escalation event", std::to_string(escalations.size()));
    if (!escalations.empty()) {
        const auto seq = std::stoull(escalations[0]["attributes"].value("seq", "0"));
        ev.expect(seq == 4, "escalation fires at step 4", std::to_string(seq));
        ev.expect(seq < steps.size(), "escalation precedes the strategy document step", std::to_string(seq));
    }

    invariants(rig, {"same", "disjoint", "johnson"}, ev);
    return finish("R7", std::move(ev), rig.transcript());
}

// The R8 script: every outcome kind, one approval, one timeout.
void telemetry_script(Rig& rig, const std::string& local) {
    rig.initialize(local, std::nullopt);
    rig.call(local, "db", "query", {{"table", "orders"}});
    rig.call(local, "web", "search", {{"query", "carrier status"}});
    rig.call(local, "files", "delete", {{"path", "/srv/orders"}});
    auto pay = rig.call(local, "payments", "send", {{"amount", 75}, {"payee", "acme"}});
    rig.decide(data_of(pay).value("item_id", ""), "ALLOW", kApproverToken, "expected invoice");
    rig.call(local, "secrets", "rotate", {{"credential", "db-primary"}});
    rig.advance(121);
    rig.sweep();
    rig.call(local, "email", "send", {{"to", "ops@corp.example"}, {"subject", "done"}});
}

// Receipt fields that legitimately differ between runs.
Json normalized(Json r) {
    r.erase("receipt_id");
    r.erase("issued_at");
    r.erase("signature");
    r["context"].erase("session_id");
    r["context"].erase("context_snapshot_digest");
    r["identity"].erase("session_id");
    if (r["deferral"].is_object()) r["deferral"].erase("parent_receipt_id");
    if (r["outcome"].is_object()) r["outcome"].erase("item_id");
    return r;
}

Result r8(const Options& o) {
    Evidence ev;
    Json transcript = Json::array();
    std::vector<Json> baseline, degraded;

    for (int run = 0; run < 2; ++run) {
        Rig rig(o, run == 0 ? "R8-file" : "R8-dead-sink");
        const auto sink = run == 0 ? Json{{"file", (rig.dir() / "export.jsonl").string()}}
                                   : Json{{"http", "http://127.0.0.1:9/unreachable"}};
        rig.reset(rig.policy("r4_deferral.json"), {{"telemetry", sink}});
        telemetry_script(rig, "s1");
        const auto rs = rig.receipts("s1");
        for (const auto& r : rs) (run == 0 ? baseline : degraded).push_back(normalized(r));

        if (run == 0) {
            const auto decisions = rig.events("kind=DECISION&session_id=" + rig.sid("s1"));
            std::multiset<std::string> by_receipt;
            for (const auto& e : decisions) by_receipt.insert(e.value("receipt_id", Json()).is_string() ? e["receipt_id"].get<std::string>() : "");
            bool one_each = decisions.size() == rs.size();
            for (const auto& r : rs) one_each = one_each && by_receipt.count(r.value("receipt_id", "")) == 1;
            ev.expect(one_each, "exactly one DECISION event per receipt",
                      std::to_string(decisions.size()) + " events, " + std::to_string(rs.size()) + " receipts");

            std::size_t parked = 0;
            for (const auto& r : rs)
                if (r["outcome"].is_object() && r["outcome"].value("status", "") == "PARKED") ++parked;
            const auto created = rig.events("kind=PENDING_CREATED&session_id=" + rig.sid("s1"));
            ev.expect(parked >= 2 && created.size() == parked, "one PENDING_CREATED event per DEFER or STEP_UP",
                      std::to_string(created.size()) + " events, " + std::to_string(parked) + " parked receipts");
            const auto denies = rig.events("decision=DENY&kind=DECISION&session_id=" + rig.sid("s1"));
            bool warned = !denies.empty();
            for (const auto& e : denies) warned = warned && e.value("severity", "") != "INFO";
            ev.expect(warned, "denials are exported above INFO severity", std::to_string(denies.size()) + " denials");
        }
        if (run == 1 && rig.data_dir()) {
            std::error_code ec;
            const auto size = fs::file_size(*rig.data_dir() / "telemetry.spill.jsonl", ec);
            ev.expect(!ec && size > 0, "undeliverable events are spilled locally", ec ? ec.message() : "");
        }
        invariants(rig, {"s1"}, ev);
        transcript.push_back({{"run", run}, {"transcript", rig.transcript()}});
    }
    std::string diff;
    if (baseline.size() != degraded.size()) diff = std::to_string(baseline.size()) + " vs " + std::to_string(degraded.size());
    for (std::size_t i = 0; diff.empty() && i < baseline.size(); ++i)
        if (canonical_serialize(baseline[i]) != canonical_serialize(degraded[i])) diff = "receipt " + std::to_string(i) + " differs";
    ev.expect(diff.empty(), "a dead telemetry sink changes no decision or receipt", diff);
    return finish("R8", std::move(ev), transcript);
}

Result r9(const Options&) {
    Result r;
    r.id = "R9";
    r.status = Status::Skipped;
    r.reason = "out of scope";
    return r;
}

// ---------------------------------------------------------------------------
// scenario runner

Json substitute(const Json& j, const std::map<std::string, Json>& saved) {
    if (j.is_string()) {
        auto s = j.get<std::string>();
        for (const auto& [name, data] : saved) {
            const auto token = "{{" + name + "}}";
            for (auto pos = s.find(token); pos != std::string::npos; pos = s.find(token))
                s.replace(pos, token.size(), data.value("item_id", ""));
        }
        return s;
    }
    if (j.is_array() || j.is_object()) {
        Json out = j;
        for (auto it = out.begin(); it != out.end(); ++it) it.value() = substitute(it.value(), saved);
        return out;
    }
    return j;
}

bool subset_of(const Json& want, const Json& have) {
    if (!want.is_object()) return want == have;
    if (!have.is_object()) return false;
    for (auto it = want.begin(); it != want.end(); ++it)
        if (!have.contains(it.key()) || !subset_of(it.value(), have[it.key()])) return false;
    return true;
}

Result run_scenario(const Options& o, const std::string& id) {
    const auto sc = read_json_file(o.scenario_dir / (id + ".json"));
    Rig rig(o, "scenario-" + id);
    Evidence ev;
    rig.reset(read_json_file(o.scenario_dir / sc.at("policy").get<std::string>()));
    std::map<std::string, Json> saved;
    std::vector<std::string> sessions;
    int n = 0;
    for (const auto& raw : sc.at("steps")) {
        const auto step = substitute(raw, saved);
        const auto op = step.at("op").get<std::string>();
        const auto label = "step " + std::to_string(++n) + " " + op;
        const Json expect = step.value("expect", Json::object());
        if (op == "initialize") {
            const auto session = step.at("session").get<std::string>();
            std::optional<std::string> req;
            if (step.contains("original_request")) req = step["original_request"].get<std::string>();
            auto resp = rig.initialize(session, req, step.value("identity", Json()));
            sessions.push_back(session);
            ev.expect(resp.contains("result") == expect.value("ok", true), label, short_json(resp));
        } else if (op == "call" || op == "poll") {
            const auto session = step.at("session").get<std::string>();
            const auto resp = op == "call"
                                  ? rig.call(session, step.at("tool"), step.at("operation"),
                                             step.value("parameters", Json::object()), step.value("identity", Json()))
                                  : rig.poll(session, saved.at(step.at("item").get<std::string>()).value("item_id", ""));
            const auto data = data_of(resp);
            if (step.contains("save")) saved[step["save"].get<std::string>()] = data;
            std::string why;
            const auto got = outcome_of(resp);
            if (expect.contains("outcome") && got != expect["outcome"]) why = "outcome " + got;
            if (why.empty() && expect.contains("defer_reason") && data.value("defer_reason", Json()) != expect["defer_reason"])
                why = "defer_reason " + short_json(data.value("defer_reason", Json()));
            if (why.empty() && expect.contains("resolution") && data.value("resolution", Json()) != expect["resolution"])
                why = "resolution " + short_json(data.value("resolution", Json()));
            if (why.empty() && expect.contains("reason_contains") &&
                reason_of(resp).find(expect["reason_contains"].get<std::string>()) == std::string::npos)
                why = "reason " + reason_of(resp);
            if (why.empty() && expect.contains("matched")) {
                const auto rs = rig.receipts(session);
                const Json* r = data.value("receipt_id", Json()).is_string() ? find_receipt(rs, data["receipt_id"]) : nullptr;
                const auto top = r ? top_policy(*r) : std::string("(no receipt)");
                if (top != expect["matched"]) why = "matched " + top;
            }
            ev.expect(why.empty(), label + (step.contains("tool") ? " " + step["tool"].get<std::string>() + "." +
                                                                        step["operation"].get<std::string>()
                                                                  : ""),
                      why.empty() ? got : why);
        } else if (op == "approve" || op == "deny") {
            const auto item = saved.at(step.at("item").get<std::string>()).value("item_id", "");
            auto r = rig.decide(item, op == "approve" ? "ALLOW" : "DENY", step.value("token", kApproverToken),
                                step.value("note", ""));
            ev.expect(r.status == expect.value("http", 200), label, std::to_string(r.status));
        } else if (op == "advance_clock") {
            rig.advance(step.at("seconds").get<double>());
        } else if (op == "sweep") {
            ev.expect(rig.sweep().status == 200, label);
        } else if (op == "set_response") {
            rig.mock().set_response(step.at("key"), step.at("output"));
        } else if (op == "assert_upstream") {
            const auto calls = rig.upstream_calls();
            std::string why;
            if (step.contains("count") && calls.size() != step["count"].get<std::size_t>())
                why = std::to_string(calls.size()) + " calls";
            for (const auto& want : step.value("includes", Json::array()))
                if (std::none_of(calls.begin(), calls.end(), [&](const Json& c) { return subset_of(want, c); }))
                    why = "missing " + short_json(want);
            for (const auto& bad : step.value("excludes", Json::array()))
                for (const auto& c : calls)
                    if (subset_of(bad, c)) why = "unexpected " + short_json(c);
            ev.expect(why.empty(), label, why);
        } else if (op == "assert_receipts") {
            const auto got = kinds_of(rig.receipts(step.at("session")));
            ev.expect(got == step.at("kinds").get<std::vector<std::string>>(), label, join(got));
        } else if (op == "assert_telemetry") {
            auto events = rig.events("kind=" + step.at("kind").get<std::string>() + "&session_id=" +
                                     rig.sid(step.at("session")));
            const Json attrs = step.value("attributes", Json::object());
            std::size_t matching = 0;
            for (const auto& e : events)
                if (subset_of(attrs, e.value("attributes", Json::object()))) ++matching;
            ev.expect(matching == step.value("count", std::size_t{1}) && matching == events.size(), label,
                      std::to_string(matching) + " of " + std::to_string(events.size()) + " events match");
        } else {
            ev.expect(false, label, "unknown step");
        }
    }
    invariants(rig, sessions, ev);
    return finish(id, std::move(ev), rig.transcript());
}

using Runner = std::function<Result(const Options&)>;

Result guarded(const std::string& id, const Runner& f, const Options& o) {
    try {
        return f(o);
    } catch (const TargetDown& e) {
        Result r;
        r.id = id;
        r.status = Status::Skipped;
        r.reason = "target down: " + e.detail;
        return r;
    } catch (const NoFileAccess& e) {
        Result r;
        r.id = id;
        r.status = Status::Skipped;
        r.reason = "no file access: " + e.detail;
        return r;
    } catch (const std::exception& e) {
        Result r;
        r.id = id;
        r.status = Status::Fail;
        r.reason = std::string("harness error: ") + e.what();
        return r;
    }
}

const std::map<std::string, Runner>& requirement_table() {
    static const std::map<std::string, Runner> t{{"R1", r1}, {"R2", r2}, {"R3", r3}, {"R4", r4}, {"R5", r5},
                                                 {"R6", r6}, {"R7", r7}, {"R8", r8}, {"R9", r9}};
    return t;
}

Json result_json(const Result& r) {
    Json checks = Json::array();
    for (const auto& c : r.checks) checks.push_back({{"name", c.name}, {"ok", c.ok}, {"detail", c.detail}});
    return Json{{"id", r.id}, {"status", to_string(r.status)}, {"reason", r.reason}, {"checks", checks},
                {"transcript", r.transcript}};
}

} // namespace

const std::vector<std::string>& requirement_ids() {
    static const std::vector<std::string> ids{"R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8", "R9"};
    return ids;
}

std::vector<std::string> scenario_ids(const fs::path& scenario_dir) {
    std::vector<std::string> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(scenario_dir, ec))
        if (e.is_regular_file() && e.path().extension() == ".json") out.push_back(e.path().stem().string());
    std::sort(out.begin(), out.end());
    return out;
}

std::string level_for(const std::vector<Result>& requirements) {
    auto passed = [&](const std::string& id) {
        return std::any_of(requirements.begin(), requirements.end(),
                           [&](const Result& r) { return r.id == id && r.status == Status::Pass; });
    };
    bool core = true;
    for (const char* id : {"R1", "R2", "R3", "R4", "R5", "R6"}) core = core && passed(id);
    if (!core) return "none";
    return passed("R7") && passed("R8") ? "AARM Extended" : "AARM Core";
}

Json Report::to_json() const {
    Json reqs = Json::array(), scs = Json::array();
    for (const auto& r : requirements) reqs.push_back(result_json(r));
    for (const auto& r : scenarios) scs.push_back(result_json(r));
    return Json{{"level", level}, {"complete", complete}, {"requirements", reqs}, {"scenarios", scs}};
}

std::string Report::to_text() const {
    std::ostringstream os;
    auto line = [&](const Result& r) {
        os << "  " << r.id << std::string(r.id.size() < 28 ? 28 - r.id.size() : 1, ' ') << to_string(r.status);
        if (!r.reason.empty()) os << "  (" << r.reason << ")";
        os << '\n';
    };
    if (!requirements.empty()) {
        os << "requirements\n";
        for (const auto& r : requirements) line(r);
    }
    if (!scenarios.empty()) {
        os << "scenarios\n";
        for (const auto& r : scenarios) line(r);
    }
    os << "level: " << level << (complete ? "" : " (partial run)") << '\n';
    return os.str();
}

bool Report::passed() const {
    for (const auto& r : scenarios)
        if (r.status == Status::Fail) return false;
    if (complete) return level != "none";
    // partial run: nothing failed and something actually passed
    bool any = false;
    for (const auto* set : {&requirements, &scenarios})
        for (const auto& r : *set) {
            if (r.status == Status::Fail) return false;
            any = any || r.status == Status::Pass;
        }
    return any;
}

Report run(Options o) {
    if (o.scenario_dir.empty()) o.scenario_dir = fs::path(AARM_SOURCE_DIR) / "scenarios";
    if (o.work_dir.empty()) o.work_dir = fs::temp_directory_path() / "aarm-conform";
    fs::create_directories(o.work_dir);
    if (o.target) o.parallel = false;  // one shared target cannot isolate concurrent configurations

    std::vector<std::string> reqs = o.requirements, scs = o.scenarios;
    if (reqs.empty() && scs.empty()) {
        reqs = requirement_ids();
        scs = scenario_ids(o.scenario_dir);
    }
    for (const auto& id : reqs)
        if (!requirement_table().count(id)) throw std::invalid_argument("unknown requirement " + id);
    for (const auto& id : scs)
        if (!fs::exists(o.scenario_dir / (id + ".json"))) throw std::invalid_argument("unknown scenario " + id);

    std::vector<std::pair<std::string, Runner>> jobs;
    for (const auto& id : reqs) jobs.emplace_back(id, requirement_table().at(id));
    for (const auto& id : scs) jobs.emplace_back(id, [id](const Options& opt) { return run_scenario(opt, id); });

    std::vector<Result> results(jobs.size());
    if (o.parallel) {
        std::vector<std::future<Result>> futures;
        for (const auto& [id, f] : jobs)
            futures.push_back(std::async(std::launch::async, [&o, id = id, f = f] { return guarded(id, f, o); }));
        for (std::size_t i = 0; i < jobs.size(); ++i) results[i] = futures[i].get();
    } else {
        for (std::size_t i = 0; i < jobs.size(); ++i) results[i] = guarded(jobs[i].first, jobs[i].second, o);
    }

    Report rep;
    rep.requirements.assign(results.begin(), results.begin() + static_cast<std::ptrdiff_t>(reqs.size()));
    rep.scenarios.assign(results.begin() + static_cast<std::ptrdiff_t>(reqs.size()), results.end());
    rep.level = level_for(rep.requirements);
    rep.complete = true;
    for (const char* id : {"R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8"})
        rep.complete = rep.complete && std::find(reqs.begin(), reqs.end(), id) != reqs.end();
    return rep;
}

} // namespace aarm::conformance
