#include "aarm/gateway.hpp"

#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;

namespace aarm {

namespace {

struct RpcFailure {
    int code;
    std::string message;
    Json data = nullptr;
};

struct UrlParts {
    std::string origin;  // scheme://host:port
    std::string path;
};

UrlParts split_url(const std::string& url) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw ConfigError("not an http URL: " + url);
    return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

std::chrono::milliseconds seconds_field(const Json& j, const char* key, std::chrono::milliseconds fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number() || j[key].get<double>() < 0) throw ConfigError(std::string(key) + " must be a non-negative number");
    return std::chrono::milliseconds(static_cast<std::int64_t>(j[key].get<double>() * 1000.0));
}

std::string string_field(const Json& j, const char* key) {
    auto it = j.find(key);
    return it != j.end() && it->is_string() ? it->get<std::string>() : std::string();
}

Identity lenient_identity(const Json& j) {
    Identity id;
    if (!j.is_object()) return id;
    id.human_principal = string_field(j, "human_principal");
    id.service_identity = string_field(j, "service_identity");
    id.agent_identity = string_field(j, "agent_identity");
    id.session_id = string_field(j, "session_id");
    if (auto it = j.find("privilege_scope"); it != j.end() && it->is_array())
        for (const auto& s : *it)
            if (s.is_string()) id.privilege_scope.push_back(s.get<std::string>());
    return id;
}

std::map<std::string, std::string> string_map(const Json& j, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object of strings");
    std::map<std::string, std::string> out;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!it.value().is_string()) throw ConfigError(std::string(what) + "." + it.key() + " must be a string");
        out[it.key()] = it.value().get<std::string>();
    }
    return out;
}

HttpReply json_reply(int status, const Json& body) { return {status, canonical_serialize(body) + "\n"}; }

HttpReply error_reply(int status, const std::string& message) { return json_reply(status, Json{{"error", message}}); }

std::string resolution_of(const PendingItem& item) {
    if (item.status == PendingStatus::TimedOut) return "timeout";
    if (item.resolver && item.resolver->rfind("auto:", 0) == 0) return "re-evaluation";
    return item.status == PendingStatus::ResolvedAllow ? "human_allow" : "human_deny";
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ','))
        if (!part.empty()) out.push_back(part);
    return out;
}

} // namespace

GatewayConfig GatewayConfig::from_json(const Json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    auto resolve = [&](const std::string& p) -> std::string {
        if (p.empty() || fs::path(p).is_absolute() || base_dir.empty()) return p;
        return (base_dir / p).string();
    };
    GatewayConfig c;
    if (j.contains("listen")) {
        const auto listen = j["listen"].get<std::string>();
        const auto colon = listen.rfind(':');
        if (colon == std::string::npos) throw ConfigError("listen must be host:port");
        c.host = listen.substr(0, colon);
        try {
            c.port = std::stoi(listen.substr(colon + 1));
        } catch (const std::exception&) {
            throw ConfigError("listen port is not a number");
        }
    }
    if (j.contains("upstreams")) c.upstreams = string_map(j["upstreams"], "upstreams");
    c.policy_file = resolve(j.value("policy_file", ""));
    if (j.contains("policy")) c.policy_document = j["policy"].is_string() ? j["policy"].get<std::string>() : j["policy"].dump();
    if (j.contains("data_dir")) c.data_dir = resolve(j["data_dir"].get<std::string>());
    if (j.contains("timeouts")) {
        const auto& t = j["timeouts"];
        c.step_up_timeout = seconds_field(t, "step_up_seconds", c.step_up_timeout);
        c.defer_timeout = seconds_field(t, "defer_seconds", c.defer_timeout);
        c.hold = seconds_field(t, "hold_seconds", c.hold);
    }
    if (j.contains("cascade_limit")) {
        if (!j["cascade_limit"].is_number_integer() || j["cascade_limit"].get<std::int64_t>() < 0) throw ConfigError("cascade_limit must be a non-negative integer");
        c.cascade_limit = j["cascade_limit"].get<std::size_t>();
    }
    if (j.contains("approvers")) c.approver_tokens = string_map(j["approvers"], "approvers");
    c.signing_key = resolve(j.value("signing_key", ""));
    if (j.contains("telemetry")) {
        c.telemetry = j["telemetry"];
        if (c.telemetry.contains("file"))
            c.telemetry["file"] = resolve(c.telemetry["file"].get<std::string>());
    }
    if (j.contains("telemetry_filter")) c.telemetry_filter = j["telemetry_filter"];
    if (j.contains("embedder")) c.embedder = Json{{"embedder", j["embedder"]}, {"dimension", j.value("dimension", 256)}};
    if (j.contains("redact"))
        for (const auto& k : j["redact"]) c.redact.insert(k.get<std::string>());
    c.sweep_interval = seconds_field(j, "sweep_seconds", c.sweep_interval);
    if (j.value("fail_mode", std::string("CLOSED")) != "CLOSED") throw ConfigError("fail_mode can only be CLOSED");
    c.test_mode = j.value("test_mode", false);
    if (j.contains("test_clock")) c.test_clock = j["test_clock"].get<std::string>();
    c.id_seed = j.value("id_seed", std::uint64_t{0});
    if (c.policy_file.empty() && !c.policy_document && !c.test_mode) throw ConfigError("policy_file is required");
    return c;
}

GatewayConfig GatewayConfig::load(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config " + file.string());
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::exception& e) {
        throw ConfigError("config " + file.string() + ": " + e.what());
    }
    return from_json(j, file.parent_path());
}

RemoteClock::RemoteClock(std::string url) : url_(std::move(url)) {}

TimePoint RemoteClock::now() const {
    const auto parts = split_url(url_);
    httplib::Client cli(parts.origin);
    cli.set_connection_timeout(2);
    cli.set_read_timeout(2);
    std::lock_guard lock(mutex_);
    if (auto res = cli.Get(parts.path); res && res->status == 200) {
        try {
            if (auto t = parse_rfc3339(Json::parse(res->body).at("now").get<std::string>())) {
                last_ = t;
                return *t;
            }
        } catch (const std::exception&) {
        }
    }
    // an unreachable test clock must not move time backwards
    if (last_) return *last_;
    return SystemClock().now();
}

TimePoint SwitchableClock::now() const {
    std::shared_lock lock(mutex_);
    return inner_->now();
}

void SwitchableClock::set(std::shared_ptr<const Clock> inner) {
    std::unique_lock lock(mutex_);
    inner_ = std::move(inner);
}

HttpForwarder::HttpForwarder(std::map<std::string, std::string> registry) : registry_(std::move(registry)) {}

bool HttpForwarder::knows(const std::string& tool) const {
    std::shared_lock lock(mutex_);
    return registry_.count(tool) != 0;
}

void HttpForwarder::set_registry(std::map<std::string, std::string> registry) {
    std::unique_lock lock(mutex_);
    registry_ = std::move(registry);
}

std::map<std::string, std::string> HttpForwarder::registry() const {
    std::shared_lock lock(mutex_);
    return registry_;
}

ForwardResult HttpForwarder::call(const std::string& tool, const std::string& operation, const Json& parameters) {
    std::string url;
    {
        std::shared_lock lock(mutex_);
        auto it = registry_.find(tool);
        if (it == registry_.end()) return {false, nullptr, "unknown tool"};
        url = it->second;
    }
    UrlParts parts;
    try {
        parts = split_url(url);
    } catch (const ConfigError& e) {
        return {false, nullptr, e.what()};
    }
    httplib::Client cli(parts.origin);
    cli.set_connection_timeout(5);
    cli.set_read_timeout(30);
    const Json req{{"jsonrpc", "2.0"},
                   {"id", next_id_++},
                   {"method", "tools/call"},
                   {"params", {{"tool", tool}, {"operation", operation}, {"parameters", parameters}}}};
    auto res = cli.Post(parts.path, req.dump(), "application/json");
    if (!res) return {false, nullptr, "upstream unreachable: " + httplib::to_string(res.error())};
    if (res->status != 200) return {false, nullptr, "upstream HTTP " + std::to_string(res->status)};
    try {
        auto j = Json::parse(res->body);
        if (j.contains("error")) return {false, nullptr, j["error"].value("message", std::string("upstream error"))};
        return {true, j.value("result", Json()), ""};
    } catch (const Json::exception&) {
        return {false, nullptr, "upstream sent malformed JSON"};
    }
}

Gateway::Gateway(GatewayConfig config, std::shared_ptr<ToolForwarder> forwarder)
    : config_(std::move(config)), approver_tokens_(config_.approver_tokens), hold_(config_.hold) {
    std::error_code ec;
    fs::create_directories(config_.data_dir, ec);
    if (ec) throw ConfigError("cannot create data directory " + config_.data_dir.string());

    std::shared_ptr<const Clock> base = std::make_shared<SystemClock>();
    if (config_.test_mode) {
        std::optional<std::string> clock_url = config_.test_clock;
        if (!clock_url)
            if (const char* env = std::getenv("AARM_TEST_CLOCK"); env && *env) clock_url = env;
        if (clock_url) base = std::make_shared<RemoteClock>(*clock_url);
    }
    clock_ = std::make_shared<SwitchableClock>(base);
    ids_ = config_.test_mode && config_.id_seed ? std::make_shared<IdSource>(config_.id_seed) : std::make_shared<IdSource>();

    if (!config_.signing_key.empty()) {
        if (fs::exists(config_.signing_key)) {
            key_ = std::make_shared<const crypto::SigningKey>(crypto::SigningKey::load(config_.signing_key));
        } else {
            auto k = crypto::SigningKey::generate();
            k.save(config_.signing_key);
            key_ = std::make_shared<const crypto::SigningKey>(std::move(k));
        }
    } else if (config_.test_mode && config_.id_seed) {
        const auto seed = crypto::sha256("aarm-test-key:" + std::to_string(config_.id_seed));
        key_ = std::make_shared<const crypto::SigningKey>(crypto::SigningKey::from_seed(seed));
    } else {
        const auto path = config_.data_dir / "signing_key.json";
        if (fs::exists(path)) {
            key_ = std::make_shared<const crypto::SigningKey>(crypto::SigningKey::load(path));
        } else {
            auto k = crypto::SigningKey::generate();
            k.save(path);
            key_ = std::make_shared<const crypto::SigningKey>(std::move(k));
        }
    }

    ledger_ = std::make_unique<ledger::ContextLedger>(config_.data_dir / "ledger");
    vault_ = std::make_unique<receipts::ReceiptVault>(config_.data_dir, key_, clock_, ids_, config_.redact);
    telemetry_ = std::make_unique<telemetry::Hub>(config_.data_dir, clock_, ids_, telemetry::make_sink(config_.telemetry),
                                                  telemetry::Filter::from_json(config_.telemetry_filter));

    std::shared_ptr<const policy::PolicySet> ps;
    std::string source;
    if (config_.policy_document) {
        ps = std::make_shared<const policy::PolicySet>(policy::parse_policy_set(*config_.policy_document));
        source = "inline";
    } else if (!config_.policy_file.empty()) {
        ps = std::make_shared<const policy::PolicySet>(policy::load_policy_file(config_.policy_file));
        source = config_.policy_file;
    } else {
        ps = std::make_shared<const policy::PolicySet>(policy::parse_policy_set(R"({"version":1,"policies":[]})"));
        source = "empty";
    }

    http_forwarder_ = std::make_shared<HttpForwarder>(config_.upstreams);
    forwarder_ = forwarder ? std::move(forwarder) : http_forwarder_;
    std::shared_ptr<const intent::Embedder> embedder = intent::make_embedder(config_.embedder);
    orchestrator_ = std::make_unique<Orchestrator>(*ledger_, *vault_, *telemetry_, ps, embedder, *forwarder_, clock_, ids_,
                                                   orchestrator_config());
    load_policies(ps, source);
}

Gateway::~Gateway() { stop(); }

OrchestratorConfig Gateway::orchestrator_config() const {
    OrchestratorConfig oc;
    oc.step_up_timeout = config_.step_up_timeout;
    oc.defer_timeout = config_.defer_timeout;
    oc.cascade_limit = config_.cascade_limit;
    std::lock_guard lock(config_mutex_);
    for (const auto& [token, principal] : approver_tokens_) oc.approvers.insert(principal);
    oc.journal_file = config_.data_dir / "journal.jsonl";
    return oc;
}

void Gateway::load_policies(std::shared_ptr<const policy::PolicySet> ps, const std::string& source) {
    orchestrator_->set_policies(ps);
    telemetry::Event ev;
    ev.kind = telemetry::EventKind::ConfigLoaded;
    ev.attributes = {{"policy_set_digest", ps->digest()},
                     {"policies", std::to_string(ps->policies().size())},
                     {"source", source}};
    telemetry_->emit(std::move(ev));
}

std::string Gateway::url() const { return "http://" + config_.host + ":" + std::to_string(port_); }

Json Gateway::handle_rpc(const Json& request) {
    Json id = request.is_object() && request.contains("id") ? request["id"] : Json();
    auto error = [&](int code, const std::string& message, const Json& data) {
        Json e{{"code", code}, {"message", message}};
        if (!data.is_null()) e["data"] = data;
        return Json{{"jsonrpc", "2.0"}, {"id", id}, {"error", e}};
    };
    if (!request.is_object() || request.value("jsonrpc", "") != "2.0" || !request.contains("method") ||
        !request["method"].is_string())
        return error(rpc::kInvalidRequest, "invalid JSON-RPC request", nullptr);
    const auto method = request["method"].get<std::string>();
    const Json params = request.value("params", Json::object());
    try {
        Json result;
        if (method == "session/initialize") result = rpc_initialize(params);
        else if (method == "tools/call") result = rpc_call(params);
        else if (method == "pending/status") result = rpc_status(params);
        else if (method == "tools/list") result = rpc_list(params);
        else return error(rpc::kMethodNotFound, "unknown method " + method, nullptr);
        return Json{{"jsonrpc", "2.0"}, {"id", id}, {"result", result}};
    } catch (const RpcFailure& f) {
        return error(f.code, f.message, f.data);
    } catch (const OrchestratorError& e) {
        if (e.code() == OrchestratorError::Code::NoSession) return error(rpc::kUnknownSession, e.what(), nullptr);
        return error(rpc::kInvalidParams, e.what(), nullptr);
    } catch (const std::exception& e) {
        return error(rpc::kInternal, e.what(), nullptr);
    }
}

Json Gateway::rpc_initialize(const Json& params) {
    const auto session_id = string_field(params, "session_id");
    if (session_id.empty()) throw RpcFailure{rpc::kInvalidParams, "session_id is required"};
    auto identity = lenient_identity(params.value("identity", Json()));
    if (identity.session_id.empty()) identity.session_id = session_id;
    if (auto v = validate_identity(identity); !v.empty()) {
        Json missing = Json::array();
        for (const auto& x : v) missing.push_back(x.field);
        throw RpcFailure{rpc::kIdentityRequired, "IDENTITY_REQUIRED", Json{{"missing", missing}}};
    }
    std::optional<std::string> original;
    if (auto it = params.find("original_request"); it != params.end() && it->is_string()) original = it->get<std::string>();
    try {
        const auto digest = orchestrator_->init_session(session_id, identity, original);
        return Json{{"session_id", session_id}, {"policy_set_digest", digest}};
    } catch (const OrchestratorError& e) {
        if (e.code() == OrchestratorError::Code::SessionExists) throw RpcFailure{rpc::kInvalidRequest, e.what()};
        throw RpcFailure{rpc::kIdentityRequired, e.what()};
    }
}

Json Gateway::item_reply(const PendingItem& item) {
    Json data{{"item_id", item.item_id},
              {"status", to_string(item.status)},
              {"kind", to_string(item.kind)},
              {"deadline", item.deadline},
              {"seq", item.action.seq}};
    if (!item.terminal()) {
        data["receipt_id"] = item.receipt_id;
        data["defer_reason"] = item.defer_reason ? Json(to_string(*item.defer_reason)) : Json();
        return data;
    }
    data["receipt_id"] = item.follow_up_receipt_id ? Json(*item.follow_up_receipt_id) : Json();
    data["resolution"] = resolution_of(item);
    if (item.status == PendingStatus::ResolvedAllow) {
        data["outcome"] = item.outcome ? Json(receipts::to_string(*item.outcome)) : Json();
        data["output"] = item.output ? *item.output : Json();
        data["error"] = item.error ? Json(*item.error) : Json();
        return data;
    }
    throw RpcFailure{rpc::kDeny, item.final_decision ? item.final_decision->reason : "denied", data};
}

Json Gateway::rpc_call(const Json& params) {
    const auto session_id = string_field(params, "session_id");
    if (session_id.empty()) throw RpcFailure{rpc::kInvalidParams, "session_id is required"};
    if (!orchestrator_->has_session(session_id)) throw RpcFailure{rpc::kUnknownSession, "UNKNOWN_SESSION"};
    auto tool = string_field(params, "tool");
    auto operation = string_field(params, "operation");
    if (tool.empty()) {
        const auto name = string_field(params, "name");
        const auto dot = name.rfind('.');
        if (dot != std::string::npos) {
            tool = name.substr(0, dot);
            operation = name.substr(dot + 1);
        } else {
            tool = name;
        }
    }
    Json parameters = params.contains("parameters") ? params["parameters"] : params.value("arguments", Json::object());
    std::optional<Identity> identity;
    if (params.contains("identity")) identity = lenient_identity(params["identity"]);

    auto r = orchestrator_->submit(session_id, tool, operation, parameters, identity);
    Json data{{"seq", r.action.seq},
              {"decision", to_string(r.decision.kind)},
              {"receipt_id", r.receipt_id ? Json(*r.receipt_id) : Json()},
              {"matched_policies", r.decision.matched_policies},
              {"reason", r.decision.reason}};
    switch (r.status) {
    case receipts::OutcomeStatus::Executed:
        data["status"] = "EXECUTED";
        data["output"] = r.output ? *r.output : Json();
        return data;
    case receipts::OutcomeStatus::ExecutedWithError:
        data["status"] = "EXECUTED_WITH_ERROR";
        data["error"] = r.error ? Json(*r.error) : Json();
        return data;
    case receipts::OutcomeStatus::Blocked:
        data["status"] = "BLOCKED";
        if (r.error) data["error"] = *r.error;
        throw RpcFailure{rpc::kDeny, r.decision.reason, data};
    case receipts::OutcomeStatus::Parked: break;
    }

    std::chrono::milliseconds hold;
    {
        std::lock_guard lock(config_mutex_);
        hold = hold_;
    }
    const auto item = orchestrator_->wait_terminal(*r.item_id, hold);
    if (!item.terminal()) {
        const bool step_up = item.kind == DecisionKind::StepUp;
        throw RpcFailure{step_up ? rpc::kStepUpParked : rpc::kDeferParked, step_up ? "STEP_UP_PARKED" : "DEFER_PARKED",
                         item_reply(item)};
    }
    auto reply = item_reply(item);
    reply["status"] = reply["outcome"];
    return reply;
}

Json Gateway::rpc_status(const Json& params) {
    const auto session_id = string_field(params, "session_id");
    const auto item_id = string_field(params, "item_id");
    if (!orchestrator_->has_session(session_id)) throw RpcFailure{rpc::kUnknownSession, "UNKNOWN_SESSION"};
    orchestrator_->expire_timeouts(clock_->now());
    PendingItem item;
    try {
        item = orchestrator_->item(item_id);
    } catch (const OrchestratorError&) {
        throw RpcFailure{rpc::kInvalidParams, "unknown item " + item_id};
    }
    if (item.session_id != session_id) throw RpcFailure{rpc::kForbidden, "FORBIDDEN"};
    return item_reply(item);
}

Json Gateway::rpc_list(const Json&) {
    Json tools = Json::array();
    std::set<std::string> seen;
    for (const auto& [tool, url] : http_forwarder_->registry()) {
        UrlParts parts;
        try {
            parts = split_url(url);
        } catch (const ConfigError&) {
            continue;
        }
        httplib::Client cli(parts.origin);
        cli.set_connection_timeout(2);
        cli.set_read_timeout(5);
        const Json req{{"jsonrpc", "2.0"}, {"id", 1}, {"method", "tools/list"}, {"params", Json::object()}};
        auto res = cli.Post(parts.path, req.dump(), "application/json");
        bool listed = false;
        if (res && res->status == 200) {
            try {
                auto j = Json::parse(res->body);
                for (const auto& t : j.at("result").at("tools"))
                    if (t.value("tool", "") == tool && seen.insert(canonical_serialize(t)).second) {
                        tools.push_back(t);
                        listed = true;
                    }
            } catch (const std::exception&) {
            }
        }
        if (!listed && seen.insert(tool).second) tools.push_back(Json{{"tool", tool}});
    }
    return Json{{"tools", tools}};
}

HttpReply Gateway::list_pending(const std::optional<std::string>& session_id, const std::string& bearer,
                                bool include_terminal) {
    {
        std::lock_guard lock(config_mutex_);
        if (!approver_tokens_.count(bearer)) return error_reply(403, "not an authorized approver");
    }
    orchestrator_->expire_timeouts(clock_->now());
    const auto ps = orchestrator_->policies();
    Json out = Json::array();
    for (const auto& item : orchestrator_->pending(session_id, include_terminal)) {
        Json j = item.to_json();
        j["action"]["parameters"] = vault_->redact(item.action.parameters);
        const auto snap = ledger_->current_context(item.session_id);
        const auto init = ledger_->session_init(item.session_id);
        Json timeline = Json::array();
        for (const auto& h : snap.history)
            timeline.push_back({{"seq", h.seq},
                                {"tool", h.tool},
                                {"operation", h.operation},
                                {"disposition", ledger::to_string(h.disposition)}});
        j["original_request"] = init && init->original_request ? Json(*init->original_request) : Json();
        j["timeline"] = timeline;
        j["data_classifications"] = snap.data_classifications;
        j["cumulative_drift"] = snap.cumulative_drift ? Json(*snap.cumulative_drift) : Json();
        j["drift_threshold"] = ps->defaults().drift_threshold;
        j["matched_policies"] = item.decision.matched_policies;
        j["reason"] = item.decision.reason;
        out.push_back(std::move(j));
    }
    return json_reply(200, out);
}

HttpReply Gateway::decide(const std::string& item_id, const Json& body) {
    if (!body.is_object()) return error_reply(400, "body must be a JSON object");
    const auto verdict = parse_decision_kind(string_field(body, "verdict"));
    if (!verdict || (*verdict != DecisionKind::Allow && *verdict != DecisionKind::Deny))
        return error_reply(400, "verdict must be ALLOW or DENY");
    std::string approver;
    {
        std::lock_guard lock(config_mutex_);
        if (auto it = approver_tokens_.find(string_field(body, "approver_token")); it != approver_tokens_.end())
            approver = it->second;
    }
    try {
        auto item = orchestrator_->submit_approval_decision(item_id, approver, *verdict, string_field(body, "note"));
        Json j = item.to_json();
        j["action"]["parameters"] = vault_->redact(item.action.parameters);
        j["resolution"] = resolution_of(item);
        return json_reply(200, j);
    } catch (const OrchestratorError& e) {
        switch (e.code()) {
        case OrchestratorError::Code::NotFound: return error_reply(404, e.what());
        case OrchestratorError::Code::Conflict: return error_reply(409, e.what());
        case OrchestratorError::Code::Forbidden: return error_reply(403, e.what());
        default: return error_reply(400, e.what());
        }
    }
}

HttpReply Gateway::receipts(const std::map<std::string, std::string>& query) {
    receipts::Filter f;
    auto get = [&](const char* key) -> std::optional<std::string> {
        auto it = query.find(key);
        if (it == query.end() || it->second.empty()) return std::nullopt;
        return it->second;
    };
    f.session_id = get("session_id");
    f.tool = get("tool");
    f.from = get("from");
    f.to = get("to");
    if (auto kinds = get("kind"))
        for (const auto& k : split_list(*kinds)) {
            auto kind = parse_decision_kind(k);
            if (!kind) return error_reply(400, "unknown decision kind " + k);
            f.kinds.insert(*kind);
        }
    try {
        return json_reply(200, Json(vault_->query(f)));
    } catch (const receipts::QueryError& e) {
        return error_reply(400, e.what());
    }
}

HttpReply Gateway::verify_session(const std::string& session_id) {
    if (!ledger_->has_session(session_id)) return error_reply(404, "unknown session");
    const auto report = ledger_->verify_chain(session_id);
    telemetry::Event ev;
    ev.kind = telemetry::EventKind::ChainVerification;
    ev.session_id = session_id;
    ev.severity = report.ok ? telemetry::Severity::Info : telemetry::Severity::Critical;
    ev.attributes = {{"ok", report.ok ? "true" : "false"}, {"detail", report.detail}};
    if (report.corrupt_seq) ev.attributes["corrupt_seq"] = std::to_string(*report.corrupt_seq);
    telemetry_->emit(std::move(ev));
    return json_reply(200, Json{{"session_id", session_id},
                                {"ok", report.ok},
                                {"corrupt_seq", report.corrupt_seq ? Json(*report.corrupt_seq) : Json()},
                                {"detail", report.detail}});
}

HttpReply Gateway::telemetry_export(const std::map<std::string, std::string>& query) {
    Json fj = Json::object();
    for (const char* key : {"kind", "decision", "severity"})
        if (auto it = query.find(key); it != query.end() && !it->second.empty()) fj[key] = split_list(it->second);
    for (const char* key : {"session_id", "tool", "human_principal"})
        if (auto it = query.find(key); it != query.end() && !it->second.empty()) fj[key] = it->second;
    telemetry::Filter f;
    try {
        f = telemetry::Filter::from_json(fj);
    } catch (const std::exception& e) {
        return error_reply(400, e.what());
    }
    std::string body;
    for (const auto& e : telemetry_->events(f)) body += canonical_serialize(e.to_json()) + "\n";
    return {200, body, "application/x-ndjson"};
}

HttpReply Gateway::test_configure(const Json& body) {
    if (!config_.test_mode) return error_reply(403, "test mode is off");
    if (!body.is_object()) return error_reply(400, "body must be a JSON object");
    try {
        if (body.contains("policy")) {
            const auto doc = body["policy"].is_string() ? body["policy"].get<std::string>() : body["policy"].dump();
            load_policies(std::make_shared<const policy::PolicySet>(policy::parse_policy_set(doc)), "test/configure");
        }
        if (body.contains("upstreams")) http_forwarder_->set_registry(string_map(body["upstreams"], "upstreams"));
        if (body.contains("clock")) {
            if (body["clock"].is_null()) clock_->set(std::make_shared<SystemClock>());
            else clock_->set(std::make_shared<RemoteClock>(body["clock"].get<std::string>()));
        }
        if (body.contains("timeouts")) {
            const auto& t = body["timeouts"];
            config_.step_up_timeout = seconds_field(t, "step_up_seconds", config_.step_up_timeout);
            config_.defer_timeout = seconds_field(t, "defer_seconds", config_.defer_timeout);
            std::lock_guard lock(config_mutex_);
            hold_ = seconds_field(t, "hold_seconds", hold_);
        }
        if (body.contains("cascade_limit")) {
            if (!body["cascade_limit"].is_number_integer() || body["cascade_limit"].get<std::int64_t>() < 0)
                throw ConfigError("cascade_limit must be a non-negative integer");
            config_.cascade_limit = body["cascade_limit"].get<std::size_t>();
        }
        if (body.contains("approvers")) {
            auto tokens = string_map(body["approvers"], "approvers");
            std::lock_guard lock(config_mutex_);
            approver_tokens_ = std::move(tokens);
        }
        if (body.contains("telemetry")) telemetry_->replace_sink(telemetry::make_sink(body["telemetry"]));
        if (body.contains("receipt_store")) vault_->set_store_available(body["receipt_store"].get<std::string>() != "down");
        orchestrator_->set_config(orchestrator_config());
    } catch (const policy::PolicyParseError& e) {
        Json issues = Json::array();
        for (const auto& i : e.issues())
            issues.push_back({{"message", i.message}, {"pointer", i.pointer}, {"line", i.line}, {"column", i.column}});
        return json_reply(400, Json{{"error", "policy rejected"}, {"issues", issues}});
    } catch (const std::exception& e) {
        return error_reply(400, e.what());
    }
    return json_reply(200, Json{{"ok", true}, {"policy_set_digest", orchestrator_->policies()->digest()}});
}

void Gateway::sweep() {
    orchestrator_->expire_timeouts(clock_->now());
    for (const auto& id : orchestrator_->sessions()) orchestrator_->resolve_deferred_auto(id);
}

HttpReply Gateway::test_sweep() {
    if (!config_.test_mode) return error_reply(403, "test mode is off");
    auto expired = orchestrator_->expire_timeouts(clock_->now());
    for (const auto& id : orchestrator_->sessions()) orchestrator_->resolve_deferred_auto(id);
    return json_reply(200, Json{{"expired", expired}});
}

void Gateway::sweeper() {
    std::unique_lock lock(sweeper_mutex_);
    while (!stopping_) {
        sweeper_cv_.wait_for(lock, config_.sweep_interval, [&] { return stopping_; });
        if (stopping_) break;
        lock.unlock();
        try {
            sweep();
        } catch (const std::exception& e) {
            std::cerr << "WARN sweep failed: " << e.what() << '\n';
        }
        lock.lock();
    }
}

namespace {

void send(httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
}

std::map<std::string, std::string> query_of(const httplib::Request& req) {
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : req.params) out[k] = v;
    return out;
}

} // namespace

int Gateway::start() {
    server_ = std::make_unique<httplib::Server>();
    auto& srv = *server_;

    srv.Post("/rpc", [this](const httplib::Request& req, httplib::Response& res) {
        Json request;
        try {
            request = Json::parse(req.body);
        } catch (const Json::exception&) {
            const Json e{{"jsonrpc", "2.0"}, {"id", nullptr}, {"error", {{"code", rpc::kParseError}, {"message", "parse error"}}}};
            res.set_content(e.dump(), "application/json");
            return;
        }
        res.set_content(handle_rpc(request).dump(), "application/json");
    });
    srv.Get("/v1/pending", [this](const httplib::Request& req, httplib::Response& res) {
        std::string bearer = req.get_param_value("approver_token");
        const auto auth = req.get_header_value("Authorization");
        if (auth.rfind("Bearer ", 0) == 0) bearer = auth.substr(7);
        std::optional<std::string> session;
        if (req.has_param("session_id") && !req.get_param_value("session_id").empty())
            session = req.get_param_value("session_id");
        send(res, list_pending(session, bearer, req.get_param_value("include") == "all"));
    });
    srv.Post(R"(/v1/pending/([^/]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
        Json body;
        try {
            body = Json::parse(req.body);
        } catch (const Json::exception&) {
            send(res, error_reply(400, "body is not JSON"));
            return;
        }
        send(res, decide(req.matches[1].str(), body));
    });
    srv.Get("/v1/receipts", [this](const httplib::Request& req, httplib::Response& res) { send(res, receipts(query_of(req))); });
    srv.Get("/v1/keys", [this](const httplib::Request&, httplib::Response& res) {
        res.set_content(crypto::serialize_key_ring(vault_->public_keys()) + "\n", "application/json");
    });
    srv.Get(R"(/v1/sessions/([^/]+)/verify)", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, verify_session(req.matches[1].str()));
    });
    srv.Get("/v1/telemetry", [this](const httplib::Request& req, httplib::Response& res) {
        send(res, telemetry_export(query_of(req)));
    });
    srv.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
        send(res, json_reply(200, Json{{"ok", true},
                                       {"receipt_store", vault_->available()},
                                       {"policy_set_digest", orchestrator_->policies()->digest()},
                                       {"test_mode", config_.test_mode}}));
    });
    srv.Post("/v1/test/configure", [this](const httplib::Request& req, httplib::Response& res) {
        Json body;
        try {
            body = Json::parse(req.body);
        } catch (const Json::exception&) {
            send(res, error_reply(400, "body is not JSON"));
            return;
        }
        send(res, test_configure(body));
    });
    srv.Post("/v1/test/sweep", [this](const httplib::Request&, httplib::Response& res) { send(res, test_sweep()); });

    port_ = config_.port == 0 ? srv.bind_to_any_port(config_.host) : (srv.bind_to_port(config_.host, config_.port) ? config_.port : -1);
    if (port_ <= 0) throw std::runtime_error("cannot bind " + config_.host + ":" + std::to_string(config_.port));
    server_thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();

    if (config_.sweep_interval.count() > 0 && !config_.test_mode) {
        stopping_ = false;
        sweeper_thread_ = std::thread([this] { sweeper(); });
    }
    return port_;
}

void Gateway::stop() {
    {
        std::lock_guard lock(sweeper_mutex_);
        stopping_ = true;
    }
    sweeper_cv_.notify_all();
    if (sweeper_thread_.joinable()) sweeper_thread_.join();
    if (server_) server_->stop();
    if (server_thread_.joinable()) server_thread_.join();
}

} // namespace aarm
