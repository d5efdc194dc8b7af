#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>

#include "aarm/clock.hpp"
#include "aarm/crypto.hpp"
#include "aarm/ids.hpp"
#include "aarm/intent.hpp"
#include "aarm/ledger.hpp"
#include "aarm/orchestrator.hpp"
#include "aarm/policy.hpp"
#include "aarm/receipts.hpp"
#include "aarm/telemetry.hpp"

namespace httplib {
class Server;
}

namespace aarm {

namespace rpc {
inline constexpr int kParseError = -32700;
inline constexpr int kInvalidRequest = -32600;
inline constexpr int kMethodNotFound = -32601;
inline constexpr int kInvalidParams = -32602;
inline constexpr int kInternal = -32603;
inline constexpr int kDeny = -32050;
inline constexpr int kDeferParked = -32051;
inline constexpr int kStepUpParked = -32052;
inline constexpr int kIdentityRequired = -32060;
inline constexpr int kUnknownSession = -32061;
inline constexpr int kForbidden = -32062;
} // namespace rpc

struct GatewayConfig {
    std::string host = "127.0.0.1";
    int port = 8700;                                   // 0: pick a free port
    std::map<std::string, std::string> upstreams;      // tool -> JSON-RPC endpoint URL
    std::string policy_file;
    std::optional<std::string> policy_document;        // inline alternative to policy_file
    std::filesystem::path data_dir = "aarm-data";
    std::chrono::milliseconds step_up_timeout = std::chrono::seconds(300);
    std::chrono::milliseconds defer_timeout = std::chrono::seconds(120);
    std::chrono::milliseconds hold = std::chrono::seconds(30);
    std::size_t cascade_limit = 8;
    std::map<std::string, std::string> approver_tokens;  // bearer token -> approver principal
    std::string signing_key;                             // path; generated there when missing
    Json telemetry = nullptr;                            // {"file": ...} | {"http": ...}
    Json telemetry_filter = nullptr;
    Json embedder = Json{{"embedder", "builtin-bag"}, {"dimension", 256}};
    std::set<std::string> redact;                        // receipt parameter keys to digest
    std::chrono::milliseconds sweep_interval = std::chrono::seconds(5);  // 0 disables
    bool test_mode = false;
    std::optional<std::string> test_clock;  // URL; honoured only in test mode
    std::uint64_t id_seed = 0;              // test mode only; 0 = random ids

    // Throws ConfigError. Relative paths resolve against `base_dir`.
    static GatewayConfig from_json(const Json& j, const std::filesystem::path& base_dir = {});
    static GatewayConfig load(const std::filesystem::path& file);
};

// Clock served over HTTP: GET <url> -> {"now": "<RFC 3339>"}.
class RemoteClock final : public Clock {
public:
    explicit RemoteClock(std::string url);
    TimePoint now() const override;

private:
    std::string url_;
    mutable std::mutex mutex_;
    mutable std::optional<TimePoint> last_;
};

// Clock that can be re-pointed while the gateway runs (test mode).
class SwitchableClock final : public Clock {
public:
    explicit SwitchableClock(std::shared_ptr<const Clock> inner) : inner_(std::move(inner)) {}
    TimePoint now() const override;
    void set(std::shared_ptr<const Clock> inner);

private:
    mutable std::shared_mutex mutex_;
    std::shared_ptr<const Clock> inner_;
};

// Forwards tools/call to the upstream registered for the tool.
class HttpForwarder final : public ToolForwarder {
public:
    explicit HttpForwarder(std::map<std::string, std::string> registry = {});
    bool knows(const std::string& tool) const override;
    ForwardResult call(const std::string& tool, const std::string& operation, const Json& parameters) override;
    void set_registry(std::map<std::string, std::string> registry);
    std::map<std::string, std::string> registry() const;

private:
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::string> registry_;
    std::atomic<std::uint64_t> next_id_{1};
};

struct HttpReply {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

class Gateway {
public:
    // `forwarder` replaces the HTTP forwarder (in-process tests and benchmarks).
    explicit Gateway(GatewayConfig config, std::shared_ptr<ToolForwarder> forwarder = nullptr);
    ~Gateway();
    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    // Binds and serves on a background thread; returns the bound port.
    int start();
    void stop();
    int port() const { return port_; }
    std::string url() const;

    // One JSON-RPC request object in, one response object out.
    Json handle_rpc(const Json& request);

    // HTTP API entry points, usable without a listener.
    HttpReply list_pending(const std::optional<std::string>& session_id, const std::string& bearer, bool include_terminal);
    HttpReply decide(const std::string& item_id, const Json& body);
    HttpReply receipts(const std::map<std::string, std::string>& query);
    HttpReply verify_session(const std::string& session_id);
    HttpReply telemetry_export(const std::map<std::string, std::string>& query);
    HttpReply test_configure(const Json& body);
    HttpReply test_sweep();

    void sweep();  // expire timeouts, then re-evaluate every session's defers

    Orchestrator& orchestrator() { return *orchestrator_; }
    receipts::ReceiptVault& vault() { return *vault_; }
    ledger::ContextLedger& ledger() { return *ledger_; }
    telemetry::Hub& telemetry() { return *telemetry_; }
    const GatewayConfig& config() const { return config_; }

private:
    Json rpc_initialize(const Json& params);
    Json rpc_call(const Json& params);
    Json rpc_status(const Json& params);
    Json rpc_list(const Json& params);
    Json item_reply(const PendingItem& item);
    void load_policies(std::shared_ptr<const policy::PolicySet> ps, const std::string& source);
    OrchestratorConfig orchestrator_config() const;
    void sweeper();

    GatewayConfig config_;
    std::shared_ptr<SwitchableClock> clock_;
    std::shared_ptr<IdSource> ids_;
    std::shared_ptr<const crypto::SigningKey> key_;
    std::unique_ptr<ledger::ContextLedger> ledger_;
    std::unique_ptr<receipts::ReceiptVault> vault_;
    std::unique_ptr<telemetry::Hub> telemetry_;
    std::shared_ptr<HttpForwarder> http_forwarder_;
    std::shared_ptr<ToolForwarder> forwarder_;
    std::unique_ptr<Orchestrator> orchestrator_;

    mutable std::mutex config_mutex_;
    std::map<std::string, std::string> approver_tokens_;
    std::chrono::milliseconds hold_;

    std::unique_ptr<httplib::Server> server_;
    std::thread server_thread_;
    std::thread sweeper_thread_;
    std::mutex sweeper_mutex_;
    std::condition_variable sweeper_cv_;
    bool stopping_ = false;
    int port_ = 0;
};

} // namespace aarm
