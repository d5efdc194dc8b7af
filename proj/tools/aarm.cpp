#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "aarm/conformance.hpp"
#include "aarm/crypto.hpp"
#include "aarm/gateway.hpp"
#include "aarm/ledger.hpp"
#include "aarm/mock_upstream.hpp"
#include "aarm/receipts.hpp"

namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void wait_for_signal() {
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::pair<std::string, int> split_listen(const std::string& listen) {
    const auto colon = listen.rfind(':');
    if (colon == std::string::npos) throw std::runtime_error("expected host:port, got " + listen);
    return {listen.substr(0, colon), std::stoi(listen.substr(colon + 1))};
}

int serve(const std::string& config_path, bool test_mode, const std::string& listen) {
    std::string path = config_path;
    if (path.empty())
        if (const char* env = std::getenv("AARM_CONFIG")) path = env;
    if (path.empty()) throw std::runtime_error("no config: pass --config or set AARM_CONFIG");
    auto cfg = aarm::GatewayConfig::load(path);
    if (test_mode) cfg.test_mode = true;
    if (!cfg.test_mode) cfg.test_clock.reset();
    if (!listen.empty()) std::tie(cfg.host, cfg.port) = split_listen(listen);
    aarm::Gateway gw(cfg);
    gw.start();
    std::cerr << "aarm gateway listening on " << gw.url() << (cfg.test_mode ? " (test mode)" : "") << '\n';
    wait_for_signal();
    gw.stop();
    return 0;
}

int mock_upstream(const std::string& listen, const std::string& log) {
    auto [host, port] = split_listen(listen);
    aarm::MockUpstream mock(log, aarm::SystemClock().now());
    mock.start(host, port);
    std::cerr << "mock upstream on " << mock.rpc_url() << ", clock at " << mock.clock_url() << '\n';
    wait_for_signal();
    mock.stop();
    return 0;
}

int verify_receipts(const fs::path& receipts, const fs::path& keys) {
    const auto ring = aarm::crypto::parse_key_ring(slurp(keys));
    std::istringstream in(slurp(receipts));
    std::size_t n = 0, bad = 0;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        ++n;
        auto v = aarm::receipts::verify_receipt_line(line, ring);
        if (!v.valid) {
            ++bad;
            std::cout << "line " << n << ": INVALID (" << v.reason << ")\n";
        }
    }
    std::cout << n - bad << "/" << n << " receipts valid\n";
    return bad == 0 ? 0 : 1;
}

int verify_ledger(const fs::path& file) {
    auto r = aarm::ledger::verify_ledger_file(file);
    if (r.ok) {
        std::cout << "ok\n";
        return 0;
    }
    std::cout << "corrupt at seq " << (r.corrupt_seq ? std::to_string(*r.corrupt_seq) : "?") << ": " << r.detail << '\n';
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Runtime authorization gateway for agent tool calls"};
    app.require_subcommand(1);

    auto* serve_cmd = app.add_subcommand("serve", "run the gateway");
    std::string config, listen;
    bool test_mode = false;
    serve_cmd->add_option("--config", config, "gateway config file (default: $AARM_CONFIG)");
    serve_cmd->add_option("--listen", listen, "override host:port");
    serve_cmd->add_flag("--test-mode", test_mode, "honour the injected test clock and /v1/test endpoints");

    auto* conform_cmd = app.add_subcommand("conform", "run the conformance suite");
    aarm::conformance::Options opts;
    std::string target, target_data, report_path, scenario_dir, work_dir;
    conform_cmd->add_option("--target", target, "gateway URL in test mode; in-process gateway when omitted");
    conform_cmd->add_option("--target-data-dir", target_data, "the target's data directory, for file-level checks");
    conform_cmd->add_option("--requirement", opts.requirements, "R1..R9 (repeatable)");
    conform_cmd->add_option("--scenario", opts.scenarios, "scenario id (repeatable)");
    conform_cmd->add_option("--report", report_path, "write the JSON report here");
    conform_cmd->add_option("--scenario-dir", scenario_dir, "scenario fixtures");
    conform_cmd->add_option("--work-dir", work_dir, "scratch directory");
    conform_cmd->add_option("--seed", opts.seed, "seed for ids, keys and tamper positions");
    conform_cmd->add_flag("--parallel", opts.parallel, "run independent checks concurrently");

    auto* verify_cmd = app.add_subcommand("verify-receipts", "check receipt signatures offline");
    std::string receipts_file, keys_file;
    verify_cmd->add_option("--receipts", receipts_file, "receipts.jsonl")->required();
    verify_cmd->add_option("--keys", keys_file, "keys.json")->required();

    auto* ledger_cmd = app.add_subcommand("verify-ledger", "check a session ledger's hash chain");
    std::string ledger_file;
    ledger_cmd->add_option("file", ledger_file, "<session>.ctx.jsonl")->required();

    auto* keygen_cmd = app.add_subcommand("keygen", "create an Ed25519 signing key");
    std::string key_out;
    keygen_cmd->add_option("--out", key_out, "key file to write")->required();

    auto* mock_cmd = app.add_subcommand("mock-upstream", "run the mock tool server");
    std::string mock_listen = "127.0.0.1:8701", mock_log = "upstream_calls.jsonl";
    mock_cmd->add_option("--listen", mock_listen, "host:port");
    mock_cmd->add_option("--log", mock_log, "call log file");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*serve_cmd) return serve(config, test_mode, listen);
        if (*conform_cmd) {
            if (!target.empty()) opts.target = target;
            if (!target_data.empty()) opts.target_data_dir = target_data;
            opts.scenario_dir = scenario_dir;
            opts.work_dir = work_dir;
            const auto report = aarm::conformance::run(opts);
            std::cout << report.to_text();
            if (!report_path.empty()) {
                std::ofstream out(report_path);
                out << report.to_json().dump(2) << '\n';
            }
            return report.passed() ? 0 : 1;
        }
        if (*verify_cmd) return verify_receipts(receipts_file, keys_file);
        if (*ledger_cmd) return verify_ledger(ledger_file);
        if (*keygen_cmd) {
            auto key = aarm::crypto::SigningKey::generate();
            key.save(key_out);
            std::cout << key.key_id() << '\n';
            return 0;
        }
        if (*mock_cmd) return mock_upstream(mock_listen, mock_log);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
