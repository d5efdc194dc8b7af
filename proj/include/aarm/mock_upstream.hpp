#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "aarm/canonical_json.hpp"
#include "aarm/clock.hpp"

namespace httplib {
class Server;
}

namespace aarm {

// Stand-in tool server with the same JSON-RPC surface the gateway forwards to.
// Every tools/call is appended to `upstream_calls.jsonl`. Also serves the
// controllable test clock at /clock.
//
//   POST /rpc                 tools/call, tools/list
//   GET  /clock               {"now": ...}
//   POST /clock               {"advance_seconds": n} | {"set": "<RFC 3339>"}
//   GET  /calls, DELETE /calls
//   POST /responses           {"tool.operation" | "tool": output | {"_fail": "message"}}
class MockUpstream {
public:
    MockUpstream(std::filesystem::path log_file, TimePoint clock_start);
    ~MockUpstream();
    MockUpstream(const MockUpstream&) = delete;
    MockUpstream& operator=(const MockUpstream&) = delete;

    int start(const std::string& host = "127.0.0.1", int port = 0);
    void stop();

    std::string rpc_url() const;
    std::string clock_url() const;

    void set_response(const std::string& key, Json output);
    void clear_responses();
    std::vector<Json> calls() const;
    void clear_calls();
    ManualClock& clock() { return clock_; }

    // The JSON-RPC handler, callable in-process.
    Json handle(const Json& request);

private:
    Json respond(const std::string& tool, const std::string& operation, const Json& parameters);

    std::filesystem::path log_file_;
    ManualClock clock_;
    mutable std::mutex mutex_;
    std::map<std::string, Json> responses_;
    std::vector<Json> calls_;
    std::ofstream log_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    std::string host_ = "127.0.0.1";
    int port_ = 0;
};

} // namespace aarm
