#include "aarm/mock_upstream.hpp"

#include <httplib.h>

namespace fs = std::filesystem;

namespace aarm {

MockUpstream::MockUpstream(fs::path log_file, TimePoint clock_start)
    : log_file_(std::move(log_file)), clock_(clock_start) {
    if (log_file_.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(log_file_.parent_path(), ec);
    }
    log_.open(log_file_, std::ios::trunc | std::ios::binary);
}

MockUpstream::~MockUpstream() { stop(); }

void MockUpstream::set_response(const std::string& key, Json output) {
    std::lock_guard lock(mutex_);
    responses_[key] = std::move(output);
}

void MockUpstream::clear_responses() {
    std::lock_guard lock(mutex_);
    responses_.clear();
}

std::vector<Json> MockUpstream::calls() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

void MockUpstream::clear_calls() {
    std::lock_guard lock(mutex_);
    calls_.clear();
    log_.close();
    log_.open(log_file_, std::ios::trunc | std::ios::binary);
}

Json MockUpstream::respond(const std::string& tool, const std::string& operation, const Json& parameters) {
    std::lock_guard lock(mutex_);
    Json call{{"n", calls_.size() + 1},
              {"tool", tool},
              {"operation", operation},
              {"parameters", parameters},
              {"received_at", format_rfc3339(clock_.now())}};
    log_ << canonical_serialize(call) << '\n';
    log_.flush();
    calls_.push_back(call);

    auto it = responses_.find(tool + "." + operation);
    if (it == responses_.end()) it = responses_.find(tool);
    if (it != responses_.end()) return it->second;
    return Json{{"ok", true}, {"tool", tool}, {"operation", operation}, {"_classification", {"PUBLIC"}}};
}

Json MockUpstream::handle(const Json& request) {
    const Json id = request.value("id", Json());
    const auto method = request.value("method", std::string());
    const Json params = request.value("params", Json::object());
    if (method == "tools/call") {
        auto out = respond(params.value("tool", std::string()), params.value("operation", std::string()),
                           params.value("parameters", Json::object()));
        if (out.is_object() && out.contains("_fail"))
            return Json{{"jsonrpc", "2.0"}, {"id", id}, {"error", {{"code", -32000}, {"message", out["_fail"]}}}};
        return Json{{"jsonrpc", "2.0"}, {"id", id}, {"result", out}};
    }
    if (method == "tools/list") {
        Json tools = Json::array();
        std::lock_guard lock(mutex_);
        for (const auto& [key, value] : responses_) {
            const auto dot = key.find('.');
            tools.push_back({{"tool", key.substr(0, dot)}, {"operation", dot == std::string::npos ? "" : key.substr(dot + 1)}});
        }
        return Json{{"jsonrpc", "2.0"}, {"id", id}, {"result", {{"tools", tools}}}};
    }
    return Json{{"jsonrpc", "2.0"}, {"id", id}, {"error", {{"code", -32601}, {"message", "unknown method"}}}};
}

int MockUpstream::start(const std::string& host, int port) {
    host_ = host;
    server_ = std::make_unique<httplib::Server>();
    auto& srv = *server_;
    srv.Post("/rpc", [this](const httplib::Request& req, httplib::Response& res) {
        Json request;
        try {
            request = Json::parse(req.body);
        } catch (const Json::exception&) {
            res.status = 400;
            return;
        }
        res.set_content(handle(request).dump(), "application/json");
    });
    srv.Get("/clock", [this](const httplib::Request&, httplib::Response& res) {
        res.set_content(Json{{"now", format_rfc3339(clock_.now())}}.dump(), "application/json");
    });
    srv.Post("/clock", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            auto j = Json::parse(req.body);
            if (j.contains("advance_seconds"))
                clock_.advance(std::chrono::milliseconds(static_cast<std::int64_t>(j["advance_seconds"].get<double>() * 1000)));
            if (j.contains("set")) {
                auto t = parse_rfc3339(j["set"].get<std::string>());
                if (!t) throw std::invalid_argument("bad time");
                clock_.set(*t);
            }
        } catch (const std::exception& e) {
            res.status = 400;
            res.set_content(Json{{"error", e.what()}}.dump(), "application/json");
            return;
        }
        res.set_content(Json{{"now", format_rfc3339(clock_.now())}}.dump(), "application/json");
    });
    srv.Get("/calls", [this](const httplib::Request&, httplib::Response& res) {
        res.set_content(Json(calls()).dump(), "application/json");
    });
    srv.Delete("/calls", [this](const httplib::Request&, httplib::Response& res) {
        clear_calls();
        res.set_content("{}", "application/json");
    });
    srv.Post("/responses", [this](const httplib::Request& req, httplib::Response& res) {
        try {
            auto j = Json::parse(req.body);
            for (auto it = j.begin(); it != j.end(); ++it) set_response(it.key(), it.value());
        } catch (const std::exception& e) {
            res.status = 400;
            res.set_content(Json{{"error", e.what()}}.dump(), "application/json");
            return;
        }
        res.set_content("{}", "application/json");
    });

    port_ = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
    if (port_ <= 0) throw std::runtime_error("mock upstream cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return port_;
}

void MockUpstream::stop() {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
}

std::string MockUpstream::rpc_url() const { return "http://" + host_ + ":" + std::to_string(port_) + "/rpc"; }
std::string MockUpstream::clock_url() const { return "http://" + host_ + ":" + std::to_string(port_) + "/clock"; }

} // namespace aarm
