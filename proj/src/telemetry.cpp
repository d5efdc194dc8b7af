#include "aarm/telemetry.hpp"

#include <httplib.h>

#include <iostream>
#include <regex>

namespace fs = std::filesystem;

namespace aarm::telemetry {

namespace {

constexpr std::pair<EventKind, std::string_view> kKinds[] = {
    {EventKind::Decision, "DECISION"},
    {EventKind::PendingCreated, "PENDING_CREATED"},
    {EventKind::PendingResolved, "PENDING_RESOLVED"},
    {EventKind::DriftEscalation, "DRIFT_ESCALATION"},
    {EventKind::ChainVerification, "CHAIN_VERIFICATION"},
    {EventKind::ConfigLoaded, "CONFIG_LOADED"},
    {EventKind::ApproverRejected, "APPROVER_REJECTED"},
};

constexpr std::pair<Severity, std::string_view> kSeverities[] = {
    {Severity::Info, "INFO"},
    {Severity::Warn, "WARN"},
    {Severity::Critical, "CRITICAL"},
};

} // namespace

std::string_view to_string(EventKind k) {
    for (auto [v, s] : kKinds)
        if (v == k) return s;
    return "DECISION";
}

std::string_view to_string(Severity s) {
    for (auto [v, n] : kSeverities)
        if (v == s) return n;
    return "INFO";
}

std::optional<EventKind> parse_event_kind(std::string_view s) {
    for (auto [v, n] : kKinds)
        if (n == s) return v;
    return std::nullopt;
}

std::optional<Severity> parse_severity(std::string_view s) {
    for (auto [v, n] : kSeverities)
        if (n == s) return v;
    return std::nullopt;
}

Json Event::to_json() const {
    Json j{{"event_id", event_id},
           {"kind", to_string(kind)},
           {"time", time},
           {"session_id", session_id},
           {"severity", to_string(severity)},
           {"attributes", attributes}};
    j["receipt_id"] = receipt_id ? Json(*receipt_id) : Json();
    j["decision"] = decision ? Json(to_string(*decision)) : Json();
    return j;
}

Event Event::from_json(const Json& j) {
    Event e;
    e.event_id = j.at("event_id").get<std::string>();
    auto k = parse_event_kind(j.at("kind").get<std::string>());
    if (!k) throw std::invalid_argument("unknown event kind");
    e.kind = *k;
    e.time = j.at("time").get<std::string>();
    e.session_id = j.value("session_id", "");
    if (j.contains("receipt_id") && j["receipt_id"].is_string()) e.receipt_id = j["receipt_id"].get<std::string>();
    if (j.contains("decision") && j["decision"].is_string()) e.decision = parse_decision_kind(j["decision"].get<std::string>());
    auto s = parse_severity(j.value("severity", "INFO"));
    e.severity = s.value_or(Severity::Info);
    if (j.contains("attributes")) e.attributes = j["attributes"].get<std::map<std::string, std::string>>();
    return e;
}

bool Filter::matches(const Event& e) const {
    if (!kinds.empty() && !kinds.count(e.kind)) return false;
    if (!decisions.empty() && (!e.decision || !decisions.count(*e.decision))) return false;
    if (!severities.empty() && !severities.count(e.severity)) return false;
    if (session_id && e.session_id != *session_id) return false;
    auto attr = [&](const char* key) -> std::string {
        auto it = e.attributes.find(key);
        return it == e.attributes.end() ? std::string() : it->second;
    };
    if (tool && attr("tool") != *tool) return false;
    if (human_principal && attr("human_principal") != *human_principal) return false;
    return true;
}

Filter Filter::from_json(const Json& j) {
    Filter f;
    if (j.is_null()) return f;
    auto strings = [&](const char* key) {
        std::vector<std::string> out;
        if (!j.contains(key)) return out;
        const auto& v = j[key];
        if (v.is_string()) out.push_back(v.get<std::string>());
        else if (v.is_array())
            for (const auto& x : v) out.push_back(x.get<std::string>());
        else throw std::invalid_argument(std::string("filter field '") + key + "' must be a string or list");
        return out;
    };
    for (const auto& s : strings("kind")) {
        auto k = parse_event_kind(s);
        if (!k) throw std::invalid_argument("unknown event kind '" + s + "'");
        f.kinds.insert(*k);
    }
    for (const auto& s : strings("decision")) {
        auto k = parse_decision_kind(s);
        if (!k) throw std::invalid_argument("unknown decision '" + s + "'");
        f.decisions.insert(*k);
    }
    for (const auto& s : strings("severity")) {
        auto k = parse_severity(s);
        if (!k) throw std::invalid_argument("unknown severity '" + s + "'");
        f.severities.insert(*k);
    }
    if (j.contains("session_id")) f.session_id = j["session_id"].get<std::string>();
    if (j.contains("tool")) f.tool = j["tool"].get<std::string>();
    if (j.contains("human_principal")) f.human_principal = j["human_principal"].get<std::string>();
    return f;
}

FileSink::FileSink(fs::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path_.parent_path(), ec);
    }
    out_.open(path_, std::ios::app | std::ios::binary);
}

bool FileSink::deliver(const std::string& line) {
    if (!out_) return false;
    out_ << line << '\n';
    out_.flush();
    return static_cast<bool>(out_);
}

HttpSink::HttpSink(std::string url) : url_(std::move(url)) {}

bool HttpSink::deliver(const std::string& line) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url_, m, re)) return false;
    httplib::Client cli(m[1].str());
    cli.set_connection_timeout(2);
    cli.set_read_timeout(2);
    auto res = cli.Post(m[2].matched ? m[2].str() : "/", line + "\n", "application/x-ndjson");
    return res && res->status >= 200 && res->status < 300;
}

std::unique_ptr<Sink> make_sink(const Json& config) {
    if (config.is_null() || (config.is_object() && config.empty())) return nullptr;
    if (config.contains("file")) return std::make_unique<FileSink>(config["file"].get<std::string>());
    if (config.contains("http")) return std::make_unique<HttpSink>(config["http"].get<std::string>());
    throw std::invalid_argument("telemetry sink needs 'file' or 'http'");
}

Hub::Hub(fs::path data_dir, std::shared_ptr<const Clock> clock, std::shared_ptr<IdSource> ids,
         std::unique_ptr<Sink> sink, Filter sink_filter)
    : store_file_(data_dir / "telemetry.events.jsonl"),
      spill_file_(data_dir / "telemetry.spill.jsonl"),
      clock_(std::move(clock)),
      ids_(std::move(ids)),
      sink_filter_(std::move(sink_filter)),
      sink_(std::move(sink)) {
    std::error_code ec;
    fs::create_directories(data_dir, ec);
    if (std::ifstream in(store_file_); in) {
        std::string line;
        while (std::getline(in, line)) {
            try {
                events_.push_back(Event::from_json(Json::parse(line)));
            } catch (const std::exception&) {
            }
        }
    }
    store_.open(store_file_, std::ios::app | std::ios::binary);
    worker_ = std::thread([this] { run(); });
}

Hub::~Hub() {
    {
        std::lock_guard lock(mutex_);
        stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
}

Event Hub::emit(Event e) {
    if (e.event_id.empty()) e.event_id = ids_->next_uuid();
    if (e.time.empty()) e.time = format_rfc3339(clock_->now());
    const auto line = canonical_serialize(e.to_json());
    {
        std::lock_guard lock(mutex_);
        store_ << line << '\n';
        store_.flush();
        events_.push_back(e);
        if (sink_ && sink_filter_.matches(e)) queue_.push_back(line);
    }
    cv_.notify_all();
    return e;
}

void Hub::run() {
    std::unique_lock lock(mutex_);
    for (;;) {
        cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
        if (queue_.empty() && stop_) break;
        auto line = std::move(queue_.front());
        queue_.pop_front();
        busy_ = true;
        Sink* sink = sink_.get();
        lock.unlock();
        const bool ok = sink && sink->deliver(line);
        lock.lock();
        if (!ok) {
            if (spilled_ == 0) std::cerr << "WARN telemetry sink unreachable, spilling to " << spill_file_ << '\n';
            std::ofstream spill(spill_file_, std::ios::app | std::ios::binary);
            spill << line << '\n';
            ++spilled_;
        }
        busy_ = false;
        if (queue_.empty()) drained_.notify_all();
    }
    drained_.notify_all();
}

void Hub::flush() {
    std::unique_lock lock(mutex_);
    drained_.wait(lock, [&] { return queue_.empty() && !busy_; });
}

std::vector<Event> Hub::events(const Filter& f) const {
    std::lock_guard lock(mutex_);
    std::vector<Event> out;
    for (const auto& e : events_)
        if (f.matches(e)) out.push_back(e);
    return out;
}

std::size_t Hub::export_batch(const Filter& f, const fs::path& destination) const {
    const auto selected = events(f);
    std::ofstream out(destination, std::ios::trunc | std::ios::binary);
    if (!out) throw ExportError("cannot write " + destination.string());
    for (const auto& e : selected) out << canonical_serialize(e.to_json()) << '\n';
    out.flush();
    if (!out) throw ExportError("write to " + destination.string() + " failed");
    return selected.size();
}

std::size_t Hub::spilled() const {
    std::lock_guard lock(mutex_);
    return spilled_;
}

void Hub::replace_sink(std::unique_ptr<Sink> sink) {
    flush();
    std::lock_guard lock(mutex_);
    sink_ = std::move(sink);
}

} // namespace aarm::telemetry
