#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "aarm/clock.hpp"
#include "aarm/ids.hpp"
#include "aarm/model.hpp"

namespace aarm::telemetry {

enum class EventKind {
    Decision,
    PendingCreated,
    PendingResolved,
    DriftEscalation,
    ChainVerification,
    ConfigLoaded,
    ApproverRejected,
};
enum class Severity { Info, Warn, Critical };

std::string_view to_string(EventKind k);
std::string_view to_string(Severity s);
std::optional<EventKind> parse_event_kind(std::string_view s);
std::optional<Severity> parse_severity(std::string_view s);

struct Event {
    std::string event_id;
    EventKind kind = EventKind::Decision;
    std::string time;
    std::string session_id;
    std::optional<std::string> receipt_id;
    std::optional<DecisionKind> decision;
    Severity severity = Severity::Info;
    std::map<std::string, std::string> attributes;

    Json to_json() const;
    static Event from_json(const Json& j);
};

struct Filter {
    std::set<EventKind> kinds;
    std::set<DecisionKind> decisions;
    std::set<Severity> severities;
    std::optional<std::string> session_id;
    std::optional<std::string> tool;             // attributes["tool"]
    std::optional<std::string> human_principal;  // attributes["human_principal"]

    bool matches(const Event& e) const;
    static Filter from_json(const Json& j);
};

// Where events go after the local store. Returning false spills the event.
class Sink {
public:
    virtual ~Sink() = default;
    virtual bool deliver(const std::string& line) = 0;
};

class FileSink final : public Sink {
public:
    explicit FileSink(std::filesystem::path path);
    bool deliver(const std::string& line) override;

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class HttpSink final : public Sink {
public:
    explicit HttpSink(std::string url);
    bool deliver(const std::string& line) override;

private:
    std::string url_;
};

// {"file": "<path>"} | {"http": "<url>"}; null -> no sink
std::unique_ptr<Sink> make_sink(const Json& config);

class ExportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Events are appended to `<data_dir>/telemetry.events.jsonl` synchronously and
// handed to the sink on a worker thread. Sink trouble never reaches the caller;
// undeliverable events land in `<data_dir>/telemetry.spill.jsonl`.
class Hub {
public:
    Hub(std::filesystem::path data_dir, std::shared_ptr<const Clock> clock, std::shared_ptr<IdSource> ids,
        std::unique_ptr<Sink> sink = nullptr, Filter sink_filter = {});
    ~Hub();
    Hub(const Hub&) = delete;
    Hub& operator=(const Hub&) = delete;

    // Fills event_id and time when empty.
    Event emit(Event e);
    void flush();  // waits until the sink queue is empty

    std::vector<Event> events(const Filter& f = {}) const;
    std::size_t export_batch(const Filter& f, const std::filesystem::path& destination) const;

    std::size_t spilled() const;
    const std::filesystem::path& spill_file() const { return spill_file_; }
    void replace_sink(std::unique_ptr<Sink> sink);

private:
    void run();

    std::filesystem::path store_file_;
    std::filesystem::path spill_file_;
    std::shared_ptr<const Clock> clock_;
    std::shared_ptr<IdSource> ids_;
    Filter sink_filter_;

    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::condition_variable drained_;
    std::deque<std::string> queue_;
    bool busy_ = false;
    bool stop_ = false;
    std::unique_ptr<Sink> sink_;
    std::ofstream store_;
    std::vector<Event> events_;
    std::size_t spilled_ = 0;
    std::thread worker_;
};

} // namespace aarm::telemetry
