#include <gtest/gtest.h>

#include "aarm/telemetry.hpp"
#include "support.hpp"

using namespace aarm;
using namespace aarm::telemetry;

namespace {

class FlakySink final : public Sink {
public:
    bool up = true;
    std::vector<std::string> lines;
    bool deliver(const std::string& line) override {
        if (!up) return false;
        lines.push_back(line);
        return true;
    }
};

Event decision_event(const std::string& session, DecisionKind k, Severity s = Severity::Info) {
    Event e;
    e.kind = EventKind::Decision;
    e.session_id = session;
    e.decision = k;
    e.receipt_id = "r-" + session;
    e.severity = s;
    e.attributes = {{"tool", "db"}, {"human_principal", "alice@company.com"}};
    return e;
}

} // namespace

TEST(Telemetry, NamesRoundTrip) {
    for (auto k : {EventKind::Decision, EventKind::PendingCreated, EventKind::PendingResolved,
                   EventKind::DriftEscalation, EventKind::ChainVerification, EventKind::ConfigLoaded,
                   EventKind::ApproverRejected})
        EXPECT_EQ(parse_event_kind(to_string(k)), k);
    EXPECT_EQ(to_string(EventKind::DriftEscalation), "DRIFT_ESCALATION");
    EXPECT_EQ(parse_severity("CRITICAL"), Severity::Critical);
}

TEST(Telemetry, EventJsonRoundTrip) {
    auto e = decision_event("s1", DecisionKind::Defer);
    e.event_id = "id";
    e.time = "2025-01-15T10:00:00.000Z";
    auto back = Event::from_json(e.to_json());
    EXPECT_EQ(back.to_json(), e.to_json());
}

TEST(Telemetry, FilterMatching) {
    auto f = Filter::from_json(Json::parse(R"({"kind":"DECISION","decision":["DEFER","DENY"],"tool":"db"})"));
    EXPECT_TRUE(f.matches(decision_event("s", DecisionKind::Defer)));
    EXPECT_FALSE(f.matches(decision_event("s", DecisionKind::Allow)));
    Event other;
    other.kind = EventKind::ConfigLoaded;
    EXPECT_FALSE(f.matches(other));
    EXPECT_TRUE(Filter{}.matches(other));
    EXPECT_TRUE(Filter::from_json(Json{{"human_principal", "alice@company.com"}})
                    .matches(decision_event("s", DecisionKind::Allow)));
    EXPECT_THROW(Filter::from_json(Json{{"kind", "BOGUS"}}), std::invalid_argument);
}

TEST(Telemetry, EmitStoresAndDelivers) {
    test::TempDir dir;
    auto sink = std::make_unique<FlakySink>();
    auto* raw = sink.get();
    Hub hub(dir.path(), std::make_shared<ManualClock>(test::epoch()), std::make_shared<IdSource>(1), std::move(sink));
    auto e = hub.emit(decision_event("s1", DecisionKind::Deny, Severity::Warn));
    EXPECT_EQ(e.event_id.size(), 36u);
    EXPECT_EQ(e.time, "2025-01-15T10:00:00.000Z");
    hub.flush();
    ASSERT_EQ(raw->lines.size(), 1u);
    EXPECT_EQ(Json::parse(raw->lines[0])["kind"], "DECISION");
    EXPECT_EQ(hub.spilled(), 0u);
}

TEST(Telemetry, SinkFailureSpills) {
    test::TempDir dir;
    auto sink = std::make_unique<FlakySink>();
    sink->up = false;
    Hub hub(dir.path(), std::make_shared<ManualClock>(test::epoch()), std::make_shared<IdSource>(1), std::move(sink));
    for (int i = 0; i < 3; ++i) hub.emit(decision_event("s" + std::to_string(i), DecisionKind::Allow));
    hub.flush();
    EXPECT_EQ(hub.spilled(), 3u);
    EXPECT_EQ(hub.events().size(), 3u);
    auto spill = test::read_file(hub.spill_file());
    EXPECT_EQ(std::count(spill.begin(), spill.end(), '\n'), 3);
}

TEST(Telemetry, DeadHttpSinkSpillsWithoutBlocking) {
    test::TempDir dir;
    Hub hub(dir.path(), std::make_shared<ManualClock>(test::epoch()), std::make_shared<IdSource>(1),
            make_sink(Json{{"http", "http://127.0.0.1:9/events"}}));
    hub.emit(decision_event("s1", DecisionKind::Allow));
    hub.flush();
    EXPECT_EQ(hub.spilled(), 1u);
}

TEST(Telemetry, FileSink) {
    test::TempDir dir;
    Hub hub(dir / "data", std::make_shared<ManualClock>(test::epoch()), std::make_shared<IdSource>(1),
            make_sink(Json{{"file", (dir / "siem.jsonl").string()}}));
    hub.emit(decision_event("s1", DecisionKind::Allow));
    hub.flush();
    EXPECT_NE(test::read_file(dir / "siem.jsonl").find("\"DECISION\""), std::string::npos);
    EXPECT_EQ(make_sink(nullptr), nullptr);
    EXPECT_THROW(make_sink(Json{{"kafka", "x"}}), std::invalid_argument);
}

TEST(Telemetry, SinkFilterOnlyForwardsMatching) {
    test::TempDir dir;
    auto sink = std::make_unique<FlakySink>();
    auto* raw = sink.get();
    Filter only_defer;
    only_defer.decisions = {DecisionKind::Defer};
    Hub hub(dir.path(), std::make_shared<ManualClock>(test::epoch()), std::make_shared<IdSource>(1), std::move(sink),
            only_defer);
    hub.emit(decision_event("s1", DecisionKind::Allow));
    hub.emit(decision_event("s1", DecisionKind::Defer));
    hub.flush();
    EXPECT_EQ(raw->lines.size(), 1u);
    EXPECT_EQ(hub.events().size(), 2u);
}

TEST(Telemetry, ExportBatch) {
    test::TempDir dir;
    Hub hub(dir / "data", std::make_shared<ManualClock>(test::epoch()), std::make_shared<IdSource>(1));
    EXPECT_EQ(hub.export_batch({}, dir / "empty.jsonl"), 0u);
    hub.emit(decision_event("s1", DecisionKind::Allow));
    hub.emit(decision_event("s1", DecisionKind::Defer));
    Filter f;
    f.decisions = {DecisionKind::Defer};
    EXPECT_EQ(hub.export_batch(f, dir / "defer.jsonl"), 1u);
    EXPECT_EQ(Json::parse(test::read_file(dir / "defer.jsonl"))["decision"], "DEFER");
    EXPECT_THROW(hub.export_batch({}, dir / "missing" / "x.jsonl"), ExportError);
}

TEST(Telemetry, ReloadsStore) {
    test::TempDir dir;
    {
        Hub hub(dir.path(), std::make_shared<ManualClock>(test::epoch()), std::make_shared<IdSource>(1));
        hub.emit(decision_event("s1", DecisionKind::Allow));
    }
    Hub again(dir.path(), std::make_shared<ManualClock>(test::epoch()), std::make_shared<IdSource>(2));
    EXPECT_EQ(again.events().size(), 1u);
}
