#include <gtest/gtest.h>

#include <random>

#include "aarm/crypto.hpp"
#include "aarm/ledger.hpp"
#include "support.hpp"

using namespace aarm;
using namespace aarm::ledger;

namespace {

SessionInit init_for(const std::string& id, std::optional<std::string> request = "Summarize Q3 sales for leadership") {
    return SessionInit{id, std::move(request), test::identity(id), "2025-01-15T10:00:00.000Z",
                       crypto::sha256_hex("policy")};
}

DerivedSignals signals(LabelSet labels = {}, std::optional<double> drift = std::nullopt) {
    DerivedSignals s;
    s.data_classifications = std::move(labels);
    s.semantic_distance = drift;
    s.cumulative_drift = drift;
    s.confidence = drift ? 1.0 - *drift : 0.0;
    return s;
}

// Writes n executed entries into a fresh session and returns the ledger file.
std::filesystem::path build(ContextLedger& l, const std::string& id, int n) {
    l.init_session(init_for(id));
    for (int i = 1; i <= n; ++i)
        l.append_entry(id, test::action("db", "query", {{"sql", "SELECT " + std::to_string(i)}}, i, id),
                       Json{{"rows", {i}}, {"_classification", "INTERNAL"}}, signals({"INTERNAL"}, 0.1 * (i % 3)));
    return l.file_for(id);
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i)
        if (text[i] == '\n') {
            out.push_back(text.substr(start, i - start));
            start = i + 1;
        }
    return out;
}

// Ledger seq of the entry holding byte `pos` (0 = genesis line).
std::uint64_t entry_at(const std::string& text, std::size_t pos) {
    std::uint64_t line = 0;
    for (std::size_t i = 0; i < pos; ++i)
        if (text[i] == '\n') ++line;
    return line;
}

} // namespace

TEST(Ledger, GenesisAnchorsFirstEntry) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    const auto genesis = l.init_session(init_for("s1"));
    const auto first_line = lines_of(test::read_file(l.file_for("s1"))).at(0);
    EXPECT_EQ(genesis, crypto::sha256_hex(first_line));
    auto e = l.append_entry("s1", test::action("db", "query", {{"sql", "x"}}, 1, "s1"), std::nullopt, signals());
    EXPECT_EQ(e.prev_hash, genesis);
    EXPECT_EQ(e.seq, 1u);
    EXPECT_EQ(e.entry_hash, compute_entry_hash(e));
}

TEST(Ledger, InitValidation) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    try {
        l.init_session(init_for(""));
        FAIL() << "empty session id accepted";
    } catch (const LedgerError& e) {
        EXPECT_EQ(e.code(), LedgerError::Code::Validation);
    }
    l.init_session(init_for("dup"));
    try {
        l.init_session(init_for("dup"));
        FAIL() << "duplicate session accepted";
    } catch (const LedgerError& e) {
        EXPECT_EQ(e.code(), LedgerError::Code::SessionExists);
    }
    auto bad = init_for("s2");
    bad.identity.agent_identity.clear();
    EXPECT_THROW(l.init_session(bad), LedgerError);
}

TEST(Ledger, OrderingAndUnknownSession) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    build(l, "s1", 3);
    try {
        l.append_entry("s1", test::action("db", "query", {}, 5, "s1"), std::nullopt, signals());
        FAIL();
    } catch (const LedgerError& e) {
        EXPECT_EQ(e.code(), LedgerError::Code::Ordering);
    }
    try {
        l.append_entry("nope", test::action("db", "query", {}, 1, "nope"), std::nullopt, signals());
        FAIL();
    } catch (const LedgerError& e) {
        EXPECT_EQ(e.code(), LedgerError::Code::NoSession);
    }
    EXPECT_THROW(l.current_context("nope"), LedgerError);
}

TEST(Ledger, FreshContext) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    l.init_session(init_for("s1", std::nullopt));
    auto c = l.current_context("s1");
    EXPECT_TRUE(c.history.empty());
    EXPECT_TRUE(c.data_classifications.empty());
    EXPECT_FALSE(c.cumulative_drift);
    EXPECT_FALSE(c.confidence);
    EXPECT_FALSE(c.original_request);
}

TEST(Ledger, PiiCarriedForward) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    l.init_session(init_for("s1"));
    l.append_entry("s1", test::action("db", "query", {{"sql", "SELECT * FROM customers"}}, 1, "s1"),
                   Json{{"rows", {"alice@company.com"}}}, signals({"PII"}, 0.3));
    EXPECT_EQ(l.current_context("s1").data_classifications, LabelSet{"PII"});
    auto e = l.append_entry("s1", test::action("email", "send", {{"to", "analyst@partner.com"}}, 2, "s1"),
                            std::nullopt, signals({}, 0.72), Disposition::Blocked);
    auto c = l.current_context("s1");
    EXPECT_EQ(c.data_classifications, LabelSet{"PII"});
    EXPECT_EQ(c.prior_tools, std::set<std::string>{"db"});  // the blocked email never ran
    EXPECT_DOUBLE_EQ(*c.confidence, 1.0 - 0.72);
    EXPECT_EQ(c.head_hash, e.entry_hash);
}

TEST(Ledger, HistoryMatchesIndependentList) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    l.init_session(init_for("s1"));
    std::vector<std::pair<std::string, std::string>> expected;
    const std::vector<std::pair<std::string, std::string>> ops{{"db", "query"}, {"web", "search"}, {"email", "send"}};
    for (std::size_t i = 0; i < ops.size(); ++i) {
        l.append_entry("s1", test::action(ops[i].first, ops[i].second, Json::object(), i + 1, "s1"), std::nullopt,
                       signals());
        expected.push_back(ops[i]);
    }
    auto c = l.current_context("s1");
    ASSERT_EQ(c.history.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(c.history[i].seq, i + 1);
        EXPECT_EQ(std::make_pair(c.history[i].tool, c.history[i].operation), expected[i]);
    }
}

TEST(Ledger, ParkedThenResumed) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    l.init_session(init_for("s1"));
    auto a = test::action("secrets", "rotate", {{"name", "db"}}, 1, "s1");
    l.append_entry("s1", a, std::nullopt, signals(), Disposition::Parked);
    l.append_entry("s1", test::action("web", "search", {}, 2, "s1"), Json{{"_classification", "PUBLIC"}}, signals());
    l.append_entry("s1", a, Json{{"ok", true}}, signals(), Disposition::ResumedExecuted);
    EXPECT_THROW(l.append_entry("s1", a, std::nullopt, signals(), Disposition::ResumedExecuted), LedgerError);
    auto c = l.current_context("s1");
    EXPECT_EQ(c.last_action_seq, 2u);
    EXPECT_EQ(c.ledger_seq, 3u);
    EXPECT_TRUE(l.verify_chain("s1").ok);
}

TEST(Ledger, SnapshotDigestBindsHead) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    build(l, "s1", 2);
    auto before = l.current_context("s1");
    EXPECT_EQ(before.digest(), l.current_context("s1").digest());
    l.append_entry("s1", test::action("db", "query", {{"sql", "SELECT 3"}}, 3, "s1"), std::nullopt,
                   signals({"INTERNAL"}, 0.1 * (1 % 3)));
    EXPECT_NE(before.digest(), l.current_context("s1").digest());
}

TEST(Ledger, ReloadFromDisk) {
    test::TempDir dir;
    {
        ContextLedger l(dir.path());
        build(l, "s1", 4);
    }
    ContextLedger again(dir.path());
    ASSERT_TRUE(again.has_session("s1"));
    EXPECT_EQ(again.entries("s1").size(), 4u);
    EXPECT_TRUE(again.verify_chain("s1").ok);
    again.append_entry("s1", test::action("db", "query", {}, 5, "s1"), std::nullopt, signals());
    EXPECT_TRUE(verify_ledger_file(again.file_for("s1")).ok);
}

TEST(Ledger, UntouchedTenEntriesVerify) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    build(l, "s1", 10);
    EXPECT_TRUE(l.verify_chain("s1").ok);
}

TEST(Ledger, FlipInEntryFourParameters) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    auto file = build(l, "s1", 10);
    auto text = test::read_file(file);
    auto lines = lines_of(text);
    auto pos = lines[4].find("SELECT 4");
    ASSERT_NE(pos, std::string::npos);
    lines[4][pos + 7] = '5';
    std::string out;
    for (auto& line : lines) out += line + "\n";
    test::write_file(file, out);
    auto r = l.verify_chain("s1");
    EXPECT_FALSE(r.ok);
    EXPECT_EQ(r.corrupt_seq, 4u);
}

TEST(Ledger, DeletedEntrySevenBreaksAtEight) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    auto file = build(l, "s1", 10);
    auto lines = lines_of(test::read_file(file));
    lines.erase(lines.begin() + 7);
    std::string out;
    for (auto& line : lines) out += line + "\n";
    test::write_file(file, out);
    auto r = l.verify_chain("s1");
    EXPECT_FALSE(r.ok);
    EXPECT_EQ(r.corrupt_seq, 8u);
}

TEST(Ledger, TruncatedTailDetected) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    auto file = build(l, "s1", 5);
    auto lines = lines_of(test::read_file(file));
    lines.pop_back();
    std::string out;
    for (auto& line : lines) out += line + "\n";
    test::write_file(file, out);
    EXPECT_FALSE(l.verify_chain("s1").ok);
}

// Every byte of the file, each flipped on its own: detected, and reported at
// or before the successor of the entry that holds the byte.
TEST(Ledger, PropertyEveryByteFlipDetected) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    auto file = build(l, "s1", 4);
    const auto original = test::read_file(file);
    std::mt19937 rng(99);
    for (std::size_t pos = 0; pos < original.size(); ++pos) {
        auto mutated = original;
        mutated[pos] = static_cast<char>(mutated[pos] ^ static_cast<char>(1 + rng() % 255));
        test::write_file(file, mutated);
        auto r = verify_ledger_file(file);
        ASSERT_FALSE(r.ok) << "byte " << pos << " undetected";
        ASSERT_TRUE(r.corrupt_seq);
        EXPECT_LE(*r.corrupt_seq, entry_at(original, pos) + 1) << "byte " << pos;
    }
    test::write_file(file, original);
    EXPECT_TRUE(verify_ledger_file(file).ok);
}

TEST(Ledger, PropertyRandomSessionsChainAndMonotone) {
    std::mt19937 rng(17);
    const std::vector<std::string> tools{"db", "web", "email", "files"};
    const std::vector<std::string> labels{"PUBLIC", "INTERNAL", "CONFIDENTIAL", "PII"};
    for (int trial = 0; trial < 20; ++trial) {
        test::TempDir dir;
        ContextLedger l(dir.path());
        const std::string id = "p" + std::to_string(trial);
        l.init_session(init_for(id));
        double drift = 0;
        LabelSet seen;
        for (std::uint64_t seq = 1, n = 1 + rng() % 15; seq <= n; ++seq) {
            drift = std::max(drift, static_cast<double>(rng() % 101) / 100.0);
            LabelSet ls{labels[rng() % labels.size()]};
            l.append_entry(id, test::action(tools[rng() % tools.size()], "op", {{"v", static_cast<int>(rng())}}, seq, id),
                           Json{{"n", seq}}, signals(ls, drift));
            auto c = l.current_context(id);
            EXPECT_TRUE(std::includes(c.data_classifications.begin(), c.data_classifications.end(), seen.begin(),
                                      seen.end()));
            seen = c.data_classifications;
            EXPECT_NEAR(*c.confidence, 1.0 - drift, 1e-12);
        }
        EXPECT_TRUE(l.verify_chain(id).ok);
        double prev = 0;
        for (const auto& e : l.entries(id)) {
            EXPECT_GE(*e.signals.cumulative_drift, prev);
            prev = *e.signals.cumulative_drift;
        }
    }
}

TEST(Ledger, EntryJsonRoundTrip) {
    test::TempDir dir;
    ContextLedger l(dir.path());
    build(l, "s1", 2);
    for (const auto& e : l.entries("s1")) {
        auto back = entry_from_json(to_json(e));
        EXPECT_EQ(compute_entry_hash(back), e.entry_hash);
    }
    EXPECT_EQ(parse_disposition(to_string(Disposition::ResumedWithError)), Disposition::ResumedWithError);
}
