#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "aarm/canonical_json.hpp"
#include "aarm/clock.hpp"
#include "aarm/crypto.hpp"
#include "aarm/ids.hpp"
#include "aarm/model.hpp"
#include "support.hpp"

using namespace aarm;

namespace {

Json sample_action_json() {
    return Json::parse(R"({
      "tool": "email", "operation": "send",
      "parameters": {"to": "external@partner.com", "subject": "Customer Data", "body": "..."},
      "identity": {"human_principal": "alice@company.com", "service_identity": "agent-svc@iam",
                   "agent_identity": "agent-7", "session_id": "sess_abc123", "privilege_scope": []},
      "context_ref": {"session_id": "sess_abc123", "seq": 1},
      "timestamp": "2025-01-15T10:30:00Z", "seq": 2
    })");
}

} // namespace

TEST(CanonicalJson, SortsKeys) {
    EXPECT_EQ(canonical_serialize(Json::parse(R"({"b":1,"a":2})")), R"({"a":2,"b":1})");
}

TEST(CanonicalJson, EmptyObject) { EXPECT_EQ(canonical_serialize(Json::object()), "{}"); }

TEST(CanonicalJson, NestedAndWhitespace) {
    auto v = Json::parse(R"({ "z": [ 3, {"y": null, "x": true} ], "a": "s" })");
    EXPECT_EQ(canonical_serialize(v), R"({"a":"s","z":[3,{"x":true,"y":null}]})");
}

TEST(CanonicalJson, ShortestNumbers) {
    EXPECT_EQ(canonical_serialize(Json(1.0)), "1");
    EXPECT_EQ(canonical_serialize(Json(0.1)), "0.1");
    EXPECT_EQ(canonical_serialize(Json(-0.0)), "0");
    EXPECT_EQ(canonical_serialize(Json(1e-7)), "1e-7");
    EXPECT_EQ(canonical_serialize(Json(-42)), "-42");
    EXPECT_EQ(canonical_serialize(Json(0.72)), "0.72");
}

TEST(CanonicalJson, MinimalEscaping) {
    EXPECT_EQ(canonical_serialize(Json("a\"b\\c\n\x01")), R"("a\"b\\c\n\u0001")");
    EXPECT_EQ(canonical_serialize(Json("caf\xc3\xa9 /")), "\"caf\xc3\xa9 /\"");
}

TEST(CanonicalJson, RejectsNonFinite) {
    EXPECT_THROW(canonical_serialize(Json(std::numeric_limits<double>::infinity())), CanonicalError);
    EXPECT_THROW(canonical_serialize(Json(std::nan(""))), CanonicalError);
}

TEST(CanonicalJson, RejectsInvalidUtf8) {
    EXPECT_THROW(canonical_serialize(Json(std::string("\xff"))), CanonicalError);
    EXPECT_THROW(canonical_serialize(Json(std::string("\xc0\xaf"))), CanonicalError);      // overlong
    EXPECT_THROW(canonical_serialize(Json(std::string("\xed\xa0\x80"))), CanonicalError);  // surrogate
}

TEST(CanonicalJson, ExampleActionSerializesIdentically) {
    const auto a = sample_action_json();
    const auto first = canonical_serialize(a);
    const auto second = canonical_serialize(Json::parse(a.dump(4)));
    EXPECT_EQ(crypto::sha256_hex(first), crypto::sha256_hex(second));
    EXPECT_TRUE(is_canonical(first));
}

// Random trees; reordering keys and re-parsing must not change the bytes.
TEST(CanonicalJson, PropertyPureAndOrderIndependent) {
    std::mt19937_64 rng(11);
    std::function<Json(int)> gen = [&](int depth) -> Json {
        switch (rng() % (depth > 3 ? 4 : 6)) {
            case 0: return Json(static_cast<std::int64_t>(rng() % 2000) - 1000);
            case 1: return Json(static_cast<double>(rng() % 100000) / 997.0);
            case 2: return Json(std::string(1 + rng() % 5, static_cast<char>('a' + rng() % 26)));
            case 3: return Json(rng() % 2 == 0);
            case 4: {
                Json arr = Json::array();
                for (int i = 0, n = static_cast<int>(rng() % 4); i < n; ++i) arr.push_back(gen(depth + 1));
                return arr;
            }
            default: {
                Json obj = Json::object();
                for (int i = 0, n = static_cast<int>(rng() % 5); i < n; ++i)
                    obj[std::string(1, static_cast<char>('a' + rng() % 26)) + std::to_string(rng() % 9)] =
                        gen(depth + 1);
                return obj;
            }
        }
    };
    for (int trial = 0; trial < 300; ++trial) {
        const Json v = gen(0);
        const auto bytes = canonical_serialize(v);
        EXPECT_EQ(bytes, canonical_serialize(Json::parse(v.dump(2))));
        EXPECT_EQ(bytes, canonical_serialize(Json::parse(bytes)));
        EXPECT_TRUE(is_canonical(bytes));
    }
}

TEST(Clock, Rfc3339RoundTrip) {
    auto t = parse_rfc3339("2025-01-15T10:30:00Z");
    ASSERT_TRUE(t);
    EXPECT_EQ(format_rfc3339(*t), "2025-01-15T10:30:00.000Z");
    EXPECT_EQ(format_rfc3339(*parse_rfc3339("2025-01-15T10:30:00.123456Z")), "2025-01-15T10:30:00.123Z");
    EXPECT_FALSE(parse_rfc3339("2025-01-15T10:30:00+01:00"));
    EXPECT_FALSE(parse_rfc3339("yesterday"));
}

TEST(Clock, ManualClockAdvances) {
    ManualClock c(test::epoch());
    c.advance(std::chrono::seconds(301));
    EXPECT_EQ(format_rfc3339(c.now()), "2025-01-15T10:05:01.000Z");
}

TEST(Crypto, Sha256KnownVector) {
    EXPECT_EQ(crypto::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Crypto, SignVerifyAndKeyId) {
    std::array<std::uint8_t, 32> seed{};
    seed.fill(7);
    auto k = crypto::SigningKey::from_seed(seed);
    auto sig = k.sign_base64("message");
    EXPECT_TRUE(crypto::verify_signature(k.public_key(), "message", sig));
    EXPECT_FALSE(crypto::verify_signature(k.public_key(), "messagf", sig));
    const auto expected_id =
        crypto::sha256_hex(std::string(reinterpret_cast<const char*>(k.public_key().data()), 32)).substr(0, 8);
    EXPECT_EQ(k.key_id(), expected_id);

    seed.fill(8);
    auto other = crypto::SigningKey::from_seed(seed);
    EXPECT_FALSE(crypto::verify_signature(other.public_key(), "message", sig));
}

TEST(Crypto, KeyFileRoundTrip) {
    test::TempDir dir;
    auto k = crypto::SigningKey::generate();
    k.save(dir / "key.json");
    auto loaded = crypto::SigningKey::load(dir / "key.json");
    EXPECT_EQ(loaded.public_key(), k.public_key());
    EXPECT_EQ(loaded.key_id(), k.key_id());
}

TEST(Crypto, Base64) {
    std::vector<std::uint8_t> bytes{'h', 'i', '!', 0};
    auto text = crypto::base64_encode(bytes);
    EXPECT_EQ(text, "aGkhAA==");
    EXPECT_EQ(crypto::base64_decode(text), bytes);
    EXPECT_THROW(crypto::base64_decode("aGkhAA="), crypto::CryptoError);
    EXPECT_THROW(crypto::base64_decode("a$=="), crypto::CryptoError);
}

TEST(Crypto, KeyRing) {
    auto k = crypto::SigningKey::generate();
    crypto::PublicKeyRing ring{{k.key_id(), k.public_key()}};
    auto text = crypto::serialize_key_ring(ring);
    EXPECT_EQ(crypto::parse_key_ring(text), ring);
    EXPECT_EQ(Json::parse(text).at(k.key_id()).get<std::string>(), crypto::base64_encode(k.public_key()));
}

TEST(Ids, SeededSequenceRepeats) {
    IdSource a(7), b(7), c(8);
    for (int i = 0; i < 5; ++i) {
        auto x = a.next_uuid();
        EXPECT_EQ(x, b.next_uuid());
        EXPECT_NE(x, c.next_uuid());
        ASSERT_EQ(x.size(), 36u);
        EXPECT_EQ(x[14], '4');
        EXPECT_NE(std::string("89ab").find(x[19]), std::string::npos);
    }
}

TEST(Ids, UnseededDistinct) {
    IdSource s;
    std::set<std::string> seen;
    for (int i = 0; i < 1000; ++i) seen.insert(s.next_uuid());
    EXPECT_EQ(seen.size(), 1000u);
}

TEST(Model, ExampleActionIsValid) {
    Action a = sample_action_json().get<Action>();
    EXPECT_TRUE(validate_action(a).empty());
    EXPECT_TRUE(validate_action(a, 1).empty());
}

TEST(Model, EmptyHumanPrincipal) {
    Action a = sample_action_json().get<Action>();
    a.identity.human_principal.clear();
    auto v = validate_action(a);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].field, "identity.human_principal");
}

TEST(Model, RepeatedSeq) {
    Action a = sample_action_json().get<Action>();
    auto v = validate_action(a, a.seq);
    ASSERT_EQ(v.size(), 1u);
    EXPECT_EQ(v[0].field, "seq");
}

TEST(Model, ActionJsonRoundTrip) {
    Action a = test::action("db", "query", {{"sql", "SELECT 1"}}, 3);
    Json j = a;
    EXPECT_EQ(j.get<Action>(), a);
}

// Each corruption breaks exactly one invariant; the validator must name it,
// and an uncorrupted action must pass.
TEST(Model, PropertyValidatorRejectsExactlyCorruptions) {
    std::mt19937 rng(3);
    const std::vector<std::string> fields{"tool", "operation", "identity.human_principal",
                                          "identity.service_identity", "identity.agent_identity",
                                          "identity.session_id", "timestamp", "seq", "parameters"};
    for (int trial = 0; trial < 500; ++trial) {
        Action a = test::action("t" + std::to_string(rng() % 5), "op", {{"k", static_cast<int>(rng() % 10)}},
                                2 + rng() % 100);
        a.context_ref.session_id.clear();
        std::set<std::string> broken;
        for (const auto& f : fields) {
            if (rng() % 4 != 0) continue;
            broken.insert(f);
            if (f == "tool") a.tool.clear();
            else if (f == "operation") a.operation.clear();
            else if (f == "identity.human_principal") a.identity.human_principal.clear();
            else if (f == "identity.service_identity") a.identity.service_identity.clear();
            else if (f == "identity.agent_identity") a.identity.agent_identity.clear();
            else if (f == "identity.session_id") a.identity.session_id.clear();
            else if (f == "timestamp") a.timestamp = "2025-13-45 noon";
            else if (f == "seq") a.seq = 1;  // previous seq below is 1
            else if (f == "parameters") a.parameters = Json::array();
        }
        std::set<std::string> reported;
        for (const auto& v : validate_action(a, 1)) reported.insert(v.field);
        EXPECT_EQ(reported, broken) << "trial " << trial;
    }
}

TEST(Model, DecisionInvariants) {
    EXPECT_NO_THROW(Decision::allow({}, "", 1.0));
    EXPECT_THROW(Decision::deny({}, "", 1.0), DecisionInvariantError);
    EXPECT_THROW(Decision::step_up({}, "", 1.0), DecisionInvariantError);
    EXPECT_THROW(Decision::defer({}, "", DeferReason::LowConfidence, 1.0), DecisionInvariantError);
    EXPECT_THROW(Decision::allow({}, "ok", 1.5), DecisionInvariantError);

    auto m = Decision::modify({"p"}, "redact", Json{{"a", 1}}, 0.5);
    EXPECT_TRUE(m.modified_parameters);
    EXPECT_FALSE(m.defer_reason);
    auto d = Decision::defer({}, "wait", DeferReason::PriorityConflict, 0.5);
    EXPECT_EQ(d.defer_reason, DeferReason::PriorityConflict);

    Decision bad = Decision::allow({}, "", 1.0);
    bad.modified_parameters = Json::object();
    EXPECT_THROW(bad.check(), DecisionInvariantError);
}

TEST(Model, DecisionKindNamesClosed) {
    for (auto k : {DecisionKind::Allow, DecisionKind::Deny, DecisionKind::Modify, DecisionKind::StepUp,
                   DecisionKind::Defer})
        EXPECT_EQ(parse_decision_kind(to_string(k)), k);
    EXPECT_EQ(to_string(DecisionKind::StepUp), "STEP_UP");
    EXPECT_FALSE(parse_decision_kind("MAYBE"));
}
