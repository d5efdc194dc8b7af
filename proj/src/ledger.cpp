#include "aarm/ledger.hpp"

#include "aarm/clock.hpp"
#include "aarm/crypto.hpp"

#include <algorithm>
#include <array>

namespace aarm::ledger {

namespace fs = std::filesystem;

bool valid_session_id(std::string_view id) {
    if (id.empty() || id.size() > 128 || id.front() == '.') return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
}

Json to_json(const SessionInit& s) {
    return Json{{"type", "session_init"},
                {"schema_version", 1},
                {"session_id", s.session_id},
                {"original_request", s.original_request ? Json(*s.original_request) : Json()},
                {"identity", s.identity},
                {"created_at", s.created_at},
                {"config_snapshot_digest", s.config_snapshot_digest}};
}

SessionInit session_init_from_json(const Json& j) {
    SessionInit s;
    s.session_id = j.at("session_id").get<std::string>();
    if (j.contains("original_request") && j.at("original_request").is_string())
        s.original_request = j.at("original_request").get<std::string>();
    s.identity = j.at("identity").get<Identity>();
    s.created_at = j.at("created_at").get<std::string>();
    s.config_snapshot_digest = j.at("config_snapshot_digest").get<std::string>();
    return s;
}

namespace {

Json optional_number(const std::optional<double>& v) { return v ? Json(*v) : Json(); }

std::optional<double> number_or_null(const Json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

constexpr std::array<std::pair<Disposition, std::string_view>, 6> kDispositions{{
    {Disposition::Executed, "EXECUTED"},
    {Disposition::ExecutedWithError, "EXECUTED_WITH_ERROR"},
    {Disposition::Blocked, "BLOCKED"},
    {Disposition::Parked, "PARKED"},
    {Disposition::ResumedExecuted, "RESUMED_EXECUTED"},
    {Disposition::ResumedWithError, "RESUMED_WITH_ERROR"},
}};

bool is_resumed(Disposition d) { return d == Disposition::ResumedExecuted || d == Disposition::ResumedWithError; }

} // namespace

std::string_view to_string(Disposition d) {
    for (const auto& [v, name] : kDispositions)
        if (v == d) return name;
    return "BLOCKED";
}

std::optional<Disposition> parse_disposition(std::string_view s) {
    for (const auto& [v, name] : kDispositions)
        if (name == s) return v;
    return std::nullopt;
}

bool is_execution(Disposition d) { return d != Disposition::Blocked && d != Disposition::Parked; }

Json to_json(const DerivedSignals& s) {
    return Json{{"data_classifications", s.data_classifications},
                {"semantic_distance", optional_number(s.semantic_distance)},
                {"cumulative_drift", optional_number(s.cumulative_drift)},
                {"scope_expansion", s.scope_expansion},
                {"entities", s.entities},
                {"confidence", s.confidence}};
}

DerivedSignals signals_from_json(const Json& j) {
    DerivedSignals s;
    s.data_classifications = j.at("data_classifications").get<LabelSet>();
    s.semantic_distance = number_or_null(j, "semantic_distance");
    s.cumulative_drift = number_or_null(j, "cumulative_drift");
    s.scope_expansion = j.at("scope_expansion").get<bool>();
    s.entities = j.at("entities").get<std::set<std::string>>();
    s.confidence = j.at("confidence").get<double>();
    return s;
}

Json to_json(const ContextEntry& e, bool with_hash) {
    Json j{{"type", "entry"},
           {"session_id", e.session_id},
           {"seq", e.seq},
           {"action", e.action},
           {"output", e.output ? *e.output : Json()},
           {"disposition", to_string(e.disposition)},
           {"signals", to_json(e.signals)},
           {"prev_hash", e.prev_hash}};
    if (with_hash) j["entry_hash"] = e.entry_hash;
    return j;
}

ContextEntry entry_from_json(const Json& j) {
    ContextEntry e;
    e.session_id = j.at("session_id").get<std::string>();
    e.seq = j.at("seq").get<std::uint64_t>();
    e.action = j.at("action").get<Action>();
    if (!j.at("output").is_null()) e.output = j.at("output");
    auto d = parse_disposition(j.at("disposition").get<std::string>());
    if (!d) throw std::invalid_argument("unknown disposition");
    e.disposition = *d;
    e.signals = signals_from_json(j.at("signals"));
    e.prev_hash = j.at("prev_hash").get<std::string>();
    e.entry_hash = j.value("entry_hash", "");
    return e;
}

std::string compute_entry_hash(const ContextEntry& e) { return crypto::sha256_hex(canonical_serialize(to_json(e, false))); }

Json ContextSnapshot::to_json() const {
    Json history_json = Json::array();
    for (const auto& h : history)
        history_json.push_back({{"seq", h.seq},
                                {"tool", h.tool},
                                {"operation", h.operation},
                                {"disposition", to_string(h.disposition)}});
    return Json{{"session_id", session_id},
                {"original_request", original_request ? Json(*original_request) : Json()},
                {"history", history_json},
                {"prior_tools", prior_tools},
                {"data_classifications", data_classifications},
                {"entities", entities},
                {"cumulative_drift", optional_number(cumulative_drift)},
                {"confidence", optional_number(confidence)},
                {"deferred_count", deferred_count},
                {"ledger_seq", ledger_seq},
                {"last_action_seq", last_action_seq},
                {"head_hash", head_hash}};
}

std::string ContextSnapshot::digest() const {
    const Json j{{"session_id", session_id},
                 {"original_request", original_request ? Json(*original_request) : Json()},
                 {"head_hash", head_hash},
                 {"ledger_seq", ledger_seq},
                 {"last_action_seq", last_action_seq},
                 {"prior_tools", prior_tools},
                 {"data_classifications", data_classifications},
                 {"entities", entities},
                 {"cumulative_drift", optional_number(cumulative_drift)},
                 {"confidence", optional_number(confidence)},
                 {"deferred_count", deferred_count}};
    return crypto::sha256_hex(canonical_serialize(j));
}

namespace {

void absorb(ContextSnapshot& snap, const ContextEntry& e) {
    snap.history.push_back({e.action.seq, e.action.tool, e.action.operation, e.disposition});
    if (is_execution(e.disposition)) snap.prior_tools.insert(e.action.tool);
    snap.data_classifications.insert(e.signals.data_classifications.begin(), e.signals.data_classifications.end());
    snap.entities.insert(e.signals.entities.begin(), e.signals.entities.end());
    if (e.signals.cumulative_drift) snap.cumulative_drift = e.signals.cumulative_drift;
    if (!is_resumed(e.disposition)) snap.last_action_seq = std::max(snap.last_action_seq, e.action.seq);
    snap.ledger_seq = e.seq;
    snap.head_hash = e.entry_hash;
}

void start(ContextSnapshot& snap, const SessionInit& init, const std::string& genesis) {
    snap = {};
    snap.session_id = init.session_id;
    snap.original_request = init.original_request;
    snap.head_hash = genesis;
}

} // namespace

ChainReport verify_ledger_file(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) return {false, 0, "ledger file missing"};
    std::string line;
    if (!std::getline(in, line)) return {false, 0, "ledger file empty"};
    if (!is_canonical(line)) return {false, 0, "genesis record is not canonical JSON"};
    std::string prev = crypto::sha256_hex(line);
    std::string session_id;
    try {
        session_id = Json::parse(line).at("session_id").get<std::string>();
    } catch (const std::exception&) {
        return {false, 0, "genesis record malformed"};
    }

    std::uint64_t expected = 1;
    while (std::getline(in, line)) {
        if (!is_canonical(line)) return {false, expected, "entry is not canonical JSON"};
        ContextEntry e;
        Json body;
        try {
            body = Json::parse(line);
            e = entry_from_json(body);
            body.erase("entry_hash");
        } catch (const std::exception&) {
            return {false, expected, "entry malformed"};
        }
        // hash the stored bytes, not a re-serialization, so fields the parser ignores are covered too
        const bool self_consistent = crypto::sha256_hex(canonical_serialize(body)) == e.entry_hash;
        if (!self_consistent) return {false, expected, "entry hash mismatch"};
        // The entry is intact; a broken link means something before it moved.
        if (e.prev_hash != prev) return {false, e.seq, "prev_hash does not match predecessor"};
        if (e.seq != expected) return {false, std::min(e.seq, expected), "sequence gap"};
        if (e.session_id != session_id) return {false, e.seq, "entry belongs to another session"};
        prev = e.entry_hash;
        ++expected;
    }
    return {};
}

ContextLedger::ContextLedger(fs::path data_dir) : dir_(std::move(data_dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw LedgerError(LedgerError::Code::Io, "cannot create data directory " + dir_.string());
    load_existing();
}

fs::path ContextLedger::file_for(const std::string& session_id) const { return dir_ / (session_id + ".ctx.jsonl"); }

void ContextLedger::load_existing() {
    for (const auto& de : fs::directory_iterator(dir_)) {
        const auto name = de.path().filename().string();
        constexpr std::string_view suffix = ".ctx.jsonl";
        if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
            continue;
        std::ifstream in(de.path(), std::ios::binary);
        std::string line;
        if (!std::getline(in, line)) continue;
        auto s = std::make_shared<Session>();
        try {
            s->init = session_init_from_json(Json::parse(line));
            s->head_hash = crypto::sha256_hex(line);
            start(s->snap, s->init, s->head_hash);
            while (std::getline(in, line)) {
                auto e = entry_from_json(Json::parse(line));
                s->head_hash = e.entry_hash;
                absorb(s->snap, e);
                if (e.disposition == Disposition::Parked) s->parked.insert(e.action.seq);
                if (is_resumed(e.disposition)) s->parked.erase(e.action.seq);
                s->entries.push_back(std::move(e));
            }
        } catch (const std::exception&) {
            continue;  // unreadable ledgers stay on disk for verify_ledger_file
        }
        s->out.open(de.path(), std::ios::app | std::ios::binary);
        sessions_.emplace(s->init.session_id, std::move(s));
    }
}

std::string ContextLedger::init_session(const SessionInit& init) {
    if (!valid_session_id(init.session_id))
        throw LedgerError(LedgerError::Code::Validation, "session_id must be non-empty [A-Za-z0-9_.-]");
    if (!parse_rfc3339(init.created_at))
        throw LedgerError(LedgerError::Code::Validation, "created_at must be RFC 3339 UTC");
    auto violations = validate_identity(init.identity);
    if (!violations.empty()) throw LedgerError(LedgerError::Code::Validation, violations.front().field + " missing");

    auto s = std::make_shared<Session>();
    s->init = init;
    const auto line = canonical_serialize(to_json(init));
    s->head_hash = crypto::sha256_hex(line);
    start(s->snap, s->init, s->head_hash);

    std::unique_lock lock(sessions_mutex_);
    if (sessions_.count(init.session_id) || fs::exists(file_for(init.session_id)))
        throw LedgerError(LedgerError::Code::SessionExists, "session " + init.session_id + " already exists");
    s->out.open(file_for(init.session_id), std::ios::out | std::ios::binary | std::ios::trunc);
    if (!s->out) throw LedgerError(LedgerError::Code::Io, "cannot create ledger file");
    s->out << line << '\n';
    s->out.flush();
    if (!s->out) throw LedgerError(LedgerError::Code::Io, "ledger write failed");
    sessions_.emplace(init.session_id, s);
    return s->head_hash;
}

std::shared_ptr<ContextLedger::Session> ContextLedger::find(const std::string& session_id) const {
    std::shared_lock lock(sessions_mutex_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw LedgerError(LedgerError::Code::NoSession, "no session " + session_id);
    return it->second;
}

bool ContextLedger::has_session(const std::string& session_id) const {
    std::shared_lock lock(sessions_mutex_);
    return sessions_.count(session_id) != 0;
}

std::optional<SessionInit> ContextLedger::session_init(const std::string& session_id) const {
    std::shared_lock lock(sessions_mutex_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) return std::nullopt;
    return it->second->init;
}

ContextEntry ContextLedger::append_entry(const std::string& session_id, const Action& action,
                                         std::optional<Json> output, const DerivedSignals& signals,
                                         Disposition disposition) {
    auto s = find(session_id);
    std::lock_guard lock(s->mutex);

    const std::uint64_t last_action_seq = s->snap.last_action_seq;
    if (is_resumed(disposition)) {
        if (!s->parked.count(action.seq))
            throw LedgerError(LedgerError::Code::Ordering,
                              "action " + std::to_string(action.seq) + " is not parked in this session");
    } else if (action.seq != last_action_seq + 1) {
        throw LedgerError(LedgerError::Code::Ordering, "expected action seq " + std::to_string(last_action_seq + 1) +
                                                           ", got " + std::to_string(action.seq));
    }

    ContextEntry e;
    e.session_id = session_id;
    e.seq = s->entries.size() + 1;
    e.action = action;
    e.output = std::move(output);
    e.disposition = disposition;
    e.signals = signals;
    e.prev_hash = s->head_hash;
    e.entry_hash = compute_entry_hash(e);

    s->out << canonical_serialize(to_json(e)) << '\n';
    s->out.flush();
    if (!s->out) throw LedgerError(LedgerError::Code::Io, "ledger write failed");

    s->head_hash = e.entry_hash;
    if (disposition == Disposition::Parked) s->parked.insert(action.seq);
    if (is_resumed(disposition)) s->parked.erase(action.seq);
    absorb(s->snap, e);
    s->entries.push_back(e);
    return e;
}

ContextSnapshot ContextLedger::current_context(const std::string& session_id) const {
    auto s = find(session_id);
    std::lock_guard lock(s->mutex);
    ContextSnapshot snap = s->snap;
    if (snap.original_request && !snap.original_request->empty())
        snap.confidence = 1.0 - snap.cumulative_drift.value_or(0.0);
    return snap;
}

ChainReport ContextLedger::verify_chain(const std::string& session_id) const {
    std::size_t expected_entries = 0;
    {
        std::shared_lock lock(sessions_mutex_);
        if (auto it = sessions_.find(session_id); it != sessions_.end()) {
            std::lock_guard slock(it->second->mutex);
            expected_entries = it->second->entries.size();
        }
    }
    auto report = verify_ledger_file(file_for(session_id));
    if (!report.ok) return report;
    // A truncated tail verifies on its own; compare against what was appended.
    std::ifstream in(file_for(session_id), std::ios::binary);
    std::size_t lines = 0;
    std::string line;
    while (std::getline(in, line)) ++lines;
    if (lines - 1 < expected_entries) return {false, lines, "ledger truncated"};
    return report;
}

std::vector<ContextEntry> ContextLedger::entries(const std::string& session_id) const {
    auto s = find(session_id);
    std::lock_guard lock(s->mutex);
    return s->entries;
}

} // namespace aarm::ledger
