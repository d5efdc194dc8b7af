#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "aarm/classify.hpp"
#include "aarm/model.hpp"

namespace aarm::ledger {

class LedgerError : public std::runtime_error {
public:
    enum class Code { SessionExists, NoSession, Ordering, Validation, Io };
    LedgerError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

struct SessionInit {
    std::string session_id;
    std::optional<std::string> original_request;
    Identity identity;
    std::string created_at;
    std::string config_snapshot_digest;  // hex SHA-256 of the active policy set
};

Json to_json(const SessionInit& s);
SessionInit session_init_from_json(const Json& j);

struct DerivedSignals {
    LabelSet data_classifications;
    std::optional<double> semantic_distance;  // null without an original request
    std::optional<double> cumulative_drift;   // running max of semantic_distance
    bool scope_expansion = false;
    std::set<std::string> entities;
    double confidence = 0.0;                  // 1 - cumulative_drift, or 0 without a baseline
};

Json to_json(const DerivedSignals& s);
DerivedSignals signals_from_json(const Json& j);

// What happened to the action this entry records. Every submitted action is
// recorded once, in seq order, when its decision is enforced. A parked action
// that later runs gets a second, Resumed* entry carrying the output.
enum class Disposition { Executed, ExecutedWithError, Blocked, Parked, ResumedExecuted, ResumedWithError };

std::string_view to_string(Disposition d);
std::optional<Disposition> parse_disposition(std::string_view s);
bool is_execution(Disposition d);

struct ContextEntry {
    std::string session_id;
    std::uint64_t seq = 0;  // ledger position, 1-based
    Action action;
    std::optional<Json> output;
    Disposition disposition = Disposition::Executed;
    DerivedSignals signals;
    std::string prev_hash;
    std::string entry_hash;
};

Json to_json(const ContextEntry& e, bool with_hash = true);
ContextEntry entry_from_json(const Json& j);
std::string compute_entry_hash(const ContextEntry& e);

struct HistoryItem {
    std::uint64_t seq;  // action seq
    std::string tool;
    std::string operation;
    Disposition disposition;
};

// Read-only view handed to the policy engine and stamped into receipts.
struct ContextSnapshot {
    std::string session_id;
    std::optional<std::string> original_request;
    std::vector<HistoryItem> history;
    std::set<std::string> prior_tools;     // tools of executed actions
    LabelSet data_classifications;
    std::set<std::string> entities;
    std::optional<double> cumulative_drift;
    std::optional<double> confidence;      // unpopulated without a baseline
    std::size_t deferred_count = 0;
    std::uint64_t ledger_seq = 0;          // latest entry
    std::uint64_t last_action_seq = 0;
    std::string head_hash;                 // entry_hash of the latest entry (genesis digest when empty)

    Json to_json() const;
    // Binds the chain head rather than re-hashing the history it already commits to.
    std::string digest() const;
};

struct ChainReport {
    bool ok = true;
    std::optional<std::uint64_t> corrupt_seq;  // smallest ledger seq where the chain breaks (0 = genesis)
    std::string detail;
};

// Verifies a ledger file on its own, without any in-memory state.
ChainReport verify_ledger_file(const std::filesystem::path& file);

// Append-only, hash-chained per-session context log. One file per session,
// `<session_id>.ctx.jsonl`: the SessionInit line, then one entry per line.
class ContextLedger {
public:
    explicit ContextLedger(std::filesystem::path data_dir);

    // Returns the genesis digest, which becomes prev_hash of seq 1.
    std::string init_session(const SessionInit& init);

    ContextEntry append_entry(const std::string& session_id, const Action& action, std::optional<Json> output,
                              const DerivedSignals& signals, Disposition disposition = Disposition::Executed);

    ContextSnapshot current_context(const std::string& session_id) const;
    ChainReport verify_chain(const std::string& session_id) const;

    bool has_session(const std::string& session_id) const;
    std::optional<SessionInit> session_init(const std::string& session_id) const;
    std::vector<ContextEntry> entries(const std::string& session_id) const;
    std::filesystem::path file_for(const std::string& session_id) const;
    const std::filesystem::path& data_dir() const { return dir_; }

private:
    struct Session {
        mutable std::mutex mutex;
        SessionInit init;
        std::string head_hash;
        std::vector<ContextEntry> entries;
        ContextSnapshot snap;
        std::set<std::uint64_t> parked;  // action seqs parked and not yet resumed
        std::ofstream out;
    };

    std::shared_ptr<Session> find(const std::string& session_id) const;
    void load_existing();

    std::filesystem::path dir_;
    mutable std::shared_mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
};

bool valid_session_id(std::string_view id);

} // namespace aarm::ledger
