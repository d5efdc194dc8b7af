#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "aarm/clock.hpp"
#include "aarm/crypto.hpp"
#include "aarm/ids.hpp"
#include "aarm/ledger.hpp"
#include "aarm/model.hpp"

namespace aarm::receipts {

class VaultError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class OutcomeStatus { Executed, ExecutedWithError, Blocked, Parked };
std::string_view to_string(OutcomeStatus s);

struct Approval {
    std::string approver;
    std::string verdict;  // ALLOW | DENY
    std::string timestamp;
    std::string note;
};

struct Deferral {
    std::optional<DeferReason> defer_reason;
    std::string resolution_method;  // human_allow | human_deny | re-evaluation | timeout
    std::string resolution_timestamp;
    std::string parent_receipt_id;
};

struct Outcome {
    OutcomeStatus status = OutcomeStatus::Blocked;
    std::optional<std::string> error;
    std::optional<std::string> item_id;  // set while PARKED
};

struct ContextSummary {
    std::string session_id;
    std::string context_snapshot_digest;
    LabelSet data_classifications;
    std::optional<double> cumulative_drift;
    std::size_t deferred_count = 0;

    static ContextSummary of(const ledger::ContextSnapshot& snap);
};

// Everything a receipt binds, minus receipt_id, issued_at and the signature.
struct Materials {
    Action action;
    ContextSummary context;
    Decision decision;
    std::string policy_set_digest;
    std::optional<Approval> approval;
    std::optional<Deferral> deferral;
    std::optional<Outcome> outcome;
};

struct VerifyResult {
    bool valid = false;
    std::string reason;
};

VerifyResult verify_receipt(const Json& receipt, const crypto::PublicKeyRing& keys);
// Line-level check used for receipts.jsonl: the line must also be canonical.
VerifyResult verify_receipt_line(const std::string& line, const crypto::PublicKeyRing& keys);

struct Filter {
    std::optional<std::string> session_id;
    std::set<DecisionKind> kinds;
    std::optional<std::string> from;  // RFC 3339, inclusive
    std::optional<std::string> to;    // RFC 3339, inclusive
    std::optional<std::string> tool;
};

class QueryError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Issues, signs and stores receipts in `<data_dir>/receipts.jsonl`; publishes
// `<data_dir>/keys.json`. Appends are totally ordered.
class ReceiptVault {
public:
    ReceiptVault(std::filesystem::path data_dir, std::shared_ptr<const crypto::SigningKey> key,
                 std::shared_ptr<const Clock> clock, std::shared_ptr<IdSource> ids,
                 std::set<std::string> redacted_keys = {});

    // Durable before it returns. Throws VaultError when the key or the store is unavailable.
    Json issue(const Materials& m);

    std::vector<Json> query(const Filter& f) const;
    std::size_t size() const;
    crypto::PublicKeyRing public_keys() const;
    const std::filesystem::path& receipts_file() const { return receipts_file_; }
    const std::filesystem::path& keys_file() const { return keys_file_; }

    // True when a receipt could be issued right now.
    bool available() const;
    // Simulates a store outage (fail-closed tests).
    void set_store_available(bool available) { store_available_ = available; }

    Json redact(const Json& parameters) const;

private:
    std::filesystem::path receipts_file_;
    std::filesystem::path keys_file_;
    std::shared_ptr<const crypto::SigningKey> key_;
    std::shared_ptr<const Clock> clock_;
    std::shared_ptr<IdSource> ids_;
    std::set<std::string> redacted_keys_;
    crypto::PublicKeyRing ring_;
    std::atomic<bool> store_available_{true};

    mutable std::mutex mutex_;
    std::ofstream out_;
    std::vector<Json> receipts_;
    std::optional<TimePoint> last_issued_;
};

Json unsigned_body(const Json& receipt);

} // namespace aarm::receipts
