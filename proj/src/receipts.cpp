#include "aarm/receipts.hpp"

#include <algorithm>
#include <sstream>

namespace aarm::receipts {

namespace fs = std::filesystem;

std::string_view to_string(OutcomeStatus s) {
    switch (s) {
        case OutcomeStatus::Executed: return "EXECUTED";
        case OutcomeStatus::ExecutedWithError: return "EXECUTED_WITH_ERROR";
        case OutcomeStatus::Blocked: return "BLOCKED";
        case OutcomeStatus::Parked: return "PARKED";
    }
    return "BLOCKED";
}

ContextSummary ContextSummary::of(const ledger::ContextSnapshot& snap) {
    return {snap.session_id, snap.digest(), snap.data_classifications, snap.cumulative_drift, snap.deferred_count};
}

Json unsigned_body(const Json& receipt) {
    Json body = receipt;
    body.erase("signature");
    return body;
}

VerifyResult verify_receipt(const Json& receipt, const crypto::PublicKeyRing& keys) {
    if (!receipt.is_object() || !receipt.contains("signature") || !receipt.at("signature").is_object())
        return {false, "missing signature"};
    const auto& sig = receipt.at("signature");
    if (sig.value("algorithm", "") != "Ed25519") return {false, "unsupported algorithm"};
    const auto key_id = sig.value("key_id", "");
    auto it = keys.find(key_id);
    if (it == keys.end()) return {false, "unknown key"};
    std::string bytes;
    try {
        bytes = canonical_serialize(unsigned_body(receipt));
    } catch (const CanonicalError& e) {
        return {false, std::string("not canonicalizable: ") + e.what()};
    }
    if (!sig.contains("value") || !sig.at("value").is_string()) return {false, "missing signature value"};
    if (!crypto::verify_signature(it->second, bytes, sig.at("value").get<std::string>()))
        return {false, "signature mismatch"};
    return {true, ""};
}

VerifyResult verify_receipt_line(const std::string& line, const crypto::PublicKeyRing& keys) {
    Json j;
    try {
        j = Json::parse(line);
    } catch (const Json::exception&) {
        return {false, "malformed JSON"};
    }
    if (!is_canonical(line)) return {false, "not in canonical form"};
    return verify_receipt(j, keys);
}

ReceiptVault::ReceiptVault(fs::path data_dir, std::shared_ptr<const crypto::SigningKey> key,
                           std::shared_ptr<const Clock> clock, std::shared_ptr<IdSource> ids,
                           std::set<std::string> redacted_keys)
    : receipts_file_(data_dir / "receipts.jsonl"),
      keys_file_(data_dir / "keys.json"),
      key_(std::move(key)),
      clock_(std::move(clock)),
      ids_(std::move(ids)),
      redacted_keys_(std::move(redacted_keys)) {
    std::error_code ec;
    fs::create_directories(data_dir, ec);

    // keep previously published keys so old receipts stay verifiable
    if (std::ifstream kin(keys_file_); kin) {
        std::stringstream ss;
        ss << kin.rdbuf();
        try {
            ring_ = crypto::parse_key_ring(ss.str());
        } catch (const crypto::CryptoError&) {
            ring_.clear();
        }
    }
    if (key_) ring_[key_->key_id()] = key_->public_key();
    std::ofstream kout(keys_file_, std::ios::trunc);
    kout << crypto::serialize_key_ring(ring_) << '\n';

    if (std::ifstream in(receipts_file_); in) {
        std::string line;
        while (std::getline(in, line)) {
            try {
                receipts_.push_back(Json::parse(line));
                if (auto t = parse_rfc3339(receipts_.back().value("issued_at", ""));
                    t && (!last_issued_ || *t > *last_issued_))
                    last_issued_ = t;
            } catch (const Json::exception&) {
            }
        }
    }
    out_.open(receipts_file_, std::ios::app | std::ios::binary);
}

bool ReceiptVault::available() const { return key_ && store_available_ && out_.good(); }

Json ReceiptVault::redact(const Json& parameters) const {
    if (!parameters.is_object() || redacted_keys_.empty()) return parameters;
    Json out = parameters;
    for (auto it = out.begin(); it != out.end(); ++it)
        if (redacted_keys_.count(it.key()))
            it.value() = Json{{"_redacted", crypto::sha256_hex(canonical_serialize(it.value()))}};
    return out;
}

namespace {

Json optional_number(const std::optional<double>& v) { return v ? Json(*v) : Json(); }

} // namespace

Json ReceiptVault::issue(const Materials& m) {
    if (!key_) throw VaultError("signing key unavailable");
    if (!store_available_) throw VaultError("receipt store unavailable");
    m.decision.check();

    Json decision{{"kind", to_string(m.decision.kind)},
                  {"matched_policies", m.decision.matched_policies},
                  {"reason", m.decision.reason},
                  {"policy_set_digest", m.policy_set_digest},
                  {"confidence", m.decision.confidence}};
    if (m.decision.defer_reason) decision["defer_reason"] = to_string(*m.decision.defer_reason);
    if (m.decision.modified_parameters) decision["modified_parameters"] = redact(*m.decision.modified_parameters);

    Json receipt{{"schema_version", 1},
                 {"action",
                  {{"tool", m.action.tool},
                   {"operation", m.action.operation},
                   {"parameters", redact(m.action.parameters)},
                   {"timestamp", m.action.timestamp},
                   {"seq", m.action.seq}}},
                 {"context",
                  {{"session_id", m.context.session_id},
                   {"context_snapshot_digest", m.context.context_snapshot_digest},
                   {"data_classifications", m.context.data_classifications},
                   {"cumulative_drift", optional_number(m.context.cumulative_drift)},
                   {"deferred_count", m.context.deferred_count}}},
                 {"identity", m.action.identity},
                 {"decision", decision},
                 {"approval", Json()},
                 {"deferral", Json()},
                 {"outcome", Json()}};
    if (m.approval)
        receipt["approval"] = {{"approver", m.approval->approver},
                               {"verdict", m.approval->verdict},
                               {"timestamp", m.approval->timestamp},
                               {"note", m.approval->note}};
    if (m.deferral)
        receipt["deferral"] = {
            {"defer_reason", m.deferral->defer_reason ? Json(to_string(*m.deferral->defer_reason)) : Json()},
            {"resolution_method", m.deferral->resolution_method},
            {"resolution_timestamp", m.deferral->resolution_timestamp},
            {"parent_receipt_id", m.deferral->parent_receipt_id}};
    if (m.outcome) {
        Json o{{"status", to_string(m.outcome->status)}, {"error", m.outcome->error ? Json(*m.outcome->error) : Json()}};
        if (m.outcome->item_id) o["item_id"] = *m.outcome->item_id;
        receipt["outcome"] = o;
    }

    std::lock_guard lock(mutex_);
    receipt["receipt_id"] = ids_->next_uuid();
    // strictly increasing, so (issued_at, receipt_id) order is issue order even under a frozen clock
    auto issued = clock_->now();
    if (last_issued_ && issued <= *last_issued_) issued = *last_issued_ + std::chrono::milliseconds(1);
    receipt["issued_at"] = format_rfc3339(issued);
    const auto body = canonical_serialize(receipt);
    receipt["signature"] = {{"algorithm", "Ed25519"}, {"key_id", key_->key_id()}, {"value", key_->sign_base64(body)}};
    out_ << canonical_serialize(receipt) << '\n';
    out_.flush();
    if (!out_) throw VaultError("receipt store write failed");
    receipts_.push_back(receipt);
    last_issued_ = issued;
    return receipt;
}

std::vector<Json> ReceiptVault::query(const Filter& f) const {
    std::optional<TimePoint> from, to;
    if (f.from) {
        from = parse_rfc3339(*f.from);
        if (!from) throw QueryError("malformed 'from' timestamp");
    }
    if (f.to) {
        to = parse_rfc3339(*f.to);
        if (!to) throw QueryError("malformed 'to' timestamp");
    }
    if (from && to && *from > *to) throw QueryError("time range is inverted");

    std::vector<Json> out;
    {
        std::lock_guard lock(mutex_);
        for (const auto& r : receipts_) {
            if (f.session_id && r["context"].value("session_id", "") != *f.session_id) continue;
            if (f.tool && r["action"].value("tool", "") != *f.tool) continue;
            if (!f.kinds.empty()) {
                auto k = parse_decision_kind(r["decision"].value("kind", ""));
                if (!k || !f.kinds.count(*k)) continue;
            }
            if (from || to) {
                auto t = parse_rfc3339(r.value("issued_at", ""));
                if (!t || (from && *t < *from) || (to && *t > *to)) continue;
            }
            out.push_back(r);
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const Json& a, const Json& b) {
        const auto ta = parse_rfc3339(a.value("issued_at", "")), tb = parse_rfc3339(b.value("issued_at", ""));
        if (ta != tb) return ta < tb;
        return a.value("receipt_id", "") < b.value("receipt_id", "");
    });
    return out;
}

std::size_t ReceiptVault::size() const {
    std::lock_guard lock(mutex_);
    return receipts_.size();
}

crypto::PublicKeyRing ReceiptVault::public_keys() const {
    std::lock_guard lock(mutex_);
    return ring_;
}

} // namespace aarm::receipts
