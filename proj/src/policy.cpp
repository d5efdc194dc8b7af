#include "aarm/policy.hpp"

#include "aarm/crypto.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace aarm::policy {

Tri tri_and(Tri a, Tri b) {
    if (a == Tri::False || b == Tri::False) return Tri::False;
    if (a == Tri::True && b == Tri::True) return Tri::True;
    return Tri::Indeterminate;
}

Tri tri_or(Tri a, Tri b) {
    if (a == Tri::True || b == Tri::True) return Tri::True;
    if (a == Tri::False && b == Tri::False) return Tri::False;
    return Tri::Indeterminate;
}

Tri tri_not(Tri a) {
    switch (a) {
        case Tri::True: return Tri::False;
        case Tri::False: return Tri::True;
        default: return Tri::Indeterminate;
    }
}

bool FieldPath::is_context() const {
    switch (root) {
        case FieldRoot::ActionTool:
        case FieldRoot::ActionOperation:
        case FieldRoot::ActionParam:
        case FieldRoot::Identity: return false;
        default: return true;
    }
}

FieldPath parse_field_path(std::string_view text) {
    FieldPath f;
    f.text = std::string(text);
    static const std::map<std::string_view, FieldRoot> fixed{
        {"action.tool", FieldRoot::ActionTool},
        {"action.operation", FieldRoot::ActionOperation},
        {"context.data_classification", FieldRoot::ContextDataClassification},
        {"context.original_request", FieldRoot::ContextOriginalRequest},
        {"context.prior_tools", FieldRoot::ContextPriorTools},
        {"context.entities", FieldRoot::ContextEntities},
        {"context.cumulative_drift", FieldRoot::ContextCumulativeDrift},
        {"context.confidence", FieldRoot::ContextConfidence},
        {"context.deferred_count", FieldRoot::ContextDeferredCount},
    };
    if (auto it = fixed.find(text); it != fixed.end()) {
        f.root = it->second;
        return f;
    }
    constexpr std::string_view params = "action.params.";
    if (text.substr(0, params.size()) == params && text.size() > params.size()) {
        f.root = FieldRoot::ActionParam;
        std::string rest(text.substr(params.size()));
        std::stringstream ss(rest);
        std::string key;
        while (std::getline(ss, key, '.')) {
            if (key.empty()) throw std::invalid_argument("empty parameter key in field path '" + f.text + "'");
            f.keys.push_back(key);
        }
        return f;
    }
    constexpr std::string_view identity = "identity.";
    if (text.substr(0, identity.size()) == identity) {
        const auto field = text.substr(identity.size());
        if (field == "human_principal" || field == "service_identity" || field == "agent_identity" ||
            field == "session_id" || field == "privilege_scope") {
            f.root = FieldRoot::Identity;
            f.keys.emplace_back(field);
            return f;
        }
    }
    throw std::invalid_argument("unknown field path '" + f.text + "'");
}

bool Predicate::references_context() const {
    switch (op) {
        case Op::Const: return false;
        case Op::And:
        case Op::Or:
        case Op::Not:
            return std::any_of(children.begin(), children.end(), [](const Predicate& c) { return c.references_context(); });
        default: return field.is_context();
    }
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

enum class Presence { Value, Missing, Unpopulated };

struct Resolved {
    Presence presence = Presence::Value;
    Json value;
};

Json to_array(const std::set<std::string>& s) { return Json(s); }

Resolved resolve(const FieldPath& f, const Action& a, const ledger::ContextSnapshot* ctx) {
    switch (f.root) {
        case FieldRoot::ActionTool: return {Presence::Value, a.tool};
        case FieldRoot::ActionOperation: return {Presence::Value, a.operation};
        case FieldRoot::ActionParam: {
            const Json* cur = &a.parameters;
            for (const auto& k : f.keys) {
                if (!cur->is_object()) return {Presence::Missing, {}};
                auto it = cur->find(k);
                if (it == cur->end()) return {Presence::Missing, {}};
                cur = &*it;
            }
            if (cur->is_null()) return {Presence::Missing, {}};
            return {Presence::Value, *cur};
        }
        case FieldRoot::Identity: {
            const auto& k = f.keys.front();
            if (k == "human_principal") return {Presence::Value, a.identity.human_principal};
            if (k == "service_identity") return {Presence::Value, a.identity.service_identity};
            if (k == "agent_identity") return {Presence::Value, a.identity.agent_identity};
            if (k == "session_id") return {Presence::Value, a.identity.session_id};
            return {Presence::Value, a.identity.privilege_scope};
        }
        default: break;
    }
    if (ctx == nullptr) return {Presence::Unpopulated, {}};
    switch (f.root) {
        case FieldRoot::ContextDataClassification: return {Presence::Value, to_array(ctx->data_classifications)};
        case FieldRoot::ContextOriginalRequest:
            if (!ctx->original_request || ctx->original_request->empty()) return {Presence::Unpopulated, {}};
            return {Presence::Value, *ctx->original_request};
        case FieldRoot::ContextPriorTools: return {Presence::Value, ctx->prior_tools};
        case FieldRoot::ContextEntities: return {Presence::Value, to_array(ctx->entities)};
        case FieldRoot::ContextCumulativeDrift:
            if (!ctx->cumulative_drift) return {Presence::Unpopulated, {}};
            return {Presence::Value, *ctx->cumulative_drift};
        case FieldRoot::ContextConfidence:
            if (!ctx->confidence) return {Presence::Unpopulated, {}};
            return {Presence::Value, *ctx->confidence};
        case FieldRoot::ContextDeferredCount: return {Presence::Value, ctx->deferred_count};
        default: return {Presence::Unpopulated, {}};
    }
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

// A domain entry admits the exact domain, its subdomains and email addresses at either.
bool domain_admits(const std::string& value, const std::string& entry) {
    std::string host = lower(value);
    if (auto at = host.rfind('@'); at != std::string::npos) host = host.substr(at + 1);
    const std::string e = lower(entry);
    if (host == e) return true;
    return host.size() > e.size() && host.compare(host.size() - e.size(), e.size(), e) == 0 &&
           host[host.size() - e.size() - 1] == '.';
}

bool element_in(const Json& v, const Json& list) {
    for (const auto& item : list) {
        if (v == item) return true;
        if (v.is_string() && item.is_string() && item.get_ref<const std::string&>().find('.') != std::string::npos &&
            domain_admits(v.get<std::string>(), item.get<std::string>()))
            return true;
    }
    return false;
}

bool value_in(const Json& v, const Json& list) {
    if (!list.is_array()) return v == list;
    if (v.is_array()) return std::all_of(v.begin(), v.end(), [&](const Json& e) { return element_in(e, list); });
    return element_in(v, list);
}

bool contains(const Json& haystack, const Json& needle) {
    if (haystack.is_array()) {
        if (needle.is_array())
            return std::all_of(needle.begin(), needle.end(), [&](const Json& n) {
                return std::find(haystack.begin(), haystack.end(), n) != haystack.end();
            });
        return std::find(haystack.begin(), haystack.end(), needle) != haystack.end();
    }
    if (haystack.is_string() && needle.is_string())
        return haystack.get_ref<const std::string&>().find(needle.get_ref<const std::string&>()) != std::string::npos;
    if (haystack.is_object() && needle.is_string()) return haystack.contains(needle.get<std::string>());
    return false;
}

bool matches(const Json& v, const std::regex& re) {
    if (v.is_string()) return std::regex_search(v.get_ref<const std::string&>(), re);
    if (v.is_array()) return std::any_of(v.begin(), v.end(), [&](const Json& e) { return matches(e, re); });
    return false;
}

Tri ordered(Op op, const Json& lhs, const Json& rhs) {
    int cmp = 0;
    if (lhs.is_number() && rhs.is_number()) {
        const double a = lhs.get<double>(), b = rhs.get<double>();
        cmp = a < b ? -1 : (a > b ? 1 : 0);
    } else if (lhs.is_string() && rhs.is_string()) {
        cmp = lhs.get_ref<const std::string&>().compare(rhs.get_ref<const std::string&>());
        cmp = cmp < 0 ? -1 : (cmp > 0 ? 1 : 0);
    } else {
        return Tri::False;
    }
    bool r = false;
    switch (op) {
        case Op::Lt: r = cmp < 0; break;
        case Op::Le: r = cmp <= 0; break;
        case Op::Gt: r = cmp > 0; break;
        case Op::Ge: r = cmp >= 0; break;
        default: break;
    }
    return r ? Tri::True : Tri::False;
}

Tri from_bool(bool b) { return b ? Tri::True : Tri::False; }

} // namespace

Tri eval_predicate(const Predicate& p, const Action& action, const ledger::ContextSnapshot* ctx) {
    switch (p.op) {
        case Op::Const: return from_bool(p.constant);
        case Op::And: {
            Tri acc = Tri::True;
            for (const auto& c : p.children) {
                acc = tri_and(acc, eval_predicate(c, action, ctx));
                if (acc == Tri::False) break;
            }
            return acc;
        }
        case Op::Or: {
            Tri acc = Tri::False;
            for (const auto& c : p.children) {
                acc = tri_or(acc, eval_predicate(c, action, ctx));
                if (acc == Tri::True) break;
            }
            return acc;
        }
        case Op::Not: return tri_not(eval_predicate(p.children.front(), action, ctx));
        default: break;
    }

    const auto r = resolve(p.field, action, ctx);
    if (r.presence == Presence::Unpopulated) return Tri::Indeterminate;
    if (r.presence == Presence::Missing) {
        switch (p.op) {
            case Op::Lt:
            case Op::Le:
            case Op::Gt:
            case Op::Ge: return Tri::Indeterminate;
            case Op::Ne: return Tri::True;
            default: return Tri::False;
        }
    }
    switch (p.op) {
        case Op::Eq: return from_bool(r.value == p.literal);
        case Op::Ne: return from_bool(r.value != p.literal);
        case Op::Lt:
        case Op::Le:
        case Op::Gt:
        case Op::Ge: return ordered(p.op, r.value, p.literal);
        case Op::In: return from_bool(value_in(r.value, p.literal));
        case Op::NotIn: return from_bool(!value_in(r.value, p.literal));
        case Op::Contains: return from_bool(contains(r.value, p.literal));
        case Op::Matches: return from_bool(matches(r.value, *p.regex));
        default: return Tri::False;
    }
}

Json apply_transform(const Json& parameters, const std::vector<Transform>& transform) {
    Json out = parameters.is_object() ? parameters : Json::object();
    for (const auto& t : transform) {
        Json* cur = &out;
        for (std::size_t i = 0; i + 1 < t.path.size(); ++i) {
            if (!(*cur)[t.path[i]].is_object()) (*cur)[t.path[i]] = Json::object();
            cur = &(*cur)[t.path[i]];
        }
        (*cur)[t.path.back()] = t.value;
    }
    return out;
}

// ---------------------------------------------------------------------------
// evaluation pipeline

namespace {

struct Scored {
    const Policy* policy;
    Tri result;
};

bool by_priority(const Policy* a, const Policy* b) {
    if (a->priority != b->priority) return a->priority > b->priority;
    return a->id < b->id;
}

std::vector<std::string> ids_of(std::vector<const Policy*> ps) {
    std::sort(ps.begin(), ps.end(), by_priority);
    std::vector<std::string> out;
    out.reserve(ps.size());
    for (const auto* p : ps) out.push_back(p->id);
    return out;
}

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) {
        if (!out.empty()) out += ", ";
        out += s;
    }
    return out;
}

} // namespace

void PolicySet::candidates(const std::string& tool, const std::string& operation, bool forbidden,
                           std::vector<std::size_t>& out) const {
    out.clear();
    auto add = [&](const std::string& key) {
        auto it = index_.find(key);
        if (it == index_.end()) return;
        const auto& v = forbidden ? it->second.forbidden : it->second.regular;
        out.insert(out.end(), v.begin(), v.end());
    };
    std::string key = tool;
    key.push_back('\0');
    add(key + operation);
    add(key + "*");
    add("*");
}

Decision evaluate(const Action& action, const ledger::ContextSnapshot& ctx, const PolicySet& ps) {
    const double confidence = std::clamp(ctx.confidence.value_or(0.0), 0.0, 1.0);
    thread_local std::vector<std::size_t> idx;

    // Stage 1: hard limits, context never consulted.
    ps.candidates(action.tool, action.operation, true, idx);
    std::vector<const Policy*> forbidden_hits;
    for (auto i : idx) {
        const auto& p = ps.policies()[i];
        if (eval_predicate(p.match, action, nullptr) == Tri::True) forbidden_hits.push_back(&p);
    }
    if (!forbidden_hits.empty()) {
        std::sort(forbidden_hits.begin(), forbidden_hits.end(), by_priority);
        return Decision::deny(ids_of(forbidden_hits), forbidden_hits.front()->reason, 1.0, true);
    }

    // Stage 2: everything else against the accumulated context.
    ps.candidates(action.tool, action.operation, false, idx);
    std::vector<const Policy*> trues, indeterminate;
    for (auto i : idx) {
        const auto& p = ps.policies()[i];
        switch (eval_predicate(p.match, action, &ctx)) {
            case Tri::True: trues.push_back(&p); break;
            case Tri::Indeterminate: indeterminate.push_back(&p); break;
            case Tri::False: break;
        }
    }
    std::sort(trues.begin(), trues.end(), by_priority);
    const auto matched = ids_of(trues);

    const bool any_true = !trues.empty();
    const std::int64_t top = any_true ? trues.front()->priority : INT64_MIN;

    if (any_true) {
        std::set<DecisionKind> kinds;
        std::vector<std::string> tied;
        for (const auto* p : trues) {
            if (p->priority != top) break;
            kinds.insert(p->effective_decision());
            tied.push_back(p->id);
        }
        if (kinds.size() > 1)
            return Decision::defer(matched,
                                   "conflicting decisions at priority " + std::to_string(top) + ": " + join(tied),
                                   DeferReason::PriorityConflict, confidence);
    }

    std::vector<const Policy*> blocking;
    for (const auto* p : indeterminate)
        if (!any_true || p->priority >= top) blocking.push_back(p);
    if (!blocking.empty())
        return Decision::defer(matched, "unpopulated context field in " + join(ids_of(blocking)),
                               DeferReason::MissingContextField, confidence);

    if (!any_true) {
        const auto kind = ps.defaults().unmatched_decision;
        const std::string reason = "no policy matched; default " + std::string(to_string(kind));
        switch (kind) {
            case DecisionKind::Allow: return Decision::allow({}, reason, confidence);
            case DecisionKind::StepUp: return Decision::step_up({}, reason, confidence);
            case DecisionKind::Defer: return Decision::defer({}, reason, DeferReason::PolicyDirected, confidence);
            default: return Decision::deny({}, reason, confidence);
        }
    }

    const Policy& winner = *trues.front();
    const auto kind = winner.effective_decision();

    // DENY baseline overridden by a context-predicated ALLOW/STEP_UP: the
    // override only stands when the session is confidently on-intent.
    if ((kind == DecisionKind::Allow || kind == DecisionKind::StepUp) && winner.requires_context) {
        const bool overrides_deny = std::any_of(trues.begin() + 1, trues.end(), [](const Policy* p) {
            return p->effective_decision() == DecisionKind::Deny;
        });
        if (overrides_deny && confidence < ps.defaults().confidence_threshold)
            return Decision::defer(matched,
                                   "confidence " + std::to_string(confidence) + " below threshold for " + winner.id,
                                   DeferReason::LowConfidence, confidence);
    }

    switch (kind) {
        case DecisionKind::Allow: return Decision::allow(matched, winner.reason, confidence);
        case DecisionKind::Deny: return Decision::deny(matched, winner.reason, confidence);
        case DecisionKind::StepUp: return Decision::step_up(matched, winner.reason, confidence);
        case DecisionKind::Modify:
            return Decision::modify(matched, winner.reason, apply_transform(action.parameters, winner.transform),
                                    confidence);
        case DecisionKind::Defer:
            return Decision::defer(matched, winner.reason, DeferReason::PolicyDirected, confidence);
    }
    return Decision::deny(matched, "unreachable", confidence);
}

// ---------------------------------------------------------------------------
// parsing

PolicyParseError::PolicyParseError(std::vector<ParseIssue> issues)
    : std::runtime_error([&] {
          std::string msg = "policy document rejected:";
          for (const auto& i : issues)
              msg += "\n  " + std::to_string(i.line) + ":" + std::to_string(i.column) + " " + i.pointer + ": " +
                     i.message;
          return msg;
      }()),
      issues_(std::move(issues)) {}

namespace {

// Maps JSON pointers to the line/column where each value starts. Runs only
// over documents nlohmann already accepted, so it can be forgiving.
class PositionIndex {
public:
    explicit PositionIndex(std::string_view text) : text_(text) {
        skip_ws();
        value("");
    }

    std::pair<std::size_t, std::size_t> at(const std::string& pointer) const {
        // fall back to the closest ancestor
        std::string p = pointer;
        for (;;) {
            if (auto it = positions_.find(p); it != positions_.end()) return it->second;
            if (p.empty()) return {1, 1};
            p = p.substr(0, p.rfind('/'));
        }
    }

private:
    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) advance();
    }
    void advance() {
        if (text_[pos_] == '\n') {
            ++line_;
            col_ = 1;
        } else {
            ++col_;
        }
        ++pos_;
    }
    std::string string_token() {
        std::string out;
        advance();  // opening quote
        while (pos_ < text_.size() && text_[pos_] != '"') {
            if (text_[pos_] == '\\') {
                advance();
                if (pos_ >= text_.size()) break;
            }
            out.push_back(text_[pos_]);
            advance();
        }
        if (pos_ < text_.size()) advance();
        return out;
    }
    static std::string escape(const std::string& key) {
        std::string out;
        for (char c : key) {
            if (c == '~') out += "~0";
            else if (c == '/') out += "~1";
            else out.push_back(c);
        }
        return out;
    }
    void value(const std::string& pointer) {
        if (pos_ >= text_.size()) return;
        positions_[pointer] = {line_, col_};
        const char c = text_[pos_];
        if (c == '{') {
            advance();
            skip_ws();
            while (pos_ < text_.size() && text_[pos_] != '}') {
                if (text_[pos_] != '"') {
                    advance();
                    continue;
                }
                const auto key = string_token();
                skip_ws();
                if (pos_ < text_.size() && text_[pos_] == ':') advance();
                skip_ws();
                value(pointer + "/" + escape(key));
                skip_ws();
                if (pos_ < text_.size() && text_[pos_] == ',') advance();
                skip_ws();
            }
            if (pos_ < text_.size()) advance();
        } else if (c == '[') {
            advance();
            skip_ws();
            std::size_t i = 0;
            while (pos_ < text_.size() && text_[pos_] != ']') {
                value(pointer + "/" + std::to_string(i++));
                skip_ws();
                if (pos_ < text_.size() && text_[pos_] == ',') advance();
                skip_ws();
            }
            if (pos_ < text_.size()) advance();
        } else if (c == '"') {
            string_token();
        } else {
            while (pos_ < text_.size() && text_[pos_] != ',' && text_[pos_] != ']' && text_[pos_] != '}' &&
                   !std::isspace(static_cast<unsigned char>(text_[pos_])))
                advance();
        }
    }

    std::string_view text_;
    std::size_t pos_ = 0, line_ = 1, col_ = 1;
    std::map<std::string, std::pair<std::size_t, std::size_t>> positions_;
};

class Parser {
public:
    Parser(const Json& doc, const std::map<std::string, std::vector<std::string>>& lists) : doc_(doc), lists_(lists) {}

    std::vector<ParseIssue> issues;

    void fail(const std::string& pointer, std::string message) { issues.push_back({std::move(message), pointer, 0, 0}); }

    std::optional<Predicate> predicate(const Json& j, const std::string& ptr) {
        if (j.is_boolean()) {
            Predicate p;
            p.op = Op::Const;
            p.constant = j.get<bool>();
            return p;
        }
        if (!j.is_array() || j.empty() || !j.front().is_string()) {
            fail(ptr, "predicate must be true/false or a prefix array [\"OP\", ...]");
            return std::nullopt;
        }
        const auto name = j.front().get<std::string>();
        if (name == "AND" || name == "OR" || name == "NOT") {
            Predicate p;
            p.op = name == "AND" ? Op::And : (name == "OR" ? Op::Or : Op::Not);
            if (j.size() < 2) fail(ptr, name + " needs at least one operand");
            if (p.op == Op::Not && j.size() != 2) fail(ptr, "NOT takes exactly one operand");
            bool ok = true;
            for (std::size_t i = 1; i < j.size(); ++i) {
                auto child = predicate(j[i], ptr + "/" + std::to_string(i));
                if (child) p.children.push_back(std::move(*child));
                else ok = false;
            }
            if (!ok || p.children.empty()) return std::nullopt;
            return p;
        }
        static const std::map<std::string, Op> comparators{
            {"==", Op::Eq},     {"!=", Op::Ne},         {"<", Op::Lt},          {"<=", Op::Le},
            {">", Op::Gt},      {">=", Op::Ge},         {"IN", Op::In},         {"NOT_IN", Op::NotIn},
            {"NOT IN", Op::NotIn}, {"CONTAINS", Op::Contains}, {"MATCHES", Op::Matches},
        };
        auto op = comparators.find(name);
        if (op == comparators.end()) {
            fail(ptr + "/0", "unknown operator '" + name + "'");
            return std::nullopt;
        }
        if (j.size() != 3 && !(op->second == Op::Matches && j.size() == 4)) {
            fail(ptr, name + " takes a field path and one literal");
            return std::nullopt;
        }
        Predicate p;
        p.op = op->second;
        if (!j[1].is_string()) {
            fail(ptr + "/1", "field path must be a string");
            return std::nullopt;
        }
        try {
            p.field = parse_field_path(j[1].get<std::string>());
        } catch (const std::invalid_argument& e) {
            fail(ptr + "/1", e.what());
            return std::nullopt;
        }
        auto lit = literal(j[2], ptr + "/2");
        if (!lit) return std::nullopt;
        p.literal = std::move(*lit);
        if (p.op == Op::Matches) {
            if (!p.literal.is_string()) {
                fail(ptr + "/2", "MATCHES needs a regex string");
                return std::nullopt;
            }
            auto flags = std::regex::ECMAScript;
            if (j.size() == 4) {
                if (j[3] != "i") {
                    fail(ptr + "/3", "the only MATCHES flag is \"i\"");
                    return std::nullopt;
                }
                flags |= std::regex::icase;
            }
            try {
                p.regex = std::make_shared<const std::regex>(p.literal.get<std::string>(), flags);
            } catch (const std::regex_error& e) {
                fail(ptr + "/2", std::string("bad regex: ") + e.what());
                return std::nullopt;
            }
        }
        if ((p.op == Op::In || p.op == Op::NotIn) && !p.literal.is_array()) {
            fail(ptr + "/2", name + " needs a list or a named list reference");
            return std::nullopt;
        }
        return p;
    }

    std::optional<Json> literal(const Json& j, const std::string& ptr) {
        if (j.is_string()) {
            const auto& s = j.get_ref<const std::string&>();
            if (!s.empty() && s.front() == '@') {
                auto it = lists_.find(s.substr(1));
                if (it == lists_.end()) {
                    fail(ptr, "undefined named list '" + s.substr(1) + "'");
                    return std::nullopt;
                }
                return Json(it->second);
            }
        }
        if (j.is_object()) {
            fail(ptr, "object literals are not supported");
            return std::nullopt;
        }
        return j;
    }

private:
    const Json& doc_;
    const std::map<std::string, std::vector<std::string>>& lists_;
};

// Top-level AND conjuncts pinning action.tool / action.operation to one value.
void pins(const Predicate& p, std::optional<std::string>& tool, std::optional<std::string>& op) {
    if (p.op == Op::And) {
        for (const auto& c : p.children) pins(c, tool, op);
        return;
    }
    if (p.op != Op::Eq || !p.literal.is_string()) return;
    if (p.field.root == FieldRoot::ActionTool) tool = p.literal.get<std::string>();
    if (p.field.root == FieldRoot::ActionOperation) op = p.literal.get<std::string>();
}

} // namespace

PolicySet parse_policy_set(std::string_view document) {
    Json doc;
    try {
        doc = Json::parse(document);
    } catch (const Json::parse_error& e) {
        // byte offset -> line/column
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < document.size(); ++i) {
            if (document[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw PolicyParseError({{std::string("malformed JSON: ") + e.what(), "", line, col}});
    }

    PolicySet ps;
    std::vector<ParseIssue> issues;
    auto fail = [&](const std::string& ptr, std::string msg) { issues.push_back({std::move(msg), ptr, 0, 0}); };

    if (!doc.is_object()) {
        fail("", "policy document must be a JSON object");
    } else {
        if (doc.value("version", 0) != 1) fail("/version", "version must be 1");

        if (auto it = doc.find("named_lists"); it != doc.end()) {
            if (!it->is_object()) fail("/named_lists", "named_lists must be an object");
            else
                for (auto l = it->begin(); l != it->end(); ++l) {
                    if (!l.value().is_array() ||
                        !std::all_of(l.value().begin(), l.value().end(), [](const Json& e) { return e.is_string(); }))
                        fail("/named_lists/" + l.key(), "named list must be an array of strings");
                    else
                        ps.named_lists_[l.key()] = l.value().get<std::vector<std::string>>();
                }
        }

        std::vector<std::string> lattice = default_lattice();
        if (auto it = doc.find("lattice"); it != doc.end()) {
            if (!it->is_array() || it->empty() ||
                !std::all_of(it->begin(), it->end(), [](const Json& e) { return e.is_string(); }))
                fail("/lattice", "lattice must be a non-empty array of labels");
            else
                lattice = it->get<std::vector<std::string>>();
        }
        try {
            ps.classification_ = ClassificationRules::from_json(doc.value("classification", Json()), lattice);
        } catch (const ConfigError& e) {
            fail("/classification", e.what());
        }

        if (auto it = doc.find("defaults"); it != doc.end()) {
            const auto& d = *it;
            if (auto u = d.find("unmatched_decision"); u != d.end()) {
                auto k = u->is_string() ? parse_decision_kind(u->get<std::string>()) : std::nullopt;
                if (!k || *k == DecisionKind::Modify)
                    fail("/defaults/unmatched_decision", "unmatched_decision must be ALLOW, DENY, STEP_UP or DEFER");
                else
                    ps.defaults_.unmatched_decision = *k;
            }
            auto unit = [&](const char* key, double& target) {
                if (auto v = d.find(key); v != d.end()) {
                    if (!v->is_number() || v->get<double>() < 0.0 || v->get<double>() > 1.0)
                        fail(std::string("/defaults/") + key, std::string(key) + " must be a number in [0,1]");
                    else
                        target = v->get<double>();
                }
            };
            unit("confidence_threshold", ps.defaults_.confidence_threshold);
            unit("drift_threshold", ps.defaults_.drift_threshold);
        }

        Parser parser(doc, ps.named_lists_);
        std::set<std::string> ids;
        const auto policies = doc.value("policies", Json::array());
        if (!policies.is_array()) fail("/policies", "policies must be an array");
        for (std::size_t i = 0; policies.is_array() && i < policies.size(); ++i) {
            const auto& pj = policies[i];
            const std::string ptr = "/policies/" + std::to_string(i);
            if (!pj.is_object()) {
                fail(ptr, "policy must be an object");
                continue;
            }
            Policy p;
            p.id = pj.value("id", "");
            if (p.id.empty()) fail(ptr + "/id", "policy id is required");
            else if (!ids.insert(p.id).second) fail(ptr + "/id", "duplicate policy id '" + p.id + "'");

            if (!pj.contains("match")) fail(ptr, "policy " + p.id + " has no match predicate");
            else if (auto m = parser.predicate(pj.at("match"), ptr + "/match")) p.match = std::move(*m);

            const auto dk = pj.contains("decision") && pj.at("decision").is_string()
                                ? parse_decision_kind(pj.at("decision").get<std::string>())
                                : std::nullopt;
            if (!dk) fail(ptr + "/decision", "decision must be one of ALLOW, DENY, MODIFY, STEP_UP, DEFER");
            else p.decision = *dk;

            const auto& pr = pj.value("priority", Json(0));
            if (!pr.is_number_integer() || pr.get<std::int64_t>() < 0) fail(ptr + "/priority", "priority must be an integer >= 0");
            else p.priority = pr.get<std::int64_t>();

            p.reason = pj.value("reason", "");
            p.forbidden = pj.value("forbidden", false);
            p.step_up = pj.value("step_up", false);
            p.requires_context = p.match.references_context();

            if (p.forbidden && p.decision != DecisionKind::Deny) fail(ptr + "/forbidden", "forbidden policies must DENY");
            if (p.forbidden && p.requires_context)
                fail(ptr + "/match", "forbidden policies may not reference context fields");
            if (p.step_up && p.decision != DecisionKind::Allow && p.decision != DecisionKind::StepUp)
                fail(ptr + "/step_up", "step_up applies to ALLOW or STEP_UP policies");
            if (p.reason.empty() && (p.decision != DecisionKind::Allow || p.step_up))
                fail(ptr + "/reason", "reason is required for this decision");

            if (auto t = pj.find("transform"); t != pj.end() && !t->is_null()) {
                if (!t->is_array()) fail(ptr + "/transform", "transform must be an array");
                else
                    for (std::size_t k = 0; k < t->size(); ++k) {
                        const auto& tj = (*t)[k];
                        const auto tptr = ptr + "/transform/" + std::to_string(k);
                        Json path_j, value_j;
                        if (tj.is_object() && tj.contains("path") && tj.contains("value")) {
                            path_j = tj.at("path");
                            value_j = tj.at("value");
                        } else if (tj.is_array() && tj.size() == 2) {
                            path_j = tj[0];
                            value_j = tj[1];
                        } else {
                            fail(tptr, "transform step must be {\"path\",\"value\"}");
                            continue;
                        }
                        if (!path_j.is_string() || path_j.get<std::string>().empty()) {
                            fail(tptr, "transform path must be a non-empty string");
                            continue;
                        }
                        Transform tr;
                        std::string path = path_j.get<std::string>();
                        if (path.rfind("action.params.", 0) == 0) path = path.substr(14);
                        std::stringstream ss(path);
                        std::string key;
                        while (std::getline(ss, key, '.')) tr.path.push_back(key);
                        tr.value = value_j;
                        p.transform.push_back(std::move(tr));
                    }
            }
            if (p.decision == DecisionKind::Modify && p.transform.empty())
                fail(ptr + "/transform", "MODIFY policies need a non-empty transform");

            ps.policies_.push_back(std::move(p));
        }
        for (auto& i : parser.issues) issues.push_back(std::move(i));
    }

    if (!issues.empty()) {
        PositionIndex positions(document);
        for (auto& i : issues) std::tie(i.line, i.column) = positions.at(i.pointer);
        throw PolicyParseError(std::move(issues));
    }

    for (std::size_t i = 0; i < ps.policies_.size(); ++i) {
        std::optional<std::string> tool, op;
        pins(ps.policies_[i].match, tool, op);
        std::string key = "*";
        if (tool) {
            key = *tool;
            key.push_back('\0');
            key += op ? *op : std::string("*");
        }
        auto& bucket = ps.index_[key];
        (ps.policies_[i].forbidden ? bucket.forbidden : bucket.regular).push_back(i);
    }
    ps.digest_ = crypto::sha256_hex(canonical_serialize(doc));
    return ps;
}

PolicySet load_policy_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PolicyParseError({{"cannot open policy file " + path, "", 0, 0}});
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_policy_set(ss.str());
}

} // namespace aarm::policy
