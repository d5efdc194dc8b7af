#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "aarm/classify.hpp"
#include "aarm/ledger.hpp"
#include "aarm/model.hpp"

namespace aarm::policy {

// Three-valued (Kleene) truth used for match predicates.
enum class Tri { False, True, Indeterminate };

Tri tri_and(Tri a, Tri b);
Tri tri_or(Tri a, Tri b);
Tri tri_not(Tri a);

enum class FieldRoot {
    ActionTool,
    ActionOperation,
    ActionParam,
    Identity,
    ContextDataClassification,
    ContextOriginalRequest,
    ContextPriorTools,
    ContextEntities,
    ContextCumulativeDrift,
    ContextConfidence,
    ContextDeferredCount,
};

struct FieldPath {
    FieldRoot root = FieldRoot::ActionTool;
    std::vector<std::string> keys;  // parameter key path, or the identity field
    std::string text;

    bool is_context() const;
};

// Throws std::invalid_argument naming the path when it is outside the closed set.
FieldPath parse_field_path(std::string_view text);

enum class Op { Const, And, Or, Not, Eq, Ne, Lt, Le, Gt, Ge, In, NotIn, Contains, Matches };

struct Predicate {
    Op op = Op::Const;
    bool constant = true;                 // Op::Const
    std::vector<Predicate> children;      // And / Or / Not
    FieldPath field;                      // comparisons
    Json literal;                         // named lists are resolved at parse time
    std::shared_ptr<const std::regex> regex;

    bool references_context() const;
};

struct Transform {
    std::vector<std::string> path;  // inside parameters
    Json value;
};

struct Policy {
    std::string id;
    Predicate match;
    DecisionKind decision = DecisionKind::Deny;
    std::int64_t priority = 0;
    std::string reason;
    bool forbidden = false;
    bool step_up = false;  // an ALLOW that needs a human confirmation
    std::vector<Transform> transform;
    bool requires_context = false;

    DecisionKind effective_decision() const { return step_up ? DecisionKind::StepUp : decision; }
};

struct Defaults {
    DecisionKind unmatched_decision = DecisionKind::Deny;
    double confidence_threshold = 0.5;
    double drift_threshold = 0.6;
};

struct ParseIssue {
    std::string message;
    std::string pointer;  // JSON pointer of the offending value
    std::size_t line = 0;
    std::size_t column = 0;
};

class PolicyParseError : public std::runtime_error {
public:
    explicit PolicyParseError(std::vector<ParseIssue> issues);
    const std::vector<ParseIssue>& issues() const { return issues_; }

private:
    std::vector<ParseIssue> issues_;
};

class PolicySet {
public:
    const std::vector<Policy>& policies() const { return policies_; }
    const std::map<std::string, std::vector<std::string>>& named_lists() const { return named_lists_; }
    const std::vector<std::string>& lattice() const { return classification_.lattice; }
    const ClassificationRules& classification() const { return classification_; }
    const Defaults& defaults() const { return defaults_; }
    // hex SHA-256 of the canonical form of the policy document
    const std::string& digest() const { return digest_; }

    // Indices into policies() that can possibly match (tool, operation).
    // Policies pinned to another tool/operation by a top-level equality are skipped;
    // such a policy would evaluate False no matter the context.
    void candidates(const std::string& tool, const std::string& operation, bool forbidden,
                    std::vector<std::size_t>& out) const;

private:
    friend PolicySet parse_policy_set(std::string_view document);

    std::vector<Policy> policies_;
    std::map<std::string, std::vector<std::string>> named_lists_;
    ClassificationRules classification_;
    Defaults defaults_;
    std::string digest_;

    struct Bucket {
        std::vector<std::size_t> forbidden;
        std::vector<std::size_t> regular;
    };
    std::unordered_map<std::string, Bucket> index_;  // "tool\0op", "tool\0*", "*"
};

// All-or-nothing load; throws PolicyParseError listing every problem with its position.
PolicySet parse_policy_set(std::string_view document);
PolicySet load_policy_file(const std::string& path);

// nullptr context means UNAVAILABLE: every context leaf is indeterminate.
Tri eval_predicate(const Predicate& p, const Action& action, const ledger::ContextSnapshot* ctx);

Json apply_transform(const Json& parameters, const std::vector<Transform>& transform);

// Two-stage evaluation: forbidden policies first (context never consulted),
// then priority resolution with the defer triggers. Never throws on
// well-formed input; an unmatched action gets defaults().unmatched_decision.
Decision evaluate(const Action& action, const ledger::ContextSnapshot& ctx, const PolicySet& ps);

} // namespace aarm::policy
