#include "aarm/classify.hpp"

#include <algorithm>
#include <cctype>

namespace aarm {

namespace {

const std::regex& email_regex() {
    static const std::regex re(R"([A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,})");
    return re;
}

const std::regex& domain_regex() {
    static const std::regex re(R"((^|[^A-Za-z0-9@._-])(([A-Za-z0-9-]+\.)+[A-Za-z]{2,})(?![A-Za-z0-9-]))");
    return re;
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

template <typename F>
void for_each_string(const Json& v, F&& f) {
    if (v.is_string()) {
        f(v.get_ref<const std::string&>());
    } else if (v.is_array()) {
        for (const auto& e : v) for_each_string(e, f);
    } else if (v.is_object()) {
        for (auto it = v.begin(); it != v.end(); ++it) for_each_string(it.value(), f);
    } else if (v.is_number_integer() || v.is_number_unsigned()) {
        f(v.dump());
    }
}

bool contains_luhn_run(const std::string& s) {
    std::size_t i = 0;
    while (i < s.size()) {
        if (!std::isdigit(static_cast<unsigned char>(s[i]))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
        const auto len = j - i;
        if (len >= 13 && len <= 19 && luhn_valid(std::string_view(s).substr(i, len))) return true;
        i = j;
    }
    return false;
}

void pattern_labels(const Json& value, const ClassificationRules& rules, LabelSet& out) {
    for_each_string(value, [&](const std::string& s) {
        for (const auto& p : rules.patterns)
            if (std::regex_search(s, p.regex)) out.insert(p.label);
        if (rules.luhn_pii && contains_luhn_run(s)) out.insert("PII");
    });
}

void mapping_labels(const Action& a, const ClassificationRules& rules, LabelSet& out) {
    for (const auto& m : rules.mappings) {
        if (m.tool != a.tool) continue;
        if (m.operation && *m.operation != a.operation) continue;
        out.insert(m.labels.begin(), m.labels.end());
    }
}

void explicit_labels(const Json& v, LabelSet& out) {
    if (v.is_object()) {
        for (auto it = v.begin(); it != v.end(); ++it) {
            if (it.key() == "_classification") {
                if (it.value().is_string()) out.insert(it.value().get<std::string>());
                else if (it.value().is_array())
                    for (const auto& l : it.value())
                        if (l.is_string()) out.insert(l.get<std::string>());
            } else {
                explicit_labels(it.value(), out);
            }
        }
    } else if (v.is_array()) {
        for (const auto& e : v) explicit_labels(e, out);
    }
}

std::string require_label(const Json& j, const std::vector<std::string>& lattice) {
    if (!j.is_string()) throw ConfigError("classification label must be a string");
    auto label = j.get<std::string>();
    if (std::find(lattice.begin(), lattice.end(), label) == lattice.end())
        throw ConfigError("classification label '" + label + "' is not in the lattice");
    return label;
}

} // namespace

std::vector<std::string> default_lattice() { return {"PUBLIC", "INTERNAL", "CONFIDENTIAL", "PII"}; }

ClassificationRules ClassificationRules::defaults(std::vector<std::string> lattice) {
    ClassificationRules r;
    if (lattice.empty()) throw ConfigError("classification lattice must not be empty");
    r.lattice = std::move(lattice);
    const bool has_pii = std::find(r.lattice.begin(), r.lattice.end(), "PII") != r.lattice.end();
    r.luhn_pii = has_pii;
    if (has_pii) {
        r.patterns.push_back({"email", email_regex(), "PII"});
        r.patterns.push_back({"ssn", std::regex(R"((^|[^0-9])[0-9]{3}-[0-9]{2}-[0-9]{4}([^0-9]|$))"), "PII"});
    }
    return r;
}

ClassificationRules ClassificationRules::from_json(const Json& doc, std::vector<std::string> lattice) {
    auto r = defaults(std::move(lattice));
    if (doc.is_null()) return r;
    if (!doc.is_object()) throw ConfigError("classification rules must be an object");
    if (auto it = doc.find("patterns"); it != doc.end()) {
        if (!it->is_array()) throw ConfigError("classification.patterns must be an array");
        for (const auto& p : *it) {
            if (!p.is_object() || !p.contains("regex") || !p.at("regex").is_string())
                throw ConfigError("classification pattern needs a string 'regex'");
            PatternRule rule;
            rule.pattern = p.at("regex").get<std::string>();
            try {
                rule.regex = std::regex(rule.pattern);
            } catch (const std::regex_error& e) {
                throw ConfigError("bad classification regex '" + rule.pattern + "': " + e.what());
            }
            rule.label = require_label(p.value("label", Json()), r.lattice);
            r.patterns.push_back(std::move(rule));
        }
    }
    if (auto it = doc.find("mappings"); it != doc.end()) {
        if (!it->is_array()) throw ConfigError("classification.mappings must be an array");
        for (const auto& m : *it) {
            if (!m.is_object() || !m.contains("tool") || !m.at("tool").is_string())
                throw ConfigError("classification mapping needs a string 'tool'");
            MappingRule rule;
            rule.tool = m.at("tool").get<std::string>();
            if (m.contains("operation")) rule.operation = m.at("operation").get<std::string>();
            const auto& labels = m.value("labels", Json::array());
            if (!labels.is_array() || labels.empty()) throw ConfigError("classification mapping needs labels");
            for (const auto& l : labels) rule.labels.insert(require_label(l, r.lattice));
            r.mappings.push_back(std::move(rule));
        }
    }
    return r;
}

bool luhn_valid(std::string_view digits) {
    if (digits.empty()) return false;
    int sum = 0;
    bool dbl = false;
    for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
        if (*it < '0' || *it > '9') return false;
        int d = *it - '0';
        if (dbl) {
            d *= 2;
            if (d > 9) d -= 9;
        }
        sum += d;
        dbl = !dbl;
    }
    return sum % 10 == 0;
}

LabelSet classify_action(const Action& a, const ClassificationRules& rules) {
    LabelSet out;
    pattern_labels(a.parameters, rules, out);
    mapping_labels(a, rules, out);
    return out;
}

LabelSet classify_output(const Action& a, const Json& output, const ClassificationRules& rules) {
    LabelSet out;
    explicit_labels(output, out);
    pattern_labels(output, rules, out);
    mapping_labels(a, rules, out);
    if (out.empty()) out.insert(rules.highest());
    return out;
}

std::set<std::string> extract_entities(const Json& value) {
    std::set<std::string> out;
    for_each_string(value, [&](const std::string& s) {
        for (auto it = std::sregex_iterator(s.begin(), s.end(), email_regex()); it != std::sregex_iterator(); ++it)
            out.insert(lower(it->str()));
        for (auto it = std::sregex_iterator(s.begin(), s.end(), domain_regex()); it != std::sregex_iterator(); ++it)
            out.insert(lower((*it)[2].str()));
    });
    auto keyed = [&](auto&& self, const Json& v) -> void {
        if (v.is_object()) {
            for (auto it = v.begin(); it != v.end(); ++it) {
                const auto key = lower(it.key());
                if ((key == "id" || key == "user" || key == "account") &&
                    (it.value().is_string() || it.value().is_number_integer() || it.value().is_number_unsigned()))
                    out.insert(it.value().is_string() ? it.value().get<std::string>() : it.value().dump());
                self(self, it.value());
            }
        } else if (v.is_array()) {
            for (const auto& e : v) self(self, e);
        }
    };
    keyed(keyed, value);
    return out;
}

} // namespace aarm
