#include "aarm/canonical_json.hpp"

#include <charconv>
#include <cmath>

namespace aarm {

namespace {

void write_string(std::string& out, const std::string& s) {
    static constexpr char hex[] = "0123456789abcdef";
    out.push_back('"');
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        if (c < 0x80) {
            switch (c) {
                case '"':  out += "\\\""; break;
                case '\\': out += "\\\\"; break;
                case '\b': out += "\\b"; break;
                case '\f': out += "\\f"; break;
                case '\n': out += "\\n"; break;
                case '\r': out += "\\r"; break;
                case '\t': out += "\\t"; break;
                default:
                    if (c < 0x20) {
                        out += "\\u00";
                        out.push_back(hex[c >> 4]);
                        out.push_back(hex[c & 0xF]);
                    } else {
                        out.push_back(static_cast<char>(c));
                    }
            }
            ++i;
            continue;
        }
        // validate one UTF-8 sequence and copy it through unescaped
        std::size_t len = 0;
        std::uint32_t cp = 0;
        if ((c & 0xE0) == 0xC0) { len = 2; cp = c & 0x1F; }
        else if ((c & 0xF0) == 0xE0) { len = 3; cp = c & 0x0F; }
        else if ((c & 0xF8) == 0xF0) { len = 4; cp = c & 0x07; }
        else throw CanonicalError("invalid UTF-8 lead byte");
        if (i + len > s.size()) throw CanonicalError("truncated UTF-8 sequence");
        for (std::size_t k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) throw CanonicalError("invalid UTF-8 continuation byte");
            cp = (cp << 6) | (cc & 0x3F);
        }
        const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000);
        if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))
            throw CanonicalError("invalid UTF-8 code point");
        out.append(s, i, len);
        i += len;
    }
    out.push_back('"');
}

void write_double(std::string& out, double d) {
    if (!std::isfinite(d)) throw CanonicalError("non-finite number cannot be canonicalized");
    if (d == 0.0) {
        out.push_back('0');
        return;
    }
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, d);
    if (ec != std::errc{}) throw CanonicalError("number formatting failed");
    std::string text(buf, end);
    // "1e-07" -> "1e-7", "1e+21" stays with sign but loses leading zeros
    if (auto e = text.find('e'); e != std::string::npos) {
        std::size_t digits = e + 1;
        if (digits < text.size() && (text[digits] == '+' || text[digits] == '-')) ++digits;
        std::size_t first = digits;
        while (first + 1 < text.size() && text[first] == '0') ++first;
        text.erase(digits, first - digits);
    }
    out += text;
}

void write_value(std::string& out, const Json& v) {
    switch (v.type()) {
        case Json::value_t::null: out += "null"; break;
        case Json::value_t::boolean: out += v.get<bool>() ? "true" : "false"; break;
        case Json::value_t::number_integer: out += std::to_string(v.get<std::int64_t>()); break;
        case Json::value_t::number_unsigned: out += std::to_string(v.get<std::uint64_t>()); break;
        case Json::value_t::number_float: write_double(out, v.get<double>()); break;
        case Json::value_t::string: write_string(out, v.get_ref<const std::string&>()); break;
        case Json::value_t::array: {
            out.push_back('[');
            bool first = true;
            for (const auto& e : v) {
                if (!first) out.push_back(',');
                first = false;
                write_value(out, e);
            }
            out.push_back(']');
            break;
        }
        case Json::value_t::object: {
            // nlohmann::json objects are std::map<std::string,...>; byte order
            // of UTF-8 equals code point order.
            out.push_back('{');
            bool first = true;
            for (auto it = v.begin(); it != v.end(); ++it) {
                if (!first) out.push_back(',');
                first = false;
                write_string(out, it.key());
                out.push_back(':');
                write_value(out, it.value());
            }
            out.push_back('}');
            break;
        }
        case Json::value_t::binary: throw CanonicalError("binary values are not serializable");
        case Json::value_t::discarded: throw CanonicalError("discarded value");
    }
}

} // namespace

std::string canonical_serialize(const Json& value) {
    std::string out;
    write_value(out, value);
    return out;
}

bool is_canonical(const std::string& text) {
    try {
        return canonical_serialize(Json::parse(text)) == text;
    } catch (const std::exception&) {
        return false;
    }
}

} // namespace aarm
