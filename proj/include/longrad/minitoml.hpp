#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "longrad/common.hpp"

namespace longrad {

// Strict parser for the TOML subset our run configs use: bare keys,
// [section] headers, strings, integers, floats, booleans and flat arrays,
// '#' comments. Duplicate keys are rejected so manifests stay trustworthy.
// No system package in the build environment provides TOML, hence this.
class TomlValue {
  public:
    using Array = std::vector<TomlValue>;
    using Storage = std::variant<std::string, std::int64_t, double, bool, Array>;

    TomlValue() : v_(std::int64_t{0}) {}
    explicit TomlValue(Storage v) : v_(std::move(v)) {}

    bool is_string() const { return std::holds_alternative<std::string>(v_); }
    bool is_int() const { return std::holds_alternative<std::int64_t>(v_); }
    bool is_float() const { return std::holds_alternative<double>(v_); }
    bool is_bool() const { return std::holds_alternative<bool>(v_); }
    bool is_array() const { return std::holds_alternative<Array>(v_); }

    const std::string& as_string() const { return get<std::string>("string"); }
    std::int64_t as_int() const { return get<std::int64_t>("integer"); }
    bool as_bool() const { return get<bool>("boolean"); }
    double as_float() const {
        if (is_int()) return static_cast<double>(std::get<std::int64_t>(v_));
        return get<double>("float");
    }
    const Array& as_array() const { return get<Array>("array"); }

  private:
    template <typename T>
    const T& get(const char* what) const {
        if (!std::holds_alternative<T>(v_))
            throw ConfigError(std::string("config value is not a ") + what);
        return std::get<T>(v_);
    }
    Storage v_;
};

class TomlDocument {
  public:
    // Keys are "section.key" for entries under [section], bare "key" otherwise.
    static TomlDocument parse_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse(text, path);
    }

    static TomlDocument parse(const std::string& text, const std::string& origin) {
        TomlDocument doc;
        std::istringstream in(text);
        std::string line;
        std::string section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip_comment(line, origin, lineno);
            s = trim(s);
            if (s.empty()) continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
                section = trim(s.substr(1, s.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
                continue;
            }
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(s.substr(0, eq));
            std::string valtext = trim(s.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            std::string full = section.empty() ? key : section + "." + key;
            if (doc.values_.count(full))
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + full + "'");
            doc.values_.emplace(full, parse_value(valtext, origin, lineno));
        }
        return doc;
    }

    bool contains(const std::string& key) const { return values_.count(key) > 0; }

    const TomlValue& at(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing required config key '" + key + "'");
        return it->second;
    }

    const std::map<std::string, TomlValue>& entries() const { return values_; }

  private:
    static std::string trim(const std::string& s) {
        std::size_t a = s.find_first_not_of(" \t");
        if (a == std::string::npos) return "";
        std::size_t b = s.find_last_not_of(" \t");
        return s.substr(a, b - a + 1);
    }

    // Drop a trailing comment, respecting quoted strings.
    static std::string strip_comment(const std::string& s, const std::string& origin,
                                     std::size_t lineno) {
        bool in_str = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            char c = s[i];
            if (c == '"') {
                if (in_str && i > 0 && s[i - 1] == '\\') continue;
                in_str = !in_str;
            } else if (c == '#' && !in_str) {
                return s.substr(0, i);
            }
        }
        if (in_str) throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated string");
        return s;
    }

    static TomlValue parse_value(const std::string& text, const std::string& origin,
                                 std::size_t lineno) {
        auto fail = [&](const std::string& why) -> ConfigError {
            return ConfigError(origin + ":" + std::to_string(lineno) + ": " + why);
        };
        if (text.empty()) throw fail("missing value");
        if (text.front() == '"') {
            if (text.size() < 2 || text.back() != '"') throw fail("malformed string value");
            std::string out;
            for (std::size_t i = 1; i + 1 < text.size(); ++i) {
                char c = text[i];
                if (c == '\\' && i + 2 < text.size()) {
                    char n = text[++i];
                    switch (n) {
                        case 'n': out += '\n'; break;
                        case 't': out += '\t'; break;
                        case '"': out += '"'; break;
                        case '\\': out += '\\'; break;
                        default: throw fail("unsupported escape in string");
                    }
                } else if (c == '"') {
                    throw fail("unescaped quote inside string");
                } else {
                    out += c;
                }
            }
            return TomlValue(TomlValue::Storage(out));
        }
        if (text.front() == '[') {
            if (text.back() != ']') throw fail("malformed array value");
            TomlValue::Array arr;
            std::string inner = text.substr(1, text.size() - 2);
            std::vector<std::string> parts;
            std::string cur;
            bool in_str = false;
            for (char c : inner) {
                if (c == '"') in_str = !in_str;
                if (c == ',' && !in_str) {
                    parts.push_back(cur);
                    cur.clear();
                } else {
                    cur += c;
                }
            }
            if (!trim(cur).empty() || !parts.empty()) parts.push_back(cur);
            for (auto& p : parts) {
                std::string t = trim(p);
                if (t.empty()) throw fail("empty array element");
                arr.push_back(parse_value(t, origin, lineno));
            }
            return TomlValue(TomlValue::Storage(std::move(arr)));
        }
        if (text == "true") return TomlValue(TomlValue::Storage(true));
        if (text == "false") return TomlValue(TomlValue::Storage(false));
        // numeric: integer if it parses exactly as one, else float
        bool looks_float = text.find_first_of(".eE") != std::string::npos ||
                           text == "inf" || text == "-inf" || text == "nan";
        if (!looks_float) {
            try {
                std::size_t pos = 0;
                std::int64_t v = std::stoll(text, &pos);
                if (pos == text.size()) return TomlValue(TomlValue::Storage(v));
            } catch (const std::exception&) {
            }
        }
        try {
            std::size_t pos = 0;
            double v = std::stod(text, &pos);
            if (pos == text.size()) return TomlValue(TomlValue::Storage(v));
        } catch (const std::exception&) {
        }
        throw fail("cannot parse value '" + text + "'");
    }

    std::map<std::string, TomlValue> values_;
};

}  // namespace longrad
