// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cctype>
#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mural/core/error.hpp"

namespace mural {

// Flat `key = value` text. Grammar:
//   line    := blank | comment | key '=' value [comment]
//   key     := [A-Za-z_][A-Za-z0-9_]*
//   value   := number | identifier | "quoted string" | value (',' value)*
//   comment := '#' anything
// Keys appear at most once. Values are kept as trimmed text; typed accessors
// parse them on demand.
class KeyValues {
public:
    static KeyValues parse(const std::string& text, const std::string& origin = "<text>") {
        KeyValues kv;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string where = origin + ":" + std::to_string(lineno);
            std::string body = strip_comment(line);
            body = trim(body);
            if (body.empty()) continue;
            const auto eq = body.find('=');
            if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
            const std::string key = trim(body.substr(0, eq));
            const std::string value = trim(body.substr(eq + 1));
            if (!valid_key(key)) throw ConfigError(where + ": invalid key '" + key + "'");
            if (value.empty()) throw ConfigError(where + ": empty value for '" + key + "'");
            if (kv.values_.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
            kv.values_[key] = unquote(value, where);
            kv.order_.push_back(key);
        }
        return kv;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
        return it->second;
    }
    const std::vector<std::string>& keys() const { return order_; }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) order_.push_back(key);
        values_[key] = value;
    }

    double number(const std::string& key) const { return to_number(raw(key), key); }
    long long integer(const std::string& key) const {
        const double v = number(key);
        if (v != static_cast<double>(static_cast<long long>(v))) throw ConfigError("key '" + key + "' must be an integer");
        return static_cast<long long>(v);
    }
    std::vector<double> numbers(const std::string& key) const {
        std::vector<double> out;
        for (const auto& part : split(raw(key), ',')) out.push_back(to_number(trim(part), key));
        return out;
    }

    static double to_number(const std::string& s, const std::string& key) {
        char* end = nullptr;
        const double v = std::strtod(s.c_str(), &end);
        if (s.empty() || end != s.c_str() + s.size())
            throw ConfigError("key '" + key + "': '" + s + "' is not a number");
        return v;
    }

    static std::string trim(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    static std::vector<std::string> split(const std::string& s, char sep) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : s) {
            if (c == sep) {
                out.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        out.push_back(cur);
        return out;
    }

private:
    static bool valid_key(const std::string& k) {
        if (k.empty() || !(std::isalpha(static_cast<unsigned char>(k[0])) || k[0] == '_')) return false;
        for (char c : k)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
        return true;
    }

    static std::string strip_comment(const std::string& line) {
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) return line.substr(0, i);
        }
        return line;
    }

    static std::string unquote(const std::string& v, const std::string& where) {
        if (v.front() != '"') return v;
        if (v.size() < 2 || v.back() != '"') throw ConfigError(where + ": unterminated string");
        return v.substr(1, v.size() - 2);
    }

    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

}  // namespace mural
