#pragma once

// Structured-text run configuration: `[section]` headers and `key = value`
// lines, `#`/`;` comments. Errors always name the offending `section.key`.

#include <map>
#include <string>
#include <vector>

#include "ldit/errors.hpp"
#include "ldit/io.hpp"

namespace ldit::cfg {

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

class Config {
public:
    Config() = default;

    static Config parse(const std::string& text, const std::string& origin = "config") {
        Config c;
        std::string section;
        std::size_t lineno = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            std::size_t eol = text.find('\n', pos);
            std::string line = text.substr(pos, eol == std::string::npos ? eol : eol - pos);
            pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
            ++lineno;
            std::size_t hash = line.find_first_of("#;");
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') {
                    throw config_error(origin + ":" + std::to_string(lineno) +
                                       ": malformed section header '" + line + "'");
                }
                section = detail::trim(line.substr(1, line.size() - 2));
                if (section.empty()) {
                    throw config_error(origin + ":" + std::to_string(lineno) +
                                       ": empty section name");
                }
                continue;
            }
            std::size_t eq = line.find('=');
            if (eq == std::string::npos) {
                throw config_error(origin + ":" + std::to_string(lineno) +
                                   ": expected 'key = value', got '" + line + "'");
            }
            std::string key = detail::trim(line.substr(0, eq));
            std::string value = detail::trim(line.substr(eq + 1));
            if (key.empty()) {
                throw config_error(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            c.set(section, key, value);
        }
        return c;
    }

    static Config parse_file(const std::string& path) {
        return parse(io::read_file(path), path);
    }

    void set(const std::string& section, const std::string& key, const std::string& value) {
        values_[section + "." + key] = value;
    }

    // "section.key=value" (the --set override form)
    void set_entry(const std::string& entry) {
        std::size_t eq = entry.find('=');
        if (eq == std::string::npos) {
            throw config_error("override '" + entry + "' must look like section.key=value");
        }
        std::string path = detail::trim(entry.substr(0, eq));
        std::size_t dot = path.find('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == path.size()) {
            throw config_error("override '" + entry + "' must look like section.key=value");
        }
        set(path.substr(0, dot), path.substr(dot + 1), detail::trim(entry.substr(eq + 1)));
    }

    bool has(const std::string& section, const std::string& key) const {
        return values_.count(section + "." + key) != 0;
    }

    std::string get_string(const std::string& section, const std::string& key) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end()) {
            throw config_error("missing required config key " + section + "." + key);
        }
        return it->second;
    }

    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
        auto it = values_.find(section + "." + key);
        return it == values_.end() ? fallback : it->second;
    }

    long long get_int(const std::string& section, const std::string& key,
                      long long fallback) const {
        if (!has(section, key)) return fallback;
        return parse_int_checked(section, key);
    }

    long long get_int(const std::string& section, const std::string& key) const {
        get_string(section, key);  // throws if missing
        return parse_int_checked(section, key);
    }

    double get_double(const std::string& section, const std::string& key,
                      double fallback) const {
        if (!has(section, key)) return fallback;
        return parse_double_checked(section, key);
    }

    double get_double(const std::string& section, const std::string& key) const {
        get_string(section, key);  // throws if missing
        return parse_double_checked(section, key);
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        if (!has(section, key)) return fallback;
        std::string v = get_string(section, key);
        if (v == "true" || v == "yes" || v == "1" || v == "on") return true;
        if (v == "false" || v == "no" || v == "0" || v == "off") return false;
        throw config_error("config key " + section + "." + key + ": expected a boolean, got '" +
                           v + "'");
    }

    // comma-separated integer list, e.g. widths = 16,32,64
    std::vector<int> get_int_list(const std::string& section, const std::string& key,
                                  const std::vector<int>& fallback) const {
        if (!has(section, key)) return fallback;
        std::vector<int> out;
        std::string v = get_string(section, key);
        std::size_t pos = 0;
        while (pos <= v.size()) {
            std::size_t comma = v.find(',', pos);
            std::string tok =
                detail::trim(v.substr(pos, comma == std::string::npos ? comma : comma - pos));
            pos = comma == std::string::npos ? v.size() + 1 : comma + 1;
            if (tok.empty()) continue;
            try {
                out.push_back(static_cast<int>(io::parse_int(tok, section + "." + key)));
            } catch (const std::exception&) {
                throw config_error("config key " + section + "." + key +
                                   ": expected integers, got '" + tok + "'");
            }
        }
        if (out.empty()) {
            throw config_error("config key " + section + "." + key + ": empty list");
        }
        return out;
    }

    // later sources win: defaults, then file, then command-line overrides
    void merge(const Config& other) {
        for (const auto& [path, value] : other.values_) values_[path] = value;
    }

    std::string serialize() const {
        // group by section, stable order
        std::map<std::string, std::map<std::string, std::string>> grouped;
        for (const auto& [path, value] : values_) {
            std::size_t dot = path.find('.');
            grouped[path.substr(0, dot)][path.substr(dot + 1)] = value;
        }
        std::string out;
        for (const auto& [section, kv] : grouped) {
            out += "[" + section + "]\n";
            for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
            out += "\n";
        }
        return out;
    }

private:
    long long parse_int_checked(const std::string& section, const std::string& key) const {
        const std::string v = get_string(section, key);
        try {
            return io::parse_int(v, section + "." + key);
        } catch (const std::exception&) {
            throw config_error("config key " + section + "." + key +
                               ": expected an integer, got '" + v + "'");
        }
    }

    double parse_double_checked(const std::string& section, const std::string& key) const {
        const std::string v = get_string(section, key);
        try {
            return io::parse_double(v, section + "." + key);
        } catch (const std::exception&) {
            throw config_error("config key " + section + "." + key +
                               ": expected a number, got '" + v + "'");
        }
    }

    std::map<std::string, std::string> values_;
};

}  // namespace ldit::cfg
