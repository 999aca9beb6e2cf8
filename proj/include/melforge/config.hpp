#pragma once

// key=value text config ('#' starts a comment line). Insertion order is
// preserved so serialized snapshots are byte-stable.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "melforge/common.hpp"

namespace melforge {

class Config {
public:
    void set(const std::string& key, const std::string& value) {
        for (auto& [k, v] : items_)
            if (k == key) {
                v = value;
                return;
            }
        items_.emplace_back(key, value);
    }
    void set(const std::string& key, double v) {
        std::ostringstream ss;
        ss.precision(17);
        ss << v;
        set(key, ss.str());
    }
    void set(const std::string& key, std::size_t v) { set(key, std::to_string(v)); }
    void set(const std::string& key, long v) { set(key, std::to_string(v)); }

    bool has(const std::string& key) const { return raw(key) != nullptr; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        const std::string* v = raw(key);
        return v ? *v : fallback;
    }

    double get_num(const std::string& key, double fallback) const {
        const std::string* v = raw(key);
        if (!v) return fallback;
        try {
            return std::stod(*v);
        } catch (const std::exception&) {
            throw ValidationError("config: key '" + key + "' has non-numeric value '" + *v + "'");
        }
    }

    long get_int(const std::string& key, long fallback) const {
        const std::string* v = raw(key);
        if (!v) return fallback;
        try {
            return std::stol(*v);
        } catch (const std::exception&) {
            throw ValidationError("config: key '" + key + "' has non-integer value '" + *v + "'");
        }
    }

    static Config parse(const std::string& text) {
        Config c;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ValidationError("config: line without '=': '" + line + "'");
            std::string key = line.substr(0, eq);
            std::string value = line.substr(eq + 1);
            auto strip = [](std::string& s) {
                while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
                while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
            };
            strip(key);
            strip(value);
            c.set(key, value);
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("config: cannot open '" + path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : items_) out += k + "=" + v + "\n";
        return out;
    }

    const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

private:
    const std::string* raw(const std::string& key) const {
        for (const auto& [k, v] : items_)
            if (k == key) return &v;
        return nullptr;
    }

    std::vector<std::pair<std::string, std::string>> items_;
};

}  // namespace melforge
