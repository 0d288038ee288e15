// Key-value text config files: one `key value` pair per line, `#` comments.
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pushbroom/tensor.hpp"

namespace pushbroom {

class Config {
public:
    Config() = default;

    static Config parse(std::istream& is) {
        Config c;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            size_t h = line.find('#');
            if (h != std::string::npos) line.erase(h);
            std::istringstream ls(line);
            std::string key;
            if (!(ls >> key)) continue;
            std::string value;
            std::getline(ls, value);
            size_t b = value.find_first_not_of(" \t\r");
            value = (b == std::string::npos) ? "" : value.substr(b);
            size_t e = value.find_last_not_of(" \t\r");
            if (e != std::string::npos) value.erase(e + 1);
            if (value.empty())
                fail("config line " + std::to_string(lineno) + ": key '" + key + "' has no value");
            c.kv_[key] = value;
        }
        return c;
    }

    static Config parse_string(const std::string& text) {
        std::istringstream is(text);
        return parse(is);
    }

    static Config load(const std::string& path) {
        std::ifstream is(path);
        if (!is) fail("cannot open config file: " + path);
        return parse(is);
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) fail("config: missing key '" + key + "'");
        return it->second;
    }
    std::string get_str(const std::string& key, const std::string& def) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? def : it->second;
    }

    double get_f64(const std::string& key, double def) const {
        if (!has(key)) return def;
        return parse_f64(key, get_str(key));
    }
    double get_f64(const std::string& key) const { return parse_f64(key, get_str(key)); }

    int get_int(const std::string& key, int def) const {
        if (!has(key)) return def;
        return parse_int(key, get_str(key));
    }
    int get_int(const std::string& key) const { return parse_int(key, get_str(key)); }

    uint64_t get_u64(const std::string& key, uint64_t def) const {
        if (!has(key)) return def;
        std::istringstream is(get_str(key));
        uint64_t v;
        if (!(is >> v)) fail("config: key '" + key + "' is not an unsigned integer");
        return v;
    }

    bool get_bool(const std::string& key, bool def) const {
        if (!has(key)) return def;
        std::string v = get_str(key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        fail("config: key '" + key + "' is not a boolean: " + v);
    }

    // Comma-separated integer list, e.g. `width_mults 1,2,4`.
    std::vector<int> get_ints(const std::string& key, std::vector<int> def) const {
        if (!has(key)) return def;
        std::vector<int> out;
        std::string v = get_str(key);
        std::istringstream is(v);
        std::string tok;
        while (std::getline(is, tok, ',')) out.push_back(parse_int(key, tok));
        if (out.empty()) fail("config: key '" + key + "' has an empty list");
        return out;
    }

    std::vector<double> get_f64s(const std::string& key, std::vector<double> def) const {
        if (!has(key)) return def;
        std::vector<double> out;
        std::istringstream is(get_str(key));
        std::string tok;
        while (std::getline(is, tok, ',')) out.push_back(parse_f64(key, tok));
        if (out.empty()) fail("config: key '" + key + "' has an empty list");
        return out;
    }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set_f64(const std::string& key, double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        kv_[key] = os.str();
    }
    void set_int(const std::string& key, int64_t v) { kv_[key] = std::to_string(v); }

    std::string to_string() const {
        std::ostringstream os;
        for (const auto& [k, v] : kv_) os << k << " " << v << "\n";
        return os.str();
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) fail("cannot write config file: " + path);
        os << to_string();
    }

private:
    static double parse_f64(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            double d = std::stod(v, &pos);
            while (pos < v.size() && (v[pos] == ' ' || v[pos] == '\t')) ++pos;
            if (pos != v.size()) fail("");
            return d;
        } catch (...) {
            fail("config: key '" + key + "' is not a number: " + v);
        }
    }
    static int parse_int(const std::string& key, const std::string& v) {
        try {
            size_t pos = 0;
            long val = std::stol(v, &pos);
            while (pos < v.size() && (v[pos] == ' ' || v[pos] == '\t')) ++pos;
            if (pos != v.size()) fail("");
            return (int)val;
        } catch (...) {
            fail("config: key '" + key + "' is not an integer: " + v);
        }
    }

    std::map<std::string, std::string> kv_;
};

}  // namespace pushbroom
