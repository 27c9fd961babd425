#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pcn/matrix.hpp"
#include "pcn/network.hpp"

namespace pcn {

/// Plain-text `key = value` configuration with # comments. Values keep their
/// raw text; typed accessors parse on demand.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(std::istream& in) {
        KeyValueConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                if (line.find_first_not_of(" \t\r") != std::string::npos)
                    throw Error("config line " + std::to_string(lineno) + ": expected key = value");
                continue;
            }
            cfg.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    static KeyValueConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error("config: cannot open " + path);
        return parse(in);
    }

    static KeyValueConfig parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw Error("config: missing key '" + key + "'");
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key) const { return to_double(key, get_string(key)); }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }

    long long get_int(const std::string& key) const {
        const std::string s = get_string(key);
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw Error("config: key '" + key + "' is not an integer: " + s);
        }
    }
    long long get_int(const std::string& key, long long fallback) const {
        return has(key) ? get_int(key) : fallback;
    }

    std::vector<double> get_doubles(const std::string& key) const {
        std::vector<double> out;
        for (const std::string& tok : split(get_string(key))) out.push_back(to_double(key, tok));
        return out;
    }

    std::vector<long long> get_ints(const std::string& key) const {
        std::vector<long long> out;
        for (const std::string& tok : split(get_string(key)))
            out.push_back(static_cast<long long>(to_double(key, tok)));
        return out;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    static std::string trim(std::string s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        const auto b = s.find_last_not_of(" \t\r\n");
        return (a == std::string::npos) ? std::string() : s.substr(a, b - a + 1);
    }

    static std::vector<std::string> split(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : s) {
            if (c == ' ' || c == '\t' || c == ',') {
                if (!cur.empty()) out.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!cur.empty()) out.push_back(cur);
        return out;
    }

    static double to_double(const std::string& key, const std::string& s) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw Error("config: key '" + key + "' is not a number: " + s);
        }
    }

    std::map<std::string, std::string> values_;
};

/// NetworkSpec from its documented key-value schema:
/// widths, activation, parameterisation, skips (none|resnet|flag list),
/// activity_decay.
inline NetworkSpec spec_from_config(const KeyValueConfig& cfg) {
    std::vector<std::size_t> widths;
    for (long long w : cfg.get_ints("widths")) {
        if (w < 1) throw Error("spec: widths must be >= 1");
        widths.push_back(static_cast<std::size_t>(w));
    }
    if (widths.size() < 2) throw Error("spec: need at least widths = N_0 N_L");
    const Activation act = activation_from_string(cfg.get_string("activation", "linear"));
    const Parameterisation param =
        parameterisation_from_string(cfg.get_string("parameterisation", "sp"));
    const double decay = cfg.get_double("activity_decay", 0.0);

    const std::string skips = cfg.get_string("skips", "none");
    NetworkSpec spec;
    if (skips == "none") {
        spec = make_fc_spec(widths, act, param, decay);
    } else if (skips == "resnet") {
        spec = make_resnet_spec(widths, act, param, decay);
    } else {
        spec.widths = widths;
        spec.activation = act;
        spec.parameterisation = param;
        spec.activity_decay = decay;
        for (long long t : cfg.get_ints("skips")) spec.skips.push_back(static_cast<int>(t));
        spec.premultipliers = default_premultipliers(widths, param);
        spec.validate();
    }
    return spec;
}

inline std::string spec_to_config_string(const NetworkSpec& spec, std::uint64_t seed) {
    std::ostringstream out;
    out << "widths =";
    for (std::size_t w : spec.widths) out << " " << w;
    out << "\nactivation = " << to_string(spec.activation);
    out << "\nparameterisation = " << to_string(spec.parameterisation);
    bool resnet_pattern = spec.has_skips();
    for (std::size_t l = 1; l <= spec.layers() && resnet_pattern; ++l)
        if (spec.tau(l) != ((l >= 2 && l <= spec.hidden()) ? 1 : 0)) resnet_pattern = false;
    if (!spec.has_skips()) {
        out << "\nskips = none";
    } else if (resnet_pattern) {
        out << "\nskips = resnet";
    } else {
        out << "\nskips =";
        for (int t : spec.skips) out << " " << t;
    }
    out << "\nseed = " << seed;
    out << "\nactivity_decay = " << spec.activity_decay << "\n";
    return out.str();
}

/// Fixed-format numeric printing so reruns produce byte-identical CSV.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path) {
        if (!out_) throw Error("csv: cannot open " + path);
        columns_ = header.size();
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) out_ << ',';
            out_ << header[i];
        }
        out_ << '\n';
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_) throw Error("csv: wrong cell count");
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

    void flush() { out_.flush(); }

private:
    std::ofstream out_;
    std::size_t columns_ = 0;
};

inline std::string cell(double v) { return format_double(v); }
inline std::string cell(std::size_t v) { return std::to_string(v); }
inline std::string cell(long long v) { return std::to_string(v); }
inline std::string cell(int v) { return std::to_string(v); }
inline std::string cell(const std::string& s) { return s; }

}  // namespace pcn
