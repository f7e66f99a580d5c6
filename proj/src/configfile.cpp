#include "p3mask/configfile.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "p3mask/binio.hpp"

namespace p3mask {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

} // namespace

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected key=value, got '" + t + "'");
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        }
        if (!out.emplace(key, value).second) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": duplicate key '" + key + "'");
        }
    }
    return out;
}

ConfigMap load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string canonical_config(const ConfigMap& config) {
    std::string out;
    for (const auto& [key, value] : config) {
        out += key;
        out += '=';
        out += value;
        out += '\n';
    }
    return out;
}

std::string config_hash(const ConfigMap& config) {
    const std::string canon = canonical_config(config);
    const std::uint32_t crc =
        crc32(reinterpret_cast<const std::uint8_t*>(canon.data()), canon.size());
    char buf[9];
    std::snprintf(buf, sizeof(buf), "%08x", crc);
    return buf;
}

std::string config_get(const ConfigMap& config, const std::string& key,
                       const std::string& fallback) {
    const auto it = config.find(key);
    return it == config.end() ? fallback : it->second;
}

long config_get(const ConfigMap& config, const std::string& key, long fallback) {
    const auto it = config.find(key);
    if (it == config.end()) return fallback;
    try {
        std::size_t used = 0;
        const long v = std::stol(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': '" + it->second +
                                    "' is not an integer");
    }
}

double config_get(const ConfigMap& config, const std::string& key, double fallback) {
    const auto it = config.find(key);
    if (it == config.end()) return fallback;
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': '" + it->second +
                                    "' is not a number");
    }
}

std::uint64_t config_get(const ConfigMap& config, const std::string& key,
                         std::uint64_t fallback) {
    const auto it = config.find(key);
    if (it == config.end()) return fallback;
    try {
        // stoull silently wraps negative inputs, so reject them up front
        if (!it->second.empty() && it->second[0] == '-') {
            throw std::invalid_argument("negative");
        }
        std::size_t used = 0;
        const unsigned long long v = std::stoull(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing characters");
        return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': '" + it->second +
                                    "' is not an unsigned integer");
    }
}

} // namespace p3mask
