#pragma once

// Flat key=value run configuration with a canonical content hash. Every
// report carries the hash, so a result file can always be traced back to the
// exact settings that produced it.

#include <cstdint>
#include <map>
#include <string>

namespace p3mask {

using ConfigMap = std::map<std::string, std::string>;

/// Parses `key=value` lines. `#` starts a comment (whole line), blank lines
/// are skipped, whitespace around keys and values is trimmed. Duplicate keys
/// and lines without `=` are rejected.
ConfigMap parse_config_text(const std::string& text);

/// parse_config_text over a file's contents. Throws on a missing file.
ConfigMap load_config(const std::string& path);

/// Canonical serialization: `key=value\n` lines in sorted key order.
std::string canonical_config(const ConfigMap& config);

/// CRC-32 of the canonical serialization as 8 lowercase hex digits.
std::string config_hash(const ConfigMap& config);

/// Typed getters: return the default when the key is absent, throw
/// std::invalid_argument naming the key when the value does not parse.
std::string config_get(const ConfigMap& config, const std::string& key,
                       const std::string& fallback);
long config_get(const ConfigMap& config, const std::string& key, long fallback);
double config_get(const ConfigMap& config, const std::string& key, double fallback);
std::uint64_t config_get(const ConfigMap& config, const std::string& key,
                         std::uint64_t fallback);

} // namespace p3mask
