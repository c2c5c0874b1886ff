#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace lcnn {

/// Flat key-value settings read from a TOML-like text file:
/// `key = value` lines, `#` comments, and `[section]` headers that prefix
/// following keys as `section.key`. Values may be double-quoted.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text, const std::string& source = "<config>");
    static KeyValueConfig load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }

    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    long get_long(const std::string& key, long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    /// Comma-separated list; empty items are dropped.
    std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const;

    const std::map<std::string, std::string>& entries() const { return entries_; }

private:
    std::map<std::string, std::string> entries_;
};

} // namespace lcnn
