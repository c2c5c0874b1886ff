#include "lcnn/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <limits>

#include "lcnn/binary_io.hpp"
#include "lcnn/error.hpp"

namespace lcnn {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::string_view strip_comment(std::string_view line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* kind) {
    throw Error("config key '" + key + "': '" + value + "' is not " + kind);
}

} // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string& source) {
    KeyValueConfig cfg;
    std::string section;
    int line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw Error(where + "unterminated section header");
            section = std::string(trim(line.substr(1, line.size() - 2)));
            if (section.empty()) throw Error(where + "empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw Error(where + "expected 'key = value'");
        const std::string_view key = trim(line.substr(0, eq));
        std::string_view value = trim(line.substr(eq + 1));
        if (key.empty()) throw Error(where + "missing key");
        if (!value.empty() && value.front() == '"') {
            if (value.size() < 2 || value.back() != '"') throw Error(where + "unterminated string");
            value = value.substr(1, value.size() - 2);
        }
        cfg.entries_[section.empty() ? std::string(key) : section + "." + std::string(key)] = std::string(value);
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path.string());
}

std::string KeyValueConfig::get(const std::string& key, const std::string& fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
    const long v = get_long(key, fallback);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) bad_value(key, get(key, ""), "an int");
    return static_cast<int>(v);
}

long KeyValueConfig::get_long(const std::string& key, long fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    long v = 0;
    const auto& s = it->second;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) bad_value(key, s, "an integer");
    return v;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const auto& s = it->second;
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        bad_value(key, s, "a number");
    }
    if (used != s.size()) bad_value(key, s, "a number");
    return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::string s = it->second;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
    if (s == "false" || s == "no" || s == "off" || s == "0") return false;
    bad_value(key, it->second, "a boolean");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::vector<std::string> out;
    std::string_view rest = it->second;
    while (true) {
        const auto comma = rest.find(',');
        const auto item = trim(rest.substr(0, comma));
        if (!item.empty()) out.emplace_back(item);
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
    }
    return out;
}

} // namespace lcnn
