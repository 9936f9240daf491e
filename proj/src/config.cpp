#include "eoc/config.hpp"

#include <fstream>

#include "eoc/csv.hpp"
#include "eoc/errors.hpp"

namespace eoc::config {

namespace {
std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}
} // namespace

Settings Settings::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    Settings s;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ": line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
            value = value.substr(1, value.size() - 2);
        if (!section.empty()) key = section + "." + key;
        s.values_[key] = value;
    }
    return s;
}

bool Settings::has(const std::string& key) const { return values_.count(key) > 0; }

double Settings::number(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return csv::parse_number(it->second, "for config key " + key);
}

double Settings::number_or(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
}

std::int64_t Settings::integer(const std::string& key) const {
    double v = number(key);
    auto i = static_cast<std::int64_t>(v);
    if (static_cast<double>(i) != v) throw ConfigError("config key is not an integer: " + key);
    return i;
}

std::int64_t Settings::integer_or(const std::string& key, std::int64_t fallback) const {
    return has(key) ? integer(key) : fallback;
}

bool Settings::boolean_or(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError("config key is not a boolean: " + key);
}

std::string Settings::text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
}

std::string Settings::text_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? text(key) : fallback;
}

std::vector<std::string> Settings::list_or(const std::string& key) const {
    std::vector<std::string> out;
    if (!has(key)) return out;
    std::string v = text(key);
    std::string cur;
    for (char c : v) {
        if (c == ';') {
            if (!trim(cur).empty()) out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty()) out.push_back(trim(cur));
    return out;
}

std::vector<double> Settings::number_list_or(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list_or(key)) out.push_back(csv::parse_number(s, "in list " + key));
    return out;
}

} // namespace eoc::config
