#ifndef EOC_CONFIG_HPP
#define EOC_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace eoc::config {

// Flat TOML-subset reader: "key = value" lines, [section] headers prefix keys
// with "section.", values are numbers, booleans, or quoted strings. Lists are
// semicolon-separated inside a quoted string.
class Settings {
public:
    static Settings load(const std::filesystem::path& path);
    static Settings empty() { return {}; }

    bool has(const std::string& key) const;
    double number(const std::string& key) const;
    double number_or(const std::string& key, double fallback) const;
    std::int64_t integer(const std::string& key) const;
    std::int64_t integer_or(const std::string& key, std::int64_t fallback) const;
    bool boolean_or(const std::string& key, bool fallback) const;
    std::string text(const std::string& key) const;
    std::string text_or(const std::string& key, const std::string& fallback) const;
    std::vector<std::string> list_or(const std::string& key) const; // ';'-separated
    std::vector<double> number_list_or(const std::string& key) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

private:
    std::map<std::string, std::string> values_;
};

} // namespace eoc::config

#endif
