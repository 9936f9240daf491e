#include "eoc/csv.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>

#include "eoc/errors.hpp"

namespace eoc::csv {

std::string format(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace {
std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}
} // namespace

std::optional<double> parse_cell(const std::string& cell) {
    std::string t = trim(cell);
    if (t.empty()) return std::nullopt;
    std::string low = t;
    std::transform(low.begin(), low.end(), low.begin(), [](unsigned char c) { return std::tolower(c); });
    if (low == "nan") return std::nullopt;
    std::size_t pos = 0;
    double v = std::stod(t, &pos);
    if (pos != t.size()) throw ConfigError("malformed number: '" + cell + "'");
    return v;
}

double parse_number(const std::string& cell, const std::string& context) {
    auto v = parse_cell(cell);
    if (!v) throw ConfigError("missing number " + context);
    return *v;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

Table read_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open file: " + path.string());
    Table t;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        auto cells = split_line(s);
        if (t.header.empty()) {
            t.header = cells;
        } else {
            t.rows.push_back(cells);
            t.row_lines.push_back(lineno);
        }
    }
    if (t.header.empty()) throw ConfigError("empty csv file: " + path.string());
    return t;
}

const csv::Table* SectionedTable::find(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return &s.table;
    return nullptr;
}

SectionedTable read_sections(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open file: " + path.string());
    SectionedTable out;
    std::string line;
    int lineno = 0;
    SectionedTable::Section* cur = nullptr;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = trim(line);
        // strip stray commas a spreadsheet export may pad section lines with
        while (!s.empty() && s.back() == ',') s.pop_back();
        if (s.empty() || s[0] == '#') continue;
        if (s.front() == '[' && s.back() == ']') {
            out.sections.push_back({s.substr(1, s.size() - 2), {}});
            cur = &out.sections.back();
            continue;
        }
        if (!cur) throw ConfigError(path.string() + ": line " + std::to_string(lineno) + " outside any section");
        auto cells = split_line(s);
        if (cur->table.header.empty()) {
            cur->table.header = cells;
        } else {
            cur->table.rows.push_back(cells);
            cur->table.row_lines.push_back(lineno);
        }
    }
    return out;
}

struct Writer::Impl {
    std::ofstream out;
};

Writer::Writer(const std::filesystem::path& path) : impl_(new Impl) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    impl_->out.open(path, std::ios::trunc);
    if (!impl_->out) {
        delete impl_;
        throw ConfigError("cannot write file: " + path.string());
    }
}

Writer::~Writer() { delete impl_; }

void Writer::section(const std::string& name) { impl_->out << '[' << name << "]\n"; }

void Writer::row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) impl_->out << ',';
        impl_->out << cells[i];
    }
    impl_->out << '\n';
}

void Writer::raw(const std::string& line) { impl_->out << line << '\n'; }

} // namespace eoc::csv
