#ifndef EOC_CSV_HPP
#define EOC_CSV_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace eoc::csv {

// Full-precision double formatting (round-trips exactly through parse()).
std::string format(double v);

// Strict double parse; empty or "nan" (any case) map to nullopt for table cells.
std::optional<double> parse_cell(const std::string& cell);
double parse_number(const std::string& cell, const std::string& context);

std::vector<std::string> split_line(const std::string& line);

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<int> row_lines; // 1-based line number per row, for error messages
};

Table read_table(const std::filesystem::path& path);

// Sectioned CSV: lines of the form "[name]" start a section; each section has its
// own header line followed by data rows.
struct SectionedTable {
    struct Section {
        std::string name;
        Table table;
    };
    std::vector<Section> sections;
    const Table* find(const std::string& name) const;
};

SectionedTable read_sections(const std::filesystem::path& path);

class Writer {
public:
    explicit Writer(const std::filesystem::path& path);
    ~Writer();
    void section(const std::string& name);
    void row(const std::vector<std::string>& cells);
    void raw(const std::string& line);

private:
    struct Impl;
    Impl* impl_;
};

} // namespace eoc::csv

#endif
