#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "longrad/common.hpp"

namespace longrad {

// Minimal CSV with quoted-field support. Header row required. Cells holding
// commas/quotes/newlines are quoted on write.
class CsvTable {
  public:
    CsvTable() = default;
    explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {
        for (std::size_t i = 0; i < columns_.size(); ++i) index_[columns_[i]] = i;
    }

    static CsvTable read_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw LoadError("cannot open CSV file: " + path);
        std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse(content, path);
    }

    static CsvTable parse(const std::string& content, const std::string& origin) {
        CsvTable t;
        std::vector<std::vector<std::string>> rows = split_records(content, origin);
        if (rows.empty()) throw LoadError("CSV with no header row: " + origin);
        t.columns_ = rows.front();
        for (std::size_t i = 0; i < t.columns_.size(); ++i) t.index_[t.columns_[i]] = i;
        for (std::size_t r = 1; r < rows.size(); ++r) {
            if (rows[r].size() == 1 && rows[r][0].empty()) continue;  // blank line
            if (rows[r].size() != t.columns_.size())
                throw LoadError("CSV row " + std::to_string(r + 1) + " has " +
                                std::to_string(rows[r].size()) + " fields, expected " +
                                std::to_string(t.columns_.size()) + " (" + origin + ")");
            t.rows_.push_back(std::move(rows[r]));
        }
        return t;
    }

    const std::vector<std::string>& columns() const { return columns_; }
    std::size_t row_count() const { return rows_.size(); }

    bool has_column(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t column_index(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw LoadError("CSV missing column '" + name + "'");
        return it->second;
    }

    const std::string& cell(std::size_t row, const std::string& column) const {
        return rows_.at(row).at(column_index(column));
    }
    const std::string& cell(std::size_t row, std::size_t col) const { return rows_.at(row).at(col); }

    double cell_double(std::size_t row, const std::string& column) const {
        return parse_double(cell(row, column), "column '" + column + "', row " + std::to_string(row + 2));
    }
    long cell_long(std::size_t row, const std::string& column) const {
        return parse_long(cell(row, column), "column '" + column + "', row " + std::to_string(row + 2));
    }

    void add_row(std::vector<std::string> cells) {
        if (cells.size() != columns_.size())
            throw ValidationError("CSV row width mismatch on write");
        rows_.push_back(std::move(cells));
    }

    std::string to_string() const {
        std::ostringstream out;
        write_record(out, columns_);
        for (const auto& row : rows_) write_record(out, row);
        return out.str();
    }

    void write_file(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot write CSV file: " + path);
        out << to_string();
        if (!out) throw Error("I/O error writing CSV file: " + path);
    }

  private:
    static void write_record(std::ostringstream& out, const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out << ',';
            const std::string& c = cells[i];
            if (c.find_first_of(",\"\n\r") != std::string::npos) {
                out << '"';
                for (char ch : c) {
                    if (ch == '"') out << "\"\"";
                    else out << ch;
                }
                out << '"';
            } else {
                out << c;
            }
        }
        out << '\n';
    }

    static std::vector<std::vector<std::string>> split_records(const std::string& s,
                                                               const std::string& origin) {
        std::vector<std::vector<std::string>> rows;
        std::vector<std::string> row;
        std::string field;
        bool in_quotes = false;
        std::size_t i = 0;
        const std::size_t n = s.size();
        auto end_field = [&] { row.push_back(field); field.clear(); };
        auto end_row = [&] {
            end_field();
            rows.push_back(row);
            row.clear();
        };
        while (i < n) {
            char c = s[i];
            if (in_quotes) {
                if (c == '"') {
                    if (i + 1 < n && s[i + 1] == '"') {
                        field += '"';
                        ++i;
                    } else {
                        in_quotes = false;
                    }
                } else {
                    field += c;
                }
            } else if (c == '"') {
                in_quotes = true;
            } else if (c == ',') {
                end_field();
            } else if (c == '\n') {
                end_row();
            } else if (c == '\r') {
                // swallow; \r\n handled by the \n branch
            } else {
                field += c;
            }
            ++i;
        }
        if (in_quotes) throw LoadError("unterminated quoted field in " + origin);
        if (!field.empty() || !row.empty()) end_row();
        return rows;
    }

    std::vector<std::string> columns_;
    std::map<std::string, std::size_t> index_;
    std::vector<std::vector<std::string>> rows_;
};

}  // namespace longrad
