#pragma once

// Minimal RFC 4180 CSV reading and writing. Every table in the project is UTF-8 with a header
// row; cells are kept as strings and converted by the caller.

#include "shapesynth/error.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace shapesynth::csv {

struct Table {
    std::string source;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column position by name, or nullopt.
    [[nodiscard]] std::optional<std::size_t> find(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) {
                return i;
            }
        }
        return std::nullopt;
    }

    /// Column position by name; throws SchemaError naming the column when absent.
    [[nodiscard]] std::size_t require(std::string_view name) const {
        if (auto idx = find(name)) {
            return *idx;
        }
        throw SchemaError(source + ": missing column '" + std::string(name) + "'");
    }
};

namespace detail {

inline std::string_view strip_bom(std::string_view text) {
    if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") {
        text.remove_prefix(3);
    }
    return text;
}

} // namespace detail

/// Parse CSV text. Quoted fields may contain commas, quotes ("") and newlines.
inline Table parse(std::string_view text, std::string source = "<memory>") {
    text = detail::strip_bom(text);
    Table table;
    table.source = std::move(source);

    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    bool header_done = false;
    std::size_t line = 1;

    auto end_row = [&] {
        row.push_back(std::move(field));
        field.clear();
        field_started = false;
        // A bare newline (single empty field) is a blank line and is skipped.
        if (!(row.size() == 1 && row.front().empty())) {
            if (!header_done) {
                table.header = std::move(row);
                header_done = true;
            } else {
                if (row.size() != table.header.size()) {
                    throw SchemaError(table.source + ": line " + std::to_string(line) + " has " +
                                      std::to_string(row.size()) + " fields, header has " +
                                      std::to_string(table.header.size()));
                }
                table.rows.push_back(std::move(row));
            }
        }
        row.clear();
    };

    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (in_quotes) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                if (ch == '\n') {
                    ++line;
                }
                field.push_back(ch);
            }
            continue;
        }
        switch (ch) {
        case '"':
            if (field_started && !field.empty()) {
                throw SchemaError(table.source + ": stray quote on line " + std::to_string(line));
            }
            in_quotes = true;
            field_started = true;
            break;
        case ',':
            row.push_back(std::move(field));
            field.clear();
            field_started = false;
            break;
        case '\r':
            break;
        case '\n':
            end_row();
            ++line;
            break;
        default:
            field.push_back(ch);
            field_started = true;
        }
    }
    if (in_quotes) {
        throw SchemaError(table.source + ": unterminated quoted field");
    }
    if (field_started || !row.empty()) {
        end_row();
    }
    if (!header_done) {
        throw SchemaError(table.source + ": empty file, expected a header row");
    }
    return table;
}

inline std::string read_text(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw SchemaError("cannot open '" + path.string() + "'");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return std::move(buf).str();
}

inline Table read(const std::filesystem::path &path) {
    return parse(read_text(path), path.string());
}

inline std::string quote(std::string_view cell) {
    if (cell.find_first_of(",\"\n\r") == std::string_view::npos) {
        return std::string(cell);
    }
    std::string out = "\"";
    for (char ch : cell) {
        if (ch == '"') {
            out.push_back('"');
        }
        out.push_back(ch);
    }
    out.push_back('"');
    return out;
}

/// Shortest round-trip decimal representation of a double.
inline std::string format_double(double value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc{}) {
        throw Error("format_double: conversion failed");
    }
    return {buf, ptr};
}

/// Parse a decimal number. Returns nullopt for empty cells; throws DataError on garbage.
inline std::optional<double> parse_double(std::string_view cell, std::string_view context) {
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) {
        cell.remove_prefix(1);
    }
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t')) {
        cell.remove_suffix(1);
    }
    if (cell.empty()) {
        return std::nullopt;
    }
    if (cell.front() == '+') {
        cell.remove_prefix(1);
    }
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
    if (ec != std::errc{} || ptr != cell.data() + cell.size()) {
        throw DataError(std::string(context) + ": '" + std::string(cell) + "' is not a number");
    }
    return value;
}

/// Renders rows into an in-memory buffer; hand text() to write_atomic.
class Writer {
public:
    explicit Writer(std::vector<std::string> header) { row(header); }

    void row(const std::vector<std::string> &cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i != 0) {
                out_.push_back(',');
            }
            out_ += quote(cells[i]);
        }
        out_.push_back('\n');
    }

    [[nodiscard]] const std::string &text() const noexcept { return out_; }

private:
    std::string out_;
};

/// Write via a temporary sibling and rename, so readers never see a partial file.
inline void write_atomic(const std::filesystem::path &path, std::string_view contents) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw SchemaError("cannot write '" + tmp.string() + "'");
        }
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) {
            throw Error("short write to '" + tmp.string() + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

} // namespace shapesynth::csv
