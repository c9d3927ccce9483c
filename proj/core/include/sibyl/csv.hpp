#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace sibyl::csv {

using Row = std::vector<std::string>;

/// RFC 4180 quoting: fields containing a comma, quote, CR or LF are quoted.
std::string format_row(const Row& row);

/// Parses a whole document; quoted fields may span lines.
std::vector<Row> parse(const std::string& text);

std::vector<Row> read(const std::filesystem::path& path);
void write(const std::filesystem::path& path, const std::vector<Row>& rows);

}  // namespace sibyl::csv
