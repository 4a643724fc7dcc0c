#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace ehrseq {

// Shortest decimal representation that round-trips the exact double.
std::string dtos(double v);

uint64_t fnv1a64(std::string_view s);

// RFC-4180 style quoting; fields never contain literal newlines here.
std::string csv_escape(const std::string& field);
std::string csv_join(const std::vector<std::string>& fields);
// Splits one line into fields, honoring quotes and "" escapes.
// Throws on a dangling quote.
std::vector<std::string> csv_split(const std::string& line);

std::string read_file(const std::string& path);

// Writes to <path>.tmp.<pid> then renames over path, so a failed run never
// leaves a partial artifact behind.
void atomic_write_file(const std::string& path, const std::function<void(std::ostream&)>& writer);
void atomic_write_file(const std::string& path, const std::string& content);

}  // namespace ehrseq
