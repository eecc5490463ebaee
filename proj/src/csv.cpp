#include "diffdet3d/csv.hpp"

#include <array>
#include <charconv>
#include <sstream>
#include <stdexcept>

namespace diffdet3d {

namespace {

CsvRow split_line(const std::string& line) {
  CsvRow out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string join(const CsvRow& row) {
  std::string s;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i > 0) s += ',';
    s += row[i];
  }
  return s;
}

constexpr const char* kSchemaPrefix = "# schema: ";

}  // namespace

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

CsvAppender::CsvAppender(const std::filesystem::path& path, const std::string& schema, const CsvRow& header)
    : path_(path), width_(header.size()) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  if (!fresh) {
    const CsvTable existing = read_csv(path);
    if (existing.schema != schema || existing.header != header) {
      throw std::runtime_error("csv: " + path.string() + " has a different schema or header");
    }
  }
  out_.open(path, std::ios::app | std::ios::binary);
  if (!out_) throw std::runtime_error("csv: cannot open " + path.string());
  if (fresh) {
    out_ << kSchemaPrefix << schema << '\n' << join(header) << '\n';
    out_.flush();
  }
}

void CsvAppender::write(const CsvRow& row) {
  if (row.size() != width_) throw std::logic_error("csv: row width does not match header in " + path_.string());
  out_ << join(row) << '\n';
  out_.flush();
  if (!out_) throw std::runtime_error("csv: write failed for " + path_.string());
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw std::out_of_range("csv: no column named " + name);
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("csv: cannot open " + path.string());
  CsvTable t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.rfind(kSchemaPrefix, 0) == 0) {
      t.schema = line.substr(std::string(kSchemaPrefix).size());
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    CsvRow row = split_line(line);
    if (!have_header) {
      t.header = std::move(row);
      have_header = true;
    } else {
      if (row.size() != t.header.size()) {
        throw std::runtime_error("csv: ragged row in " + path.string() + ": " + line);
      }
      t.rows.push_back(std::move(row));
    }
  }
  if (!have_header) throw std::runtime_error("csv: no header in " + path.string());
  return t;
}

void write_csv_table(const std::filesystem::path& path, const CsvTable& table) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("csv: cannot write " + tmp.string());
    out << kSchemaPrefix << table.schema << '\n' << join(table.header) << '\n';
    for (const auto& r : table.rows) out << join(r) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace diffdet3d
