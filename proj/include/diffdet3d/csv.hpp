#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace diffdet3d {

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

using CsvRow = std::vector<std::string>;

/// Append-only CSV with a leading "# schema: <name>" line and a header row.
/// Every row is flushed as soon as it is written.
class CsvAppender {
 public:
  CsvAppender(const std::filesystem::path& path, const std::string& schema, const CsvRow& header);
  void write(const CsvRow& row);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::size_t width_;
  std::ofstream out_;
};

struct CsvTable {
  std::string schema;
  CsvRow header;
  std::vector<CsvRow> rows;

  /// Column index by name; throws if absent.
  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

void write_csv_table(const std::filesystem::path& path, const CsvTable& table);

/// Rewrites the file keeping only the rows accepted by `keep`.
template <typename Pred>
void filter_csv_rows(const std::filesystem::path& path, Pred keep) {
  if (!std::filesystem::exists(path)) return;
  CsvTable t = read_csv(path);
  std::vector<CsvRow> kept;
  for (auto& r : t.rows) {
    if (keep(t, r)) kept.push_back(std::move(r));
  }
  t.rows = std::move(kept);
  write_csv_table(path, t);
}

}  // namespace diffdet3d
