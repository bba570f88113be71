#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

namespace regguide {

/// Minimal CSV emitter: one header line, numbers at round-trip precision.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);

  CsvWriter& cell(double v);
  CsvWriter& cell(long long v);
  CsvWriter& cell(int v) { return cell(static_cast<long long>(v)); }
  CsvWriter& cell(std::size_t v) { return cell(static_cast<long long>(v)); }
  CsvWriter& cell(const std::string& v);
  void end_row();

  const std::filesystem::path& path() const { return path_; }

 private:
  void separator();

  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t columns_;
  std::size_t in_row_ = 0;
};

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

/// Opens a file for writing, creating parent directories.
std::ofstream open_output(const std::filesystem::path& path);

}  // namespace regguide
