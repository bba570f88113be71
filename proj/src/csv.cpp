#include "regguide/csv.hpp"

#include <charconv>
#include <stdexcept>

namespace regguide {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
    : path_(path), out_(open_output(path)), columns_(header.size()) {
  for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
  out_ << '\n';
}

void CsvWriter::separator() {
  if (in_row_ >= columns_) throw std::logic_error("too many cells in CSV row: " + path_.string());
  if (in_row_++ > 0) out_ << ',';
}

CsvWriter& CsvWriter::cell(double v) {
  separator();
  out_ << format_double(v);
  return *this;
}

CsvWriter& CsvWriter::cell(long long v) {
  separator();
  out_ << v;
  return *this;
}

CsvWriter& CsvWriter::cell(const std::string& v) {
  separator();
  out_ << v;
  return *this;
}

void CsvWriter::end_row() {
  if (in_row_ != columns_) throw std::logic_error("incomplete CSV row: " + path_.string());
  out_ << '\n';
  in_row_ = 0;
}

}  // namespace regguide
