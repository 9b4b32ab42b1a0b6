#pragma once

/// \file io.hpp
/// On-disk formats: IMDF field snapshots, RFC-4180 metric CSVs, grayscale
/// PNG images with a JSON sidecar, and atomic file replacement.

#include "imdiff/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace imdiff::io {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes \p bytes to a temporary sibling of \p path, then renames it over
/// \p path.  Parent directories are created.
void write_atomic(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

// ---------------------------------------------------------------------------
// IMDF: "IMDF", u32 version, u32 nx, u32 ny, f64 time, nx*ny f64 (little endian)

inline constexpr std::uint32_t kImdfVersion = 1;

struct FieldSnapshot {
  std::uint32_t nx = 0;
  std::uint32_t ny = 0;
  double time = 0.0;
  Vector values;
};

std::string encode_imdf(const FieldSnapshot& field);
FieldSnapshot decode_imdf(std::string_view bytes);
void write_imdf(const fs::path& path, const FieldSnapshot& field);
FieldSnapshot read_imdf(const fs::path& path);

// ---------------------------------------------------------------------------
// CSV

using CsvRow = std::vector<std::string>;

std::string csv_escape(std::string_view field);
std::string format_csv_row(const CsvRow& row);
/// Parses a whole RFC-4180 document (quoted fields may contain CR, LF, commas).
std::vector<CsvRow> parse_csv(std::string_view text);

/// Formats a double so that it parses back to the same value.
std::string format_double(double v);

/// Table with a fixed header.  Every flush rewrites the file atomically, so a
/// crash leaves the last flushed state on disk.
class CsvTable {
 public:
  CsvTable(fs::path path, CsvRow header);

  const CsvRow& header() const { return header_; }
  const std::vector<CsvRow>& rows() const { return rows_; }
  void append(CsvRow row);
  void flush() const;
  /// Loads rows from an existing file with an identical header.
  void load_existing();

 private:
  fs::path path_;
  CsvRow header_;
  std::vector<CsvRow> rows_;
};

// ---------------------------------------------------------------------------
// Images

/// 8-bit grayscale PNG, \p pixels row-major top to bottom.
void write_png_gray(const fs::path& path, std::uint32_t width, std::uint32_t height,
                    const std::vector<std::uint8_t>& pixels);

struct PngImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> pixels;
};
PngImage read_png_gray(const fs::path& path);

/// Renders a cell field (row-major i + nx j) with min/max normalisation; y
/// increases upwards in the image.  Writes <path> and <path>.json holding
/// min, max, nx, ny.
void write_field_png(const fs::path& path, const Vector& values, Index nx, Index ny);

/// Horizontal bar chart of non-negative values, one bar per entry, with a
/// sidecar JSON listing labels and values.
void write_bar_chart_png(const fs::path& path, const std::vector<std::string>& labels,
                         const std::vector<double>& values);

}  // namespace imdiff::io
