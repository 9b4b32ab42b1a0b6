#include "imdiff/io.hpp"

#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace imdiff::io {
namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

std::uint64_t get_le(std::string_view in, std::size_t pos, int width) {
  std::uint64_t v = 0;
  for (int b = 0; b < width; ++b)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(b)])) << (8 * b);
  return v;
}

std::string temp_name(const fs::path& path) {
  static std::mt19937_64 rng(std::random_device{}());
  std::ostringstream os;
  os << path.filename().string() << ".tmp." << std::hex << rng();
  return os.str();
}

}  // namespace

void write_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.parent_path() / temp_name(path);
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string() + ": " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------
// IMDF

std::string encode_imdf(const FieldSnapshot& field) {
  if (static_cast<Index>(field.nx) * field.ny != field.values.size()) {
    throw IoError("IMDF: value count does not match nx * ny");
  }
  std::string out = "IMDF";
  out.reserve(24 + 8 * static_cast<std::size_t>(field.values.size()));
  put_u32(out, kImdfVersion);
  put_u32(out, field.nx);
  put_u32(out, field.ny);
  put_f64(out, field.time);
  for (Index i = 0; i < field.values.size(); ++i) put_f64(out, field.values[i]);
  return out;
}

FieldSnapshot decode_imdf(std::string_view in) {
  if (in.size() < 24 || in.substr(0, 4) != "IMDF") throw IoError("IMDF: bad magic or truncated header");
  const auto version = static_cast<std::uint32_t>(get_le(in, 4, 4));
  if (version != kImdfVersion) throw IoError("IMDF: unsupported version " + std::to_string(version));
  FieldSnapshot f;
  f.nx = static_cast<std::uint32_t>(get_le(in, 8, 4));
  f.ny = static_cast<std::uint32_t>(get_le(in, 12, 4));
  f.time = std::bit_cast<double>(get_le(in, 16, 8));
  const std::size_t n = static_cast<std::size_t>(f.nx) * f.ny;
  if (in.size() != 24 + 8 * n) {
    throw IoError("IMDF: expected " + std::to_string(24 + 8 * n) + " bytes, found " + std::to_string(in.size()));
  }
  f.values.resize(static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i) f.values[static_cast<Index>(i)] = std::bit_cast<double>(get_le(in, 24 + 8 * i, 8));
  return f;
}

void write_imdf(const fs::path& path, const FieldSnapshot& field) { write_atomic(path, encode_imdf(field)); }

FieldSnapshot read_imdf(const fs::path& path) {
  try {
    return decode_imdf(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string format_csv_row(const CsvRow& row) {
  std::string out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out.push_back(',');
    out += csv_escape(row[i]);
  }
  out += "\r\n";
  return out;
}

std::vector<CsvRow> parse_csv(std::string_view text) {
  std::vector<CsvRow> rows;
  CsvRow row;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t i = 0;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row.clear();
  };
  while (i < text.size()) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          i += 2;
          continue;
        }
        quoted = false;
      } else {
        field.push_back(c);
      }
      ++i;
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      end_row();
      ++i;
    } else if (c == '\n') {
      end_row();
    } else {
      field.push_back(c);
      field_started = true;
    }
    ++i;
  }
  if (quoted) throw IoError("CSV: unterminated quoted field");
  if (field_started || !row.empty()) end_row();
  return rows;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

CsvTable::CsvTable(fs::path path, CsvRow header) : path_(std::move(path)), header_(std::move(header)) {}

void CsvTable::append(CsvRow row) {
  if (row.size() != header_.size()) {
    throw IoError("CSV " + path_.string() + ": row has " + std::to_string(row.size()) + " fields, header has " +
                  std::to_string(header_.size()));
  }
  rows_.push_back(std::move(row));
}

void CsvTable::flush() const {
  std::string out = format_csv_row(header_);
  for (const CsvRow& r : rows_) out += format_csv_row(r);
  write_atomic(path_, out);
}

void CsvTable::load_existing() {
  auto rows = parse_csv(read_file(path_));
  if (rows.empty() || rows.front() != header_) throw IoError("CSV " + path_.string() + ": header mismatch");
  rows_.assign(rows.begin() + 1, rows.end());
}

// ---------------------------------------------------------------------------
// PNG

void write_png_gray(const fs::path& path, std::uint32_t width, std::uint32_t height,
                    const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) throw IoError("PNG: pixel count mismatch");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = width;
  img.height = height;
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG: ") + img.message);
  }
  std::string buf(size, '\0');
  if (!png_image_write_to_memory(&img, buf.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG: ") + img.message);
  }
  buf.resize(size);
  write_atomic(path, buf);
}

PngImage read_png_gray(const fs::path& path) {
  const std::string bytes = read_file(path);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw IoError(path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_GRAY;
  PngImage out;
  out.width = img.width;
  out.height = img.height;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    throw IoError(path.string() + ": " + img.message);
  }
  return out;
}

void write_field_png(const fs::path& path, const Vector& values, Index nx, Index ny) {
  if (values.size() != nx * ny) throw IoError("field image: value count does not match grid");
  const double lo = values.size() ? values.minCoeff() : 0.0;
  const double hi = values.size() ? values.maxCoeff() : 0.0;
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(nx * ny));
  for (Index j = 0; j < ny; ++j) {
    for (Index i = 0; i < nx; ++i) {
      const double s = std::clamp((values[i + nx * j] - lo) / span, 0.0, 1.0);
      px[static_cast<std::size_t>((ny - 1 - j) * nx + i)] = static_cast<std::uint8_t>(std::lround(255.0 * s));
    }
  }
  write_png_gray(path, static_cast<std::uint32_t>(nx), static_cast<std::uint32_t>(ny), px);
  nlohmann::json side{{"min", lo}, {"max", hi}, {"nx", nx}, {"ny", ny}, {"origin", "lower"}};
  write_atomic(fs::path(path.string() + ".json"), side.dump(2) + "\n");
}

void write_bar_chart_png(const fs::path& path, const std::vector<std::string>& labels,
                         const std::vector<double>& values) {
  if (labels.size() != values.size()) throw IoError("bar chart: labels and values differ in length");
  constexpr std::uint32_t width = 400, bar = 16, gap = 6;
  const auto n = static_cast<std::uint32_t>(values.size());
  const std::uint32_t height = std::max<std::uint32_t>(1, n * (bar + gap) + gap);
  double vmax = 0.0;
  for (double v : values)
    if (std::isfinite(v)) vmax = std::max(vmax, v);
  std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height, 255);
  for (std::uint32_t k = 0; k < n; ++k) {
    const double v = std::isfinite(values[k]) ? std::max(values[k], 0.0) : 0.0;
    const auto len = static_cast<std::uint32_t>(vmax > 0.0 ? std::lround((width - 1) * v / vmax) : 0);
    const std::uint32_t top = gap + k * (bar + gap);
    for (std::uint32_t y = top; y < top + bar; ++y)
      for (std::uint32_t x = 0; x < len; ++x) px[static_cast<std::size_t>(y) * width + x] = 40;
  }
  write_png_gray(path, width, height, px);
  nlohmann::json side{{"labels", labels}, {"values", nlohmann::json::array()}, {"max", vmax}};
  for (double v : values) side["values"].push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
  write_atomic(fs::path(path.string() + ".json"), side.dump(2) + "\n");
}

}  // namespace imdiff::io
