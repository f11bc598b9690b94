#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mvt/core/error.hpp"
#include "mvt/data/dataset.hpp"

namespace mvt {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written as host-order little-endian");

namespace fs = std::filesystem;

/// Writes to `path.tmp` and renames over `path`.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class U>
void put_raw(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <class U>
U get_raw(std::string_view bytes, std::size_t offset) {
  if (offset + sizeof(U) > bytes.size()) throw FormatError("unexpected end of data");
  U v;
  std::memcpy(&v, bytes.data() + offset, sizeof(U));
  return v;
}

inline constexpr char kImageMagic[4] = {'M', 'V', 'T', 'D'};
inline constexpr std::uint32_t kImageVersion = 1;
inline constexpr std::size_t kImageHeaderBytes = 24;

namespace detail {

inline std::string join_indices(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ';';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<std::size_t> split_indices(const std::string& s) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ';')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(tok, &used));
      if (used != tok.size()) throw FormatError("bad index '" + tok + "'");
    } catch (const std::logic_error&) {
      throw FormatError("bad index '" + tok + "'");
    }
  }
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline long parse_long(const std::string& s) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used != s.size()) throw FormatError("bad integer '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad integer '" + s + "'");
  }
}

}  // namespace detail

/// Writes `<prefix>.bin` (header: magic, version, n, H, W, C as u32, then
/// float32 pixels) and `<prefix>.csv` (labels and metadata).
template <std::floating_point T>
void save_split(const fs::path& prefix, std::span<const SyntheticSample<T>> samples,
                const PatchGrid& grid) {
  std::string bin;
  bin.append(kImageMagic, 4);
  put_raw<std::uint32_t>(bin, kImageVersion);
  put_raw<std::uint32_t>(bin, static_cast<std::uint32_t>(samples.size()));
  put_raw<std::uint32_t>(bin, static_cast<std::uint32_t>(grid.height));
  put_raw<std::uint32_t>(bin, static_cast<std::uint32_t>(grid.width));
  put_raw<std::uint32_t>(bin, static_cast<std::uint32_t>(grid.channels));
  std::string csv = "id,observed_label,true_label,occluded,occluder_patches,informative_patches\n";
  for (const auto& s : samples) {
    if (s.image.size() != grid.pixels()) throw ShapeError("save_split: image size mismatch");
    for (auto v : s.image.data()) put_raw<float>(bin, static_cast<float>(v));
    csv += std::to_string(s.id) + ',' + std::to_string(s.observed_label) + ',' +
           std::to_string(HiddenTruth::label(s)) + ',' + (s.occluded ? "1" : "0") + ',' +
           detail::join_indices(s.occluder_patches) + ',' +
           detail::join_indices(s.informative_patches) + '\n';
  }
  fs::path bin_path = prefix, csv_path = prefix;
  bin_path += ".bin";
  csv_path += ".csv";
  write_file_atomic(bin_path, bin);
  write_file_atomic(csv_path, csv);
}

/// Reads a split written by save_split. Either the whole split loads or a
/// FormatError is thrown.
template <std::floating_point T>
std::vector<SyntheticSample<T>> load_split(const fs::path& prefix, PatchGrid* grid_out = nullptr) {
  fs::path bin_path = prefix, csv_path = prefix;
  bin_path += ".bin";
  csv_path += ".csv";
  const std::string bin = read_file(bin_path);
  if (bin.size() < kImageHeaderBytes || std::memcmp(bin.data(), kImageMagic, 4) != 0) {
    throw FormatError(bin_path.string() + ": bad magic");
  }
  if (get_raw<std::uint32_t>(bin, 4) != kImageVersion) {
    throw FormatError(bin_path.string() + ": unsupported version");
  }
  const std::size_t n = get_raw<std::uint32_t>(bin, 8);
  const std::size_t h = get_raw<std::uint32_t>(bin, 12);
  const std::size_t w = get_raw<std::uint32_t>(bin, 16);
  const std::size_t c = get_raw<std::uint32_t>(bin, 20);
  if (h == 0 || w == 0 || c == 0) throw FormatError(bin_path.string() + ": zero dimension");
  const std::size_t pixels = h * w * c;
  if (bin.size() != kImageHeaderBytes + n * pixels * sizeof(float)) {
    throw FormatError(bin_path.string() + ": header count " + std::to_string(n) +
                      " inconsistent with file length " + std::to_string(bin.size()));
  }
  std::stringstream csv(read_file(csv_path));
  std::string line;
  if (!std::getline(csv, line) ||
      line != "id,observed_label,true_label,occluded,occluder_patches,informative_patches") {
    throw FormatError(csv_path.string() + ": bad header");
  }
  std::vector<SyntheticSample<T>> out;
  out.reserve(n);
  std::size_t offset = kImageHeaderBytes;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 6) throw FormatError(csv_path.string() + ": bad row '" + line + "'");
    if (out.size() == n) throw FormatError(csv_path.string() + ": more rows than images");
    Tensor<T> img({h, w, c});
    for (auto& v : img.data()) {
      v = static_cast<T>(get_raw<float>(bin, offset));
      offset += sizeof(float);
    }
    SyntheticSample<T> s(static_cast<std::size_t>(detail::parse_long(cells[0])), std::move(img),
                         static_cast<int>(detail::parse_long(cells[2])));
    s.observed_label = static_cast<int>(detail::parse_long(cells[1]));
    s.occluded = detail::parse_long(cells[3]) != 0;
    s.occluder_patches = detail::split_indices(cells[4]);
    s.informative_patches = detail::split_indices(cells[5]);
    out.push_back(std::move(s));
  }
  if (out.size() != n) {
    throw FormatError(csv_path.string() + ": " + std::to_string(out.size()) + " rows for " +
                      std::to_string(n) + " images");
  }
  if (grid_out) {
    grid_out->height = h;
    grid_out->width = w;
    grid_out->channels = c;
  }
  return out;
}

}  // namespace mvt
