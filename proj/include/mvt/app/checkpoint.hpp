#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mvt/core/adamw.hpp"
#include "mvt/core/error.hpp"
#include "mvt/core/tape.hpp"
#include "mvt/core/tensor.hpp"
#include "mvt/data/io.hpp"

namespace mvt {

// Layout: 8-byte magic, u64 header length, JSON header, raw tensor blob.
inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr int kCheckpointVersion = 1;

template <std::floating_point T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

struct StoredTensor {
  std::string name;
  Shape shape;
  std::string dtype;
  std::string bytes;
};

class Checkpoint {
 public:
  nlohmann::json meta = nlohmann::json::object();

  template <std::floating_point T>
  void put(const std::string& name, const Tensor<T>& t) {
    if (find(name)) throw ConfigError("checkpoint: duplicate tensor '" + name + "'");
    StoredTensor s{name, t.shape(), dtype_name<T>(), {}};
    s.bytes.resize(t.size() * sizeof(T));
    std::memcpy(s.bytes.data(), t.data().data(), s.bytes.size());
    tensors_.push_back(std::move(s));
  }

  template <std::floating_point T>
  [[nodiscard]] Tensor<T> get(const std::string& name) const {
    const auto* s = find(name);
    if (!s) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (s->dtype != dtype_name<T>()) {
      throw FormatError("checkpoint: tensor '" + name + "' has dtype " + s->dtype);
    }
    Tensor<T> t(s->shape);
    std::memcpy(t.data().data(), s->bytes.data(), s->bytes.size());
    return t;
  }

  [[nodiscard]] const StoredTensor* find(const std::string& name) const {
    for (const auto& s : tensors_) {
      if (s.name == name) return &s;
    }
    return nullptr;
  }

  [[nodiscard]] const std::vector<StoredTensor>& tensors() const noexcept { return tensors_; }

  void add_raw(StoredTensor s) { tensors_.push_back(std::move(s)); }

 private:
  std::vector<StoredTensor> tensors_;
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json dir = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& s : ck.tensors()) {
    dir.push_back({{"name", s.name},
                   {"shape", s.shape},
                   {"dtype", s.dtype},
                   {"offset", offset},
                   {"nbytes", s.bytes.size()}});
    offset += s.bytes.size();
  }
  const nlohmann::json header = {{"format_version", kCheckpointVersion},
                                 {"tensors", dir},
                                 {"blob_bytes", offset},
                                 {"meta", ck.meta}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 8);
  put_raw<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& s : ck.tensors()) out += s.bytes;
  return out;
}

/// Validates the whole header against the blob before materializing anything.
inline Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto header_len = get_raw<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: unreadable header: ") + e.what());
  }
  const std::string_view blob = bytes.substr(16 + header_len);

  struct Entry {
    std::string name, dtype;
    Shape shape;
    std::size_t offset, nbytes;
  };
  std::vector<Entry> entries;
  try {
    if (header.at("format_version").get<int>() != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported format version " +
                        header.at("format_version").dump());
    }
    if (header.at("blob_bytes").get<std::size_t>() != blob.size()) {
      throw FormatError("checkpoint: blob is " + std::to_string(blob.size()) +
                        " bytes, header says " + header.at("blob_bytes").dump());
    }
    for (const auto& t : header.at("tensors")) {
      Entry e{t.at("name").get<std::string>(), t.at("dtype").get<std::string>(),
              t.at("shape").get<Shape>(), t.at("offset").get<std::size_t>(),
              t.at("nbytes").get<std::size_t>()};
      entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }

  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& e : entries) {
    std::size_t width = 0;
    if (e.dtype == "f32") width = 4;
    else if (e.dtype == "f64") width = 8;
    else throw FormatError("checkpoint: unknown dtype '" + e.dtype + "' for " + e.name);
    if (e.shape.empty() || std::find(e.shape.begin(), e.shape.end(), 0u) != e.shape.end()) {
      throw FormatError("checkpoint: bad shape for " + e.name);
    }
    if (shape_numel(e.shape) * width != e.nbytes) {
      throw FormatError("checkpoint: byte count of " + e.name + " does not match its shape");
    }
    if (e.offset > blob.size() || e.nbytes > blob.size() - e.offset) {
      throw FormatError("checkpoint: tensor " + e.name + " lies outside the blob");
    }
    spans.emplace_back(e.offset, e.nbytes);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i - 1].first + spans[i - 1].second > spans[i].first) {
      throw FormatError("checkpoint: overlapping tensor offsets");
    }
  }

  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  for (auto& e : entries) {
    if (ck.find(e.name)) throw FormatError("checkpoint: duplicate tensor '" + e.name + "'");
    ck.add_raw({e.name, e.shape, e.dtype, std::string(blob.substr(e.offset, e.nbytes))});
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

template <std::floating_point T>
void store_parameters(Checkpoint& ck, const std::vector<Parameter<T>*>& params) {
  for (const auto* p : params) ck.put(p->name, p->value);
}

template <std::floating_point T>
void restore_parameters(const Checkpoint& ck, const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) {
    auto t = ck.get<T>(p->name);
    if (t.shape() != p->value.shape()) {
      throw FormatError("checkpoint: " + p->name + " has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(p->value.shape()));
    }
    p->value = std::move(t);
  }
}

template <std::floating_point T>
void store_optimizer(Checkpoint& ck, const std::string& prefix, AdamW<T>& opt) {
  for (std::size_t i = 0; i < opt.size(); ++i) {
    ck.put(prefix + ".m." + opt.param(i).name, opt.first_moment(i));
    ck.put(prefix + ".v." + opt.param(i).name, opt.second_moment(i));
  }
  ck.meta[prefix] = {{"step", opt.step_count()}, {"lr", opt.lr()}};
}

template <std::floating_point T>
void restore_optimizer(const Checkpoint& ck, const std::string& prefix, AdamW<T>& opt) {
  if (!ck.meta.contains(prefix)) throw FormatError("checkpoint: no optimizer state '" + prefix + "'");
  for (std::size_t i = 0; i < opt.size(); ++i) {
    opt.first_moment(i) = ck.get<T>(prefix + ".m." + opt.param(i).name);
    opt.second_moment(i) = ck.get<T>(prefix + ".v." + opt.param(i).name);
  }
  const auto& st = ck.meta[prefix];
  opt.restore(st.at("step").get<std::uint64_t>(), st.at("lr").get<double>());
}

/// FNV-1a over parameter names and raw values.
template <std::floating_point T>
std::uint64_t parameter_fingerprint(const std::vector<Parameter<T>*>& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto* p : params) {
    mix(p->name.data(), p->name.size());
    mix(p->value.data().data(), p->value.size() * sizeof(T));
  }
  return h;
}

}  // namespace mvt
