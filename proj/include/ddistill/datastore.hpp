// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ddistill/config.hpp"
#include "ddistill/convnet.hpp"
#include "ddistill/data.hpp"
#include "ddistill/denoiser.hpp"
#include "ddistill/error.hpp"
#include "ddistill/metrics.hpp"
#include "ddistill/params.hpp"
#include "ddistill/rng.hpp"
#include "ddistill/trainer.hpp"

namespace ddistill {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace io {

class Writer {
 public:
  template <class I>
  void put(I v) {
    static_assert(std::is_trivially_copyable_v<I>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof v);
  }
  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, std::string what) : b_(b), what_(std::move(what)) {}

  template <class I>
  I get() {
    need(sizeof(I));
    I v;
    std::memcpy(&v, b_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    const auto s = get_bytes(n);
    return std::string(s.begin(), s.end());
  }
  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw DataError(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround((static_cast<double>(v) + 1.0) * 127.5), 0L, 255L));
}

inline float dequantize(std::uint8_t q) { return static_cast<float>(q / 127.5 - 1.0); }

}  // namespace io

// ---------------------------------------------------------------------------
// Dataset files

struct DatasetHeader {
  static constexpr char kMagic[4] = {'D', 'D', 'S', '1'};
  static constexpr std::uint16_t kVersion = 1;
  static constexpr std::size_t kSize = 18;

  std::uint16_t version = kVersion;
  std::uint32_t count = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint8_t channels = 0;
  std::uint16_t num_classes = 0;
  std::uint8_t encoding = 0;

  std::size_t pixel_bytes() const { return static_cast<std::size_t>(height) * width * channels; }
  std::size_t item_bytes() const { return pixel_bytes() + 2; }
  std::size_t payload_bytes() const { return item_bytes() * count; }

  void write(io::Writer& w) const {
    for (char c : kMagic) w.put<char>(c);
    w.put(version), w.put(count), w.put(height), w.put(width), w.put(channels), w.put(num_classes), w.put(encoding);
  }

  static DatasetHeader read(io::Reader& r) {
    if (r.remaining() < kSize) throw DataError("dataset: file shorter than the 18-byte header");
    const auto magic = r.get_bytes(4);
    if (!std::equal(magic.begin(), magic.end(), kMagic)) throw DataError("dataset: bad magic (expected DDS1)");
    DatasetHeader h;
    h.version = r.get<std::uint16_t>();
    if (h.version != kVersion) throw DataError("dataset: unsupported version " + std::to_string(h.version));
    h.count = r.get<std::uint32_t>();
    h.height = r.get<std::uint16_t>();
    h.width = r.get<std::uint16_t>();
    h.channels = r.get<std::uint8_t>();
    h.num_classes = r.get<std::uint16_t>();
    h.encoding = r.get<std::uint8_t>();
    if (h.encoding != 0) throw DataError("dataset: unsupported pixel encoding " + std::to_string(h.encoding));
    if (h.count == 0) throw DataError("dataset: item count is zero");
    if (h.num_classes == 0) throw DataError("dataset: class count is zero");
    if (h.pixel_bytes() == 0) throw DataError("dataset: zero image size");
    return h;
  }
};

inline std::vector<std::uint8_t> encode_dataset(const LabeledImageBatch& data) {
  if (data.empty()) throw DataError("dataset: refusing to write an empty dataset");
  if (data.num_classes < 1 || data.num_classes > 0xFFFF) throw DataError("dataset: class count out of range");
  if (data.height < 1 || data.height > 0xFFFF || data.width < 1 || data.width > 0xFFFF || data.channels < 1 ||
      data.channels > 0xFF) {
    throw DataError("dataset: image geometry out of range");
  }
  if (data.size() > 0xFFFFFFFFull) throw DataError("dataset: too many items");
  data.validate_labels();
  DatasetHeader h;
  h.count = static_cast<std::uint32_t>(data.size());
  h.height = static_cast<std::uint16_t>(data.height);
  h.width = static_cast<std::uint16_t>(data.width);
  h.channels = static_cast<std::uint8_t>(data.channels);
  h.num_classes = static_cast<std::uint16_t>(data.num_classes);
  io::Writer w;
  w.bytes().reserve(DatasetHeader::kSize + h.payload_bytes());
  h.write(w);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (float v : data.image(i)) w.put(io::quantize(v));
    w.put(static_cast<std::uint16_t>(data.labels[i]));
  }
  return std::move(w.bytes());
}

inline LabeledImageBatch decode_dataset(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "dataset");
  const DatasetHeader h = DatasetHeader::read(r);
  const std::size_t have = r.remaining();
  if (have < h.payload_bytes()) {
    throw DataError("dataset: truncated payload at item " + std::to_string(have / h.item_bytes()) + " of " +
                    std::to_string(h.count));
  }
  if (have > h.payload_bytes()) {
    throw DataError("dataset: " + std::to_string(have - h.payload_bytes()) + " trailing bytes after the payload");
  }
  LabeledImageBatch out;
  out.channels = h.channels, out.height = h.height, out.width = h.width, out.num_classes = h.num_classes;
  out.pixels.resize(static_cast<std::size_t>(h.count) * h.pixel_bytes());
  out.labels.resize(h.count);
  for (std::size_t i = 0; i < h.count; ++i) {
    const auto px = r.get_bytes(h.pixel_bytes());
    for (std::size_t k = 0; k < px.size(); ++k) out.pixels[i * h.pixel_bytes() + k] = io::dequantize(px[k]);
    const auto label = r.get<std::uint16_t>();
    if (label >= h.num_classes) {
      throw DataError("dataset: label " + std::to_string(label) + " at item " + std::to_string(i) + " >= C = " +
                      std::to_string(h.num_classes));
    }
    out.labels[i] = label;
  }
  return out;
}

inline void write_dataset(const LabeledImageBatch& data, const std::string& path) {
  io::write_file_atomic(path, encode_dataset(data));
}

inline LabeledImageBatch read_dataset(const std::string& path) {
  try {
    return decode_dataset(io::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

/// Item-at-a-time access. Each reader owns its stream, so separate readers on
/// one file are independent.
class DatasetReader {
 public:
  explicit DatasetReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw DataError("cannot open '" + path + "'");
    std::vector<std::uint8_t> head(DatasetHeader::kSize);
    in_.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in_.gcount()));
    io::Reader r(head, "dataset");
    header_ = DatasetHeader::read(r);
    in_.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in_.tellg());
    const std::size_t have = size - DatasetHeader::kSize;
    if (have < header_.payload_bytes()) {
      throw DataError(path + ": truncated payload at item " + std::to_string(have / header_.item_bytes()));
    }
    if (have > header_.payload_bytes()) throw DataError(path + ": trailing bytes after the payload");
  }

  const DatasetHeader& header() const { return header_; }
  std::size_t size() const { return header_.count; }

  /// Pixels normalized to [-1, 1] and the label of item k.
  std::pair<std::vector<float>, int> read(std::size_t k) {
    if (k >= size()) throw DataError("dataset: item " + std::to_string(k) + " out of range");
    std::vector<std::uint8_t> buf(header_.item_bytes());
    in_.seekg(static_cast<std::streamoff>(DatasetHeader::kSize + k * header_.item_bytes()));
    in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in_.gcount() != static_cast<std::streamsize>(buf.size())) {
      throw DataError(path_ + ": truncated payload at item " + std::to_string(k));
    }
    std::vector<float> px(header_.pixel_bytes());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = io::dequantize(buf[i]);
    std::uint16_t label;
    std::memcpy(&label, buf.data() + header_.pixel_bytes(), 2);
    if (label >= header_.num_classes) {
      throw DataError(path_ + ": label " + std::to_string(label) + " at item " + std::to_string(k) + " >= C");
    }
    return {std::move(px), label};
  }

 private:
  std::string path_;
  std::ifstream in_;
  DatasetHeader header_;
};

// ---------------------------------------------------------------------------
// CIFAR-style record files: per record, `label_bytes` label bytes followed by
// a channel-major u8 pixel block.

struct RecordLayout {
  int label_bytes = 1;
  int label_index = 0;  // which label byte carries the class
  int channels = 3;
  int height = 32;
  int width = 32;
  int num_classes = 10;

  std::size_t record_bytes() const {
    return static_cast<std::size_t>(label_bytes) + static_cast<std::size_t>(channels) * height * width;
  }

  void validate() const {
    detail::require(label_bytes >= 1 && label_index >= 0 && label_index < label_bytes,
                    "layout: label_index must address one of label_bytes");
    detail::require(channels >= 1 && height >= 1 && width >= 1, "layout: image geometry must be positive");
    detail::require(num_classes >= 1 && num_classes <= 256, "layout: classes must lie in [1, 256]");
  }

  /// "cifar10", "cifar100", or comma-separated key=value pairs over
  /// label_bytes, label_index, channels, height, width, classes.
  static RecordLayout parse(const std::string& text) {
    RecordLayout l;
    if (text == "cifar10") return l;
    if (text == "cifar100") {
      l.label_bytes = 2, l.label_index = 1, l.num_classes = 100;
      return l;
    }
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const auto end = std::min(text.find(',', pos), text.size());
      const std::string item = detail::trim(text.substr(pos, end - pos));
      pos = end + 1;
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("layout: expected key=value, got '" + item + "'");
      const std::string k = detail::trim(item.substr(0, eq));
      const int v = static_cast<int>(detail::parse_int("layout." + k, detail::trim(item.substr(eq + 1))));
      if (k == "label_bytes") l.label_bytes = v;
      else if (k == "label_index") l.label_index = v;
      else if (k == "channels") l.channels = v;
      else if (k == "height") l.height = v;
      else if (k == "width") l.width = v;
      else if (k == "classes") l.num_classes = v;
      else throw ConfigError("layout: unknown key '" + k + "'");
    }
    l.validate();
    return l;
  }
};

inline LabeledImageBatch import_cifar_style(std::span<const std::uint8_t> bytes, const RecordLayout& layout) {
  layout.validate();
  const std::size_t rec = layout.record_bytes();
  if (bytes.empty()) throw DataError("import: source is empty");
  if (bytes.size() % rec != 0) {
    throw DataError("import: record-size mismatch (" + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                    std::to_string(rec) + ")");
  }
  LabeledImageBatch out;
  out.channels = layout.channels, out.height = layout.height, out.width = layout.width;
  out.num_classes = layout.num_classes;
  const std::size_t n = bytes.size() / rec, px = rec - static_cast<std::size_t>(layout.label_bytes);
  out.pixels.resize(n * px);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* r = bytes.data() + i * rec;
    const int label = r[layout.label_index];
    if (label >= layout.num_classes) {
      throw DataError("import: label " + std::to_string(label) + " in record " + std::to_string(i) +
                      " overflows class count " + std::to_string(layout.num_classes));
    }
    out.labels[i] = label;
    for (std::size_t k = 0; k < px; ++k) out.pixels[i * px + k] = io::dequantize(r[layout.label_bytes + k]);
  }
  return out;
}

inline void import_cifar_style(const std::string& source, const RecordLayout& layout, const std::string& dest) {
  write_dataset(import_cifar_style(io::read_file(source), layout), dest);
}

/// Inverse of import; label bytes other than `label_index` are written as 0.
inline std::vector<std::uint8_t> export_cifar_style(const LabeledImageBatch& data, const RecordLayout& layout) {
  layout.validate();
  if (data.channels != layout.channels || data.height != layout.height || data.width != layout.width) {
    throw DataError("export: dataset geometry does not match the layout");
  }
  std::vector<std::uint8_t> out;
  out.reserve(data.size() * layout.record_bytes());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] < 0 || data.labels[i] >= layout.num_classes) {
      throw DataError("export: label " + std::to_string(data.labels[i]) + " does not fit the layout");
    }
    for (int b = 0; b < layout.label_bytes; ++b) {
      out.push_back(b == layout.label_index ? static_cast<std::uint8_t>(data.labels[i]) : 0);
    }
    for (float v : data.image(i)) out.push_back(io::quantize(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  static constexpr char kMagic[4] = {'D', 'D', 'C', 'K'};
  static constexpr std::uint16_t kVersion = 1;

  /// Identifies the layout of the encoding itself.
  static std::uint64_t format_fingerprint() { return fnv1a("ddistill.checkpoint/v1/f32le/fnv1a-trailer"); }

  std::string kind;    // "denoiser" or "classifier"
  std::string config;  // `section.key = value` echo of the model configuration
  ParamStore<float> params;
  std::optional<ParamStore<float>> adam_m;
  std::optional<ParamStore<float>> adam_v;
  std::uint64_t adam_step = 0;
  std::optional<ParamStore<float>> ema;
  std::int64_t iteration = 0;
  std::string rng_state;

  /// Hash of kind, config and weights; used as provenance downstream.
  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a(kind, fnv1a("ddistill.checkpoint"));
    h = fnv1a(config, h);
    const std::uint64_t p = params.fingerprint();
    return fnv1a(&p, sizeof p, h);
  }

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_tensors(io::Writer& w, const ParamStore<float>& store) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.count()));
  for (const auto& e : store.entries()) {
    w.put_string(e.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.value.shape().size()));
    for (auto d : e.value.shape()) w.put<std::uint64_t>(d);
    for (std::size_t i = 0; i < e.value.size(); ++i) w.put<float>(e.value[i]);
  }
}

inline ParamStore<float> get_tensors(io::Reader& r) {
  ParamStore<float> store;
  const auto count = r.get<std::uint32_t>();
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.get_string();
    if (!seen.insert(name).second) throw DataError("checkpoint: duplicate tensor '" + name + "'");
    const auto ndim = r.get<std::uint32_t>();
    if (ndim > 8) throw DataError("checkpoint: tensor '" + name + "' has implausible rank");
    Shape shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      if (d != 0 && numel > r.remaining() / d) throw DataError("checkpoint: tensor '" + name + "' exceeds file");
      numel *= d;
    }
    if (numel * sizeof(float) > r.remaining()) throw DataError("checkpoint: tensor '" + name + "' truncated");
    auto& t = store.add(name, shape);
    const auto raw = r.get_bytes(numel * sizeof(float));
    std::memcpy(t.data(), raw.data(), raw.size());
  }
  return store;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  if (c.adam_m.has_value() != c.adam_v.has_value()) throw ConfigError("checkpoint: optimizer moments incomplete");
  io::Writer w;
  for (char ch : Checkpoint::kMagic) w.put<char>(ch);
  w.put<std::uint16_t>(Checkpoint::kVersion);
  w.put<std::uint64_t>(Checkpoint::format_fingerprint());
  w.put_string(c.kind);
  w.put_string(c.config);
  w.put<std::int64_t>(c.iteration);
  w.put_string(c.rng_state);
  const std::uint8_t flags = (c.adam_m ? 1 : 0) | (c.ema ? 2 : 0);
  w.put<std::uint8_t>(flags);
  detail::put_tensors(w, c.params);
  if (c.adam_m) {
    w.put<std::uint64_t>(c.adam_step);
    detail::put_tensors(w, *c.adam_m);
    detail::put_tensors(w, *c.adam_v);
  }
  if (c.ema) detail::put_tensors(w, *c.ema);
  const std::uint64_t sum = fnv1a(w.bytes().data(), w.bytes().size());
  w.put<std::uint64_t>(sum);
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 2 + 8 + 8) throw DataError("checkpoint: file too short");
  if (!std::equal(bytes.begin(), bytes.begin() + 4, Checkpoint::kMagic)) {
    throw DataError("checkpoint: bad magic (expected DDCK)");
  }
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (fnv1a(body.data(), body.size()) != stored) throw DataError("checkpoint: checksum mismatch (corrupt or truncated)");
  io::Reader r(body, "checkpoint");
  r.get_bytes(4);
  const auto version = r.get<std::uint16_t>();
  if (version != Checkpoint::kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  if (r.get<std::uint64_t>() != Checkpoint::format_fingerprint()) throw DataError("checkpoint: format fingerprint mismatch");
  Checkpoint c;
  c.kind = r.get_string();
  c.config = r.get_string();
  c.iteration = r.get<std::int64_t>();
  c.rng_state = r.get_string();
  const auto flags = r.get<std::uint8_t>();
  if (flags & ~3u) throw DataError("checkpoint: unknown flags");
  c.params = detail::get_tensors(r);
  if (flags & 1) {
    c.adam_step = r.get<std::uint64_t>();
    c.adam_m = detail::get_tensors(r);
    c.adam_v = detail::get_tensors(r);
    if (!c.adam_m->same_layout(c.params) || !c.adam_v->same_layout(c.params)) {
      throw DataError("checkpoint: optimizer state does not match parameters");
    }
  }
  if (flags & 2) {
    c.ema = detail::get_tensors(r);
    if (!c.ema->same_layout(c.params)) throw DataError("checkpoint: EMA weights do not match parameters");
  }
  if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes before checksum");
  return c;
}

inline void write_checkpoint(const Checkpoint& c, const std::string& path) {
  io::write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(io::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline std::string denoiser_config_text(const DenoiserConfig& m, const ScheduleConfig& s) {
  return to_config_text(m) + to_config_text(s);
}

inline Checkpoint make_checkpoint(const TrainState<float>& st, const ScheduleConfig& sched) {
  Checkpoint c;
  c.kind = "denoiser";
  c.config = denoiser_config_text(st.model.config(), sched);
  c.params = st.model.params();
  c.adam_m = st.opt.m;
  c.adam_v = st.opt.v;
  c.adam_step = st.opt.step;
  c.ema = st.ema;
  c.iteration = st.iteration;
  c.rng_state = st.rng.serialize();
  return c;
}

inline Checkpoint make_checkpoint(const ConvNet<float>& net) {
  Checkpoint c;
  c.kind = "classifier";
  c.config = to_config_text(net.config());
  c.params = net.params();
  return c;
}

inline void require_kind(const Checkpoint& c, const std::string& kind) {
  if (c.kind != kind) throw DataError("checkpoint holds a " + c.kind + ", expected a " + kind);
}

inline DenoiserConfig checkpoint_model_config(const Checkpoint& c) {
  require_kind(c, "denoiser");
  ConfigFile f = ConfigFile::parse(c.config, "checkpoint config");
  DenoiserConfig m;
  f.apply(config_fields(m));
  return m;
}

inline ScheduleConfig checkpoint_schedule(const Checkpoint& c) {
  require_kind(c, "denoiser");
  ConfigFile f = ConfigFile::parse(c.config, "checkpoint config");
  ScheduleConfig s;
  f.apply(config_fields(s));
  return s;
}

/// Full training state for resumption; optimizer moments default to zero
/// when the checkpoint carries none.
inline TrainState<float> restore_train_state(const Checkpoint& c) {
  const DenoiserConfig m = checkpoint_model_config(c);
  Denoiser<float> model(m, c.params);
  OptimizerState<float> opt = OptimizerState<float>::like(model.params());
  if (c.adam_m) {
    opt.m = *c.adam_m;
    opt.v = *c.adam_v;
    opt.step = c.adam_step;
  }
  Rng rng = c.rng_state.empty() ? Rng(0) : Rng::deserialize(c.rng_state);
  return TrainState<float>{std::move(model), std::move(opt), c.ema, static_cast<long>(c.iteration), std::move(rng)};
}

/// Weights for sampling: the EMA copy when present.
inline Denoiser<float> load_denoiser(const Checkpoint& c) {
  const DenoiserConfig m = checkpoint_model_config(c);
  return Denoiser<float>(m, c.ema ? *c.ema : c.params);
}

inline ConvNet<float> load_classifier(const Checkpoint& c) {
  require_kind(c, "classifier");
  ConfigFile f = ConfigFile::parse(c.config, "checkpoint config");
  ConvNetConfig cfg;
  f.apply(config_fields(cfg));
  return ConvNet<float>(cfg, c.params);
}

// ---------------------------------------------------------------------------
// Reference statistics

inline std::vector<std::uint8_t> encode_stats(const GaussianStats& s) {
  io::Writer w;
  for (char ch : {'D', 'D', 'S', 'T'}) w.put<char>(ch);
  w.put<std::uint16_t>(1);
  w.put<std::uint64_t>(s.fingerprint);
  w.put<std::uint64_t>(s.count());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.dim()));
  const Eigen::VectorXd mu = s.mean();
  const Eigen::MatrixXd cov = s.cov();
  for (Eigen::Index i = 0; i < mu.size(); ++i) w.put<double>(mu[i]);
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j) w.put<double>(cov(i, j));
  const std::uint64_t sum = fnv1a(w.bytes().data(), w.bytes().size());
  w.put<std::uint64_t>(sum);
  return std::move(w.bytes());
}

inline GaussianStats decode_stats(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 2 + 8 + 8 + 4 + 8) throw DataError("stats: file too short");
  const char magic[4] = {'D', 'D', 'S', 'T'};
  if (!std::equal(bytes.begin(), bytes.begin() + 4, magic)) throw DataError("stats: bad magic (expected DDST)");
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (fnv1a(body.data(), body.size()) != stored) throw DataError("stats: checksum mismatch");
  io::Reader r(body, "stats");
  r.get_bytes(4);
  if (r.get<std::uint16_t>() != 1) throw DataError("stats: unsupported version");
  const auto fp = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint32_t>();
  if (static_cast<std::uint64_t>(d) * (d + 1) * 8 != r.remaining()) throw DataError("stats: payload size mismatch");
  Eigen::VectorXd mu(d);
  Eigen::MatrixXd cov(d, d);
  for (std::uint32_t i = 0; i < d; ++i) mu[i] = r.get<double>();
  for (std::uint32_t i = 0; i < d; ++i)
    for (std::uint32_t j = 0; j < d; ++j) cov(i, j) = r.get<double>();
  GaussianStats s = GaussianStats::from_moments(n, mu, cov);
  s.fingerprint = fp;
  return s;
}

inline void write_stats(const GaussianStats& s, const std::string& path) { io::write_file_atomic(path, encode_stats(s)); }

inline GaussianStats read_stats(const std::string& path) {
  try {
    return decode_stats(io::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace ddistill
