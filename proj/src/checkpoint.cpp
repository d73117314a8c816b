// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <iterator>
#include <sstream>
#include <unistd.h>

namespace vitdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'B', 'C', 'K'};

// Appends to a buffer, or only counts bytes when `out` is null.
class Writer {
 public:
  explicit Writer(std::vector<char>* out) : out_(out) {}

  void raw(const void* data, std::size_t n) {
    if (out_) {
      const char* p = static_cast<const char*>(data);
      out_->insert(out_->end(), p, p + n);
    }
    count_ += n;
  }
  template <typename T>
  void pod(T v) {
    raw(&v, sizeof(T));
  }
  void string(const std::string& s) {
    pod<std::uint64_t>(s.size());
    raw(s.data(), s.size());
  }
  void tensor_header(const std::string& name, DType dtype, const Shape& shape, std::uint64_t nbytes) {
    string(name);
    pod<std::uint8_t>(static_cast<std::uint8_t>(dtype));
    pod<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (Index d : shape) pod<std::int64_t>(d);
    pod<std::uint64_t>(nbytes);
  }
  void table(const std::vector<NamedTensor>& tensors) {
    pod<std::uint64_t>(tensors.size());
    for (const auto& t : tensors) {
      tensor_header(t.name, t.dtype, t.shape, t.bytes.size());
      raw(t.bytes.data(), t.bytes.size());
    }
  }
  std::uint64_t count() const { return count_; }

 private:
  std::vector<char>* out_;
  std::uint64_t count_ = 0;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

  void raw(void* dst, std::size_t n) {
    if (n > size_ - pos_) throw CheckpointError(CheckpointErrorKind::Corrupt, "checkpoint truncated");
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  std::string string() {
    const auto n = pod<std::uint64_t>();
    if (n > size_ - pos_) throw CheckpointError(CheckpointErrorKind::Corrupt, "checkpoint truncated");
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<NamedTensor> table() {
    const auto count = pod<std::uint64_t>();
    std::vector<NamedTensor> out;
    for (std::uint64_t i = 0; i < count; ++i) {
      NamedTensor t;
      t.name = string();
      const auto dtype = pod<std::uint8_t>();
      if (dtype > 1) throw CheckpointError(CheckpointErrorKind::Corrupt, "unknown dtype in tensor '" + t.name + "'");
      t.dtype = static_cast<DType>(dtype);
      const auto rank = pod<std::uint32_t>();
      if (rank > 16) throw CheckpointError(CheckpointErrorKind::Corrupt, "implausible rank in tensor '" + t.name + "'");
      for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(pod<std::int64_t>());
      const auto nbytes = pod<std::uint64_t>();
      if (nbytes != static_cast<std::uint64_t>(shape_numel(t.shape)) * dtype_size(t.dtype)) {
        throw CheckpointError(CheckpointErrorKind::Corrupt, "payload size mismatch in tensor '" + t.name + "'");
      }
      if (nbytes > size_ - pos_) throw CheckpointError(CheckpointErrorKind::Corrupt, "checkpoint truncated");
      t.bytes.assign(data_ + pos_, data_ + pos_ + nbytes);
      pos_ += nbytes;
      out.push_back(std::move(t));
    }
    return out;
  }
  std::size_t position() const { return pos_; }

 private:
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

void write_body(Writer& w, const Checkpoint& c) {
  w.raw(kMagic, 4);
  w.pod<std::uint32_t>(c.version);
  w.string(c.config_text);
  w.pod<std::uint64_t>(c.config_hash);
  w.pod<std::int64_t>(c.iteration);
  w.pod<std::int64_t>(c.optimizer_steps);
  w.string(c.rng_state);
  w.table(c.model);
  w.table(c.ema);
  w.table(c.optimizer);
}

}  // namespace

template <typename S>
NamedTensor NamedTensor::from(const std::string& name, const Tensor<S>& t) {
  NamedTensor out;
  out.name = name;
  out.dtype = dtype_of<S>();
  out.shape = t.shape();
  out.bytes.resize(static_cast<std::size_t>(t.size()) * sizeof(S));
  if (!out.bytes.empty()) std::memcpy(out.bytes.data(), t.data(), out.bytes.size());
  return out;
}

template <typename S>
Tensor<S> NamedTensor::to_tensor(const Shape& expected) const {
  if (dtype != dtype_of<S>()) throw CheckpointError(CheckpointErrorKind::ShapeMismatch, "dtype mismatch for '" + name + "'");
  if (shape != expected) {
    throw CheckpointError(CheckpointErrorKind::ShapeMismatch, "tensor '" + name + "' has shape " + shape_string(shape) +
                                                                  ", expected " + shape_string(expected));
  }
  Tensor<S> t(shape);
  if (!bytes.empty()) std::memcpy(t.data(), bytes.data(), bytes.size());
  return t;
}

template NamedTensor NamedTensor::from<float>(const std::string&, const Tensor<float>&);
template NamedTensor NamedTensor::from<double>(const std::string&, const Tensor<double>&);
template Tensor<float> NamedTensor::to_tensor<float>(const Shape&) const;
template Tensor<double> NamedTensor::to_tensor<double>(const Shape&) const;

const NamedTensor* Checkpoint::find(const std::vector<NamedTensor>& table, const std::string& name) const {
  for (const auto& t : table)
    if (t.name == name) return &t;
  return nullptr;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<char> serialize_checkpoint(const Checkpoint& checkpoint) {
  std::vector<char> out;
  Writer w(&out);
  write_body(w, checkpoint);
  const auto crc = static_cast<std::uint32_t>(
      crc32_z(0L, reinterpret_cast<const Bytef*>(out.data()), out.size()));
  w.pod<std::uint32_t>(crc);
  return out;
}

Checkpoint parse_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrorKind::Corrupt, "not a checkpoint file (bad magic or too short)");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::VersionMismatch, "checkpoint format version " + std::to_string(version) +
                                                                    " is not supported (expected " +
                                                                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  const auto actual = static_cast<std::uint32_t>(crc32_z(0L, reinterpret_cast<const Bytef*>(bytes.data()), body));
  if (stored != actual) throw CheckpointError(CheckpointErrorKind::Corrupt, "checkpoint checksum mismatch");

  Reader r(bytes.data(), body);
  char magic[4];
  r.raw(magic, 4);
  Checkpoint c;
  c.version = r.pod<std::uint32_t>();
  c.config_text = r.string();
  c.config_hash = r.pod<std::uint64_t>();
  c.iteration = r.pod<std::int64_t>();
  c.optimizer_steps = r.pod<std::int64_t>();
  c.rng_state = r.string();
  c.model = r.table();
  c.ema = r.table();
  c.optimizer = r.table();
  if (r.position() != body) throw CheckpointError(CheckpointErrorKind::Corrupt, "trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const std::vector<char> bytes = serialize_checkpoint(checkpoint);
  const std::filesystem::path tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw CheckpointError(CheckpointErrorKind::Io, "cannot open '" + tmp.string() + "' for writing");
  std::size_t written = 0;
  while (written < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + written, bytes.size() - written);
    if (n <= 0) {
      ::close(fd);
      throw CheckpointError(CheckpointErrorKind::Io, "write failed for '" + tmp.string() + "'");
    }
    written += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) {
    throw CheckpointError(CheckpointErrorKind::Io, "fsync failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointErrorKind::Io, "rename to '" + path.string() + "' failed: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointErrorKind::Io, "cannot open checkpoint '" + path.string() + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

template <typename S>
CheckpointSizeAudit audit_checkpoint_size(const ParameterStore<S>& params, const std::string& config_text) {
  CheckpointSizeAudit audit;
  Writer w(nullptr);
  w.raw(kMagic, 4);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.string(config_text);
  w.pod<std::uint64_t>(0);
  w.pod<std::int64_t>(0);
  w.pod<std::int64_t>(0);
  std::ostringstream rng_text;
  rng_text << Rng();
  w.string(rng_text.str());
  for (int table = 0; table < 2; ++table) {
    w.pod<std::uint64_t>(params.size());
    for (const auto& p : params) {
      const std::uint64_t nbytes = static_cast<std::uint64_t>(p->numel()) * sizeof(S);
      w.tensor_header(p->name(), dtype_of<S>(), p->shape(), nbytes);
      w.raw(nullptr, nbytes);
    }
  }
  w.pod<std::uint64_t>(0);  // empty optimizer table
  w.pod<std::uint32_t>(0);  // CRC
  audit.parameter_count = params.total_count();
  audit.tensor_bytes = 2 * static_cast<std::uint64_t>(audit.parameter_count) * sizeof(S);
  audit.file_bytes = w.count();

  Writer opt(nullptr);
  for (const char* kind : {"m.", "v."})
    for (const auto& p : params) {
      const std::uint64_t nbytes = static_cast<std::uint64_t>(p->numel()) * sizeof(S);
      opt.tensor_header(kind + p->name(), dtype_of<S>(), p->shape(), nbytes);
      opt.raw(nullptr, nbytes);
    }
  audit.optimizer_bytes = opt.count();
  return audit;
}

template CheckpointSizeAudit audit_checkpoint_size(const ParameterStore<float>&, const std::string&);
template CheckpointSizeAudit audit_checkpoint_size(const ParameterStore<double>&, const std::string&);

}  // namespace vitdiff
