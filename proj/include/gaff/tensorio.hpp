#pragma once

// Binary tensor files ("GAFT"), PPM export and the little-endian byte
// plumbing shared by the scene and checkpoint containers.

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace gaff {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kTensorMagic{'G', 'A', 'F', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

// ---------------------------------------------------------------------------
// Little-endian encoding

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  void str(std::string_view s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void bytes(std::span<const std::uint8_t> b) {
    u64(b.size());
    buf_.insert(buf_.end(), b.begin(), b.end());
  }

  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string context)
      : data_(data), context_(std::move(context)) {}

  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  void f32s(std::span<float> out) {
    need(out.size() * 4);
    for (float& x : out) x = f32();
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> bytes() {
    const std::uint64_t n = u64();
    need(n);
    std::vector<std::uint8_t> b(data_.begin() + pos_, data_.begin() + pos_ + n);
    pos_ += n;
    return b;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(context_ + ": " + what);
  }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) fail("truncated data");
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

// ---------------------------------------------------------------------------
// Whole-file helpers

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return buf;
}

// Writes to a sibling temp file and renames, so readers never observe a
// partially written file.
inline void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string());
  }
}

inline void write_text_atomic(const fs::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// Output files collected in memory and written together, so a failing
// command leaves nothing behind.
class FileSet {
 public:
  void add(fs::path path, std::vector<std::uint8_t> bytes) { files_.emplace_back(std::move(path), std::move(bytes)); }
  void add_text(fs::path path, std::string_view text) {
    files_.emplace_back(std::move(path), std::vector<std::uint8_t>(text.begin(), text.end()));
  }

  const std::vector<std::pair<fs::path, std::vector<std::uint8_t>>>& files() const { return files_; }

  // Existing targets with different content are an error unless `overwrite`.
  void commit(bool overwrite) const {
    if (!overwrite)
      for (const auto& [path, bytes] : files_)
        if (fs::exists(path) && read_file(path) != bytes)
          throw ValidationError(path.string() + " already exists (use --force to overwrite)");
    for (const auto& [path, bytes] : files_) {
      if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string());
      }
    }
    for (const auto& [path, bytes] : files_) write_file_atomic(path, bytes);
  }

 private:
  std::vector<std::pair<fs::path, std::vector<std::uint8_t>>> files_;
};

// ---------------------------------------------------------------------------
// Tensor files

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline void encode_tensor(ByteWriter& w, std::span<const std::uint64_t> dims, std::span<const float> data) {
  if (dims.empty()) throw ValidationError("tensor rank must be >= 1");
  std::size_t n = 1;
  for (auto d : dims) {
    if (d == 0) throw ValidationError("tensor dimensions must be positive");
    n *= d;
  }
  if (n != data.size())
    throw ValidationError("tensor payload has " + std::to_string(data.size()) + " values, dims require " +
                          std::to_string(n));
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!std::isfinite(data[i])) throw ValidationError("non-finite tensor value at index " + std::to_string(i));

  w.raw(kTensorMagic.data(), 4);
  w.u32(kTensorVersion);
  w.u8(kDtypeF32);
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.u64(d);
  w.f32s(data);
}

inline Tensor decode_tensor(ByteReader& r) {
  std::array<char, 4> magic{};
  r.raw(magic.data(), 4);
  if (magic != kTensorMagic) r.fail("bad magic, expected GAFT");
  const std::uint32_t version = r.u32();
  if (version != kTensorVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint8_t dtype = r.u8();
  if (dtype != kDtypeF32) r.fail("unsupported dtype code " + std::to_string(dtype));
  const std::uint32_t rank = r.u32();
  if (rank == 0) r.fail("rank 0 tensor");
  Tensor t;
  t.dims.resize(rank);
  std::uint64_t n = 1;
  for (auto& d : t.dims) {
    d = r.u64();
    if (d == 0) r.fail("zero-length dimension");
    n *= d;
  }
  if (n > r.remaining() / 4) r.fail("truncated payload");
  t.data.resize(n);
  r.f32s(t.data);
  return t;
}

inline std::vector<std::uint8_t> tensor_bytes(std::span<const std::uint64_t> dims, std::span<const float> data) {
  ByteWriter w;
  encode_tensor(w, dims, data);
  return w.take();
}

inline std::vector<std::uint8_t> tensor_bytes(std::initializer_list<std::uint64_t> dims, std::span<const float> data) {
  return tensor_bytes(std::span<const std::uint64_t>(dims.begin(), dims.size()), data);
}

inline void write_tensor(const fs::path& path, std::span<const std::uint64_t> dims, std::span<const float> data) {
  write_file_atomic(path, tensor_bytes(dims, data));
}

inline void write_tensor(const fs::path& path, std::initializer_list<std::uint64_t> dims, std::span<const float> data) {
  write_tensor(path, std::span<const std::uint64_t>(dims.begin(), dims.size()), data);
}

inline Tensor read_tensor(const fs::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, path.string());
  Tensor t = decode_tensor(r);
  if (!r.at_end()) r.fail("trailing bytes after payload");
  return t;
}

// Matrix convenience wrappers (rank-2 tensors).
inline void write_matrix(const fs::path& path, const MatF& m) {
  write_tensor(path, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
               std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}

inline std::vector<std::uint8_t> matrix_bytes(const MatF& m) {
  return tensor_bytes({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                      std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}

inline MatF tensor_to_matrix(const Tensor& t, const std::string& what) {
  if (t.dims.size() != 2) throw FormatError(what + ": expected a rank-2 tensor");
  MatF m(static_cast<Eigen::Index>(t.dims[0]), static_cast<Eigen::Index>(t.dims[1]));
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

// ---------------------------------------------------------------------------
// Images

// H x W x 3, row-major, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

  float* pixel(int row, int col) { return rgb.data() + (static_cast<std::size_t>(row) * width + col) * 3; }
  const float* pixel(int row, int col) const {
    return rgb.data() + (static_cast<std::size_t>(row) * width + col) * 3;
  }
};

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  if (img.height <= 0 || img.width <= 0) throw ValidationError("empty image");
  if (img.rgb.size() != static_cast<std::size_t>(img.height) * img.width * 3)
    throw ValidationError("image buffer does not match its dimensions");
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + img.rgb.size());
  for (float v : img.rgb) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ValidationError("pixel value outside [0,1]: " + std::to_string(v));
    out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
  }
  return out;
}

inline void write_ppm(const fs::path& path, const Image& img) { write_file_atomic(path, encode_ppm(img)); }

// Blue (0) to red (1) linear ramp.
inline Image heatmap_to_image(int height, int width, std::span<const float> scores) {
  if (scores.size() != static_cast<std::size_t>(height) * width)
    throw ValidationError("heatmap size does not match image dimensions");
  Image img(height, width);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const float s = scores[i];
    if (!(s >= -1e-6f && s <= 1.0f + 1e-6f)) throw ValidationError("heatmap score outside [0,1]");
    const float c = std::clamp(s, 0.0f, 1.0f);
    img.rgb[3 * i + 0] = c;
    img.rgb[3 * i + 1] = 0.0f;
    img.rgb[3 * i + 2] = 1.0f - c;
  }
  return img;
}

}  // namespace gaff
