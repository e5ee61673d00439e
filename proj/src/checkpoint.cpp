#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "ullm/model.hpp"

namespace ullm {

namespace {

constexpr char kMagic[4] = {'U', 'L', 'L', 'M'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte(pos_ + i)) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte(pos_ + i)) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }

  std::size_t position() const { return pos_; }

 private:
  unsigned char byte(std::size_t i) const { return static_cast<unsigned char>(bytes_[i]); }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error(ErrorCode::format, "checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

}  // namespace

std::string serialize_checkpoint(const Parameters<float>& params) {
  const auto& c = params.config;
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  for (std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.d_ffn, c.vocab_size, c.max_len}) {
    put_u32(out, static_cast<std::uint32_t>(v));
  }
  put_u64(out, c.seed);
  out.reserve(out.size() + 4 * params.values.size() + 4);
  for (float v : params.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u32(out, bits);
  }
  put_u32(out, crc_of(out, out.size()));
  return out;
}

Parameters<float> deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorCode::format, "not a checkpoint (bad magic)");
  }
  const std::size_t body = bytes.size() - 4;
  Reader reader(bytes);
  reader.u32();  // magic
  const std::uint32_t version = reader.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::format, "unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  c.n_layers = reader.u32();
  c.n_heads = reader.u32();
  c.d_model = reader.u32();
  c.d_ffn = reader.u32();
  c.vocab_size = reader.u32();
  c.max_len = reader.u32();
  c.seed = reader.u64();
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::format, std::string("checkpoint config invalid: ") + e.what());
  }
  Parameters<float> params(c);
  if (reader.position() + 4 * params.values.size() + 4 != bytes.size()) {
    throw Error(ErrorCode::format, "checkpoint size does not match its config");
  }
  for (auto& v : params.values) v = reader.f32();
  const std::uint32_t stored = reader.u32();
  if (stored != crc_of(bytes, body)) throw Error(ErrorCode::format, "checkpoint CRC mismatch");
  return params;
}

void save_checkpoint(const std::string& path, const Parameters<float>& params) {
  const std::string bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "failed writing checkpoint " + path);
}

Parameters<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace ullm
