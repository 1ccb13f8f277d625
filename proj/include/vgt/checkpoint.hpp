#pragma once

// Checkpoint file: magic "TRTR", format version, the structural model
// config, then every parameter matrix as little-endian 32-bit floats in
// inventory order. The loader rejects version or config mismatches and
// truncated or oversized files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

#include "vgt/io.hpp"
#include "vgt/net.hpp"

namespace vgt {

inline constexpr char kCheckpointMagic[4] = {'T', 'R', 'T', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_i32(std::string& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }

inline void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  std::uint32_t u32() {
    if (pos + 4 > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
};

}  // namespace detail

inline std::string checkpoint_to_bytes(const ModelConfig& cfg, const Parameters<float>& p) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_i32(out, cfg.d_model);
  detail::put_i32(out, cfg.n_heads);
  detail::put_i32(out, cfg.n_enc);
  detail::put_i32(out, cfg.n_dec);
  detail::put_i32(out, cfg.d_ff_eff());
  detail::put_i32(out, cfg.maxS);
  detail::put_i32(out, cfg.hist_len);
  detail::put_i32(out, cfg.pred_len);
  p.for_each([&](const Mat<float>& m) {
    for (float v : m.a) detail::put_f32(out, v);
  });
  return out;
}

struct Checkpoint {
  ModelConfig cfg;
  Parameters<float> params;
};

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  detail::Reader r{bytes, 4};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  c.cfg.d_model = r.i32();
  c.cfg.n_heads = r.i32();
  c.cfg.n_enc = r.i32();
  c.cfg.n_dec = r.i32();
  c.cfg.d_ff = r.i32();
  c.cfg.maxS = r.i32();
  c.cfg.hist_len = r.i32();
  c.cfg.pred_len = r.i32();
  c.cfg.validate();
  c.params = Parameters<float>::shaped(c.cfg);
  c.params.for_each([&](Mat<float>& m) {
    for (auto& v : m.a) v = r.f32();
  });
  if (r.pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Parameters<float>& p) {
  atomic_write_file(path, checkpoint_to_bytes(cfg, p));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_bytes(read_file(path));
}

// Load with a structural expectation; a mismatch is an error naming the
// offending field.
inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
  Checkpoint c = load_checkpoint(path);
  auto expect = [&](int got, int want, const char* field) {
    if (got != want)
      throw std::runtime_error(std::string("checkpoint: config mismatch on ") + field + ": file has " +
                               std::to_string(got) + ", expected " + std::to_string(want));
  };
  expect(c.cfg.d_model, expected.d_model, "d_model");
  expect(c.cfg.n_heads, expected.n_heads, "n_heads");
  expect(c.cfg.n_enc, expected.n_enc, "n_enc");
  expect(c.cfg.n_dec, expected.n_dec, "n_dec");
  expect(c.cfg.d_ff, expected.d_ff_eff(), "d_ff");
  expect(c.cfg.maxS, expected.maxS, "maxS");
  expect(c.cfg.hist_len, expected.hist_len, "hist_len");
  expect(c.cfg.pred_len, expected.pred_len, "pred_len");
  return c;
}

}  // namespace vgt
