#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sacn/config.hpp"
#include "sacn/model.hpp"
#include "sacn/rng.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Binary layout, little-endian throughout:
//   "SACN" | u32 version | u32 len + config text | u32 count | records
// record: u32 len + name | u8 rank | u32 extents[rank] | f64 values
// Values are stored as 64-bit reals regardless of the runtime scalar type,
// so a float model round-trips exactly (f32 -> f64 widening is lossless).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Tensor<double> data;
};

struct Checkpoint {
  RunConfig config;
  std::vector<CheckpointRecord> records;

  const Tensor<double>& at(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return r.data;
    throw CheckpointError("checkpoint: no record named '" + name + "'");
  }

  bool has(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return true;
    return false;
  }
};

namespace detail {

inline void ck_write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t ck_read_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw CheckpointError("checkpoint: truncated while reading " + what);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline void ck_write_f64(std::ostream& out, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline double ck_read_f64(std::istream& in, const std::string& what) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw CheckpointError("checkpoint: truncated while reading " + what);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

inline void ck_write_string(std::ostream& out, const std::string& s) {
  ck_write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string ck_read_string(std::istream& in, const std::string& what) {
  const std::uint32_t n = ck_read_u32(in, what + " length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw CheckpointError("checkpoint: truncated while reading " + what);
  return s;
}

inline void ck_write_record(std::ostream& out, const std::string& name,
                            const Tensor<double>& t) {
  ck_write_string(out, name);
  const auto shape = t.shape();
  out.put(static_cast<char>(shape.size()));
  for (const std::size_t e : shape) ck_write_u32(out, static_cast<std::uint32_t>(e));
  for (std::size_t i = 0; i < t.numel(); ++i) ck_write_f64(out, t[i]);
}

inline CheckpointRecord ck_read_record(std::istream& in) {
  CheckpointRecord r;
  r.name = ck_read_string(in, "record name");
  const int rank = in.get();
  if (rank == EOF) throw CheckpointError("checkpoint: truncated while reading rank");
  std::vector<std::size_t> shape;
  for (int i = 0; i < rank; ++i)
    shape.push_back(ck_read_u32(in, "extent of '" + r.name + "'"));
  r.data = Tensor<double>(shape);
  for (std::size_t i = 0; i < r.data.numel(); ++i)
    r.data[i] = ck_read_f64(in, "values of '" + r.name + "'");
  return r;
}

// Each 64-bit generator word is split into two 32-bit halves; both halves are
// exactly representable as doubles, so the state survives the f64 encoding.
inline Tensor<double> ck_pack_rng(const Rng& rng) {
  const Tensor<std::uint64_t> s = rng.save_state();
  Tensor<double> out({8});
  for (std::size_t i = 0; i < 4; ++i) {
    out[2 * i] = static_cast<double>(s[i] & 0xffffffffull);
    out[2 * i + 1] = static_cast<double>(s[i] >> 32);
  }
  return out;
}

inline void ck_unpack_rng(const Tensor<double>& t, Rng& rng) {
  if (t.numel() != 8) throw CheckpointError("checkpoint: rng.state must hold 8 values");
  Tensor<std::uint64_t> s({4});
  for (std::size_t i = 0; i < 4; ++i) {
    const auto lo = static_cast<std::uint64_t>(t[2 * i]);
    const auto hi = static_cast<std::uint64_t>(t[2 * i + 1]);
    s[i] = lo | (hi << 32);
  }
  rng.restore_state(s);
}

}  // namespace detail

// Forward declaration; the optimizer lives in train.hpp and exposes its slots.
template <typename T>
class Optimizer;

template <typename T>
void save_checkpoint(const std::string& path, const SacnModel<T>& model,
                     const Optimizer<T>* opt, const Rng* order_rng,
                     std::size_t epochs_done, std::size_t steps_done) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  out.write("SACN", 4);
  detail::ck_write_u32(out, kCheckpointVersion);
  detail::ck_write_string(out, serialize_config(model.config()));

  std::vector<std::pair<std::string, Tensor<double>>> records;
  for (const auto& [name, t] : model.params().items)
    records.emplace_back(name, t.template cast<double>());
  for (const auto& [name, st] : model.sn_states())
    records.emplace_back("sn.u." + name, st.u.template cast<double>());
  if (opt) {
    for (const auto& slot : opt->slots()) {
      records.emplace_back("opt.m." + slot.name, slot.m.template cast<double>());
      records.emplace_back("opt.v." + slot.name, slot.v.template cast<double>());
    }
    records.emplace_back("opt.step", Tensor<double>::scalar(double(opt->step_count())));
  }
  if (order_rng) records.emplace_back("rng.state", detail::ck_pack_rng(*order_rng));
  records.emplace_back("ctr.epoch", Tensor<double>::scalar(double(epochs_done)));
  records.emplace_back("ctr.step", Tensor<double>::scalar(double(steps_done)));

  detail::ck_write_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) detail::ck_write_record(out, name, t);
  if (!out) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SACN", 4) != 0)
    throw CheckpointError("checkpoint: '" + path + "' has a bad magic");
  const std::uint32_t version = detail::ck_read_u32(in, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  const std::string cfg_text = detail::ck_read_string(in, "config text");
  apply_config_text(ck.config, cfg_text);
  validate_config(ck.config);
  const std::uint32_t count = detail::ck_read_u32(in, "record count");
  for (std::uint32_t i = 0; i < count; ++i)
    ck.records.push_back(detail::ck_read_record(in));
  return ck;
}

// Overwrites model parameters (and spectral-norm iterates) from the
// checkpoint; optimizer moments and the batch-order generator likewise when
// given. Returns {epochs done, steps done}.
template <typename T>
std::pair<std::size_t, std::size_t> restore_checkpoint(const Checkpoint& ck,
                                                       SacnModel<T>& model,
                                                       Optimizer<T>* opt,
                                                       Rng* order_rng) {
  auto fill = [&](const std::string& name, Tensor<T>& dst) {
    const Tensor<double>& src = ck.at(name);
    if (src.shape() != dst.shape())
      throw CheckpointError("checkpoint: record '" + name + "' has the wrong shape");
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(src[i]);
  };
  for (auto& [name, t] : model.params().items) fill(name, t);
  for (auto& [name, st] : model.sn_states()) fill("sn.u." + name, st.u);
  if (opt) {
    for (auto& slot : opt->slots()) {
      fill("opt.m." + slot.name, slot.m);
      fill("opt.v." + slot.name, slot.v);
    }
    opt->set_step_count(static_cast<std::size_t>(ck.at("opt.step")[0]));
  }
  if (order_rng) detail::ck_unpack_rng(ck.at("rng.state"), *order_rng);
  return {static_cast<std::size_t>(ck.at("ctr.epoch")[0]),
          static_cast<std::size_t>(ck.at("ctr.step")[0])};
}

}  // namespace sacn
