#pragma once

// Self-describing binary checkpoints. Little-endian layout:
//
//   magic   8 bytes "MSVPCKPT"
//   version u32 (currently 1)
//   config_hash u64, epoch u32, metric f64
//   n_records u32, then per record:
//     name_len u32, name bytes, dtype u8 (0=f32, 1=f64),
//     ndim u32, dims u32 x ndim, payload
//   has_optimizer_state u8 (0; reserved)
//
// The loader validates magic/version/shape and checks every record against
// the target registry by name.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "msvp/nn.hpp"

namespace msvp {

struct CheckpointMeta {
  uint64_t config_hash = 0;
  uint32_t epoch = 0;
  double metric = 0.0;  // validation accuracy of this snapshot
};

namespace ckpt_detail {

constexpr char kMagic[8] = {'M', 'S', 'V', 'P', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, const T& v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& off, const std::string& what) {
  if (off + sizeof(T) > buf.size())
    fail<DataError>("checkpoint truncated while reading ", what, " (offset ",
                    off, " of ", buf.size(), " bytes)");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace ckpt_detail

template <typename S>
std::string serialize_checkpoint(const ParamRegistry<S>& reg,
                                 const CheckpointMeta& meta) {
  using namespace ckpt_detail;
  std::string out;
  out.append(kMagic, 8);
  put<uint32_t>(out, 1);
  put<uint64_t>(out, meta.config_hash);
  put<uint32_t>(out, meta.epoch);
  put<double>(out, meta.metric);
  const auto n_records =
      static_cast<uint32_t>(reg.params().size() + reg.buffers().size());
  put<uint32_t>(out, n_records);
  auto emit = [&](const std::string& name, const Tensor<S>& t) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.append(name);
    put<uint8_t>(out, sizeof(S) == 4 ? 0 : 1);
    put<uint32_t>(out, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i)
      put<uint32_t>(out, static_cast<uint32_t>(t.dim(i)));
    out.append(reinterpret_cast<const char*>(t.data()),
               static_cast<size_t>(t.numel()) * sizeof(S));
  };
  for (const auto& [name, t] : reg.params()) emit(name, t);
  for (const auto& [name, t] : reg.buffers()) emit(name, t);
  put<uint8_t>(out, 0);  // no optimizer state
  return out;
}

template <typename S>
void save_checkpoint(const ParamRegistry<S>& reg, const CheckpointMeta& meta,
                     const std::string& path) {
  const std::string bytes = serialize_checkpoint(reg, meta);
  std::ofstream out(path, std::ios::binary);
  MSVP_CHECK(out.good(), "cannot write checkpoint '", path, "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  MSVP_CHECK(out.good(), "write failed for checkpoint '", path, "'");
}

// Restores every record into the registry; the registry must match the
// checkpoint exactly (same names, same shapes).
template <typename S>
CheckpointMeta load_checkpoint_into(ParamRegistry<S>& reg,
                                    const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in.good()) fail<DataError>("cannot open checkpoint '", path, "'");
  std::string buf(static_cast<size_t>(in.tellg()), '\0');
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));

  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 8) != 0)
    fail<DataError>("'", path, "': not a checkpoint (bad magic)");
  size_t off = 8;
  const auto version = take<uint32_t>(buf, off, "version");
  if (version != 1)
    fail<DataError>("'", path, "': unsupported checkpoint version ", version);
  CheckpointMeta meta;
  meta.config_hash = take<uint64_t>(buf, off, "config hash");
  meta.epoch = take<uint32_t>(buf, off, "epoch");
  meta.metric = take<double>(buf, off, "metric");
  const auto n_records = take<uint32_t>(buf, off, "record count");

  size_t param_i = 0, buffer_i = 0;
  for (uint32_t r = 0; r < n_records; ++r) {
    const auto name_len = take<uint32_t>(buf, off, "record name length");
    if (off + name_len > buf.size())
      fail<DataError>("'", path, "': truncated record name");
    std::string name(buf.data() + off, name_len);
    off += name_len;
    const auto dtype = take<uint8_t>(buf, off, "dtype");
    const uint8_t want_dtype = sizeof(S) == 4 ? 0 : 1;
    if (dtype != want_dtype)
      fail<DataError>("'", path, "': record '", name, "' has dtype tag ",
                      int(dtype), " but the model expects ", int(want_dtype));
    const auto ndim = take<uint32_t>(buf, off, "rank");
    Shape shape;
    for (uint32_t d = 0; d < ndim; ++d)
      shape.push_back(take<uint32_t>(buf, off, "dimension"));

    Tensor<S>* target = nullptr;
    std::string expected_name;
    if (param_i < reg.params().size()) {
      expected_name = reg.params()[param_i].first;
      target = &reg.params()[param_i].second;
      ++param_i;
    } else if (buffer_i < reg.buffers().size()) {
      expected_name = reg.buffers()[buffer_i].first;
      target = &reg.buffers()[buffer_i].second;
      ++buffer_i;
    }
    if (!target)
      fail<DataError>("'", path, "': registry mismatch: checkpoint record '",
                      name, "' has no counterpart in the model registry");
    if (name != expected_name)
      fail<DataError>("'", path, "': registry mismatch at record ", r,
                      ": checkpoint has '", name, "' but the model expects '",
                      expected_name, "'");
    if (shape != target->shape())
      fail<DataError>("'", path, "': shape mismatch for '", name,
                      "': checkpoint ", shape_str(shape), " vs model ",
                      shape_str(target->shape()));
    const size_t bytes = static_cast<size_t>(target->numel()) * sizeof(S);
    if (off + bytes > buf.size())
      fail<DataError>("'", path, "': truncated payload for '", name,
                      "', expected ", bytes, " bytes at offset ", off,
                      " but file has ", buf.size());
    std::memcpy(target->data(), buf.data() + off, bytes);
    off += bytes;
  }
  const auto opt_flag = take<uint8_t>(buf, off, "optimizer flag");
  if (opt_flag != 0)
    fail<DataError>("'", path, "': embedded optimizer state is not supported");
  return meta;
}

}  // namespace msvp
