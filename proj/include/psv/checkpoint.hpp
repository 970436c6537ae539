#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psv/errors.hpp"
#include "psv/param.hpp"

namespace psv {

namespace detail {

inline const std::array<std::uint32_t, 256>& crc32_table() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1u) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}

inline std::uint32_t crc32(const unsigned char* data, std::size_t len) {
  const auto& table = crc32_table();
  std::uint32_t c = 0xffffffffu;
  for (std::size_t i = 0; i < len; ++i)
    c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace detail

struct Checkpoint {
  std::vector<ParamGroup> groups;
  nlohmann::json meta;  // empty object when the file carries none
};

inline constexpr char kCheckpointMagic[4] = {'P', 'S', 'V', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

// File layout: magic "PSVC", version u16 LE, u64 LE header length, UTF-8 JSON
// header {"entries": [{name, dtype:"f32", shape, byte_offset, byte_len,
// trainable}], "meta": {...}}, raw little-endian f32 payload, CRC32 (u32 LE)
// of the payload. Offsets are relative to the payload start.
inline void save_checkpoint(const std::vector<ParamGroup>& groups,
                            const std::filesystem::path& path,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json entries = nlohmann::json::array();
  std::string payload;
  for (const auto& g : groups) {
    std::size_t bytes = g.tensor.data.size() * sizeof(float);
    nlohmann::json e;
    e["name"] = g.name;
    e["dtype"] = "f32";
    e["shape"] = g.tensor.shape;
    e["byte_offset"] = payload.size();
    e["byte_len"] = bytes;
    e["trainable"] = g.trainable;
    entries.push_back(std::move(e));
    std::size_t off = payload.size();
    payload.resize(off + bytes);
    std::memcpy(payload.data() + off, g.tensor.data.data(), bytes);
  }
  nlohmann::json header;
  header["entries"] = std::move(entries);
  header["meta"] = meta;
  std::string header_str = header.dump();

  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u16(out, kCheckpointVersion);
  detail::put_u64(out, header_str.size());
  out += header_str;
  out += payload;
  detail::put_u32(out, detail::crc32(
                           reinterpret_cast<const unsigned char*>(payload.data()),
                           payload.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(detail::msg("cannot open for writing: ", path.string()));
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError(detail::msg("write failed: ", path.string()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(detail::msg("cannot open: ", path.string()));
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());

  const std::size_t min_len = 4 + 2 + 8;
  if (bytes.size() < min_len)
    throw CheckpointHeaderError(detail::msg("checkpoint too small: ",
                                            path.string()));
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointHeaderError(detail::msg("bad magic bytes in ",
                                            path.string()));
  std::uint16_t version = static_cast<std::uint8_t>(bytes[4]) |
                          (static_cast<std::uint16_t>(
                               static_cast<std::uint8_t>(bytes[5]))
                           << 8);
  if (version != kCheckpointVersion)
    throw CheckpointHeaderError(detail::msg("unsupported checkpoint version ",
                                            version));
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i)
    header_len |= static_cast<std::uint64_t>(
                      static_cast<std::uint8_t>(bytes[6 + i]))
                  << (8 * i);
  std::size_t header_start = min_len;
  if (bytes.size() < header_start + header_len + 4)
    throw CheckpointTruncatedError(detail::msg("truncated checkpoint: ",
                                               path.string()));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(header_start,
                                                static_cast<std::size_t>(header_len)));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointHeaderError(detail::msg("unparseable header: ", e.what()));
  }

  std::size_t payload_start = header_start + static_cast<std::size_t>(header_len);
  std::size_t payload_len = bytes.size() - payload_start - 4;
  const char* payload = bytes.data() + payload_start;

  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(
                      bytes[payload_start + payload_len + static_cast<std::size_t>(i)]))
                  << (8 * i);
  std::uint32_t actual_crc = detail::crc32(
      reinterpret_cast<const unsigned char*>(payload), payload_len);
  if (stored_crc != actual_crc)
    throw CheckpointChecksumError(
        detail::msg("payload checksum mismatch in ", path.string(),
                    " (stored ", stored_crc, ", computed ", actual_crc, ")"));

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  for (const auto& e : header.at("entries")) {
    ParamGroup g;
    g.name = e.at("name").get<std::string>();
    if (e.at("dtype").get<std::string>() != "f32")
      throw CheckpointHeaderError(detail::msg("unsupported dtype for ", g.name));
    g.trainable = e.at("trainable").get<bool>();
    std::vector<std::int64_t> shape = e.at("shape").get<std::vector<std::int64_t>>();
    std::size_t off = e.at("byte_offset").get<std::size_t>();
    std::size_t len = e.at("byte_len").get<std::size_t>();
    if (off + len > payload_len)
      throw CheckpointTruncatedError(detail::msg("entry ", g.name,
                                                 " extends past payload"));
    g.tensor = Tensor::zeros(shape);
    if (len != g.tensor.data.size() * sizeof(float))
      throw CheckpointHeaderError(detail::msg("entry ", g.name,
                                              " byte_len does not match shape"));
    std::memcpy(g.tensor.data.data(), payload + off, len);
    ckpt.groups.push_back(std::move(g));
  }
  return ckpt;
}

}  // namespace psv
