#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdlab/tensor.hpp"

namespace cdlab {

// Versioned binary container shared by model, SAE and mask artifacts.
//
//   bytes   "CDLAB"                       magic, 5 bytes
//   u32     format version (currently 1)
//   str     kind tag ("toy-lm", "sae", "mask", ...)
//   u32     meta count, then (str key, str value) pairs   -- config block
//   u32     record count, then per record:
//             str name, u32 ndim, u64 dims[ndim], f64 values[prod(dims)]
//
// str = u32 byte length + UTF-8 bytes. All integers and doubles are
// little-endian; doubles are raw IEEE-754 bits, so round trips are bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> records;

  void set(std::string key, std::string value);
  const std::string& get(std::string_view key) const;
  bool has(std::string_view key) const;
  const Tensor& tensor(std::string_view name) const;

  std::string serialize() const;
  static Checkpoint parse(std::string_view bytes);
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace cdlab
