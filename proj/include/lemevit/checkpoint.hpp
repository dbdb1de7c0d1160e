#pragma once

// LMVT checkpoint format, all integers little-endian:
//
//   magic    "LMVT"
//   version  u32
//   count    u32
//   count × record:
//     name_len u16, name (UTF-8, name_len bytes)
//     dtype    u8   (0 = f32)
//     ndim     u8
//     dims     u32 × ndim
//     payload  product(dims) × f32
//
// A standalone tensor file (.ten) is exactly one record with no header.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "lemevit/model.hpp"

namespace lemevit {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
  std::size_t offset = 0;  // byte offset of the record in its file
};

std::vector<std::uint8_t> encode_record(const std::string& name, const Tensor<float>& tensor);

/// Decodes one record starting at `offset`, advancing it. Throws FormatError.
NamedTensor decode_record(const std::vector<std::uint8_t>& bytes, std::size_t& offset);

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(Model<float>& model, const std::filesystem::path& path);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

/// Builds `spec` and overwrites every parameter from the file. Names and
/// shapes must match exactly.
Model<float> load_checkpoint(const VariantSpec& spec, const std::filesystem::path& path);

void save_tensor_file(const std::filesystem::path& path, const std::string& name,
                      const Tensor<float>& tensor);
NamedTensor load_tensor_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace lemevit
