#pragma once

#include <filesystem>
#include <string>

#include "lemevit/tensor.hpp"

namespace lemevit {

/// Binary PPM (P6), 8- or 16-bit, to a [3×H×W] tensor scaled to [−1, 1].
/// Throws FormatError with the byte offset of the problem.
Tensor<float> decode_ppm(const std::vector<std::uint8_t>& bytes);
Tensor<float> read_ppm(const std::filesystem::path& path);

/// .ppm files are decoded as PPM, anything else as a single tensor record.
Tensor<float> load_image(const std::filesystem::path& path);

/// 16-bit binary PGM (P5) of a [H×W] map, scaled so the maximum maps to 65535.
std::vector<std::uint8_t> encode_pgm16(const Tensor<float>& map);
void write_pgm16(const std::filesystem::path& path, const Tensor<float>& map);

/// Decodes an encode_pgm16 image back to its 16-bit levels as floats.
Tensor<float> decode_pgm16(const std::vector<std::uint8_t>& bytes);

}  // namespace lemevit
