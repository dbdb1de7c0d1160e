#include "lemevit/image_io.hpp"

#include <algorithm>
#include <cctype>

#include "lemevit/checkpoint.hpp"

namespace lemevit {

namespace {

struct NetpbmHeader {
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

NetpbmHeader parse_header(const std::vector<std::uint8_t>& bytes, const char* magic) {
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
    throw FormatError(std::string("expected ") + magic + " magic", 0);
  }
  std::size_t pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1u << 20) throw FormatError(std::string(what) + " is too large", start);
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("expected ") + what, start);
    return v;
  };
  NetpbmHeader h;
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (h.width == 0 || h.height == 0) throw FormatError("zero image extent", pos);
  if (h.maxval == 0 || h.maxval > 65535) throw FormatError("maxval must be in 1..65535", pos);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw FormatError("missing whitespace before pixel data", pos);
  }
  h.data_offset = pos + 1;
  return h;
}

}  // namespace

Tensor<float> decode_ppm(const std::vector<std::uint8_t>& bytes) {
  const NetpbmHeader h = parse_header(bytes, "P6");
  const std::size_t sample_bytes = h.maxval > 255 ? 2 : 1;
  const std::size_t need = h.width * h.height * 3 * sample_bytes;
  if (bytes.size() - h.data_offset < need) {
    throw FormatError("truncated pixel data", bytes.size());
  }
  Tensor<float> img({3, h.height, h.width});
  auto out = img.data();
  const std::uint8_t* p = bytes.data() + h.data_offset;
  const double maxval = h.maxval;
  for (std::size_t y = 0; y < h.height; ++y) {
    for (std::size_t x = 0; x < h.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        std::size_t v = *p++;
        if (sample_bytes == 2) v = (v << 8) | *p++;
        // exact at both ends of the range
        out[(c * h.height + y) * h.width + x] = static_cast<float>((2.0 * double(v) - maxval) / maxval);
      }
    }
  }
  return img;
}

Tensor<float> read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file_bytes(path)); }

Tensor<float> load_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".ppm") return read_ppm(path);
  return load_tensor_file(path).tensor;
}

std::vector<std::uint8_t> encode_pgm16(const Tensor<float>& map) {
  if (map.rank() != 2) throw DimensionError("PGM export needs a 2-D map, got " + shape_str(map.shape()));
  const std::size_t h = map.dim(0), w = map.dim(1);
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  float peak = 0.0f;
  for (float v : map.data()) peak = std::max(peak, v);
  for (float v : map.data()) {
    const float unit = peak > 0.0f ? std::clamp(v / peak, 0.0f, 1.0f) : 0.0f;
    const auto level = static_cast<std::uint16_t>(unit * 65535.0f + 0.5f);
    out.push_back(static_cast<std::uint8_t>(level >> 8));
    out.push_back(static_cast<std::uint8_t>(level & 0xff));
  }
  return out;
}

void write_pgm16(const std::filesystem::path& path, const Tensor<float>& map) {
  write_file_bytes(path, encode_pgm16(map));
}

Tensor<float> decode_pgm16(const std::vector<std::uint8_t>& bytes) {
  const NetpbmHeader h = parse_header(bytes, "P5");
  if (h.maxval <= 255) throw FormatError("expected a 16-bit PGM", h.data_offset);
  if (bytes.size() - h.data_offset < h.width * h.height * 2) {
    throw FormatError("truncated pixel data", bytes.size());
  }
  Tensor<float> map({h.height, h.width});
  const std::uint8_t* p = bytes.data() + h.data_offset;
  for (auto& v : map.data()) {
    v = static_cast<float>((p[0] << 8) | p[1]);
    p += 2;
  }
  return map;
}

}  // namespace lemevit
