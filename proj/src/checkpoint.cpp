#include "lemevit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace lemevit {

namespace {

constexpr char kMagic[4] = {'L', 'M', 'V', 'T'};

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t& offset)
      : bytes_(bytes), offset_(offset) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - offset_ < n || offset_ > bytes_.size()) {
      throw FormatError(std::string("truncated file while reading ") + what, offset_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[offset_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[offset_] | (bytes_[offset_ + 1] << 8));
    offset_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[offset_ + i]) << (8 * i);
    offset_ += 4;
    return v;
  }
  std::size_t offset() const { return offset_; }
  const std::uint8_t* cursor() const { return bytes_.data() + offset_; }
  void skip(std::size_t n) { offset_ += n; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t& offset_;
};

}  // namespace

std::vector<std::uint8_t> encode_record(const std::string& name, const Tensor<float>& tensor) {
  if (name.size() > 0xffff) throw UsageError("tensor name longer than 65535 bytes: " + name);
  if (tensor.rank() > 0xff) throw UsageError("tensor rank exceeds 255");
  std::vector<std::uint8_t> out;
  out.reserve(4 + name.size() + 4 * tensor.rank() + 4 * tensor.numel());
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put_u8(out, kDtypeF32);
  put_u8(out, static_cast<std::uint8_t>(tensor.rank()));
  for (auto d : tensor.shape()) {
    if (d > 0xffffffffu) throw UsageError("tensor extent exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (float v : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

NamedTensor decode_record(const std::vector<std::uint8_t>& bytes, std::size_t& offset) {
  Reader r(bytes, offset);
  NamedTensor nt;
  nt.offset = offset;
  const std::uint16_t name_len = r.u16("name length");
  r.need(name_len, "tensor name");
  nt.name.assign(reinterpret_cast<const char*>(r.cursor()), name_len);
  r.skip(name_len);
  const std::size_t dtype_at = r.offset();
  const std::uint8_t dtype = r.u8("dtype");
  if (dtype != kDtypeF32) {
    throw FormatError("unknown dtype " + std::to_string(dtype) + " for tensor '" + nt.name + "'",
                      dtype_at);
  }
  const std::size_t ndim_at = r.offset();
  const std::uint8_t ndim = r.u8("ndim");
  if (ndim == 0) throw FormatError("tensor '" + nt.name + "' has zero dimensions", ndim_at);
  Shape shape(ndim);
  std::size_t count = 1;
  for (auto& d : shape) {
    const std::size_t at = r.offset();
    d = r.u32("dims");
    if (d == 0) throw FormatError("tensor '" + nt.name + "' has a zero extent", at);
    count *= d;
  }
  if (count > (bytes.size() - r.offset()) / 4) {
    throw FormatError("truncated payload for tensor '" + nt.name + "'", r.offset());
  }
  std::vector<float> data(count);
  for (auto& v : data) v = std::bit_cast<float>(r.u32("payload"));
  nt.tensor = Tensor<float>(std::move(shape), std::move(data));
  return nt;
}

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    auto rec = encode_record(nt.name, nt.tensor);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  std::size_t offset = 0;
  if (bytes.size() < 4) throw FormatError("truncated file while reading magic", 0);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected LMVT", 0);
  offset = 4;
  Reader r(bytes, offset);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      version_at);
  }
  const std::uint32_t count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(decode_record(bytes, offset));
  if (offset != bytes.size()) throw FormatError("trailing bytes after last tensor", offset);
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void save_checkpoint(Model<float>& model, const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors;
  model.visit([&](const std::string& name, Tensor<float>& t) {
    Tensor<float> copy(t.shape(), t.storage());
    tensors.push_back({name, std::move(copy), 0});
  });
  write_file_bytes(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

Model<float> load_checkpoint(const VariantSpec& spec, const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  auto tensors = decode_checkpoint(bytes);
  std::map<std::string, NamedTensor*> by_name;
  for (auto& nt : tensors) {
    if (!by_name.emplace(nt.name, &nt).second) {
      throw FormatError("duplicate tensor '" + nt.name + "'", nt.offset);
    }
  }
  Model<float> model = Model<float>::build(spec, 0);
  std::size_t matched = 0;
  model.visit([&](const std::string& name, Tensor<float>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError("checkpoint lacks parameter '" + name + "' required by variant '" +
                            spec.name + "'",
                        bytes.size());
    }
    const NamedTensor& nt = *it->second;
    if (nt.tensor.shape() != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(nt.tensor.shape()) +
                            ", variant expects " + shape_str(t.shape()),
                        nt.offset);
    }
    std::copy(nt.tensor.data().begin(), nt.tensor.data().end(), t.data().begin());
    ++matched;
  });
  if (matched != tensors.size()) {
    for (const auto& nt : tensors) {
      bool used = false;
      model.visit([&](const std::string& name, Tensor<float>&) { used = used || name == nt.name; });
      if (!used) {
        throw FormatError("tensor '" + nt.name + "' is not a parameter of variant '" + spec.name + "'",
                          nt.offset);
      }
    }
  }
  return model;
}

void save_tensor_file(const std::filesystem::path& path, const std::string& name,
                      const Tensor<float>& tensor) {
  write_file_bytes(path, encode_record(name, tensor));
}

NamedTensor load_tensor_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t offset = 0;
  NamedTensor nt = decode_record(bytes, offset);
  if (offset != bytes.size()) throw FormatError("trailing bytes after tensor record", offset);
  return nt;
}

}  // namespace lemevit
