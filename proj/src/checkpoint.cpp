#include <bit>
#include <cstring>
#include <fstream>

#include "relreason/trainer.hpp"

namespace relreason {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    T value;
    std::memcpy(&value, take(sizeof(T), what), sizeof(T));
    return value;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw DataError("truncated", std::string("checkpoint ends inside ") + what + " at byte " + std::to_string(pos_));
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(std::uint32_t(checkpoint.tensors.size()));
  for (const auto& t : checkpoint.tensors) {
    w.put<std::uint32_t>(std::uint32_t(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint32_t>(std::uint32_t(t.tensor.rank()));
    for (std::size_t d : t.tensor.shape()) w.put<std::uint64_t>(d);
    w.put_bytes(t.tensor.data().data(), t.tensor.size() * sizeof(float));
  }
  w.put<std::uint64_t>(checkpoint.config.size());
  w.put_bytes(checkpoint.config.data(), checkpoint.config.size());
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), kCheckpointMagic, 4) != 0) {
    throw DataError("magic", "not a checkpoint (magic bytes are not SSRR)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw DataError("version", "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                   std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint out;
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_length = r.get<std::uint32_t>("name length");
    const auto* name = r.take(name_length, "tensor name");
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape(rank);
    std::size_t elements = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>("dimension");
      if (d != 0 && elements > (std::size_t(1) << 40) / d) throw DataError("dimension", "tensor is implausibly large");
      elements *= d;
    }
    std::vector<float> values(elements);
    std::memcpy(values.data(), r.take(elements * sizeof(float), "tensor data"), elements * sizeof(float));
    out.tensors.push_back({std::string(reinterpret_cast<const char*>(name), name_length),
                           Tensor<float>(std::move(shape), std::move(values))});
  }
  const auto config_length = r.get<std::uint64_t>("config length");
  const auto* config = r.take(config_length, "config");
  out.config.assign(reinterpret_cast<const char*>(config), config_length);
  if (!r.done()) throw DataError("trailing", "unexpected bytes after the config blob");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("path", "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    out.flush();
    if (!out) throw DataError("path", "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("path", "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("path", "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace relreason
