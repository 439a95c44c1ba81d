#include "densemapnet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <zlib.h>

namespace dmn {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  std::vector<std::uint8_t> bytes;

  template <typename U>
  void put(U value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <typename U>
  U get() {
    U value;
    std::memcpy(&value, take(sizeof(U)), sizeof(U));
    return value;
  }
  const std::uint8_t* take(std::size_t n) {
    if (size_ - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint truncated at byte " + std::to_string(pos_));
    }
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

struct Record {
  std::string name;
  ParamRole role;
  Shape shape;
  std::vector<float> values;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model) {
  Writer w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.layer.size()));
    w.put_bytes(p.layer.data(), p.layer.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.role));
    const Shape s = p.value.shape();
    for (int d : {s.n, s.h, s.w, s.c}) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_bytes(p.value.ptr(), static_cast<std::size_t>(p.value.size()) * sizeof(float));
  }
  w.put<std::uint32_t>(crc_of(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

void deserialize_checkpoint(Model& model, const std::vector<std::uint8_t>& bytes) {
  using Kind = CheckpointError::Kind;
  const std::size_t head = std::min(bytes.size(), sizeof(kCheckpointMagic));
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(head), std::begin(kCheckpointMagic))) {
    throw CheckpointError(Kind::bad_magic, "not a DenseMapNet checkpoint (bad magic)");
  }
  if (head < sizeof(kCheckpointMagic)) {
    throw CheckpointError(Kind::truncated, "checkpoint truncated inside the magic");
  }
  Reader r(bytes.data(), bytes.size());
  r.take(sizeof(kCheckpointMagic));
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::unsupported_version,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<Record> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    const auto len = r.get<std::uint16_t>();
    const std::uint8_t* name = r.take(len);
    rec.name.assign(reinterpret_cast<const char*>(name), len);
    const auto role = r.get<std::uint8_t>();
    if (role > static_cast<std::uint8_t>(ParamRole::running_var)) {
      throw CheckpointError(Kind::unknown_parameter,
                            "record '" + rec.name + "' has unknown role " + std::to_string(role));
    }
    rec.role = static_cast<ParamRole>(role);
    std::uint32_t dims[4];
    for (auto& d : dims) d = r.get<std::uint32_t>();
    rec.shape = Shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                      static_cast<int>(dims[2]), static_cast<int>(dims[3])};
    const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] * dims[3];
    const std::uint8_t* payload = r.take(n * sizeof(float));
    rec.values.resize(n);
    std::memcpy(rec.values.data(), payload, n * sizeof(float));
    records.push_back(std::move(rec));
  }
  const std::size_t body = r.position();
  const auto stored = r.get<std::uint32_t>();
  if (stored != crc_of(bytes.data(), body)) {
    throw CheckpointError(Kind::crc_mismatch, "checkpoint CRC-32 mismatch");
  }

  std::map<std::pair<std::string, ParamRole>, const Record*> by_key;
  for (const auto& rec : records) by_key[{rec.name, rec.role}] = &rec;
  for (const auto& rec : records) {
    const auto& params = model.parameters();
    const auto it = std::find_if(params.begin(), params.end(), [&](const Parameter<float>& p) {
      return p.layer == rec.name && p.role == rec.role;
    });
    if (it == params.end()) {
      throw CheckpointError(Kind::unknown_parameter, "checkpoint parameter " + rec.name + "/" +
                                                         to_string(rec.role) +
                                                         " does not exist in the model");
    }
    if (it->value.shape() != rec.shape) {
      throw CheckpointError(Kind::shape_mismatch,
                            "shape mismatch for " + rec.name + "/" + to_string(rec.role) +
                                ": checkpoint " + rec.shape.str() + ", model " +
                                it->value.shape().str());
    }
  }
  for (const auto& p : model.parameters()) {
    if (!by_key.count({p.layer, p.role})) {
      throw CheckpointError(Kind::missing_parameter, "checkpoint lacks " + p.layer + "/" +
                                                         to_string(p.role));
    }
  }
  for (auto& p : model.parameters()) {
    const Record* rec = by_key.at({p.layer, p.role});
    std::copy(rec->values.begin(), rec->values.end(), p.value.data().begin());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(model);
  // Write-then-rename keeps the previous checkpoint intact on failure.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::io, "cannot move checkpoint into " + path.string());
}

void load_checkpoint(Model& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  deserialize_checkpoint(model, bytes);
}

}  // namespace dmn
