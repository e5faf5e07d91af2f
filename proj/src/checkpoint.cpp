#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "qg/network.hpp"

namespace qg {

namespace {

constexpr char kMagic[4] = {'D', 'Q', 'N', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    bytes(buf, sizeof(T));
  }
  void tensor(const Tensor& t) {
    le<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t extent : t.shape()) le<std::uint32_t>(static_cast<std::uint32_t>(extent));
    for (float v : t.values()) le<float>(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  void bytes(void* p, std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw CheckpointError("truncated checkpoint: need " + std::to_string(pos_ + n) + " bytes, have " +
                            std::to_string(data_.size()));
    }
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T le() {
    std::uint8_t buf[sizeof(T)];
    bytes(buf, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  Tensor tensor() {
    const std::size_t rank = le<std::uint8_t>();
    if (rank == 0) throw CheckpointError("tensor record with rank 0");
    Shape shape(rank);
    std::size_t volume = 1;
    for (std::size_t& extent : shape) {
      extent = le<std::uint32_t>();
      if (extent == 0) throw CheckpointError("tensor record with a zero extent");
      volume *= extent;
    }
    if (volume > (data_.size() - pos_) / sizeof(float)) {
      throw CheckpointError("truncated checkpoint: tensor " + shape_string(shape) + " exceeds remaining " +
                            std::to_string(data_.size() - pos_) + " bytes");
    }
    std::vector<float> values(volume);
    for (float& v : values) v = le<float>();
    return Tensor(std::move(shape), std::move(values));
  }
  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<const Tensor*> stored_tensors(const Layer& layer) {
  if (layer.has_weights()) return {&layer.weight, &layer.bias};
  if (layer.spec.kind == LayerKind::batchnorm) {
    return {&layer.gamma, &layer.beta, &layer.running_mean, &layer.running_var};
  }
  return {};
}

std::vector<Tensor*> stored_tensors(Layer& layer) {
  if (layer.has_weights()) return {&layer.weight, &layer.bias};
  if (layer.spec.kind == LayerKind::batchnorm) {
    return {&layer.gamma, &layer.beta, &layer.running_mean, &layer.running_var};
  }
  return {};
}

LayerKind checked_kind(std::uint8_t tag) {
  if (tag < static_cast<std::uint8_t>(LayerKind::dense) ||
      tag > static_cast<std::uint8_t>(LayerKind::softmax_xent_head)) {
    throw CheckpointError("unknown layer kind tag " + std::to_string(tag));
  }
  return static_cast<LayerKind>(tag);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const ConfigHash& hash) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le<std::uint16_t>(kCheckpointVersion);
  w.bytes(hash.data(), hash.size());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(model.layers().size()));
  for (const Layer& layer : model.layers()) {
    w.le<std::uint8_t>(static_cast<std::uint8_t>(layer.spec.kind));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(layer.spec.fan_in));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(layer.spec.fan_out));
    auto tensors = stored_tensors(layer);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(tensors.size()));
    for (const Tensor* t : tensors) w.tensor(*t);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("bad checkpoint magic '" + std::string(magic, 4) + "', expected 'DQN1'");
  }
  const auto version = r.le<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + ", this reader handles " +
                          std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  r.bytes(ckpt.config_hash.data(), ckpt.config_hash.size());
  const auto count = r.le<std::uint32_t>();
  std::vector<Layer> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    Layer layer;
    layer.spec.kind = checked_kind(r.le<std::uint8_t>());
    layer.spec.fan_in = r.le<std::uint32_t>();
    layer.spec.fan_out = r.le<std::uint32_t>();
    auto slots = stored_tensors(layer);
    const auto stored = r.le<std::uint8_t>();
    if (stored != slots.size()) {
      throw CheckpointError("layer " + std::to_string(i) + " (" + std::string(to_string(layer.spec.kind)) + ") has " +
                            std::to_string(stored) + " tensors, expected " + std::to_string(slots.size()));
    }
    for (Tensor* slot : slots) *slot = r.tensor();
    if (layer.has_weights() && (layer.weight.shape() != Shape{layer.spec.fan_out, layer.spec.fan_in} ||
                                layer.bias.shape() != Shape{layer.spec.fan_out})) {
      throw CheckpointError("layer " + std::to_string(i) + " weight shape disagrees with its fan-in/fan-out");
    }
    layers.push_back(std::move(layer));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  try {
    ckpt.model = Model(std::move(layers));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("inconsistent checkpoint: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Model& model, const ConfigHash& hash, const std::filesystem::path& path) {
  auto bytes = serialize_checkpoint(model, hash);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ConfigHash& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.config_hash != expected) {
    throw CheckpointError("config hash mismatch for " + path.string() +
                          ": checkpoint was trained under a different configuration");
  }
  return ckpt;
}

}  // namespace qg
