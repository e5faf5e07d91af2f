#include "qg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>

#include "qg/rng.hpp"

namespace qg {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

void require_size(const std::filesystem::path& path, std::size_t expected, std::size_t actual) {
  if (actual < expected) {
    throw IdxError(path.string() + ": truncated file, expected " + std::to_string(expected) + " bytes, got " +
                   std::to_string(actual));
  }
}

struct IdxPayload {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

IdxPayload parse_idx(const std::filesystem::path& path, std::uint32_t magic, std::size_t rank, const char* what) {
  std::vector<std::uint8_t> bytes = read_file(path);
  require_size(path, 4, bytes.size());
  std::uint32_t found = read_be32(bytes, 0);
  if (found != magic) {
    throw IdxError(path.string() + ": bad magic number " + hex32(found) + ", expected " + hex32(magic) + " (" +
                   what + ")");
  }
  const std::size_t header = 4 + 4 * rank;
  require_size(path, header, bytes.size());
  IdxPayload payload;
  std::size_t volume = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    payload.dims.push_back(read_be32(bytes, 4 + 4 * d));
    volume *= payload.dims.back();
  }
  require_size(path, header + volume, bytes.size());
  if (bytes.size() > header + volume) {
    throw IdxError(path.string() + ": trailing data, expected " + std::to_string(header + volume) + " bytes, got " +
                   std::to_string(bytes.size()));
  }
  payload.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return payload;
}

}  // namespace

RawDataset RawDataset::head(std::size_t n) const {
  if (n == 0 || n >= count()) return *this;
  RawDataset out;
  out.split = split;
  out.rows = rows;
  out.cols = cols;
  out.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n * pixels()));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

void RawDataset::validate() const {
  if (images.size() != count() * pixels()) {
    throw IdxError("image count " + std::to_string(images.size() / std::max<std::size_t>(pixels(), 1)) +
                   " does not match label count " + std::to_string(count()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= kNumClasses) {
      throw IdxError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) + " is not in [0, 9]");
    }
  }
}

RawDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split) {
  IdxPayload img = parse_idx(images, kIdxImagesMagic, 3, "images");
  IdxPayload lab = parse_idx(labels, kIdxLabelsMagic, 1, "labels");
  if (img.dims[0] != lab.dims[0]) {
    throw IdxError("count mismatch: " + images.string() + " holds " + std::to_string(img.dims[0]) + " images but " +
                   labels.string() + " holds " + std::to_string(lab.dims[0]) + " labels");
  }
  RawDataset ds;
  ds.split = split;
  ds.rows = img.dims[1];
  ds.cols = img.dims[2];
  ds.images = std::move(img.data);
  ds.labels = std::move(lab.data);
  ds.validate();
  return ds;
}

RawDataset load_mnist(const std::filesystem::path& dir, Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"), split);
}

void write_idx_images(const std::filesystem::path& path, const RawDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError("cannot write " + path.string());
  write_be32(out, kIdxImagesMagic);
  write_be32(out, static_cast<std::uint32_t>(ds.count()));
  write_be32(out, static_cast<std::uint32_t>(ds.rows));
  write_be32(out, static_cast<std::uint32_t>(ds.cols));
  out.write(reinterpret_cast<const char*>(ds.images.data()), static_cast<std::streamsize>(ds.images.size()));
}

void write_idx_labels(const std::filesystem::path& path, const RawDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IdxError("cannot write " + path.string());
  write_be32(out, kIdxLabelsMagic);
  write_be32(out, static_cast<std::uint32_t>(ds.count()));
  out.write(reinterpret_cast<const char*>(ds.labels.data()), static_cast<std::streamsize>(ds.labels.size()));
}

bool is_supported_input_bits(int bits) noexcept {
  return std::find(std::begin(kSupportedInputBits), std::end(kSupportedInputBits), bits) !=
         std::end(kSupportedInputBits);
}

void require_supported_input_bits(int bits) {
  if (!is_supported_input_bits(bits)) {
    throw std::invalid_argument("input_bits must be one of 2, 3, 4, 8; got " + std::to_string(bits));
  }
}

float discretize_pixel(float intensity, int bits) {
  require_supported_input_bits(bits);
  // Bin centres of the top bin (255.5 at eight bits) are accepted so that
  // re-discretizing an output is well defined.
  if (!(intensity >= 0.0f && intensity < 256.0f)) {
    throw std::invalid_argument("pixel intensity " + std::to_string(intensity) + " outside [0, 256)");
  }
  const float width = static_cast<float>(256 >> bits);
  return std::floor(intensity / width) * width + 0.5f * width;
}

Tensor discretize_pixels(const Tensor& intensities, int bits) {
  Tensor out = intensities;
  for (float& v : out.values()) v = discretize_pixel(v, bits);
  return out;
}

Tensor quantize_inputs(const Tensor& normalized, int bits) {
  require_supported_input_bits(bits);
  const float width = static_cast<float>(256 >> bits);
  const float last_bin = static_cast<float>((1 << bits) - 1);
  Tensor out = normalized;
  for (float& v : out.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw std::invalid_argument("normalized pixel " + std::to_string(v) + " outside [0, 1]");
    }
    const float bin = std::min(std::floor(v * 256.0f / width), last_bin);
    v = (bin * width + 0.5f * width) / 256.0f;
  }
  return out;
}

Tensor normalized_images(const RawDataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("normalized_images needs at least one index");
  Tensor out({indices.size(), ds.pixels()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto src = ds.image(indices[r]);
    auto dst = out.row(r);
    for (std::size_t p = 0; p < src.size(); ++p) dst[p] = static_cast<float>(src[p]) / 256.0f;
  }
  return out;
}

void PipelineConfig::validate() const {
  require_supported_input_bits(input_bits);
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
}

BatchSequence::BatchSequence(const RawDataset& ds, const PipelineConfig& cfg, std::uint64_t epoch)
    : ds_(&ds), cfg_(cfg) {
  cfg_.validate();
  if (ds.count() == 0) throw std::invalid_argument("cannot batch an empty dataset");
  order_.resize(ds.count());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(cfg.shuffle_seed, epoch));
  rng.shuffle(std::span<std::size_t>(order_));
}

Batch BatchSequence::operator[](std::size_t i) const {
  if (i >= size()) throw std::out_of_range("batch index " + std::to_string(i) + " of " + std::to_string(size()));
  const std::size_t begin = i * cfg_.batch_size;
  const std::size_t end = std::min(begin + cfg_.batch_size, order_.size());
  return make_batch(*ds_, std::span<const std::size_t>(order_).subspan(begin, end - begin), cfg_.input_bits);
}

BatchSequence batches(const RawDataset& ds, const PipelineConfig& cfg, std::uint64_t epoch) {
  return BatchSequence(ds, cfg, epoch);
}

Batch make_batch(const RawDataset& ds, std::span<const std::size_t> indices, int input_bits) {
  Batch batch;
  batch.indices.assign(indices.begin(), indices.end());
  batch.raw = normalized_images(ds, indices);
  batch.inputs = quantize_inputs(batch.raw, input_bits);
  batch.labels.reserve(indices.size());
  for (std::size_t idx : indices) batch.labels.push_back(ds.labels[idx]);
  return batch;
}

}  // namespace qg
