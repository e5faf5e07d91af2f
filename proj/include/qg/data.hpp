#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qg/tensor.hpp"

namespace qg {

inline constexpr std::size_t kImageSide = 28;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kNumClasses = 10;

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Raised for malformed or mismatched IDX input.
class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, test };

/// Labelled images in the raw 8-bit pixel domain.
struct RawDataset {
  Split split = Split::train;
  std::size_t rows = kImageSide;
  std::size_t cols = kImageSide;
  std::vector<std::uint8_t> images;  // count × rows × cols, row-major
  std::vector<std::uint8_t> labels;  // count entries in [0, 9]

  std::size_t count() const noexcept { return labels.size(); }
  std::size_t pixels() const noexcept { return rows * cols; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(images).subspan(i * pixels(), pixels());
  }

  /// First `n` items (all when n == 0 or n >= count()).
  RawDataset head(std::size_t n) const;
  /// Throws IdxError when the counts disagree or a label is out of range.
  void validate() const;
};

// IDX parsing. Headers are big-endian; errors name the offending file and,
// for truncation, the expected and actual byte counts.
RawDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, Split split);
/// Loads train-* or t10k-* files from an MNIST directory.
RawDataset load_mnist(const std::filesystem::path& dir, Split split);

// Writers for the same format, used by tooling and tests.
void write_idx_images(const std::filesystem::path& path, const RawDataset& ds);
void write_idx_labels(const std::filesystem::path& path, const RawDataset& ds);

inline constexpr int kSupportedInputBits[] = {2, 3, 4, 8};
bool is_supported_input_bits(int bits) noexcept;
void require_supported_input_bits(int bits);

/// Pixel discretization at depth `bits` on raw intensities in [0, 256)
/// (integers 0..255 plus the bin centres this map produces):
///   I -> floor(I / w) * w + w / 2, with bin width w = 256 / 2^bits.
/// Each output is the centre of its bin.
float discretize_pixel(float intensity, int bits);
Tensor discretize_pixels(const Tensor& intensities, int bits);

/// Model input pipeline on normalized pixels x = I / 256 in [0, 1]:
/// discretize x·256 (values at the top edge fall in the last bin) and scale
/// back by 1/256. Used for clean batches and for re-quantizing adversarial
/// images before they reach the model.
Tensor quantize_inputs(const Tensor& normalized, int bits);

/// Raw pixels scaled by 1/256, without discretization, as a [n × pixels] tensor.
Tensor normalized_images(const RawDataset& ds, std::span<const std::size_t> indices);

struct PipelineConfig {
  int input_bits = 8;
  std::uint64_t shuffle_seed = 0;
  std::size_t batch_size = 100;

  void validate() const;
};

struct Batch {
  std::vector<std::size_t> indices;  // positions in the source dataset
  Tensor raw;                        // I / 256, not discretized
  Tensor inputs;                     // quantize_inputs(raw, bits)
  std::vector<std::uint8_t> labels;
};

/// Deterministic view over one epoch of shuffled batches. The order is a pure
/// function of (shuffle_seed, epoch); the final short batch is kept.
class BatchSequence {
 public:
  BatchSequence(const RawDataset& ds, const PipelineConfig& cfg, std::uint64_t epoch);

  std::size_t size() const noexcept { return (order_.size() + cfg_.batch_size - 1) / cfg_.batch_size; }
  Batch operator[](std::size_t i) const;
  const std::vector<std::size_t>& order() const noexcept { return order_; }

 private:
  const RawDataset* ds_;
  PipelineConfig cfg_;
  std::vector<std::size_t> order_;
};

BatchSequence batches(const RawDataset& ds, const PipelineConfig& cfg, std::uint64_t epoch);

/// Unshuffled batch of the given dataset positions.
Batch make_batch(const RawDataset& ds, std::span<const std::size_t> indices, int input_bits);

}  // namespace qg
