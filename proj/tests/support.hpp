#pragma once

// Shared fixtures for the unit suites: temporary directories, synthetic
// IDX data and a double-precision reference forward pass.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qg/data.hpp"
#include "qg/network.hpp"
#include "qg/rng.hpp"

namespace qg::test {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "qg") {
    static std::uint64_t counter = 0;
    Rng rng(derive_seed(static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()) ^
                                static_cast<std::uint64_t>(::getpid()), ++counter));
    path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rng.next_u64() % 1000000007ULL));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Learnable 28×28 digits: class k lights a 6×6 block at a class-specific
/// position, on top of low-amplitude noise.
inline RawDataset synthetic_dataset(std::size_t n, std::uint64_t seed, Split split = Split::train) {
  RawDataset ds;
  ds.split = split;
  ds.images.resize(n * kImagePixels);
  ds.labels.resize(n);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::uint8_t>(rng.below(kNumClasses));
    ds.labels[i] = label;
    std::uint8_t* img = ds.images.data() + i * kImagePixels;
    for (std::size_t p = 0; p < kImagePixels; ++p) img[p] = static_cast<std::uint8_t>(rng.below(40));
    const std::size_t r0 = 2 + (label / 5) * 12 + rng.below(3);
    const std::size_t c0 = 1 + (label % 5) * 5 + rng.below(2);
    for (std::size_t r = r0; r < r0 + 6; ++r)
      for (std::size_t c = c0; c < c0 + 6 && c < kImageSide; ++c)
        img[r * kImageSide + c] = static_cast<std::uint8_t>(200 + rng.below(56));
  }
  return ds;
}

/// Writes train-* and t10k-* IDX files into `dir`.
inline void write_mnist_dir(const std::filesystem::path& dir, const RawDataset& train, const RawDataset& test) {
  std::filesystem::create_directories(dir);
  write_idx_images(dir / "train-images-idx3-ubyte", train);
  write_idx_labels(dir / "train-labels-idx1-ubyte", train);
  write_idx_images(dir / "t10k-images-idx3-ubyte", test);
  write_idx_labels(dir / "t10k-labels-idx1-ubyte", test);
}

/// MNIST directory from QG_DATA_DIR when it holds the official files.
inline std::optional<std::filesystem::path> real_mnist_dir() {
  const char* env = std::getenv("QG_DATA_DIR");
  std::filesystem::path dir = env && *env ? std::filesystem::path(env) : std::filesystem::path(QG_TEST_DATA_DIR);
  if (std::filesystem::exists(dir / "t10k-images-idx3-ubyte")) return dir;
  return std::nullopt;
}

inline Tensor random_uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

/// Reference model in double precision: the layer list of a Model with
/// every parameter widened. Binary layers use the weights stored here as
/// given (callers store sign(W) to evaluate the binarized function).
struct RefLayer {
  LayerKind kind;
  std::size_t in = 0, out = 0;
  std::vector<double> weight, bias, gamma, beta;
};

inline std::vector<double> widen(const Tensor& t) {
  return t.empty() ? std::vector<double>{} : std::vector<double>(t.values().begin(), t.values().end());
}

inline std::vector<RefLayer> reference_layers(const Model& m, bool binarize_weights) {
  std::vector<RefLayer> out;
  for (const Layer& l : m.layers()) {
    RefLayer r{l.spec.kind, l.spec.fan_in, l.spec.fan_out, widen(l.weight), widen(l.bias), widen(l.gamma),
               widen(l.beta)};
    if (binarize_weights && l.spec.kind == LayerKind::binary_dense)
      for (double& w : r.weight) w = w < 0.0 ? -1.0 : 1.0;
    out.push_back(std::move(r));
  }
  return out;
}

/// Train-mode loss (batch statistics) of the reference model.
inline double reference_loss(const std::vector<RefLayer>& layers, std::vector<double> x, std::size_t batch,
                             const std::vector<std::uint8_t>& labels) {
  std::size_t width = x.size() / batch;
  for (const RefLayer& l : layers) {
    switch (l.kind) {
      case LayerKind::dense:
      case LayerKind::binary_dense: {
        std::vector<double> y(batch * l.out);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < l.out; ++o) {
            double s = l.bias[o];
            for (std::size_t i = 0; i < l.in; ++i) s += x[b * l.in + i] * l.weight[o * l.in + i];
            y[b * l.out + o] = s;
          }
        x = std::move(y);
        width = l.out;
        break;
      }
      case LayerKind::relu:
        for (double& v : x) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::sign_act:
        for (double& v : x) v = v < 0.0 ? -1.0 : 1.0;
        break;
      case LayerKind::hardtanh:
        for (double& v : x) v = std::clamp(v, -1.0, 1.0);
        break;
      case LayerKind::batchnorm:
        for (std::size_t c = 0; c < width; ++c) {
          double mean = 0.0, var = 0.0;
          for (std::size_t b = 0; b < batch; ++b) mean += x[b * width + c];
          mean /= static_cast<double>(batch);
          for (std::size_t b = 0; b < batch; ++b) var += (x[b * width + c] - mean) * (x[b * width + c] - mean);
          var /= static_cast<double>(batch);
          const double inv = 1.0 / std::sqrt(var + static_cast<double>(kBatchNormEpsilon));
          for (std::size_t b = 0; b < batch; ++b)
            x[b * width + c] = l.gamma[c] * (x[b * width + c] - mean) * inv + l.beta[c];
        }
        break;
      case LayerKind::softmax_xent_head:
        break;
    }
  }
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double peak = x[b * width];
    for (std::size_t c = 1; c < width; ++c) peak = std::max(peak, x[b * width + c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < width; ++c) denom += std::exp(x[b * width + c] - peak);
    total += std::log(denom) - (x[b * width + labels[b]] - peak);
  }
  return total / static_cast<double>(batch);
}

inline bool gradient_close(double analytic, double numeric, double rel = 1e-3, double abs_floor = 1e-6) {
  return std::abs(analytic - numeric) <= rel * std::max(std::abs(analytic), std::abs(numeric)) + abs_floor;
}

}  // namespace qg::test
