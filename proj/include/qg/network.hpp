#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "qg/tensor.hpp"

namespace qg {

enum class LayerKind : std::uint8_t {
  dense = 1,
  binary_dense = 2,
  relu = 3,
  sign_act = 4,
  hardtanh = 5,
  batchnorm = 6,
  softmax_xent_head = 7,
};

std::string_view to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t fan_in = 0;   // dense kinds: input width; batchnorm: feature count
  std::size_t fan_out = 0;  // dense kinds: output width; batchnorm: feature count
};

/// One layer with its parameter storage. Dense kinds keep `weight`
/// ([fan_out × fan_in]) and `bias` ([fan_out]); batchnorm keeps gamma, beta and
/// running moments. Unused tensors are null.
struct Layer {
  LayerSpec spec;
  Tensor weight;
  Tensor bias;
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  bool has_weights() const noexcept {
    return spec.kind == LayerKind::dense || spec.kind == LayerKind::binary_dense;
  }
};

inline constexpr float kBatchNormEpsilon = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

enum class Arch { fcn1, fcn2, custom };

std::string_view to_string(Arch arch);
/// Hidden widths of the named architectures: FCN1 = 6144×4, FCN2 = 600×4.
std::vector<std::size_t> hidden_widths(Arch arch);

/// Ordered layer list plus parameters.
///
/// Binary layers keep real-valued latent weights in [-1, +1]; every forward
/// pass sees sign(W) only. The version counter advances on every parameter
/// update so a forward cache can be checked against the model it came from.
class Model {
 public:
  Model() = default;
  explicit Model(std::vector<Layer> layers);

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& mutable_layers() noexcept { return layers_; }

  std::size_t input_width() const;
  std::size_t output_width() const;
  bool binarized() const noexcept;

  std::uint64_t version() const noexcept { return version_; }
  void touch() noexcept { ++version_; }

  /// Trainable tensors in a fixed order: per layer, weight then bias for
  /// dense kinds and gamma then beta for batchnorm.
  std::vector<const Tensor*> trainable() const;
  std::vector<Tensor*> trainable();
  std::size_t trainable_count() const;

  /// Index of the first dense layer whose output is a hidden activation.
  std::size_t first_hidden_dense() const;

  friend bool operator==(const Model& a, const Model& b);

 private:
  std::vector<Layer> layers_;
  std::uint64_t version_ = 0;
};

/// Builds input → [dense → batchnorm → act] × hidden → dense → head.
/// Full precision uses dense layers and relu; binarized uses binary_dense and
/// sign (hardtanh straight-through); the binary output layer feeds the head
/// directly.
/// Weights are uniform in ±sqrt(6 / (fan_in + fan_out)); biases start at 0.
Model build_model(std::span<const std::size_t> hidden, bool binarized, std::uint64_t init_seed,
                  std::size_t input_width = 784, std::size_t classes = 10);
Model build_model(Arch arch, bool binarized, std::uint64_t init_seed);

enum class Mode { train, eval };

struct BatchMoments {
  std::size_t layer = 0;
  Tensor mean;
  Tensor var;  // unbiased estimate, for the running average
};

/// Per-layer values kept by forward for backward and for activation analysis.
struct ForwardCache {
  std::uint64_t model_version = 0;
  Mode mode = Mode::eval;
  std::vector<Tensor> inputs;     // inputs[i] = input to layer i; inputs.back() = logits
  std::vector<Tensor> normalized; // batchnorm x̂ per layer (null elsewhere)
  std::vector<Tensor> inv_std;    // batchnorm 1/sqrt(var + eps) per layer (null elsewhere)
  std::vector<BatchMoments> moments;  // train-mode batch statistics

  const Tensor& logits() const { return inputs.back(); }
  const Tensor& layer_output(std::size_t i) const { return inputs.at(i + 1); }
};

/// Runs the layer sequence on x [batch × input_width]. Does not modify the
/// model; in eval mode the result depends only on (parameters, x).
ForwardCache forward(const Model& model, const Tensor& x, Mode mode);

enum class GradientScope { parameters_and_input, input_only };

struct Gradients {
  double loss = 0.0;             // mean softmax cross-entropy
  std::vector<Tensor> params;    // aligned with Model::trainable(); empty for input_only
  Tensor input;                  // dL/dx, same shape as the forward input
  std::vector<BatchMoments> moments;
};

class StaleCacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean softmax cross-entropy over the batch.
double cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels);
std::vector<std::size_t> predictions(const Tensor& logits);

/// Reverse pass of softmax cross-entropy through the cached forward.
/// sign activations use the hardtanh straight-through estimator; binary
/// layers route the input gradient through sign(W) and the weight gradient
/// through the layer input.
Gradients backward(const Model& model, const ForwardCache& cache, std::span<const std::uint8_t> labels,
                   GradientScope scope = GradientScope::parameters_and_input);

/// Plain step W <- W - lr·(grad + weight_decay·W) on weights (biases and
/// batchnorm affine parameters are not decayed), then clamp binary-layer
/// weights to [-1, +1] and fold the batch moments into the running averages.
/// Throws NonFiniteGradientError before touching the model.
void sgd_step(Model& model, const Gradients& grads, float lr, float weight_decay);

/// SGD with heavy-ball momentum: v <- mu·v + (grad + wd·W); W <- W - lr·v.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(float momentum) : momentum_(momentum) {}
  void step(Model& model, const Gradients& grads, float lr, float weight_decay);

 private:
  float momentum_;
  std::vector<Tensor> velocity_;
};

// Checkpoints. Layout (little-endian): "DQN1", u16 version, 32-byte config
// hash, u32 layer count, then per layer: u8 kind, u32 fan_in, u32 fan_out,
// u8 tensor count, and per tensor u8 rank, u32 extents, f32 payload.
using ConfigHash = std::array<std::uint8_t, 32>;

inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  Model model;
  ConfigHash config_hash{};
};

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const ConfigHash& hash);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Model& model, const ConfigHash& hash, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Same as load_checkpoint, and throws CheckpointError if the stored hash
/// differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ConfigHash& expected);

}  // namespace qg
