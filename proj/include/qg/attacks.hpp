#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "qg/data.hpp"
#include "qg/network.hpp"
#include "qg/rng.hpp"
#include "qg/tensor.hpp"

namespace qg {

enum class AttackFamily { none, fgsm, rfgsm };

/// How the attacker differentiates through the input discretizer. The only
/// policy is straight-through: the quantizer's gradient is taken as identity.
enum class QuantizerGradient { straight_through };

std::string_view to_string(AttackFamily family);
std::string_view to_string(QuantizerGradient policy);
AttackFamily parse_attack_family(std::string_view text);

struct AttackSpec {
  AttackFamily family = AttackFamily::fgsm;
  float epsilon = 0.0f;          // L∞ budget in normalized [0, 1] pixel units
  float alpha_fraction = 0.5f;   // R-FGSM random-step share of epsilon
  std::uint64_t seed = 0;
  QuantizerGradient quantizer_gradient = QuantizerGradient::straight_through;

  float alpha() const noexcept { return alpha_fraction * epsilon; }
  /// Throws std::invalid_argument when the spec is inconsistent.
  void validate() const;
};

/// dL/dx_raw for a batch of normalized raw images: the loss gradient at the
/// quantized input, passed straight through the discretizer.
Tensor input_gradient(const Model& model, int input_bits, const Tensor& x_raw,
                      std::span<const std::uint8_t> labels);

/// x_adv = clip(x_raw + eps·sign(dL/dx), 0, 1), computed white-box against
/// the model and its input pipeline (eval mode). sign(0) is +1.
Tensor fgsm(const Model& model, int input_bits, const Tensor& x_raw, std::span<const std::uint8_t> labels,
            float epsilon);

/// R-FGSM: X' = clip(X + alpha·sign(N(0, I)), 0, 1), then a gradient-sign step
/// of size (eps - alpha) taken at X'. Noise is drawn row-major from `rng`.
Tensor rfgsm(const Model& model, int input_bits, const Tensor& x_raw, std::span<const std::uint8_t> labels,
             float epsilon, float alpha, Rng& rng);

/// R-FGSM with one noise stream per sample, seeded from (seed, sample id), so
/// the result does not depend on how samples are grouped into batches.
Tensor rfgsm(const Model& model, int input_bits, const Tensor& x_raw, std::span<const std::uint8_t> labels,
             float epsilon, float alpha, std::uint64_t seed, std::span<const std::size_t> sample_ids);

/// Adversarial examples for a whole dataset, stored as the victim sees them
/// (already passed through its input pipeline).
struct AdversarialSet {
  AttackSpec spec;
  int input_bits = 8;
  Tensor images;  // [count × pixels] in [0, 1]
  std::vector<std::uint8_t> labels;

  std::size_t count() const noexcept { return labels.size(); }
};

AdversarialSet adversarial_testset(const Model& model, int input_bits, const RawDataset& ds, const AttackSpec& spec,
                                   std::size_t batch_size = 500);

/// Number of rows whose eval-mode prediction matches the label. Inputs are
/// passed through the pipeline first (idempotent on already-quantized data).
std::size_t count_correct(const Model& model, int input_bits, const Tensor& x, std::span<const std::uint8_t> labels,
                          std::size_t batch_size = 1000);

// Binary container for adversarial sets, same header discipline as model
// checkpoints: "DQA1", u16 version, 32-byte config hash, u8 family, f32 eps,
// f32 alpha fraction, u64 seed, u8 input bits, u32 count, u32 pixels, f32
// images, u8 labels (little-endian).
void save_adversarial_set(const AdversarialSet& set, const ConfigHash& hash, const std::filesystem::path& path);
AdversarialSet load_adversarial_set(const std::filesystem::path& path, ConfigHash* hash = nullptr);

}  // namespace qg
