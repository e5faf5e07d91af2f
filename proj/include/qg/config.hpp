#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qg/attacks.hpp"
#include "qg/network.hpp"

namespace qg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LrSchedule {
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  std::vector<float> milestones{0.5f, 0.75f};  // fractions of the epoch budget
  float decay = 0.1f;

  /// Learning rate for 0-based `epoch`: lr · decay^(milestones passed).
  float rate_at(int epoch, int epochs) const;
};

struct AdvTrainConfig {
  bool enabled = false;
  AttackFamily family = AttackFamily::rfgsm;
  float epsilon_train = 0.3f;
  float alpha_fraction = 0.5f;
};

struct SeedConfig {
  std::uint64_t init = 1;
  std::uint64_t shuffle = 1;
  std::uint64_t attack = 1;
};

struct ExperimentConfig {
  std::string model_id = "model";
  Arch arch = Arch::fcn2;
  std::vector<std::size_t> hidden;  // used when arch == custom
  bool binarized = false;
  int input_bits = 8;
  int epochs = 10;
  std::size_t batch_size = 100;
  LrSchedule schedule;
  AdvTrainConfig adv_train;
  SeedConfig seeds;
  std::vector<float> eval_epsilons{0.0f, 0.1f, 0.2f, 0.3f};
  AttackFamily eval_attack = AttackFamily::fgsm;
  std::size_t train_limit = 0;  // 0 = whole split
  std::size_t test_limit = 0;
  std::size_t l1_samples = 1000;
  std::vector<float> l1_epsilons{0.0f, 0.1f, 0.3f};

  std::vector<std::size_t> hidden_layers() const;
  void validate() const;
};

/// Every accepted key, in canonical order.
std::vector<std::string_view> config_keys();

/// Sets one dotted key from its textual value. Unknown keys raise ConfigError
/// naming the closest valid key.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);
/// Applies a `key=value` override.
void apply_override(ExperimentConfig& cfg, std::string_view assignment);

/// Parses the line-oriented config format on top of `base`:
///   # comment
///   key = value           (dotted keys allowed)
///   [section]             (prefixes following keys with "section.")
///   list = [0, 0.1, 0.3]  (brackets optional)
ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {});
/// The same text as an ordered list of `key=value` overrides (section
/// prefixes applied, keys checked).
std::vector<std::string> config_assignments(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

/// Canonical text with every key; parse_config(to_config_text(c)) == c.
std::string to_config_text(const ExperimentConfig& cfg);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

ConfigHash sha256(std::string_view bytes);
std::string to_hex(const ConfigHash& hash);
/// Hash of the canonical text of the whole configuration.
ConfigHash config_hash(const ExperimentConfig& cfg);
/// Hash over the keys that influence training only (evaluation settings
/// excluded); used to tag checkpoints and key the model cache.
ConfigHash training_hash(const ExperimentConfig& cfg);

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace qg
