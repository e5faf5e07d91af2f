#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qg/attacks.hpp"
#include "qg/config.hpp"
#include "qg/data.hpp"
#include "qg/network.hpp"

namespace qg {

// ---------------------------------------------------------------- training

struct EpochLog {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double test_accuracy_pct = 0.0;
  float lr = 0.0f;
};

/// One `epoch=.. loss=.. test_acc=.. lr=..` line.
std::string format_epoch_log(const EpochLog& entry);

struct TrainResult {
  Model model;
  std::vector<EpochLog> log;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  TrainingDivergedError(int epoch, std::size_t batch, double loss);
  int epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  int epoch_;
  std::size_t batch_;
};

/// Trains a fresh model under `cfg` with SGD + momentum. With adversarial
/// training enabled, the second half of every batch is replaced by attacked
/// copies crafted against the current model (eval mode). Every epoch appends
/// one log entry; `log`, when set, receives the formatted line as well.
TrainResult train(const ExperimentConfig& cfg, const RawDataset& train_set, const RawDataset& test_set,
                  std::ostream* log = nullptr);

/// Clean accuracy (percent) of `model` on `test_set` through its pipeline.
double clean_accuracy_pct(const Model& model, int input_bits, const RawDataset& test_set);

/// Loads the configured MNIST splits, applying train/test limits.
std::pair<RawDataset, RawDataset> load_datasets(const ExperimentConfig& cfg, const std::filesystem::path& data_dir);

// ----------------------------------------------------------------- sweeps

struct SweepRow {
  std::string model_id;
  int input_bits = 8;
  bool binarized = false;
  AttackFamily attack = AttackFamily::none;
  float epsilon = 0.0f;
  double accuracy_pct = 0.0;
  std::size_t n_samples = 0;

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

using Metadata = std::vector<std::pair<std::string, std::string>>;

struct SweepReport {
  Metadata metadata;  // config_hash first
  double wall_clock_seconds = 0.0;
  std::vector<SweepRow> rows;

  std::string meta(const std::string& key) const;
  /// Row for (model_id, epsilon); throws std::out_of_range when absent.
  const SweepRow& at(const std::string& model_id, float epsilon) const;
};

/// Metadata block describing a run: config hash, seeds, epochs, attack
/// generator and quantizer-gradient policy.
Metadata run_metadata(const ExperimentConfig& cfg);

/// Runs independent jobs 0..count-1 on up to `workers` threads. The first
/// exception (lowest index) is rethrown after all jobs finish.
void run_parallel(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job);

/// Accuracy for each epsilon over the full adversarial test set. Rows are
/// sorted by epsilon; the epsilon = 0 row uses attack "none".
SweepReport sweep(const Model& model, const ExperimentConfig& cfg, const RawDataset& test_set,
                  std::size_t workers = 1);

enum class ReportFormat { csv, text };

ReportFormat parse_report_format(std::string_view text);
std::string render_report(const SweepReport& report, ReportFormat format);
/// Throws std::runtime_error when the path cannot be written.
void emit_report(const SweepReport& report, const std::filesystem::path& path, ReportFormat format = ReportFormat::csv);
/// Inverse of the CSV rendering (wall-clock is not part of the CSV).
SweepReport parse_report_csv(std::string_view text);

// ---------------------------------------------------- activation analysis

struct L1Summary {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double variance = 0.0;  // population variance
};

L1Summary summarize(std::span<const double> values);

struct L1Series {
  float epsilon = 0.0f;
  std::vector<double> norms;  // one per sample, divided by the layer width
  L1Summary summary;
};

struct L1Profile {
  std::string model_id;
  bool binarized = false;
  std::size_t width = 0;
  std::vector<L1Series> series;
};

/// Per-sample L1 norm of the first hidden dense layer's output (before its
/// batchnorm) over the first `samples` test images, for FGSM adversaries at
/// each epsilon (0 = clean).
L1Profile l1_profile(const Model& model, int input_bits, const RawDataset& test_set, std::size_t samples,
                     std::span<const float> epsilons, const std::string& model_id);

/// CSV: `# key=value` metadata, then model_id,binarized,epsilon,sample,l1_norm.
std::string render_l1_csv(const L1Profile& profile, const Metadata& metadata);
/// CSV of the per-epsilon summaries: model_id,binarized,epsilon,min,max,mean,variance.
std::string render_l1_summary_csv(const L1Profile& profile);

/// Shortest round-trip text for a float.
std::string format_number(double value);
std::string format_number(float value);

void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace qg
