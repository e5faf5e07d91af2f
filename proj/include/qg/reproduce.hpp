#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qg/experiments.hpp"

namespace qg {

/// One model family inside a canned pipeline; trained once per seed.
struct Variant {
  std::string label;  // e.g. "fp-8b"; job model ids append "-s<seed>"
  bool binarized = false;
  int input_bits = 8;
  bool adv_train = false;
};

/// Published number for one (variant, epsilon) cell.
struct PaperValue {
  std::string label;
  float epsilon = 0.0f;
  double accuracy_pct = 0.0;
  std::string source;     // table or figure the number comes from
  double tolerance = -1;  // gating tolerance in points; negative = informational only
};

struct Target {
  std::string name;
  std::string description;
  std::vector<Variant> variants;
  std::vector<float> epsilons;
  std::vector<PaperValue> paper;
  bool l1_analysis = false;
};

/// The canned pipelines: table2, table5-fcn2, fig4b, fig5-fcn2, fig6.
const std::vector<Target>& reproduce_targets();
const Target& find_target(std::string_view name);

/// Training settings shared by every canned job before user overrides.
ExperimentConfig canned_config(const Variant& variant, std::uint64_t seed, std::span<const float> epsilons);

struct ReproduceOptions {
  std::filesystem::path data_dir;
  std::optional<std::filesystem::path> cache_dir;  // trained models keyed by training hash
  std::size_t workers = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> overrides;  // key=value, applied after the canned settings
  std::ostream* log = nullptr;
};

struct ComparisonRow {
  std::string label;
  int input_bits = 8;
  bool binarized = false;
  float epsilon = 0.0f;
  std::vector<double> per_seed;
  double mean = 0.0;
  std::optional<double> paper;
  std::string source;
  std::optional<double> tolerance;
  std::optional<bool> pass;  // set only for gated cells
};

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct ReproduceResult {
  std::string target;
  std::vector<ExperimentConfig> configs;  // one per job, in job order
  SweepReport report;                     // rows of every job, in job order
  std::vector<ComparisonRow> table;
  std::vector<L1Profile> profiles;        // fig6 only
  std::vector<Check> checks;

  bool passed() const;
};

ReproduceResult reproduce(std::string_view target, const ReproduceOptions& options);

/// Plain-text table (label, bits, eps, ours, paper, delta, pass) plus checks.
std::string render_comparison(const ReproduceResult& result);
std::string render_comparison_csv(const ReproduceResult& result);

/// Writes <target>.csv, <target>_comparison.csv/.txt, per-job configs under
/// configs/ and, for L1 targets, the profile CSVs. Returns the paths written.
std::vector<std::filesystem::path> write_reproduce_outputs(const ReproduceResult& result,
                                                           const std::filesystem::path& out_dir);

/// Trains `cfg`, or loads the cached model trained under the same training hash.
Model train_or_load(const ExperimentConfig& cfg, const RawDataset& train_set, const RawDataset& test_set,
                    const std::optional<std::filesystem::path>& cache_dir, std::ostream* log);

}  // namespace qg
