#include "qg/reproduce.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>

namespace qg {

namespace {

constexpr float kEpsTrain = 0.3f;
constexpr float kBnnLearningRate = 0.05f;
constexpr double kCleanFloor = 95.0;

const std::vector<float> kTableEps{0.0f, 0.1f, 0.2f, 0.3f};

std::vector<PaperValue> row(const std::string& label, const std::string& source, std::vector<double> values,
                            std::vector<double> tolerances = {}) {
  std::vector<PaperValue> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double tol = i < tolerances.size() ? tolerances[i] : -1.0;
    out.push_back({label, kTableEps[i], values[i], source, tol});
  }
  return out;
}

template <typename T>
void append(std::vector<T>& dst, std::vector<T> src) {
  dst.insert(dst.end(), std::make_move_iterator(src.begin()), std::make_move_iterator(src.end()));
}

std::vector<Target> build_targets() {
  std::vector<Target> targets;

  Target table2{"table2", "adversarially trained FCN2 (R-FGSM, eps_train 0.3) at 2b and 8b input", {}, kTableEps, {}};
  table2.variants = {{"fp-2b-adv", false, 2, true}, {"fp-8b-adv", false, 8, true}};
  append(table2.paper, row("fp-2b-adv", "Table 2 MNIST 2b", {98.5, 98.5, 84.7, 85.4}, {3.0, 3.0}));
  append(table2.paper, row("fp-8b-adv", "Table 2 MNIST 8b", {98.0, 84.8, 74.5, 65.9}, {3.0, 3.0}));
  targets.push_back(std::move(table2));

  Target table5{"table5-fcn2", "input x parameter discretization at FCN2 scale (published rows are FCN1)", {},
                kTableEps, {}};
  table5.variants = {{"bnn-2b", true, 2, false},
                     {"fp-2b", false, 2, false},
                     {"bnn-8b", true, 8, false},
                     {"fp-8b", false, 8, false}};
  append(table5.paper, row("bnn-2b", "Table 5 BNN-2b (FCN1)", {96.4, 96.4, 60.7, 62.3}));
  append(table5.paper, row("fp-2b", "Table 5 Full-2b (FCN1)", {97.8, 97.4, 35.4, 35.3}));
  append(table5.paper, row("bnn-8b", "Table 5 BNN-8b (FCN1)", {97.1, 89.4, 56.1, 33.6}));
  append(table5.paper, row("fp-8b", "Table 5 Full-8b (FCN1)", {98.2, 75.9, 38.5, 26.4}));
  targets.push_back(std::move(table5));

  Target fig4b{"fig4b", "FCN2 without adversarial training, accuracy vs eps at 2b and 8b input", {},
               {0.0f, 0.05f, 0.1f, 0.15f, 0.2f, 0.25f, 0.3f}, {}};
  fig4b.variants = {{"fp-2b", false, 2, false}, {"fp-8b", false, 8, false}};
  targets.push_back(std::move(fig4b));

  Target fig5{"fig5-fcn2", "binarized vs full-precision FCN2 at 8b input", {}, {0.0f, 0.05f, 0.1f, 0.2f, 0.3f}, {}};
  fig5.variants = {{"bnn-8b", true, 8, false}, {"fp-8b", false, 8, false}};
  targets.push_back(std::move(fig5));

  Target fig6{"fig6", "normalized L1 norm of first hidden layer activations, FCN2, single seed", {}, {0.0f}, {}};
  fig6.variants = {{"bnn-8b", true, 8, false}, {"fp-8b", false, 8, false}};
  fig6.l1_analysis = true;
  targets.push_back(std::move(fig6));

  return targets;
}

bool majority(const std::vector<bool>& votes) {
  const auto yes = static_cast<std::size_t>(std::count(votes.begin(), votes.end(), true));
  return !votes.empty() && 2 * yes > votes.size();
}

std::string votes_text(const std::vector<bool>& votes) {
  const auto yes = std::count(votes.begin(), votes.end(), true);
  return std::to_string(yes) + "/" + std::to_string(votes.size()) + " seeds";
}

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string eps_text(float eps) { return format_number(eps); }

struct Lookup {
  const ReproduceResult& result;
  const std::vector<std::uint64_t>& seeds;

  double acc(const std::string& label, std::size_t seed_index, float eps) const {
    return result.report.at(label + "-s" + std::to_string(seeds[seed_index]), eps).accuracy_pct;
  }
};

std::vector<std::uint64_t> job_seeds(const Target& target, const ReproduceOptions& options) {
  if (options.seeds.empty()) throw std::invalid_argument("reproduce needs at least one seed");
  if (target.l1_analysis) return {options.seeds.front()};
  return options.seeds;
}

Check seed_vote(const std::string& name, std::size_t n_seeds, const std::function<bool(std::size_t)>& holds) {
  std::vector<bool> votes;
  for (std::size_t s = 0; s < n_seeds; ++s) votes.push_back(holds(s));
  return {name, majority(votes), votes_text(votes)};
}

void add_checks(const Target& target, const std::vector<std::uint64_t>& seeds, ReproduceResult& result) {
  const Lookup at{result, seeds};
  const std::size_t n = seeds.size();
  auto& checks = result.checks;

  for (const ComparisonRow& row : result.table) {
    if (!row.pass) continue;
    checks.push_back({row.label + " eps=" + eps_text(row.epsilon) + " within " + fixed(*row.tolerance, 0) +
                          " points of " + fixed(*row.paper, 1),
                      *row.pass, "seed mean " + fixed(row.mean) + ", delta " + fixed(row.mean - *row.paper)});
  }

  if (target.name == "table2") {
    for (float eps : {0.1f, 0.2f, 0.3f}) {
      checks.push_back(seed_vote("fp-2b-adv >= fp-8b-adv at eps=" + eps_text(eps), n, [&](std::size_t s) {
        return at.acc("fp-2b-adv", s, eps) >= at.acc("fp-8b-adv", s, eps);
      }));
    }
  } else if (target.name == "table5-fcn2") {
    checks.push_back(seed_vote("bnn-2b eps=0.1 within 2 points of its clean accuracy", n, [&](std::size_t s) {
      return std::fabs(at.acc("bnn-2b", s, 0.0f) - at.acc("bnn-2b", s, 0.1f)) <= 2.0;
    }));
    checks.push_back(seed_vote("bnn-2b >= bnn-8b at every eps >= 0.1", n, [&](std::size_t s) {
      for (float eps : {0.1f, 0.2f, 0.3f}) {
        if (at.acc("bnn-2b", s, eps) < at.acc("bnn-8b", s, eps)) return false;
      }
      return true;
    }));
  } else if (target.name == "fig4b") {
    checks.push_back(seed_vote("fp-2b eps=0.1 within 2 points of its clean accuracy", n, [&](std::size_t s) {
      return std::fabs(at.acc("fp-2b", s, 0.0f) - at.acc("fp-2b", s, 0.1f)) <= 2.0;
    }));
    checks.push_back(seed_vote("fp-8b eps=0.3 below 50%", n,
                               [&](std::size_t s) { return at.acc("fp-8b", s, 0.3f) < 50.0; }));
    checks.push_back(seed_vote("fp-2b > fp-8b at every eps >= 0.1", n, [&](std::size_t s) {
      for (float eps : target.epsilons) {
        if (eps >= 0.1f && !(at.acc("fp-2b", s, eps) > at.acc("fp-8b", s, eps))) return false;
      }
      return true;
    }));
  } else if (target.name == "fig5-fcn2") {
    checks.push_back(seed_vote("bnn-8b gap at eps=0.05 <= fp-8b gap at eps=0.05", n, [&](std::size_t s) {
      const double bnn_gap = at.acc("bnn-8b", s, 0.0f) - at.acc("bnn-8b", s, 0.05f);
      const double fp_gap = at.acc("fp-8b", s, 0.0f) - at.acc("fp-8b", s, 0.05f);
      return bnn_gap <= fp_gap;
    }));
    checks.push_back(seed_vote("fp-8b > bnn-8b at eps=0.3", n, [&](std::size_t s) {
      return at.acc("fp-8b", s, 0.3f) > at.acc("bnn-8b", s, 0.3f);
    }));
  } else if (target.name == "fig6") {
    const L1Profile* bnn = nullptr;
    const L1Profile* fp = nullptr;
    for (const L1Profile& p : result.profiles) (p.binarized ? bnn : fp) = &p;
    auto series = [](const L1Profile* p, float eps) -> const L1Summary& {
      for (const L1Series& s : p->series) {
        if (s.epsilon == eps) return s.summary;
      }
      throw std::out_of_range("no L1 series at eps " + format_number(eps));
    };
    const L1Summary& bnn_clean = series(bnn, 0.0f);
    const L1Summary& fp_clean = series(fp, 0.0f);
    const L1Summary& bnn_small = series(bnn, 0.1f);
    const L1Summary& bnn_large = series(bnn, 0.3f);
    checks.push_back({"bnn-8b clean L1 variance > fp-8b clean L1 variance", bnn_clean.variance > fp_clean.variance,
                      format_number(bnn_clean.variance) + " vs " + format_number(fp_clean.variance)});
    checks.push_back({"bnn-8b eps=0.1 L1 range overlaps the clean range",
                      bnn_small.min <= bnn_clean.max && bnn_small.max >= bnn_clean.min,
                      "[" + format_number(bnn_small.min) + ", " + format_number(bnn_small.max) + "] vs [" +
                          format_number(bnn_clean.min) + ", " + format_number(bnn_clean.max) + "]"});
    checks.push_back({"bnn-8b eps=0.3 L1 range extends past the clean max", bnn_large.max > bnn_clean.max,
                      format_number(bnn_large.max) + " vs " + format_number(bnn_clean.max)});
  }

  std::vector<std::string> low;
  for (const SweepRow& r : result.report.rows) {
    if (r.epsilon == 0.0f && r.accuracy_pct < kCleanFloor) low.push_back(r.model_id + "=" + fixed(r.accuracy_pct));
  }
  std::string detail;
  for (const auto& s : low) detail += (detail.empty() ? "" : ", ") + s;
  checks.push_back({"clean accuracy >= 95% for every trained model", low.empty(),
                    low.empty() ? "all " + std::to_string(result.configs.size()) + " models" : detail});
}

}  // namespace

const std::vector<Target>& reproduce_targets() {
  static const std::vector<Target> targets = build_targets();
  return targets;
}

const Target& find_target(std::string_view name) {
  std::string known;
  for (const Target& t : reproduce_targets()) {
    if (t.name == name) return t;
    known += (known.empty() ? "" : ", ") + t.name;
  }
  throw std::invalid_argument("unknown reproduce target '" + std::string(name) + "' (expected one of " + known + ")");
}

ExperimentConfig canned_config(const Variant& variant, std::uint64_t seed, std::span<const float> epsilons) {
  ExperimentConfig cfg;
  cfg.model_id = variant.label + "-s" + std::to_string(seed);
  cfg.arch = Arch::fcn2;
  cfg.binarized = variant.binarized;
  cfg.input_bits = variant.input_bits;
  cfg.epochs = 10;
  if (variant.binarized) cfg.schedule.lr = kBnnLearningRate;
  cfg.adv_train.enabled = variant.adv_train;
  cfg.adv_train.family = AttackFamily::rfgsm;
  cfg.adv_train.epsilon_train = kEpsTrain;
  cfg.seeds = {seed, seed, seed};
  cfg.eval_epsilons.assign(epsilons.begin(), epsilons.end());
  cfg.eval_attack = AttackFamily::fgsm;
  return cfg;
}

bool ReproduceResult::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

Model train_or_load(const ExperimentConfig& cfg, const RawDataset& train_set, const RawDataset& test_set,
                    const std::optional<std::filesystem::path>& cache_dir, std::ostream* log) {
  const ConfigHash hash = training_hash(cfg);
  std::filesystem::path cached;
  if (cache_dir) {
    std::filesystem::create_directories(*cache_dir);
    cached = *cache_dir / (to_hex(hash) + ".dqn");
    if (std::filesystem::exists(cached)) {
      if (log) *log << "[" << cfg.model_id << "] cached model " << cached.filename().string() << '\n';
      return load_checkpoint(cached, hash).model;
    }
  }
  const auto start = std::chrono::steady_clock::now();
  std::ostringstream lines;
  TrainResult trained = train(cfg, train_set, test_set, &lines);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (log) {
    std::istringstream in(lines.str());
    for (std::string line; std::getline(in, line);) *log << "[" << cfg.model_id << "] " << line << '\n';
    *log << "[" << cfg.model_id << "] trained in " << fixed(seconds, 1) << " s\n";
  }
  if (cache_dir) {
    // Write-then-rename so concurrent readers never see a partial file.
    const auto tmp = cached.string() + ".tmp-" + cfg.model_id;
    save_checkpoint(trained.model, hash, tmp);
    write_text_file(cached.string() + ".log", lines.str());
    std::filesystem::rename(tmp, cached);
  }
  return std::move(trained.model);
}

ReproduceResult reproduce(std::string_view name, const ReproduceOptions& options) {
  const Target& target = find_target(name);
  const auto seeds = job_seeds(target, options);
  ReproduceResult result;
  result.target = target.name;
  for (const Variant& v : target.variants) {
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = canned_config(v, seed, target.epsilons);
      for (const auto& o : options.overrides) apply_override(cfg, o);
      cfg.model_id = v.label + "-s" + std::to_string(seed);
      cfg.validate();
      result.configs.push_back(std::move(cfg));
    }
  }
  const auto [train_set, test_set] = load_datasets(result.configs.front(), options.data_dir);

  const std::size_t jobs = result.configs.size();
  std::vector<SweepReport> reports(jobs);
  std::vector<L1Profile> profiles(target.l1_analysis ? jobs : 0);
  std::mutex log_mutex;
  run_parallel(jobs, options.workers, [&](std::size_t i) {
    const ExperimentConfig& cfg = result.configs[i];
    std::ostringstream job_log;
    const Model model = train_or_load(cfg, train_set, test_set, options.cache_dir, &job_log);
    reports[i] = sweep(model, cfg, test_set);
    if (target.l1_analysis) {
      profiles[i] = l1_profile(model, cfg.input_bits, test_set, std::min(cfg.l1_samples, test_set.count()),
                               cfg.l1_epsilons, cfg.model_id);
    }
    if (options.log) {
      std::lock_guard lock(log_mutex);
      *options.log << job_log.str() << std::flush;
    }
  });

  std::string all_configs;
  for (const auto& cfg : result.configs) all_configs += to_config_text(cfg);
  std::string seed_list;
  for (std::uint64_t s : seeds) seed_list += (seed_list.empty() ? "" : ",") + std::to_string(s);
  std::string override_list;
  for (const auto& o : options.overrides) override_list += (override_list.empty() ? "" : ";") + o;
  result.report.metadata = {
      {"config_hash", to_hex(sha256(all_configs))},
      {"target", target.name},
      {"seeds", seed_list},
      {"epochs", std::to_string(result.configs.front().epochs)},
      {"generator", std::string(Rng::algorithm)},
      {"eval_attack", std::string(to_string(result.configs.front().eval_attack))},
      {"quantizer_gradient", std::string(to_string(QuantizerGradient::straight_through))},
      {"overrides", override_list.empty() ? "none" : override_list},
  };
  for (auto& r : reports) {
    result.report.wall_clock_seconds += r.wall_clock_seconds;
    append(result.report.rows, std::move(r.rows));
  }
  for (auto& p : profiles) result.profiles.push_back(std::move(p));

  for (const Variant& v : target.variants) {
    for (float eps : target.epsilons) {
      ComparisonRow row;
      row.label = v.label;
      row.input_bits = v.input_bits;
      row.binarized = v.binarized;
      row.epsilon = eps;
      for (std::uint64_t s : seeds) {
        row.per_seed.push_back(result.report.at(v.label + "-s" + std::to_string(s), eps).accuracy_pct);
      }
      row.mean = std::accumulate(row.per_seed.begin(), row.per_seed.end(), 0.0) /
                 static_cast<double>(row.per_seed.size());
      for (const PaperValue& p : target.paper) {
        if (p.label != v.label || p.epsilon != eps) continue;
        row.paper = p.accuracy_pct;
        row.source = p.source;
        if (p.tolerance >= 0.0) {
          row.tolerance = p.tolerance;
          row.pass = std::fabs(row.mean - p.accuracy_pct) <= p.tolerance;
        }
      }
      result.table.push_back(std::move(row));
    }
  }
  add_checks(target, seeds, result);
  return result;
}

std::string render_comparison(const ReproduceResult& result) {
  std::string out = "target: " + result.target + "\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %4s %6s %8s %8s %8s %6s  %s\n", "model", "bits", "eps", "ours", "paper",
                "delta", "pass", "per-seed");
  out += line;
  for (const ComparisonRow& r : result.table) {
    std::string per_seed;
    for (double v : r.per_seed) per_seed += (per_seed.empty() ? "" : " ") + fixed(v);
    std::snprintf(line, sizeof line, "%-12s %4d %6s %8s %8s %8s %6s  %s\n", r.label.c_str(), r.input_bits,
                  eps_text(r.epsilon).c_str(), fixed(r.mean).c_str(), r.paper ? fixed(*r.paper, 1).c_str() : "n/a",
                  r.paper ? fixed(r.mean - *r.paper).c_str() : "n/a",
                  r.pass ? (*r.pass ? "PASS" : "FAIL") : "-", per_seed.c_str());
    out += line;
  }
  for (const L1Profile& p : result.profiles) {
    for (const L1Series& s : p.series) {
      std::snprintf(line, sizeof line, "L1 %-12s eps=%-4s min=%.4f max=%.4f mean=%.4f var=%.6f\n",
                    p.model_id.c_str(), eps_text(s.epsilon).c_str(), s.summary.min, s.summary.max, s.summary.mean,
                    s.summary.variance);
      out += line;
    }
  }
  out += "checks:\n";
  for (const Check& c : result.checks) {
    out += std::string(c.pass ? "  [PASS] " : "  [FAIL] ") + c.name + " (" + c.detail + ")\n";
  }
  return out;
}

std::string render_comparison_csv(const ReproduceResult& result) {
  std::string out = "model,input_bits,binarized,epsilon,ours_mean,per_seed,paper,delta,tolerance,pass,source\n";
  for (const ComparisonRow& r : result.table) {
    std::string per_seed;
    for (double v : r.per_seed) per_seed += (per_seed.empty() ? "" : ";") + format_number(v);
    out += r.label + "," + std::to_string(r.input_bits) + "," + (r.binarized ? "true" : "false") + "," +
           eps_text(r.epsilon) + "," + format_number(r.mean) + "," + per_seed + "," +
           (r.paper ? format_number(*r.paper) : "n/a") + "," +
           (r.paper ? format_number(r.mean - *r.paper) : "n/a") + "," +
           (r.tolerance ? format_number(*r.tolerance) : "n/a") + "," +
           (r.pass ? (*r.pass ? "pass" : "fail") : "n/a") + "," + (r.source.empty() ? "n/a" : r.source) + "\n";
  }
  return out;
}

std::vector<std::filesystem::path> write_reproduce_outputs(const ReproduceResult& result,
                                                           const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "configs");
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::filesystem::path& path, const std::string& text) {
    write_text_file(path, text);
    written.push_back(path);
  };
  put(out_dir / (result.target + ".csv"), render_report(result.report, ReportFormat::csv));
  put(out_dir / (result.target + "_comparison.csv"), render_comparison_csv(result));
  put(out_dir / (result.target + "_comparison.txt"), render_comparison(result));
  for (const ExperimentConfig& cfg : result.configs) {
    put(out_dir / "configs" / (cfg.model_id + ".toml"), to_config_text(cfg));
  }
  for (std::size_t i = 0; i < result.profiles.size(); ++i) {
    const L1Profile& p = result.profiles[i];
    Metadata meta{{"config_hash", result.report.meta("config_hash")}, {"target", result.target}};
    put(out_dir / (result.target + "_l1_" + p.model_id + ".csv"), render_l1_csv(p, meta));
    put(out_dir / (result.target + "_l1_" + p.model_id + "_summary.csv"), render_l1_summary_csv(p));
  }
  return written;
}

}  // namespace qg
