#include "qg/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "qg/reproduce.hpp"

namespace qg {

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string data_dir;
};

struct VerbArgs {
  CommonArgs common;
  std::string checkpoint;
  std::string eps;
  std::string format = "csv";
  std::string target;
  std::string cache;
  std::string seeds;
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  bool strict = false;
};

void add_common(CLI::App* app, CommonArgs& args, bool out_required = true) {
  app->add_option("--config", args.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
  auto* out = app->add_option("--out", args.out, "Output directory");
  if (out_required) out->required();
  app->add_option("--seed", args.seed, "Sets seeds.init, seeds.shuffle and seeds.attack");
  app->add_option("--set", args.sets, "Override key=value (repeatable, last one wins)")
      ->allow_extra_args(false);
  app->add_option("--data-dir", args.data_dir, "MNIST directory (default: $QG_DATA_DIR)");
}

std::filesystem::path data_dir(const CommonArgs& args) {
  if (!args.data_dir.empty()) return args.data_dir;
  if (const char* env = std::getenv("QG_DATA_DIR"); env && *env) return env;
  throw std::runtime_error("no MNIST directory: pass --data-dir or set QG_DATA_DIR");
}

ExperimentConfig resolve_config(const CommonArgs& args, const std::string& eps, bool eps_for_l1 = false) {
  ExperimentConfig cfg = args.config.empty() ? ExperimentConfig{} : load_config(args.config);
  if (args.seed) cfg.seeds = {*args.seed, *args.seed, *args.seed};
  if (!eps.empty()) set_config_value(cfg, eps_for_l1 ? "l1.epsilons" : "eval_epsilons", eps);
  for (const auto& s : args.sets) apply_override(cfg, s);
  cfg.validate();
  return cfg;
}

std::filesystem::path prepare_out(const CommonArgs& args, const ExperimentConfig& cfg) {
  const std::filesystem::path out = args.out;
  std::filesystem::create_directories(out);
  save_config(cfg, out / "effective_config.toml");
  return out;
}

/// Loads --checkpoint (verified against the config's training hash) or trains
/// a model under `cfg`, saving it as model.dqn in the output directory.
Model obtain_model(const VerbArgs& args, const ExperimentConfig& cfg, const RawDataset& train_set,
                   const RawDataset& test_set, const std::filesystem::path& out, std::ostream& log) {
  if (!args.checkpoint.empty()) {
    try {
      return load_checkpoint(args.checkpoint, training_hash(cfg)).model;
    } catch (const CheckpointError& e) {
      throw CheckpointError(std::string(e.what()) + " (pass the config the model was trained with)");
    }
  }
  std::ostringstream lines;
  TrainResult result = train(cfg, train_set, test_set, &lines);
  log << lines.str();
  write_text_file(out / "train.log", lines.str());
  save_checkpoint(result.model, training_hash(cfg), out / "model.dqn");
  return std::move(result.model);
}

int run_train(const VerbArgs& args, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(args.common, args.eps);
  const auto dir = prepare_out(args.common, cfg);
  const auto [train_set, test_set] = load_datasets(cfg, data_dir(args.common));
  obtain_model(args, cfg, train_set, test_set, dir, out);
  out << "wrote " << (dir / "model.dqn").string() << "\n";
  return kExitOk;
}

int run_attack(const VerbArgs& args, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(args.common, args.eps);
  const auto dir = prepare_out(args.common, cfg);
  const auto [train_set, test_set] = load_datasets(cfg, data_dir(args.common));
  const Model model = obtain_model(args, cfg, train_set, test_set, dir, out);
  for (float eps : cfg.eval_epsilons) {
    AttackSpec spec;
    spec.family = eps == 0.0f ? AttackFamily::none : cfg.eval_attack;
    spec.epsilon = eps;
    spec.alpha_fraction = cfg.adv_train.alpha_fraction;
    spec.seed = cfg.seeds.attack;
    const AdversarialSet set = adversarial_testset(model, cfg.input_bits, test_set, spec);
    const auto path = dir / ("adversarial_eps" + format_number(eps) + ".dqa");
    save_adversarial_set(set, config_hash(cfg), path);
    const double acc = 100.0 * static_cast<double>(count_correct(model, cfg.input_bits, set.images, set.labels)) /
                       static_cast<double>(set.count());
    out << "eps=" << format_number(eps) << " attack=" << to_string(spec.family) << " accuracy_pct="
        << format_number(acc) << " wrote " << path.string() << "\n";
  }
  return kExitOk;
}

int run_sweep(const VerbArgs& args, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(args.common, args.eps);
  const ReportFormat format = parse_report_format(args.format);
  const auto dir = prepare_out(args.common, cfg);
  const auto [train_set, test_set] = load_datasets(cfg, data_dir(args.common));
  const Model model = obtain_model(args, cfg, train_set, test_set, dir, out);
  const SweepReport report = sweep(model, cfg, test_set, args.workers);
  const auto path = dir / (format == ReportFormat::csv ? "sweep.csv" : "sweep.txt");
  emit_report(report, path, format);
  out << render_report(report, ReportFormat::text);
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

int run_l1(const VerbArgs& args, std::ostream& out) {
  const ExperimentConfig cfg = resolve_config(args.common, args.eps, true);
  const auto dir = prepare_out(args.common, cfg);
  const auto [train_set, test_set] = load_datasets(cfg, data_dir(args.common));
  const Model model = obtain_model(args, cfg, train_set, test_set, dir, out);
  const L1Profile profile = l1_profile(model, cfg.input_bits, test_set, std::min(cfg.l1_samples, test_set.count()),
                                       cfg.l1_epsilons, cfg.model_id);
  write_text_file(dir / "l1.csv", render_l1_csv(profile, run_metadata(cfg)));
  const std::string summary = render_l1_summary_csv(profile);
  write_text_file(dir / "l1_summary.csv", summary);
  out << summary << "wrote " << (dir / "l1.csv").string() << "\n";
  return kExitOk;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    std::size_t used = 0;
    const auto v = std::stoull(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad seed '" + item + "'");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw std::invalid_argument("empty seed list");
  return seeds;
}

int run_reproduce(const VerbArgs& args, std::ostream& out, std::ostream& err) {
  ReproduceOptions options;
  options.data_dir = data_dir(args.common);
  if (!args.cache.empty()) options.cache_dir = args.cache;
  options.workers = args.workers;
  if (!args.seeds.empty()) options.seeds = parse_seed_list(args.seeds);
  if (args.common.seed) options.seeds = {*args.common.seed};
  if (!args.common.config.empty()) {
    // A config file contributes its keys as overrides of the canned settings.
    options.overrides = config_assignments(read_text_file(args.common.config));
  }
  for (const auto& s : args.common.sets) options.overrides.push_back(s);
  options.log = &err;
  const ReproduceResult result = reproduce(args.target, options);
  const auto written = write_reproduce_outputs(result, args.common.out);
  out << render_comparison(result);
  for (const auto& p : written) out << "wrote " << p.string() << "\n";
  if (args.strict && !result.passed()) return kExitChecksFailed;
  return kExitOk;
}

}  // namespace

int parse_and_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Input and parameter discretization robustness lab"};
  app.require_subcommand(1);
  VerbArgs args;

  auto* train_cmd = app.add_subcommand("train", "Train a model; writes model.dqn and train.log");
  add_common(train_cmd, args.common);

  auto* attack_cmd = app.add_subcommand("attack", "Craft adversarial test sets from a checkpoint");
  add_common(attack_cmd, args.common);
  attack_cmd->add_option("--checkpoint", args.checkpoint, "Trained model")->required()->check(CLI::ExistingFile);
  attack_cmd->add_option("--eps", args.eps, "Comma-separated epsilons")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "Accuracy vs epsilon; writes sweep.csv");
  add_common(sweep_cmd, args.common);
  sweep_cmd->add_option("--checkpoint", args.checkpoint, "Trained model (trains one when omitted)")
      ->check(CLI::ExistingFile);
  sweep_cmd->add_option("--eps", args.eps, "Comma-separated epsilons");
  sweep_cmd->add_option("--format", args.format, "csv or text");
  sweep_cmd->add_option("--workers", args.workers, "Parallel epsilon evaluations");

  auto* l1_cmd = app.add_subcommand("analyze-l1", "First hidden layer L1 profile; writes l1.csv");
  add_common(l1_cmd, args.common);
  l1_cmd->add_option("--checkpoint", args.checkpoint, "Trained model (trains one when omitted)")
      ->check(CLI::ExistingFile);
  l1_cmd->add_option("--eps", args.eps, "Comma-separated epsilons");

  auto* repro_cmd = app.add_subcommand("reproduce", "Run a canned multi-model pipeline against published values");
  std::string targets_help;
  for (const Target& t : reproduce_targets()) targets_help += (targets_help.empty() ? "" : ", ") + t.name;
  repro_cmd->add_option("target", args.target, targets_help)->required();
  add_common(repro_cmd, args.common);
  repro_cmd->add_option("--workers", args.workers, "Concurrent training runs");
  repro_cmd->add_option("--cache", args.cache, "Model cache directory keyed by training hash");
  repro_cmd->add_option("--seeds", args.seeds, "Comma-separated seed list (default 1,2,3)");
  repro_cmd->add_flag("--strict", args.strict, "Exit with status 3 when a check fails");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return run_train(args, out);
    if (attack_cmd->parsed()) return run_attack(args, out);
    if (sweep_cmd->parsed()) return run_sweep(args, out);
    if (l1_cmd->parsed()) return run_l1(args, out);
    if (repro_cmd->parsed()) return run_reproduce(args, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace qg
