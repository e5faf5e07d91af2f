#include "qg/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace qg {

namespace {

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t width = t.cols();
  std::vector<float> values(t.data() + begin * width, t.data() + end * width);
  return Tensor({end - begin, width}, std::move(values));
}

void paste_rows(Tensor& dst, std::size_t begin, const Tensor& src) {
  std::copy(src.values().begin(), src.values().end(), dst.data() + begin * dst.cols());
}

std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

Tensor craft(const Model& model, const ExperimentConfig& cfg, const Tensor& x_raw,
             std::span<const std::uint8_t> labels, std::span<const std::size_t> ids, std::uint64_t seed) {
  const auto& adv = cfg.adv_train;
  if (adv.family == AttackFamily::fgsm) return fgsm(model, cfg.input_bits, x_raw, labels, adv.epsilon_train);
  return rfgsm(model, cfg.input_bits, x_raw, labels, adv.epsilon_train, adv.alpha_fraction * adv.epsilon_train, seed,
               ids);
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_field(std::string_view text, std::string_view what) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::runtime_error("bad " + std::string(what) + " field '" + std::string(text) + "'");
  }
  return v;
}

constexpr std::string_view kCsvHeader = "model_id,input_bits,binarized,attack,epsilon,accuracy_pct,n_samples";

}  // namespace

std::string format_number(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

std::string format_number(float value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

// ---------------------------------------------------------------- training

std::string format_epoch_log(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%d loss=%.6f test_acc=%.2f lr=%s", e.epoch, e.loss, e.test_accuracy_pct,
                format_number(e.lr).c_str());
  return buf;
}

TrainingDivergedError::TrainingDivergedError(int epoch, std::size_t batch, double loss)
    : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                         " (loss " + std::to_string(loss) + ")"),
      epoch_(epoch),
      batch_(batch) {}

double clean_accuracy_pct(const Model& model, int input_bits, const RawDataset& test_set) {
  if (test_set.count() == 0) throw std::invalid_argument("clean_accuracy_pct: empty test set");
  const auto ids = iota_ids(test_set.count());
  const Tensor x = normalized_images(test_set, ids);
  const std::size_t correct = count_correct(model, input_bits, x, test_set.labels);
  return 100.0 * static_cast<double>(correct) / static_cast<double>(test_set.count());
}

TrainResult train(const ExperimentConfig& cfg, const RawDataset& train_set, const RawDataset& test_set,
                  std::ostream* log) {
  cfg.validate();
  if (train_set.count() == 0) throw std::invalid_argument("train: empty training set");
  TrainResult result;
  result.model = build_model(cfg.hidden_layers(), cfg.binarized, cfg.seeds.init, train_set.pixels(), kNumClasses);
  SgdOptimizer optimizer(cfg.schedule.momentum);
  const PipelineConfig pipeline{cfg.input_bits, cfg.seeds.shuffle, cfg.batch_size};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr = cfg.schedule.rate_at(epoch, cfg.epochs);
    const BatchSequence sequence(train_set, pipeline, static_cast<std::uint64_t>(epoch));
    const std::uint64_t attack_seed = derive_seed(cfg.seeds.attack, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < sequence.size(); ++b) {
      Batch batch = sequence[b];
      const std::size_t rows = batch.labels.size();
      if (cfg.adv_train.enabled && rows >= 2) {
        const std::size_t first = rows - rows / 2;
        const Tensor x_raw = slice_rows(batch.raw, first, rows);
        const auto labels = std::span<const std::uint8_t>(batch.labels).subspan(first);
        const auto ids = std::span<const std::size_t>(batch.indices).subspan(first);
        const Tensor adv = craft(result.model, cfg, x_raw, labels, ids, attack_seed);
        paste_rows(batch.inputs, first, quantize_inputs(adv, cfg.input_bits));
      }
      const ForwardCache cache = forward(result.model, batch.inputs, Mode::train);
      Gradients grads;
      try {
        grads = backward(result.model, cache, batch.labels);
        if (!std::isfinite(grads.loss)) throw TrainingDivergedError(epoch + 1, b, grads.loss);
        optimizer.step(result.model, grads, lr, cfg.schedule.weight_decay);
      } catch (const NonFiniteGradientError&) {
        throw TrainingDivergedError(epoch + 1, b, grads.loss);
      } catch (const std::overflow_error&) {
        throw TrainingDivergedError(epoch + 1, b, std::nan(""));
      }
      loss_sum += grads.loss * static_cast<double>(rows);
      seen += rows;
    }
    EpochLog entry{epoch + 1, loss_sum / static_cast<double>(seen),
                   clean_accuracy_pct(result.model, cfg.input_bits, test_set), lr};
    result.log.push_back(entry);
    if (log) *log << format_epoch_log(entry) << '\n' << std::flush;
  }
  return result;
}

std::pair<RawDataset, RawDataset> load_datasets(const ExperimentConfig& cfg, const std::filesystem::path& data_dir) {
  RawDataset train_set = load_mnist(data_dir, Split::train);
  RawDataset test_set = load_mnist(data_dir, Split::test);
  if (cfg.train_limit) train_set = train_set.head(cfg.train_limit);
  if (cfg.test_limit) test_set = test_set.head(cfg.test_limit);
  return {std::move(train_set), std::move(test_set)};
}

// ----------------------------------------------------------------- sweeps

std::string SweepReport::meta(const std::string& key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  return {};
}

const SweepRow& SweepReport::at(const std::string& model_id, float epsilon) const {
  for (const SweepRow& row : rows) {
    if (row.model_id == model_id && row.epsilon == epsilon) return row;
  }
  throw std::out_of_range("no sweep row for " + model_id + " at epsilon " + format_number(epsilon));
}

Metadata run_metadata(const ExperimentConfig& cfg) {
  return {
      {"config_hash", to_hex(config_hash(cfg))},
      {"training_hash", to_hex(training_hash(cfg))},
      {"model_id", cfg.model_id},
      {"arch", std::string(to_string(cfg.arch))},
      {"binarized", bool_text(cfg.binarized)},
      {"input_bits", std::to_string(cfg.input_bits)},
      {"epochs", std::to_string(cfg.epochs)},
      {"adv_train", cfg.adv_train.enabled ? std::string(to_string(cfg.adv_train.family)) + "@" +
                                                format_number(cfg.adv_train.epsilon_train)
                                          : "off"},
      {"seed_init", std::to_string(cfg.seeds.init)},
      {"seed_shuffle", std::to_string(cfg.seeds.shuffle)},
      {"seed_attack", std::to_string(cfg.seeds.attack)},
      {"generator", std::string(Rng::algorithm)},
      {"eval_attack", std::string(to_string(cfg.eval_attack))},
      {"quantizer_gradient", std::string(to_string(QuantizerGradient::straight_through))},
  };
}

void run_parallel(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(count);
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            job(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

SweepReport sweep(const Model& model, const ExperimentConfig& cfg, const RawDataset& test_set, std::size_t workers) {
  cfg.validate();
  if (test_set.count() == 0) throw std::invalid_argument("sweep: empty test set");
  const auto start = std::chrono::steady_clock::now();
  SweepReport report;
  report.metadata = run_metadata(cfg);
  report.rows.resize(cfg.eval_epsilons.size());
  run_parallel(cfg.eval_epsilons.size(), workers, [&](std::size_t i) {
    AttackSpec spec;
    spec.epsilon = cfg.eval_epsilons[i];
    spec.family = spec.epsilon == 0.0f ? AttackFamily::none : cfg.eval_attack;
    spec.alpha_fraction = cfg.adv_train.alpha_fraction;
    spec.seed = cfg.seeds.attack;
    const AdversarialSet set = adversarial_testset(model, cfg.input_bits, test_set, spec);
    const std::size_t correct = count_correct(model, cfg.input_bits, set.images, set.labels);
    report.rows[i] = SweepRow{cfg.model_id,
                              cfg.input_bits,
                              cfg.binarized,
                              spec.family,
                              spec.epsilon,
                              100.0 * static_cast<double>(correct) / static_cast<double>(set.count()),
                              set.count()};
  });
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

ReportFormat parse_report_format(std::string_view text) {
  if (text == "csv") return ReportFormat::csv;
  if (text == "text") return ReportFormat::text;
  throw std::invalid_argument("unknown report format '" + std::string(text) + "' (expected csv or text)");
}

std::string render_report(const SweepReport& report, ReportFormat format) {
  std::string out;
  if (format == ReportFormat::csv) {
    for (const auto& [k, v] : report.metadata) out += "# " + k + "=" + v + "\n";
    out += std::string(kCsvHeader) + "\n";
    for (const SweepRow& r : report.rows) {
      out += r.model_id + "," + std::to_string(r.input_bits) + "," + bool_text(r.binarized) + "," +
             std::string(to_string(r.attack)) + "," + format_number(r.epsilon) + "," +
             format_number(r.accuracy_pct) + "," + std::to_string(r.n_samples) + "\n";
    }
    return out;
  }
  for (const auto& [k, v] : report.metadata) out += k + ": " + v + "\n";
  out += "wall_clock_seconds: " + format_number(report.wall_clock_seconds) + "\n";
  for (const SweepRow& r : report.rows) {
    out += "row model_id=" + r.model_id + " input_bits=" + std::to_string(r.input_bits) +
           " binarized=" + bool_text(r.binarized) + " attack=" + std::string(to_string(r.attack)) +
           " epsilon=" + format_number(r.epsilon) + " accuracy_pct=" + format_number(r.accuracy_pct) +
           " n_samples=" + std::to_string(r.n_samples) + "\n";
  }
  return out;
}

void emit_report(const SweepReport& report, const std::filesystem::path& path, ReportFormat format) {
  if (report.rows.empty()) throw std::invalid_argument("emit_report: report has no rows");
  write_text_file(path, render_report(report, format));
}

SweepReport parse_report_csv(std::string_view text) {
  SweepReport report;
  bool header_seen = false;
  for (std::string_view line : split(text, '\n')) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (line.front() == '#') {
      line.remove_prefix(1);
      if (!line.empty() && line.front() == ' ') line.remove_prefix(1);
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) throw std::runtime_error("metadata line without '='");
      report.metadata.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
      continue;
    }
    if (!header_seen) {
      if (line != kCsvHeader) throw std::runtime_error("unexpected CSV header '" + std::string(line) + "'");
      header_seen = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 7) throw std::runtime_error("CSV row with " + std::to_string(f.size()) + " fields");
    SweepRow row;
    row.model_id = std::string(f[0]);
    row.input_bits = parse_field<int>(f[1], "input_bits");
    if (f[2] != "true" && f[2] != "false") throw std::runtime_error("bad binarized field '" + std::string(f[2]) + "'");
    row.binarized = f[2] == "true";
    row.attack = parse_attack_family(f[3]);
    row.epsilon = parse_field<float>(f[4], "epsilon");
    row.accuracy_pct = parse_field<double>(f[5], "accuracy_pct");
    row.n_samples = parse_field<std::size_t>(f[6], "n_samples");
    report.rows.push_back(std::move(row));
  }
  if (!header_seen) throw std::runtime_error("CSV report has no header row");
  return report;
}

// ---------------------------------------------------- activation analysis

L1Summary summarize(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("summarize: no values");
  L1Summary s;
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.variance = sq / static_cast<double>(values.size());
  return s;
}

L1Profile l1_profile(const Model& model, int input_bits, const RawDataset& test_set, std::size_t samples,
                     std::span<const float> epsilons, const std::string& model_id) {
  if (samples == 0 || samples > test_set.count()) {
    throw std::invalid_argument("l1_profile: samples must lie in [1, " + std::to_string(test_set.count()) + "]");
  }
  const std::size_t layer = model.first_hidden_dense();
  L1Profile profile;
  profile.model_id = model_id;
  profile.binarized = model.binarized();
  profile.width = model.layers()[layer].spec.fan_out;
  constexpr std::size_t kChunk = 500;
  for (float eps : epsilons) {
    if (!(eps >= 0.0f)) throw std::invalid_argument("l1_profile: epsilon must be non-negative");
    L1Series series;
    series.epsilon = eps;
    for (std::size_t begin = 0; begin < samples; begin += kChunk) {
      const std::size_t end = std::min(begin + kChunk, samples);
      std::vector<std::size_t> ids(end - begin);
      std::iota(ids.begin(), ids.end(), begin);
      const auto labels = std::span<const std::uint8_t>(test_set.labels).subspan(begin, end - begin);
      Tensor x = normalized_images(test_set, ids);
      if (eps > 0.0f) x = fgsm(model, input_bits, x, labels, eps);
      const ForwardCache cache = forward(model, quantize_inputs(x, input_bits), Mode::eval);
      const Tensor& act = cache.layer_output(layer);
      for (std::size_t r = 0; r < act.rows(); ++r) {
        double norm = 0.0;
        for (float v : act.row(r)) norm += std::fabs(static_cast<double>(v));
        series.norms.push_back(norm / static_cast<double>(profile.width));
      }
    }
    series.summary = summarize(series.norms);
    profile.series.push_back(std::move(series));
  }
  return profile;
}

std::string render_l1_csv(const L1Profile& profile, const Metadata& metadata) {
  std::string out;
  for (const auto& [k, v] : metadata) out += "# " + k + "=" + v + "\n";
  out += "model_id,binarized,epsilon,sample,l1_norm\n";
  for (const L1Series& s : profile.series) {
    for (std::size_t i = 0; i < s.norms.size(); ++i) {
      out += profile.model_id + "," + bool_text(profile.binarized) + "," + format_number(s.epsilon) + "," +
             std::to_string(i) + "," + format_number(s.norms[i]) + "\n";
    }
  }
  return out;
}

std::string render_l1_summary_csv(const L1Profile& profile) {
  std::string out = "model_id,binarized,epsilon,min,max,mean,variance\n";
  for (const L1Series& s : profile.series) {
    out += profile.model_id + "," + bool_text(profile.binarized) + "," + format_number(s.epsilon) + "," +
           format_number(s.summary.min) + "," + format_number(s.summary.max) + "," + format_number(s.summary.mean) +
           "," + format_number(s.summary.variance) + "\n";
  }
  return out;
}

}  // namespace qg
