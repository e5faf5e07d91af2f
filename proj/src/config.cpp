#include "qg/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace qg {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string_view unquote(std::string_view s) {
  s = trim(s);
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + ": expected " +
                    std::string(expected));
}

float parse_float(std::string_view key, std::string_view text) {
  text = unquote(text);
  float v = 0.0f;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) bad_value(key, text, "a number");
  return v;
}

std::uint64_t parse_u64(std::string_view key, std::string_view text) {
  text = unquote(text);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) bad_value(key, text, "a non-negative integer");
  return v;
}

int parse_int(std::string_view key, std::string_view text) {
  text = unquote(text);
  int v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) bad_value(key, text, "an integer");
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  text = unquote(text);
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  bad_value(key, text, "true or false");
}

std::vector<std::string_view> split_list(std::string_view text) {
  text = trim(text);
  if (!text.empty() && text.front() == '[') {
    if (text.back() != ']') throw ConfigError("unterminated list '" + std::string(text) + "'");
    text = text.substr(1, text.size() - 2);
  }
  std::vector<std::string_view> items;
  if (trim(text).empty()) return items;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    items.push_back(trim(text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return items;
}

std::vector<float> parse_float_list(std::string_view key, std::string_view text) {
  std::vector<float> out;
  for (auto item : split_list(text)) out.push_back(parse_float(key, item));
  return out;
}

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  for (auto item : split_list(text)) out.push_back(static_cast<std::size_t>(parse_u64(key, item)));
  return out;
}

std::string format_float(float v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T, typename F>
std::string format_list(const std::vector<T>& values, F fmt) {
  std::string out = "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ", ";
    out += fmt(values[i]);
  }
  return out + "]";
}

std::string quote_text(std::string_view s) { return "\"" + std::string(s) + "\""; }

Arch parse_arch(std::string_view key, std::string_view text) {
  text = unquote(text);
  if (text == "fcn1") return Arch::fcn1;
  if (text == "fcn2") return Arch::fcn2;
  if (text == "custom") return Arch::custom;
  bad_value(key, text, "fcn1, fcn2 or custom");
}

using Cfg = ExperimentConfig;
using Sv = std::string_view;

struct KeyEntry {
  std::string_view key;
  bool training;
  void (*set)(Cfg&, Sv);
  std::string (*get)(const Cfg&);
};

const std::vector<KeyEntry>& key_table() {
  static const std::vector<KeyEntry> table = {
      {"model_id", false, [](Cfg& c, Sv v) { c.model_id = std::string(unquote(v)); },
       [](const Cfg& c) { return quote_text(c.model_id); }},
      {"arch", true, [](Cfg& c, Sv v) { c.arch = parse_arch("arch", v); },
       [](const Cfg& c) { return quote_text(to_string(c.arch)); }},
      {"hidden", true, [](Cfg& c, Sv v) { c.hidden = parse_size_list("hidden", v); },
       [](const Cfg& c) { return format_list(c.hidden, [](std::size_t h) { return std::to_string(h); }); }},
      {"binarized", true, [](Cfg& c, Sv v) { c.binarized = parse_bool("binarized", v); },
       [](const Cfg& c) { return std::string(c.binarized ? "true" : "false"); }},
      {"input_bits", true, [](Cfg& c, Sv v) { c.input_bits = parse_int("input_bits", v); },
       [](const Cfg& c) { return std::to_string(c.input_bits); }},
      {"epochs", true, [](Cfg& c, Sv v) { c.epochs = parse_int("epochs", v); },
       [](const Cfg& c) { return std::to_string(c.epochs); }},
      {"batch_size", true, [](Cfg& c, Sv v) { c.batch_size = parse_u64("batch_size", v); },
       [](const Cfg& c) { return std::to_string(c.batch_size); }},
      {"lr", true, [](Cfg& c, Sv v) { c.schedule.lr = parse_float("lr", v); },
       [](const Cfg& c) { return format_float(c.schedule.lr); }},
      {"momentum", true, [](Cfg& c, Sv v) { c.schedule.momentum = parse_float("momentum", v); },
       [](const Cfg& c) { return format_float(c.schedule.momentum); }},
      {"weight_decay", true, [](Cfg& c, Sv v) { c.schedule.weight_decay = parse_float("weight_decay", v); },
       [](const Cfg& c) { return format_float(c.schedule.weight_decay); }},
      {"lr_milestones", true, [](Cfg& c, Sv v) { c.schedule.milestones = parse_float_list("lr_milestones", v); },
       [](const Cfg& c) { return format_list(c.schedule.milestones, format_float); }},
      {"lr_decay", true, [](Cfg& c, Sv v) { c.schedule.decay = parse_float("lr_decay", v); },
       [](const Cfg& c) { return format_float(c.schedule.decay); }},
      {"adv_train.enabled", true, [](Cfg& c, Sv v) { c.adv_train.enabled = parse_bool("adv_train.enabled", v); },
       [](const Cfg& c) { return std::string(c.adv_train.enabled ? "true" : "false"); }},
      {"adv_train.family", true,
       [](Cfg& c, Sv v) {
         try {
           c.adv_train.family = parse_attack_family(unquote(v));
         } catch (const std::invalid_argument&) {
           bad_value("adv_train.family", v, "fgsm or rfgsm");
         }
       },
       [](const Cfg& c) { return quote_text(to_string(c.adv_train.family)); }},
      {"adv_train.epsilon_train", true,
       [](Cfg& c, Sv v) { c.adv_train.epsilon_train = parse_float("adv_train.epsilon_train", v); },
       [](const Cfg& c) { return format_float(c.adv_train.epsilon_train); }},
      {"adv_train.alpha_fraction", true,
       [](Cfg& c, Sv v) { c.adv_train.alpha_fraction = parse_float("adv_train.alpha_fraction", v); },
       [](const Cfg& c) { return format_float(c.adv_train.alpha_fraction); }},
      {"seeds.init", true, [](Cfg& c, Sv v) { c.seeds.init = parse_u64("seeds.init", v); },
       [](const Cfg& c) { return std::to_string(c.seeds.init); }},
      {"seeds.shuffle", true, [](Cfg& c, Sv v) { c.seeds.shuffle = parse_u64("seeds.shuffle", v); },
       [](const Cfg& c) { return std::to_string(c.seeds.shuffle); }},
      {"seeds.attack", true, [](Cfg& c, Sv v) { c.seeds.attack = parse_u64("seeds.attack", v); },
       [](const Cfg& c) { return std::to_string(c.seeds.attack); }},
      {"eval_epsilons", false, [](Cfg& c, Sv v) { c.eval_epsilons = parse_float_list("eval_epsilons", v); },
       [](const Cfg& c) { return format_list(c.eval_epsilons, format_float); }},
      {"eval_attack", false,
       [](Cfg& c, Sv v) {
         try {
           c.eval_attack = parse_attack_family(unquote(v));
         } catch (const std::invalid_argument&) {
           bad_value("eval_attack", v, "fgsm or rfgsm");
         }
       },
       [](const Cfg& c) { return quote_text(to_string(c.eval_attack)); }},
      {"data.train_limit", true, [](Cfg& c, Sv v) { c.train_limit = parse_u64("data.train_limit", v); },
       [](const Cfg& c) { return std::to_string(c.train_limit); }},
      {"data.test_limit", false, [](Cfg& c, Sv v) { c.test_limit = parse_u64("data.test_limit", v); },
       [](const Cfg& c) { return std::to_string(c.test_limit); }},
      {"l1.samples", false, [](Cfg& c, Sv v) { c.l1_samples = parse_u64("l1.samples", v); },
       [](const Cfg& c) { return std::to_string(c.l1_samples); }},
      {"l1.epsilons", false, [](Cfg& c, Sv v) { c.l1_epsilons = parse_float_list("l1.epsilons", v); },
       [](const Cfg& c) { return format_list(c.l1_epsilons, format_float); }},
  };
  return table;
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t subst = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, subst});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

const KeyEntry& find_key(std::string_view key) {
  const auto& table = key_table();
  for (const auto& entry : table) {
    if (entry.key == key) return entry;
  }
  const KeyEntry* best = &table.front();
  std::size_t best_distance = SIZE_MAX;
  for (const auto& entry : table) {
    const std::size_t d = edit_distance(key, entry.key);
    if (d < best_distance) {
      best_distance = d;
      best = &entry;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'; did you mean '" + std::string(best->key) + "'?");
}

bool sorted_from_zero(const std::vector<float>& eps) {
  if (eps.empty() || eps.front() != 0.0f) return false;
  return std::is_sorted(eps.begin(), eps.end()) && std::adjacent_find(eps.begin(), eps.end()) == eps.end();
}

}  // namespace

float LrSchedule::rate_at(int epoch, int epochs) const {
  float rate = lr;
  for (float m : milestones) {
    const int at = std::max(1, static_cast<int>(std::ceil(m * static_cast<float>(epochs))));
    if (epoch >= at) rate *= decay;
  }
  return rate;
}

std::vector<std::size_t> ExperimentConfig::hidden_layers() const {
  return arch == Arch::custom ? hidden : hidden_widths(arch);
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (model_id.empty()) fail("model_id must not be empty");
  if (model_id.find_first_of(" \t,\"/\\") != std::string::npos) {
    fail("model_id may not contain spaces, commas, quotes or slashes");
  }
  if (arch == Arch::custom && hidden.empty()) fail("arch = custom needs at least one hidden width");
  if (arch != Arch::custom && !hidden.empty()) fail("hidden widths only apply to arch = custom");
  for (std::size_t h : hidden) {
    if (h == 0) fail("hidden widths must be positive");
  }
  if (!is_supported_input_bits(input_bits)) fail("input_bits must be one of 2, 3, 4, 8");
  if (epochs <= 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(schedule.lr > 0.0f)) fail("lr must be positive");
  if (!(schedule.momentum >= 0.0f && schedule.momentum < 1.0f)) fail("momentum must lie in [0, 1)");
  if (!(schedule.weight_decay >= 0.0f)) fail("weight_decay must be non-negative");
  if (!(schedule.decay > 0.0f && schedule.decay <= 1.0f)) fail("lr_decay must lie in (0, 1]");
  for (float m : schedule.milestones) {
    if (!(m > 0.0f && m <= 1.0f)) fail("lr_milestones must lie in (0, 1]");
  }
  if (adv_train.enabled) {
    if (adv_train.family == AttackFamily::none) fail("adv_train.family must be fgsm or rfgsm");
    if (!(adv_train.epsilon_train > 0.0f && adv_train.epsilon_train < 1.0f)) {
      fail("adv_train.epsilon_train must lie in (0, 1)");
    }
    if (!(adv_train.alpha_fraction >= 0.0f && adv_train.alpha_fraction < 1.0f)) {
      fail("adv_train.alpha_fraction must lie in [0, 1)");
    }
  }
  if (!sorted_from_zero(eval_epsilons)) fail("eval_epsilons must start at 0 and increase strictly");
  for (float e : eval_epsilons) {
    if (e > 1.0f) fail("eval_epsilons must lie in [0, 1]");
  }
  if (eval_attack == AttackFamily::none) fail("eval_attack must be fgsm or rfgsm");
  if (l1_samples == 0) fail("l1.samples must be positive");
  for (float e : l1_epsilons) {
    if (!(e >= 0.0f && e <= 1.0f)) fail("l1.epsilons must lie in [0, 1]");
  }
}

std::vector<std::string_view> config_keys() {
  std::vector<std::string_view> keys;
  for (const auto& entry : key_table()) keys.push_back(entry.key);
  return keys;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  find_key(trim(key)).set(cfg, trim(value));
}

void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  set_config_value(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::vector<std::string> config_assignments(std::string_view text) {
  std::vector<std::string> out;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      if (line.front() == '[' && line.back() == ']') {
        section = std::string(trim(line.substr(1, line.size() - 2)));
        continue;
      }
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + std::string(line) +
                        "'");
    }
    std::string key(trim(line.substr(0, eq)));
    if (!section.empty()) key = section + "." + key;
    try {
      find_key(key);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(key + "=" + std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig base) {
  for (const std::string& assignment : config_assignments(text)) {
    try {
      apply_override(base, assignment);
    } catch (const ConfigError& e) {
      throw ConfigError("in '" + assignment + "': " + e.what());
    }
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), std::move(base));
}

std::string to_config_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& entry : key_table()) {
    out += std::string(entry.key) + " = " + entry.get(cfg) + "\n";
  }
  return out;
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write config file " + path.string());
  out << to_config_text(cfg);
  if (!out) throw ConfigError("failed writing config file " + path.string());
}

ConfigHash sha256(std::string_view bytes) {
  ConfigHash out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size()) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  return out;
}

std::string to_hex(const ConfigHash& hash) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(hash.size() * 2);
  for (std::uint8_t b : hash) {
    out += digits[b >> 4];
    out += digits[b & 0xf];
  }
  return out;
}

ConfigHash config_hash(const ExperimentConfig& cfg) { return sha256(to_config_text(cfg)); }

ConfigHash training_hash(const ExperimentConfig& cfg) {
  std::string text;
  for (const auto& entry : key_table()) {
    if (entry.training) text += std::string(entry.key) + " = " + entry.get(cfg) + "\n";
  }
  return sha256(text);
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return to_config_text(a) == to_config_text(b);
}

}  // namespace qg
