#include "qg/attacks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "qg/ops.hpp"

namespace qg {

namespace {

void require_rows(const Tensor& x, std::span<const std::uint8_t> labels, std::string_view what) {
  if (x.rank() != 2 || x.rows() != labels.size()) {
    throw std::invalid_argument(std::string(what) + ": input " + shape_string(x.shape()) + " does not match " +
                                std::to_string(labels.size()) + " labels");
  }
}

/// Clip into [0, 1] ∩ [origin - eps, origin + eps], with the bound checked in
/// the same float arithmetic a caller would use to verify it.
float project(float candidate, float origin, float eps) {
  float v = std::clamp(candidate, 0.0f, 1.0f);
  while (v - origin > eps) v = std::nextafter(v, origin);
  while (origin - v > eps) v = std::nextafter(v, origin);
  return v;
}

Tensor signed_step(const Tensor& start, const Tensor& grad, float step, const Tensor& origin, float eps) {
  Tensor out = start;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = project(start[i] + step * sign_of(grad[i]), origin[i], eps);
  }
  return out;
}

void require_rfgsm_budget(float epsilon, float alpha) {
  if (!(epsilon >= 0.0f)) throw std::invalid_argument("epsilon must be non-negative");
  if (!(alpha >= 0.0f) || !(alpha < epsilon)) {
    throw std::invalid_argument("R-FGSM needs 0 <= alpha < epsilon, got alpha=" + std::to_string(alpha) +
                                " epsilon=" + std::to_string(epsilon));
  }
}

Tensor rfgsm_from_noise(const Model& model, int input_bits, const Tensor& x_raw, std::span<const std::uint8_t> labels,
                        float epsilon, float alpha, const Tensor& noise) {
  Tensor randomized = signed_step(x_raw, noise, alpha, x_raw, epsilon);
  Tensor grad = input_gradient(model, input_bits, randomized, labels);
  return signed_step(randomized, grad, epsilon - alpha, x_raw, epsilon);
}

}  // namespace

std::string_view to_string(AttackFamily family) {
  switch (family) {
    case AttackFamily::none: return "none";
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::rfgsm: return "rfgsm";
  }
  return "?";
}

std::string_view to_string(QuantizerGradient) { return "straight_through"; }

AttackFamily parse_attack_family(std::string_view text) {
  if (text == "none") return AttackFamily::none;
  if (text == "fgsm") return AttackFamily::fgsm;
  if (text == "rfgsm") return AttackFamily::rfgsm;
  throw std::invalid_argument("unknown attack family '" + std::string(text) + "' (expected none, fgsm, rfgsm)");
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0f) || !std::isfinite(epsilon)) {
    throw std::invalid_argument("epsilon must be a finite non-negative value");
  }
  if (!(alpha_fraction >= 0.0f && alpha_fraction < 1.0f)) {
    throw std::invalid_argument("alpha_fraction must lie in [0, 1)");
  }
  if (family == AttackFamily::none && epsilon != 0.0f) {
    throw std::invalid_argument("attack family 'none' requires epsilon == 0");
  }
  if (family == AttackFamily::rfgsm) require_rfgsm_budget(epsilon, alpha());
}

Tensor input_gradient(const Model& model, int input_bits, const Tensor& x_raw, std::span<const std::uint8_t> labels) {
  require_rows(x_raw, labels, "input_gradient");
  const Tensor quantized = quantize_inputs(x_raw, input_bits);
  const ForwardCache cache = forward(model, quantized, Mode::eval);
  // Straight-through: d quantize(x) / dx := 1.
  return backward(model, cache, labels, GradientScope::input_only).input;
}

Tensor fgsm(const Model& model, int input_bits, const Tensor& x_raw, std::span<const std::uint8_t> labels,
            float epsilon) {
  if (!(epsilon >= 0.0f)) throw std::invalid_argument("epsilon must be non-negative");
  if (epsilon == 0.0f) {
    require_rows(x_raw, labels, "fgsm");
    return x_raw;
  }
  const Tensor grad = input_gradient(model, input_bits, x_raw, labels);
  return signed_step(x_raw, grad, epsilon, x_raw, epsilon);
}

Tensor rfgsm(const Model& model, int input_bits, const Tensor& x_raw, std::span<const std::uint8_t> labels,
             float epsilon, float alpha, Rng& rng) {
  require_rfgsm_budget(epsilon, alpha);
  require_rows(x_raw, labels, "rfgsm");
  const Tensor noise = gaussian(rng, x_raw.shape());
  return rfgsm_from_noise(model, input_bits, x_raw, labels, epsilon, alpha, noise);
}

Tensor rfgsm(const Model& model, int input_bits, const Tensor& x_raw, std::span<const std::uint8_t> labels,
             float epsilon, float alpha, std::uint64_t seed, std::span<const std::size_t> sample_ids) {
  require_rfgsm_budget(epsilon, alpha);
  require_rows(x_raw, labels, "rfgsm");
  if (sample_ids.size() != x_raw.rows()) throw std::invalid_argument("rfgsm: one sample id per row required");
  Tensor noise(x_raw.shape());
  for (std::size_t r = 0; r < x_raw.rows(); ++r) {
    Rng rng(derive_seed(seed, sample_ids[r]));
    for (float& v : noise.row(r)) v = static_cast<float>(rng.normal());
  }
  return rfgsm_from_noise(model, input_bits, x_raw, labels, epsilon, alpha, noise);
}

AdversarialSet adversarial_testset(const Model& model, int input_bits, const RawDataset& ds, const AttackSpec& spec,
                                   std::size_t batch_size) {
  spec.validate();
  require_supported_input_bits(input_bits);
  if (ds.count() == 0) throw std::invalid_argument("adversarial_testset: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("adversarial_testset: batch_size must be positive");
  AdversarialSet out;
  out.spec = spec;
  out.input_bits = input_bits;
  out.images = Tensor({ds.count(), ds.pixels()});
  out.labels = ds.labels;

  std::vector<std::size_t> ids(ds.count());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t begin = 0; begin < ds.count(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, ds.count());
    auto batch_ids = std::span<const std::size_t>(ids).subspan(begin, end - begin);
    auto labels = std::span<const std::uint8_t>(ds.labels).subspan(begin, end - begin);
    Tensor x = normalized_images(ds, batch_ids);
    switch (spec.family) {
      case AttackFamily::none: break;
      case AttackFamily::fgsm: x = fgsm(model, input_bits, x, labels, spec.epsilon); break;
      case AttackFamily::rfgsm:
        x = rfgsm(model, input_bits, x, labels, spec.epsilon, spec.alpha(), spec.seed, batch_ids);
        break;
    }
    const Tensor victim_view = quantize_inputs(x, input_bits);
    std::copy(victim_view.values().begin(), victim_view.values().end(), out.images.data() + begin * ds.pixels());
  }
  return out;
}

std::size_t count_correct(const Model& model, int input_bits, const Tensor& x, std::span<const std::uint8_t> labels,
                          std::size_t batch_size) {
  require_rows(x, labels, "count_correct");
  std::size_t correct = 0;
  const std::size_t width = x.cols();
  for (std::size_t begin = 0; begin < x.rows(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, x.rows());
    std::vector<float> slice(x.data() + begin * width, x.data() + end * width);
    Tensor chunk = quantize_inputs(Tensor({end - begin, width}, std::move(slice)), input_bits);
    const auto predicted = predictions(forward(model, chunk, Mode::eval).logits());
    for (std::size_t r = 0; r < predicted.size(); ++r) {
      if (predicted[r] == labels[begin + r]) ++correct;
    }
  }
  return correct;
}

namespace {

constexpr char kSetMagic[4] = {'D', 'Q', 'A', '1'};
constexpr std::uint16_t kSetVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated adversarial set " + path.string());
  }
  return v;
}

}  // namespace

// Values are written verbatim, which is little-endian on supported hosts.
static_assert(std::endian::native == std::endian::little, "adversarial set I/O assumes a little-endian host");

void save_adversarial_set(const AdversarialSet& set, const ConfigHash& hash, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kSetMagic, 4);
  put<std::uint16_t>(out, kSetVersion);
  out.write(reinterpret_cast<const char*>(hash.data()), static_cast<std::streamsize>(hash.size()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(set.spec.family));
  put<float>(out, set.spec.epsilon);
  put<float>(out, set.spec.alpha_fraction);
  put<std::uint64_t>(out, set.spec.seed);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(set.input_bits));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(set.count()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(set.images.cols()));
  out.write(reinterpret_cast<const char*>(set.images.data()),
            static_cast<std::streamsize>(set.images.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(set.labels.data()), static_cast<std::streamsize>(set.labels.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

AdversarialSet load_adversarial_set(const std::filesystem::path& path, ConfigHash* hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kSetMagic, 4) != 0) {
    throw std::runtime_error(path.string() + " is not an adversarial set (bad magic)");
  }
  const auto version = get<std::uint16_t>(in, path);
  if (version != kSetVersion) {
    throw std::runtime_error("unsupported adversarial set version " + std::to_string(version));
  }
  ConfigHash stored{};
  if (!in.read(reinterpret_cast<char*>(stored.data()), static_cast<std::streamsize>(stored.size()))) {
    throw std::runtime_error("truncated adversarial set " + path.string());
  }
  if (hash) *hash = stored;
  AdversarialSet set;
  set.spec.family = static_cast<AttackFamily>(get<std::uint8_t>(in, path));
  set.spec.epsilon = get<float>(in, path);
  set.spec.alpha_fraction = get<float>(in, path);
  set.spec.seed = get<std::uint64_t>(in, path);
  set.input_bits = get<std::uint8_t>(in, path);
  const auto count = get<std::uint32_t>(in, path);
  const auto pixels = get<std::uint32_t>(in, path);
  if (count == 0 || pixels == 0) throw std::runtime_error("empty adversarial set " + path.string());
  std::vector<float> values(std::size_t{count} * pixels);
  set.labels.resize(count);
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float))) ||
      !in.read(reinterpret_cast<char*>(set.labels.data()), count)) {
    throw std::runtime_error("truncated adversarial set " + path.string());
  }
  set.images = Tensor({count, pixels}, std::move(values));
  return set;
}

}  // namespace qg
