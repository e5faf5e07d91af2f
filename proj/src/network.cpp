#include "qg/network.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qg/ops.hpp"
#include "qg/rng.hpp"

namespace qg {

namespace {

bool layer_equal(const Layer& a, const Layer& b) {
  return a.spec.kind == b.spec.kind && a.spec.fan_in == b.spec.fan_in && a.spec.fan_out == b.spec.fan_out &&
         a.weight == b.weight && a.bias == b.bias && a.gamma == b.gamma && a.beta == b.beta &&
         a.running_mean == b.running_mean && a.running_var == b.running_var;
}

Layer dense_layer(LayerKind kind, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Layer layer;
  layer.spec = {kind, fan_in, fan_out};
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  layer.weight = uniform(rng, {fan_out, fan_in}, -limit, limit);
  layer.bias = Tensor({fan_out}, 0.0f);
  return layer;
}

Layer batchnorm_layer(std::size_t width) {
  Layer layer;
  layer.spec = {LayerKind::batchnorm, width, width};
  layer.gamma = Tensor({width}, 1.0f);
  layer.beta = Tensor({width}, 0.0f);
  layer.running_mean = Tensor({width}, 0.0f);
  layer.running_var = Tensor({width}, 1.0f);
  return layer;
}

Layer plain_layer(LayerKind kind, std::size_t width) {
  Layer layer;
  layer.spec = {kind, width, width};
  return layer;
}

Tensor binarize(const Tensor& w) { return sign(w); }

void add_bias_rows(Tensor& out, const Tensor& bias) {
  const std::size_t cols = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    float* row = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += bias[c];
  }
}

Tensor column_sums(const Tensor& g) {
  Tensor out({g.cols()}, 0.0f);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const float* row = g.data() + r * g.cols();
    for (std::size_t c = 0; c < g.cols(); ++c) out[c] += row[c];
  }
  return out;
}

void require_batch_input(const Tensor& x, std::size_t width) {
  if (x.rank() != 2 || x.cols() != width) {
    throw std::invalid_argument("model expects input [batch x " + std::to_string(width) + "], got " +
                                shape_string(x.shape()));
  }
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::binary_dense: return "binary_dense";
    case LayerKind::relu: return "relu";
    case LayerKind::sign_act: return "sign_act";
    case LayerKind::hardtanh: return "hardtanh";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::softmax_xent_head: return "softmax_xent_head";
  }
  return "?";
}

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::fcn1: return "fcn1";
    case Arch::fcn2: return "fcn2";
    case Arch::custom: return "custom";
  }
  return "?";
}

std::vector<std::size_t> hidden_widths(Arch arch) {
  switch (arch) {
    case Arch::fcn1: return {6144, 6144, 6144, 6144};
    case Arch::fcn2: return {600, 600, 600, 600};
    case Arch::custom: break;
  }
  throw std::invalid_argument("custom architectures carry explicit hidden widths");
}

Model::Model(std::vector<Layer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("model needs at least one layer");
  std::size_t width = layers_.front().spec.fan_in;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i].spec;
    if (s.fan_in == 0 || s.fan_out == 0) {
      throw std::invalid_argument("layer " + std::to_string(i) + " has a zero width");
    }
    if (s.fan_in != width) {
      throw std::invalid_argument("layer " + std::to_string(i) + " (" + std::string(to_string(s.kind)) +
                                  ") expects width " + std::to_string(s.fan_in) + " but receives " +
                                  std::to_string(width));
    }
    if (!layers_[i].has_weights() && s.fan_in != s.fan_out) {
      throw std::invalid_argument("layer " + std::to_string(i) + " must preserve its width");
    }
    width = s.fan_out;
  }
  if (layers_.back().spec.kind != LayerKind::softmax_xent_head) {
    throw std::invalid_argument("model must end with a softmax_xent_head layer");
  }
}

std::size_t Model::input_width() const { return layers_.front().spec.fan_in; }
std::size_t Model::output_width() const { return layers_.back().spec.fan_out; }

bool Model::binarized() const noexcept {
  return std::any_of(layers_.begin(), layers_.end(),
                     [](const Layer& l) { return l.spec.kind == LayerKind::binary_dense; });
}

std::vector<const Tensor*> Model::trainable() const {
  std::vector<const Tensor*> out;
  for (const Layer& l : layers_) {
    if (l.has_weights()) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    } else if (l.spec.kind == LayerKind::batchnorm) {
      out.push_back(&l.gamma);
      out.push_back(&l.beta);
    }
  }
  return out;
}

std::vector<Tensor*> Model::trainable() {
  std::vector<Tensor*> out;
  for (Layer& l : layers_) {
    if (l.has_weights()) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    } else if (l.spec.kind == LayerKind::batchnorm) {
      out.push_back(&l.gamma);
      out.push_back(&l.beta);
    }
  }
  return out;
}

std::size_t Model::trainable_count() const {
  std::size_t n = 0;
  for (const Tensor* t : trainable()) n += t->size();
  return n;
}

std::size_t Model::first_hidden_dense() const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].has_weights()) return i;
  }
  throw std::logic_error("model has no dense layer");
}

bool operator==(const Model& a, const Model& b) {
  return a.layers_.size() == b.layers_.size() &&
         std::equal(a.layers_.begin(), a.layers_.end(), b.layers_.begin(), layer_equal);
}

constexpr std::uint64_t kInitStream = 0x696e6974;  // "init"

Model build_model(std::span<const std::size_t> hidden, bool binarized, std::uint64_t init_seed,
                  std::size_t input_width, std::size_t classes) {
  Rng rng(derive_seed(init_seed, kInitStream));
  const LayerKind dense_kind = binarized ? LayerKind::binary_dense : LayerKind::dense;
  const LayerKind act_kind = binarized ? LayerKind::sign_act : LayerKind::relu;
  std::vector<Layer> layers;
  std::size_t width = input_width;
  for (std::size_t h : hidden) {
    if (h == 0) throw std::invalid_argument("hidden widths must be positive");
    layers.push_back(dense_layer(dense_kind, width, h, rng));
    layers.push_back(batchnorm_layer(h));
    layers.push_back(plain_layer(act_kind, h));
    width = h;
  }
  layers.push_back(dense_layer(dense_kind, width, classes, rng));
  layers.push_back(plain_layer(LayerKind::softmax_xent_head, classes));
  return Model(std::move(layers));
}

Model build_model(Arch arch, bool binarized, std::uint64_t init_seed) {
  std::vector<std::size_t> hidden = hidden_widths(arch);
  return build_model(hidden, binarized, init_seed);
}

ForwardCache forward(const Model& model, const Tensor& x, Mode mode) {
  require_batch_input(x, model.input_width());
  const auto& layers = model.layers();
  ForwardCache cache;
  cache.model_version = model.version();
  cache.mode = mode;
  cache.inputs.reserve(layers.size() + 1);
  cache.normalized.resize(layers.size());
  cache.inv_std.resize(layers.size());
  cache.inputs.push_back(x);

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& layer = layers[i];
    const Tensor& in = cache.inputs.back();
    Tensor out;
    switch (layer.spec.kind) {
      case LayerKind::dense:
        out = matmul(in, layer.weight, Transpose::no, Transpose::yes);
        add_bias_rows(out, layer.bias);
        break;
      case LayerKind::binary_dense:
        out = matmul(in, binarize(layer.weight), Transpose::no, Transpose::yes);
        add_bias_rows(out, layer.bias);
        break;
      case LayerKind::relu: out = relu(in); break;
      case LayerKind::sign_act: out = sign(in); break;
      case LayerKind::hardtanh: out = hardtanh(in); break;
      case LayerKind::batchnorm: {
        const std::size_t batch = in.rows();
        const std::size_t width = in.cols();
        Tensor mean({width}, 0.0f);
        Tensor var({width}, 0.0f);
        if (mode == Mode::train) {
          std::vector<double> sum(width, 0.0), sq(width, 0.0);
          for (std::size_t r = 0; r < batch; ++r) {
            const float* row = in.data() + r * width;
            for (std::size_t c = 0; c < width; ++c) sum[c] += row[c];
          }
          for (std::size_t c = 0; c < width; ++c) mean[c] = static_cast<float>(sum[c] / static_cast<double>(batch));
          for (std::size_t r = 0; r < batch; ++r) {
            const float* row = in.data() + r * width;
            for (std::size_t c = 0; c < width; ++c) {
              const double d = static_cast<double>(row[c]) - mean[c];
              sq[c] += d * d;
            }
          }
          Tensor unbiased({width}, 0.0f);
          for (std::size_t c = 0; c < width; ++c) {
            var[c] = static_cast<float>(sq[c] / static_cast<double>(batch));
            unbiased[c] = batch > 1 ? static_cast<float>(sq[c] / static_cast<double>(batch - 1)) : var[c];
          }
          cache.moments.push_back({i, mean, std::move(unbiased)});
        } else {
          mean = layer.running_mean;
          var = layer.running_var;
        }
        Tensor inv_std({width});
        for (std::size_t c = 0; c < width; ++c) inv_std[c] = 1.0f / std::sqrt(var[c] + kBatchNormEpsilon);
        Tensor xhat({batch, width});
        out = Tensor({batch, width});
        for (std::size_t r = 0; r < batch; ++r) {
          const float* src = in.data() + r * width;
          float* nrm = xhat.data() + r * width;
          float* dst = out.data() + r * width;
          for (std::size_t c = 0; c < width; ++c) {
            nrm[c] = (src[c] - mean[c]) * inv_std[c];
            dst[c] = layer.gamma[c] * nrm[c] + layer.beta[c];
          }
        }
        cache.normalized[i] = std::move(xhat);
        cache.inv_std[i] = std::move(inv_std);
        break;
      }
      case LayerKind::softmax_xent_head: out = in; break;
    }
    cache.inputs.push_back(std::move(out));
  }
  return cache;
}

double cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels) {
  if (logits.rows() != labels.size()) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(logits.rows()) + " rows but " +
                                std::to_string(labels.size()) + " labels");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const float peak = *std::max_element(row.begin(), row.end());
    double denom = 0.0;
    for (float v : row) denom += std::exp(static_cast<double>(v - peak));
    total += std::log(denom) - static_cast<double>(row[labels[r]] - peak);
  }
  return total / static_cast<double>(logits.rows());
}

std::vector<std::size_t> predictions(const Tensor& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Gradients backward(const Model& model, const ForwardCache& cache, std::span<const std::uint8_t> labels,
                   GradientScope scope) {
  const auto& layers = model.layers();
  if (cache.model_version != model.version() || cache.inputs.size() != layers.size() + 1) {
    throw StaleCacheError("forward cache does not belong to the current model state (cache version " +
                          std::to_string(cache.model_version) + ", model version " +
                          std::to_string(model.version()) + ")");
  }
  const Tensor& logits = cache.logits();
  const std::size_t batch = logits.rows();
  if (labels.size() != batch) {
    throw std::invalid_argument("backward: " + std::to_string(batch) + " rows but " + std::to_string(labels.size()) +
                                " labels");
  }
  for (std::uint8_t y : labels) {
    if (y >= logits.cols()) throw std::invalid_argument("label " + std::to_string(y) + " out of range");
  }

  Gradients grads;
  grads.loss = cross_entropy(logits, labels);
  grads.moments = cache.moments;
  const bool want_params = scope == GradientScope::parameters_and_input;

  // Slot of each layer's first trainable tensor.
  std::vector<std::size_t> slot(layers.size(), 0);
  std::size_t slots = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    slot[i] = slots;
    if (layers[i].has_weights() || layers[i].spec.kind == LayerKind::batchnorm) slots += 2;
  }
  if (want_params) grads.params.resize(slots);

  // d(mean CE)/d(logits) = (softmax - onehot) / batch
  Tensor g({batch, logits.cols()});
  for (std::size_t r = 0; r < batch; ++r) {
    auto row = logits.row(r);
    auto out = g.row(r);
    const float peak = *std::max_element(row.begin(), row.end());
    double denom = 0.0;
    for (float v : row) denom += std::exp(static_cast<double>(v - peak));
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double p = std::exp(static_cast<double>(row[c] - peak)) / denom;
      out[c] = static_cast<float>((p - (c == labels[r] ? 1.0 : 0.0)) / static_cast<double>(batch));
    }
  }

  for (std::size_t i = layers.size(); i-- > 0;) {
    const Layer& layer = layers[i];
    const Tensor& in = cache.inputs[i];
    switch (layer.spec.kind) {
      case LayerKind::softmax_xent_head: break;
      case LayerKind::dense:
      case LayerKind::binary_dense: {
        if (want_params) {
          grads.params[slot[i]] = matmul(g, in, Transpose::yes, Transpose::no);
          grads.params[slot[i] + 1] = column_sums(g);
        }
        const bool binary = layer.spec.kind == LayerKind::binary_dense;
        g = matmul(g, binary ? binarize(layer.weight) : layer.weight);
        break;
      }
      case LayerKind::relu: g = relu_vjp(in, g); break;
      case LayerKind::sign_act: g = sign_ste_vjp(in, g); break;
      case LayerKind::hardtanh: g = hardtanh_vjp(in, g); break;
      case LayerKind::batchnorm: {
        const Tensor& xhat = cache.normalized[i];
        const Tensor& inv_std = cache.inv_std[i];
        const std::size_t width = in.cols();
        std::vector<double> sum_g(width, 0.0), sum_gx(width, 0.0);
        for (std::size_t r = 0; r < batch; ++r) {
          const float* gr = g.data() + r * width;
          const float* xr = xhat.data() + r * width;
          for (std::size_t c = 0; c < width; ++c) {
            sum_g[c] += gr[c];
            sum_gx[c] += static_cast<double>(gr[c]) * xr[c];
          }
        }
        if (want_params) {
          Tensor dgamma({width}), dbeta({width});
          for (std::size_t c = 0; c < width; ++c) {
            dgamma[c] = static_cast<float>(sum_gx[c]);
            dbeta[c] = static_cast<float>(sum_g[c]);
          }
          grads.params[slot[i]] = std::move(dgamma);
          grads.params[slot[i] + 1] = std::move(dbeta);
        }
        Tensor dx({batch, width});
        if (cache.mode == Mode::train) {
          const double n = static_cast<double>(batch);
          for (std::size_t r = 0; r < batch; ++r) {
            const float* gr = g.data() + r * width;
            const float* xr = xhat.data() + r * width;
            float* dr = dx.data() + r * width;
            for (std::size_t c = 0; c < width; ++c) {
              const double scale = static_cast<double>(layer.gamma[c]) * inv_std[c];
              dr[c] = static_cast<float>(scale * (gr[c] - sum_g[c] / n - xr[c] * sum_gx[c] / n));
            }
          }
        } else {
          for (std::size_t r = 0; r < batch; ++r) {
            const float* gr = g.data() + r * width;
            float* dr = dx.data() + r * width;
            for (std::size_t c = 0; c < width; ++c) dr[c] = gr[c] * layer.gamma[c] * inv_std[c];
          }
        }
        g = std::move(dx);
        break;
      }
    }
  }
  grads.input = std::move(g);
  return grads;
}

namespace {

void require_step_ready(const Model& model, const Gradients& grads) {
  if (grads.params.size() != model.trainable().size()) {
    throw std::invalid_argument("gradient list has " + std::to_string(grads.params.size()) + " tensors, model has " +
                                std::to_string(model.trainable().size()));
  }
  if (!std::isfinite(grads.loss)) throw NonFiniteGradientError("loss is not finite");
  auto params = model.trainable();
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads.params[k].shape() != params[k]->shape()) {
      throw std::invalid_argument("gradient " + std::to_string(k) + " has shape " +
                                  shape_string(grads.params[k].shape()) + ", parameter has " +
                                  shape_string(params[k]->shape()));
    }
    if (!grads.params[k].all_finite()) {
      throw NonFiniteGradientError("non-finite gradient in trainable tensor " + std::to_string(k));
    }
  }
}

void finish_step(Model& model, const Gradients& grads) {
  auto& layers = model.mutable_layers();
  for (Layer& layer : layers) {
    if (layer.spec.kind == LayerKind::binary_dense) {
      for (float& w : layer.weight.values()) w = std::clamp(w, -1.0f, 1.0f);
    }
  }
  for (const BatchMoments& m : grads.moments) {
    Layer& layer = layers.at(m.layer);
    for (std::size_t c = 0; c < layer.running_mean.size(); ++c) {
      layer.running_mean[c] = (1.0f - kBatchNormMomentum) * layer.running_mean[c] + kBatchNormMomentum * m.mean[c];
      layer.running_var[c] = (1.0f - kBatchNormMomentum) * layer.running_var[c] + kBatchNormMomentum * m.var[c];
    }
  }
  model.touch();
}

// Weight tensors sit at even slots of layers with weights.
std::vector<bool> decayed_slots(const Model& model) {
  std::vector<bool> out;
  for (const Layer& l : model.layers()) {
    if (l.has_weights()) {
      out.push_back(true);
      out.push_back(false);
    } else if (l.spec.kind == LayerKind::batchnorm) {
      out.push_back(false);
      out.push_back(false);
    }
  }
  return out;
}

}  // namespace

void sgd_step(Model& model, const Gradients& grads, float lr, float weight_decay) {
  if (!(lr > 0.0f)) throw std::invalid_argument("learning rate must be positive");
  require_step_ready(model, grads);
  auto params = model.trainable();
  auto decay = decayed_slots(model);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k]->values();
    auto g = grads.params[k].values();
    const float wd = decay[k] ? weight_decay : 0.0f;
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * (g[j] + wd * w[j]);
  }
  finish_step(model, grads);
}

void SgdOptimizer::step(Model& model, const Gradients& grads, float lr, float weight_decay) {
  if (!(lr > 0.0f)) throw std::invalid_argument("learning rate must be positive");
  require_step_ready(model, grads);
  auto params = model.trainable();
  auto decay = decayed_slots(model);
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const Tensor* p : params) velocity_.emplace_back(p->shape(), 0.0f);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k]->values();
    auto g = grads.params[k].values();
    auto v = velocity_[k].values();
    const float wd = decay[k] ? weight_decay : 0.0f;
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + (g[j] + wd * w[j]);
      w[j] -= lr * v[j];
    }
  }
  finish_step(model, grads);
}

}  // namespace qg
