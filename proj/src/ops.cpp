#include "qg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qg {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

void require_finite_result(const Tensor& t, Elementwise op) {
  if (!t.all_finite()) throw std::overflow_error(std::string(to_string(op)) + " produced a non-finite value");
}

float apply_binary(Elementwise op, float x, float y) {
  switch (op) {
    case Elementwise::add: return x + y;
    case Elementwise::sub: return x - y;
    case Elementwise::mul: return x * y;
    default: break;
  }
  throw std::invalid_argument(std::string(to_string(op)) + " is not a binary op");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul(a, b, Transpose::no, Transpose::no); }

Tensor matmul(const Tensor& a, const Tensor& b, Transpose ta, Transpose tb) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul needs matrices, got " + shape_string(a.shape()) + " and " +
                                shape_string(b.shape()));
  }
  const std::size_t m = ta == Transpose::no ? a.rows() : a.cols();
  const std::size_t k = ta == Transpose::no ? a.cols() : a.rows();
  const std::size_t kb = tb == Transpose::no ? b.rows() : b.cols();
  const std::size_t n = tb == Transpose::no ? b.cols() : b.rows();
  if (k != kb) {
    throw std::invalid_argument("matmul inner extents differ: " + shape_string(a.shape()) +
                                (ta == Transpose::yes ? "^T" : "") + " x " + shape_string(b.shape()) +
                                (tb == Transpose::yes ? "^T" : "") + " (" + std::to_string(k) + " vs " +
                                std::to_string(kb) + ")");
  }
  Tensor out({m, n});
  ConstMap am(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
  ConstMap bm(b.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
  MutMap om(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (ta == Transpose::no && tb == Transpose::no) {
    om.noalias() = am * bm;
  } else if (ta == Transpose::no) {
    om.noalias() = am * bm.transpose();
  } else if (tb == Transpose::no) {
    om.noalias() = am.transpose() * bm;
  } else {
    om.noalias() = am.transpose() * bm.transpose();
  }
  return out;
}

std::string_view to_string(Elementwise op) {
  switch (op) {
    case Elementwise::add: return "add";
    case Elementwise::sub: return "sub";
    case Elementwise::mul: return "mul";
    case Elementwise::relu: return "relu";
    case Elementwise::sign: return "sign";
    case Elementwise::hardtanh: return "hardtanh";
    case Elementwise::exp: return "exp";
    case Elementwise::log: return "log";
  }
  return "?";
}

Tensor elementwise(Elementwise op, const Tensor& a) {
  Tensor out = a;
  auto v = out.values();
  switch (op) {
    case Elementwise::relu:
      for (float& x : v) x = x > 0.0f ? x : 0.0f;
      break;
    case Elementwise::sign:
      for (float& x : v) x = sign_of(x);
      break;
    case Elementwise::hardtanh:
      for (float& x : v) x = std::clamp(x, -1.0f, 1.0f);
      break;
    case Elementwise::exp:
      for (float& x : v) x = std::exp(x);
      require_finite_result(out, op);
      break;
    case Elementwise::log:
      for (float& x : v) {
        if (!(x > 0.0f)) throw std::domain_error("log of non-positive value " + std::to_string(x));
        x = std::log(x);
      }
      break;
    default:
      throw std::invalid_argument(std::string(to_string(op)) + " needs two operands");
  }
  return out;
}

Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b) {
  if (b.size() == 1 && a.size() != 1) return elementwise(op, a, b[0]);
  if (a.size() == 1 && b.size() != 1) {
    Tensor out = b;
    for (float& y : out.values()) y = apply_binary(op, a[0], y);
    require_finite_result(out, op);
    return out;
  }
  require_same_shape(a, b, to_string(op));
  Tensor out = a;
  auto v = out.values();
  auto w = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = apply_binary(op, v[i], w[i]);
  require_finite_result(out, op);
  return out;
}

Tensor elementwise(Elementwise op, const Tensor& a, float scalar) {
  Tensor out = a;
  for (float& x : out.values()) x = apply_binary(op, x, scalar);
  require_finite_result(out, op);
  return out;
}

std::pair<Tensor, Tensor> matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& grad_out) {
  // out = a·b  =>  da = g·bᵀ, db = aᵀ·g
  return {matmul(grad_out, b, Transpose::no, Transpose::yes), matmul(a, grad_out, Transpose::yes, Transpose::no)};
}

std::pair<Tensor, Tensor> mul_vjp(const Tensor& a, const Tensor& b, const Tensor& grad_out) {
  require_same_shape(a, b, "mul_vjp");
  require_same_shape(a, grad_out, "mul_vjp");
  return {mul(grad_out, b), mul(grad_out, a)};
}

Tensor relu_vjp(const Tensor& x, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "relu_vjp");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(x[i] > 0.0f)) g[i] = 0.0f;
  }
  return g;
}

Tensor hardtanh_vjp(const Tensor& x, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "hardtanh_vjp");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (x[i] < -1.0f || x[i] > 1.0f) g[i] = 0.0f;
  }
  return g;
}

Tensor sign_ste_vjp(const Tensor& x, const Tensor& grad_out) { return hardtanh_vjp(x, grad_out); }

Tensor exp_vjp(const Tensor& x, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "exp_vjp");
  return mul(grad_out, exp(x));
}

Tensor log_vjp(const Tensor& x, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "log_vjp");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(x[i] > 0.0f)) throw std::domain_error("log_vjp at non-positive value");
    g[i] /= x[i];
  }
  return g;
}

Tensor gaussian(Rng& rng, const Shape& shape) {
  Tensor out(shape);
  for (float& v : out.values()) v = static_cast<float>(rng.normal());
  return out;
}

Tensor uniform(Rng& rng, const Shape& shape, float lo, float hi) {
  Tensor out(shape);
  for (float& v : out.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return out;
}

}  // namespace qg
