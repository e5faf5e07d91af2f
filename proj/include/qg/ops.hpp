#pragma once

#include <string_view>
#include <utility>

#include "qg/rng.hpp"
#include "qg/tensor.hpp"

namespace qg {

enum class Transpose { no, yes };

/// Matrix product a·b for rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Matrix product with optional transposition of either operand, e.g.
/// matmul(x, w, Transpose::no, Transpose::yes) computes x·wᵀ.
Tensor matmul(const Tensor& a, const Tensor& b, Transpose ta, Transpose tb);

enum class Elementwise { add, sub, mul, relu, sign, hardtanh, exp, log };

std::string_view to_string(Elementwise op);

// Pointwise ops. Binary forms accept identical shapes or a scalar operand;
// there is no other broadcasting. sign(0) is +1. log of a non-positive value
// throws std::domain_error, and a result that overflows to ±inf throws
// std::overflow_error.
Tensor elementwise(Elementwise op, const Tensor& a);
Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b);
Tensor elementwise(Elementwise op, const Tensor& a, float scalar);

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::mul, a, b); }
inline Tensor relu(const Tensor& a) { return elementwise(Elementwise::relu, a); }
inline Tensor sign(const Tensor& a) { return elementwise(Elementwise::sign, a); }
inline Tensor hardtanh(const Tensor& a) { return elementwise(Elementwise::hardtanh, a); }
inline Tensor exp(const Tensor& a) { return elementwise(Elementwise::exp, a); }
inline Tensor log(const Tensor& a) { return elementwise(Elementwise::log, a); }

inline float sign_of(float v) noexcept { return v < 0.0f ? -1.0f : 1.0f; }

// Vector-Jacobian products: given the upstream gradient of a scalar loss with
// respect to an op's output, return the gradient with respect to its inputs.
std::pair<Tensor, Tensor> matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& grad_out);
std::pair<Tensor, Tensor> mul_vjp(const Tensor& a, const Tensor& b, const Tensor& grad_out);
Tensor relu_vjp(const Tensor& x, const Tensor& grad_out);
Tensor hardtanh_vjp(const Tensor& x, const Tensor& grad_out);
Tensor exp_vjp(const Tensor& x, const Tensor& grad_out);
Tensor log_vjp(const Tensor& x, const Tensor& grad_out);
/// Straight-through surrogate for sign: passes grad where |x| <= 1.
Tensor sign_ste_vjp(const Tensor& x, const Tensor& grad_out);

/// I.i.d. standard normal draws.
Tensor gaussian(Rng& rng, const Shape& shape);
/// I.i.d. uniform draws in [lo, hi).
Tensor uniform(Rng& rng, const Shape& shape, float lo, float hi);

}  // namespace qg
