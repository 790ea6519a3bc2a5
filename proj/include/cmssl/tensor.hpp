#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cmssl/errors.hpp"

namespace cmssl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Dense row-major double tensor. Carries an accumulated gradient buffer of
// identical shape when requires_grad is set.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), values(numel(shape), fill) {
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }

  static Tensor scalar(double v) {
    Tensor t(Shape{1});
    t.values[0] = v;
    return t;
  }

  static Tensor from(Shape s, std::vector<double> vals) {
    Tensor t(std::move(s));
    if (vals.size() != t.values.size())
      throw ShapeError("tensor data size " + std::to_string(vals.size()) + " does not match shape " +
                       shape_str(t.shape));
    t.values = std::move(vals);
    return t;
  }

  std::size_t size() const { return values.size(); }
  bool is_scalar() const { return values.size() == 1; }
  double item() const {
    if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(shape));
    return values[0];
  }

  // 2-D accessors (row-major).
  double& at(std::size_t i, std::size_t j) { return values[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * shape[1] + j]; }

  // 3-D accessors for c x h x w images.
  double& at(std::size_t c, std::size_t i, std::size_t j) {
    return values[(c * shape[1] + i) * shape[2] + j];
  }
  double at(std::size_t c, std::size_t i, std::size_t j) const {
    return values[(c * shape[1] + i) * shape[2] + j];
  }

  void set_requires_grad(bool rg) {
    requires_grad = rg;
    if (rg)
      grad.assign(values.size(), 0.0);
    else
      grad.clear();
  }

  void zero_grad() {
    if (requires_grad) grad.assign(values.size(), 0.0);
  }
};

}  // namespace cmssl
