#pragma once

// Named dense tensors (row-major doubles) and ordered parameter sets.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "earnlab/core.hpp"

namespace earnlab {

struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  double* row(std::size_t r) { return data.data() + r * cols(); }
  const double* row(std::size_t r) const { return data.data() + r * cols(); }
};

class ParamSet {
 public:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    require(find(name) < 0, ErrorKind::Parameter, "duplicate tensor name " + name);
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    tensors_.push_back(Tensor{std::move(name), std::move(shape), std::vector<double>(n, 0.0)});
    return tensors_.size() - 1;
  }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name == name) return static_cast<int>(i);
    }
    return -1;
  }

  Tensor& at(const std::string& name) {
    const int i = find(name);
    require(i >= 0, ErrorKind::Parameter, "no tensor named " + name);
    return tensors_[static_cast<std::size_t>(i)];
  }
  const Tensor& at(const std::string& name) const {
    const int i = find(name);
    require(i >= 0, ErrorKind::Parameter, "no tensor named " + name);
    return tensors_[static_cast<std::size_t>(i)];
  }

  Tensor& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor& operator[](std::size_t i) const { return tensors_[i]; }
  std::size_t count() const { return tensors_.size(); }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  ParamSet zeros_like() const {
    ParamSet out = *this;
    for (auto& t : out.tensors_) std::fill(t.data.begin(), t.data.end(), 0.0);
    return out;
  }

  void set_zero() {
    for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), 0.0);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& t : tensors_) {
      for (double v : t.data) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

 private:
  std::vector<Tensor> tensors_;
};

inline void fill_uniform(Tensor& t, double bound, Rng& rng) {
  for (auto& v : t.data) v = bound * (2.0 * rng.uniform() - 1.0);
}

}  // namespace earnlab
