#pragma once

// Dense row-major float64 tensor with a dynamic shape. This is deliberately a
// dumb container: all math lives in the graph ops so there is exactly one
// place where numeric semantics are defined.

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gsrec {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
      throw std::invalid_argument("tensor: data size " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const {
    return shape_.at(static_cast<size_t>(i >= 0 ? i : rank() + i));
  }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(std::initializer_list<int64_t> idx) {
    return data_[static_cast<size_t>(flat_index(idx))];
  }
  double at(std::initializer_list<int64_t> idx) const {
    return data_[static_cast<size_t>(flat_index(idx))];
  }

  // Reinterpret without moving data; element count must be preserved.
  void reshape(Shape s) {
    if (shape_numel(s) != numel()) {
      throw std::invalid_argument("tensor: reshape " + shape_str(shape_) +
                                  " -> " + shape_str(s) +
                                  " changes element count");
    }
    shape_ = std::move(s);
  }

  void resize(const Shape& s) {
    shape_ = s;
    validate_shape();
    data_.assign(static_cast<size_t>(shape_numel(s)), 0.0);
  }

  void zero() { std::fill(data_.begin(), data_.end(), 0.0); }

  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

 private:
  void validate_shape() const {
    if (shape_.empty()) {
      throw std::invalid_argument("tensor: rank-0 shapes are not used; "
                                  "scalars are shape [1]");
    }
    for (int64_t d : shape_) {
      if (d <= 0) {
        throw std::invalid_argument("tensor: non-positive extent in shape " +
                                    shape_str(shape_));
      }
    }
  }

  int64_t flat_index(std::initializer_list<int64_t> idx) const {
    if (static_cast<int64_t>(idx.size()) != rank()) {
      throw std::out_of_range("tensor: index rank " +
                              std::to_string(idx.size()) + " vs shape " +
                              shape_str(shape_));
    }
    int64_t flat = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      int64_t extent = shape_[k];
      if (i < 0 || i >= extent) {
        throw std::out_of_range("tensor: index " + std::to_string(i) +
                                " out of range for axis " + std::to_string(k) +
                                " of shape " + shape_str(shape_));
      }
      flat = flat * extent + i;
      ++k;
    }
    return flat;
  }

  Shape shape_;
  std::vector<double> data_;
};

}  // namespace gsrec
