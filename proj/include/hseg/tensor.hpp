#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace hseg::nn {

/// (N, H, W, C) with C fastest.
struct Shape4 {
  int n = 1;
  int h = 1;
  int w = 1;
  int c = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
           static_cast<std::size_t>(c);
  }
  std::size_t pixels() const { return static_cast<std::size_t>(n) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(h) + "," + std::to_string(w) + "," + std::to_string(c) + ")";
  }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape4 shape, T fill = T(0)) : shape_(shape) {
    if (shape.n < 1 || shape.h < 1 || shape.w < 1 || shape.c < 1) {
      throw std::invalid_argument("tensor dims must be >= 1, got " + shape.str());
    }
    data_.assign(shape.size(), fill);
  }
  BasicTensor(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (shape.n < 1 || shape.h < 1 || shape.w < 1 || shape.c < 1) {
      throw std::invalid_argument("tensor dims must be >= 1, got " + shape.str());
    }
    if (data_.size() != shape.size()) throw std::invalid_argument("tensor data length mismatch");
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int n, int y, int x, int c) const {
    return ((static_cast<std::size_t>(n) * shape_.h + y) * shape_.w + x) * shape_.c + c;
  }
  T& at(int n, int y, int x, int c) { return data_[index(n, y, x, c)]; }
  T at(int n, int y, int x, int c) const { return data_[index(n, y, x, c)]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Shape4 shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

}  // namespace hseg::nn
