#include "widistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

namespace widistill {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

const char* to_string(DType dtype) { return dtype == DType::f32 ? "float32" : "float64"; }

Tensor::Tensor() : data_(std::make_shared<const Buffer>(std::vector<float>(1, 0.0f))) {}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), dtype, 0.0); }

Tensor Tensor::full(Shape shape, DType dtype, double value) {
  const std::size_t n = widistill::numel(shape);
  return visit_dtype(dtype, [&]<typename T>() {
    return adopt<T>(std::move(shape), std::vector<T>(n, static_cast<T>(value)));
  });
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, dtype, value); }

Tensor Tensor::from_doubles(Shape shape, std::span<const double> values, DType dtype) {
  return visit_dtype(dtype, [&]<typename T>() {
    return adopt<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
  });
}

double Tensor::at(std::size_t i) const {
  return visit_dtype(dtype_, [&]<typename T>() { return static_cast<double>(view<T>()[i]); });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("tensor: item() on shape " + to_string(shape_));
  return at(0);
}

std::vector<double> Tensor::to_doubles() const {
  return visit_dtype(dtype_, [&]<typename T>() {
    auto v = view<T>();
    return std::vector<double>(v.begin(), v.end());
  });
}

Tensor Tensor::cast(DType dtype) const {
  if (dtype == dtype_) return *this;
  return visit_dtype(dtype_, [&]<typename S>() {
    auto src = view<S>();
    return visit_dtype(dtype, [&]<typename T>() {
      return adopt<T>(Shape(shape_), std::vector<T>(src.begin(), src.end()));
    });
  });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (widistill::numel(shape) != numel()) {
    throw ShapeError("reshape: " + to_string(shape_) + " to " + to_string(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::slice(std::size_t offset, Shape shape) const {
  const std::size_t n = widistill::numel(shape);
  if (offset + n > numel()) {
    throw ShapeError("slice: [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                     ") out of range for " + to_string(shape_));
  }
  return visit_dtype(dtype_, [&]<typename T>() {
    auto v = view<T>().subspan(offset, n);
    return adopt<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
  });
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (dtype_ != other.dtype_ || shape_ != other.shape_) return false;
  return visit_dtype(dtype_, [&]<typename T>() {
    auto a = view<T>();
    auto b = other.view<T>();
    return std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
  });
}

bool Tensor::all_finite() const {
  return visit_dtype(dtype_, [&]<typename T>() {
    auto v = view<T>();
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
  });
}

}  // namespace widistill
