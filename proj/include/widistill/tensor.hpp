#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace widistill {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
const char* to_string(DType dtype);

/// Raised when operand shapes cannot be combined.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Calls `f.template operator()<T>()` with T = float or double.
template <class F>
decltype(auto) visit_dtype(DType dtype, F&& f) {
  if (dtype == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Dense row-major array. Immutable once constructed; copies share storage.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, DType dtype);
  static Tensor full(Shape shape, DType dtype, double value);
  static Tensor scalar(double value, DType dtype);
  /// Converts `values` to `dtype`; `values.size()` must equal numel(shape).
  static Tensor from_doubles(Shape shape, std::span<const double> values, DType dtype);

  template <class T>
  static Tensor adopt(Shape shape, std::vector<T>&& values) {
    if (widistill::numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                       std::to_string(widistill::numel(shape)) + " elements, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = dtype_of<T>();
    t.data_ = std::make_shared<const Buffer>(std::move(values));
    return t;
  }

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  std::size_t numel() const { return widistill::numel(shape_); }
  std::size_t rank() const { return shape_.size(); }

  template <class T>
  std::span<const T> view() const {
    if (dtype_of<T>() != dtype_) throw std::logic_error("tensor: dtype mismatch in view()");
    return std::get<std::vector<T>>(*data_);
  }

  double at(std::size_t i) const;
  /// Value of a one-element tensor.
  double item() const;
  std::vector<double> to_doubles() const;
  Tensor cast(DType dtype) const;
  /// Same storage, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  /// Copy of elements [offset, offset + numel(shape)) laid out as `shape`.
  Tensor slice(std::size_t offset, Shape shape) const;

  bool bit_equal(const Tensor& other) const;
  bool all_finite() const;

 private:
  using Buffer = std::variant<std::vector<float>, std::vector<double>>;

  Shape shape_;
  DType dtype_ = DType::f32;
  std::shared_ptr<const Buffer> data_;
};

}  // namespace widistill
