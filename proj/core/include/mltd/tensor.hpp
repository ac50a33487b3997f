#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mltd {

enum class DType : std::uint8_t { kFloat64 = 0, kFloat32 = 1 };

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor. Values are always held as double; a kFloat32
/// tensor keeps every value rounded to single precision.
///
/// Tensors are cheap handles: copies share the buffer. Operations never
/// mutate their inputs, only optimizers write through `mutable_data()`.
/// A tensor produced while a `Tape` is recording carries the id of its tape
/// node, which is how gradients are routed back to it.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, DType dtype = DType::kFloat64);
  Tensor(Shape shape, std::vector<double> values, DType dtype = DType::kFloat64);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_ ? data_->size() : 0; }
  bool defined() const noexcept { return data_ != nullptr; }
  DType dtype() const noexcept { return dtype_; }

  std::span<const double> data() const noexcept;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::initializer_list<std::size_t> index) const;

  /// Same values, rounded to `dtype`, detached from any tape.
  Tensor to(DType dtype) const;
  /// Same buffer, no tape id.
  Tensor detach() const;
  /// Deep copy of the values, no tape id.
  Tensor clone() const;
  /// Shares the buffer under a new shape of equal size; keeps no tape id.
  Tensor view(Shape shape) const;

  std::int64_t tape_id() const noexcept { return tape_id_; }
  std::uint64_t tape_serial() const noexcept { return tape_serial_; }
  void attach(std::uint64_t serial, std::int64_t id) noexcept {
    tape_serial_ = serial;
    tape_id_ = id;
  }

  /// True when both tensors have the same shape and exactly equal values.
  bool equal(const Tensor& other) const;

 private:
  std::shared_ptr<std::vector<double>> data_;
  Shape shape_;
  DType dtype_ = DType::kFloat64;
  std::uint64_t tape_serial_ = 0;
  std::int64_t tape_id_ = -1;
};

/// Named parameter collection; iteration order is lexicographic so every
/// traversal (optimizer, checkpoint, gradient reduction) is canonical.
using NamedTensors = std::map<std::string, Tensor>;

std::size_t total_size(const NamedTensors& tensors);
NamedTensors clone_all(const NamedTensors& tensors);
NamedTensors detach_all(const NamedTensors& tensors);

}  // namespace mltd
