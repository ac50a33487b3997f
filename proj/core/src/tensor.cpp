#include "mltd/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "mltd/error.hpp"

namespace mltd {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

void round_to_f32(std::vector<double>& v) {
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, DType dtype)
    : data_(std::make_shared<std::vector<double>>(shape_size(shape), 0.0)),
      shape_(std::move(shape)),
      dtype_(dtype) {
  check_shape(shape_);
}

Tensor::Tensor(Shape shape, std::vector<double> values, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
  check_shape(shape_);
  if (values.size() != shape_size(shape_)) {
    throw DimensionError("tensor of shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_size(shape_)) + " values, got " +
                         std::to_string(values.size()));
  }
  if (dtype_ == DType::kFloat32) round_to_f32(values);
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(shape_size(shape), value);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

std::span<const double> Tensor::data() const noexcept {
  return data_ ? std::span<const double>(*data_) : std::span<const double>();
}

std::span<double> Tensor::mutable_data() { return std::span<double>(*data_); }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw DimensionError("index rank mismatch for " + shape_str(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_str(shape_));
    off = off * shape_[axis] + i;
    ++axis;
  }
  return (*data_)[off];
}

Tensor Tensor::to(DType dtype) const {
  std::vector<double> v(data_->begin(), data_->end());
  return Tensor(shape_, std::move(v), dtype);
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_serial_ = 0;
  t.tape_id_ = -1;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  t.shape_ = shape_;
  t.dtype_ = dtype_;
  return t;
}

Tensor Tensor::view(Shape shape) const {
  check_shape(shape);
  if (shape_size(shape) != size()) {
    throw DimensionError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor t;
  t.data_ = data_;
  t.shape_ = std::move(shape);
  t.dtype_ = dtype_;
  return t;
}

bool Tensor::equal(const Tensor& other) const {
  if (shape_ != other.shape_ || defined() != other.defined()) return false;
  if (!defined()) return true;
  return std::equal(data_->begin(), data_->end(), other.data_->begin());
}

std::size_t total_size(const NamedTensors& tensors) {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

NamedTensors clone_all(const NamedTensors& tensors) {
  NamedTensors out;
  for (const auto& [k, t] : tensors) out.emplace(k, t.clone());
  return out;
}

NamedTensors detach_all(const NamedTensors& tensors) {
  NamedTensors out;
  for (const auto& [k, t] : tensors) out.emplace(k, t.detach());
  return out;
}

}  // namespace mltd
