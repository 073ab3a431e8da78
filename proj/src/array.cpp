#include "ivpt/array.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ivpt {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Array::Array(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), real(0)) {}

Array::Array(Shape shape, real fill_value)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill_value) {}

Array Array::from(Shape shape, std::vector<real> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("Array::from: " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  Array a;
  a.shape_ = std::move(shape);
  a.data_.assign(values.begin(), values.end());
  return a;
}

int64_t Array::dim(int i) const {
  if (i < 0) i += ndim();
  if (i < 0 || i >= ndim()) throw std::out_of_range("Array::dim index");
  return shape_[i];
}

Array Array::reshaped(Shape s) const {
  if (shape_numel(s) != numel())
    throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                                " changes element count");
  Array a = *this;
  a.shape_ = std::move(s);
  return a;
}

void Array::fill(real v) {
  for (auto& x : data_) x = v;
}

bool Array::all_finite() const {
  for (real x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

IntArray::IntArray(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0) {}

IntArray::IntArray(Shape shape, int64_t fill_value)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill_value) {}

int64_t IntArray::dim(int i) const {
  if (i < 0) i += ndim();
  if (i < 0 || i >= ndim()) throw std::out_of_range("IntArray::dim index");
  return shape_[i];
}

}  // namespace ivpt
