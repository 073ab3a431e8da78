#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <string>
#include <vector>

namespace ivpt {

// All numerics run in double precision: gradient checks use the tighter 64-bit
// tolerance branch and reproducibility contracts are byte-exact.
using real = double;
using Shape = std::vector<int64_t>;

namespace detail {

// Pins every numeric buffer to one alignment class (a full vector register on
// current SIMD widths). Vectorized kernels peel loops based on the runtime
// address, so letting the heap pick arbitrary alignments would change the
// floating-point summation order from one allocation to the next and break
// the byte-exact reproducibility contract within a process.
template <typename T, std::size_t Align>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

}  // namespace detail

using RealBuffer = std::vector<real, detail::AlignedAllocator<real, 64>>;
using IntBuffer = std::vector<int64_t, detail::AlignedAllocator<int64_t, 64>>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major n-d array of real. Deliberately minimal: shape + flat storage
// plus the handful of helpers the op layer needs. All layout-aware work
// (strides, Eigen maps) lives in the ops.
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape);
  Array(Shape shape, real fill_value);

  static Array zeros(const Shape& s) { return Array(s); }
  static Array full(const Shape& s, real v) { return Array(s, v); }
  static Array from(Shape shape, std::vector<real> values);
  static Array scalar(real v) { return Array(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  real& operator[](int64_t i) { return data_[i]; }
  real operator[](int64_t i) const { return data_[i]; }

  Array reshaped(Shape s) const;
  bool same_shape(const Array& o) const { return shape_ == o.shape_; }
  void fill(real v);
  bool all_finite() const;

 private:
  Shape shape_;
  RealBuffer data_;
};

// Integer companion for labels, argmax assignments and region ids.
class IntArray {
 public:
  IntArray() = default;
  explicit IntArray(Shape shape);
  IntArray(Shape shape, int64_t fill_value);

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  int64_t* data() { return data_.data(); }
  const int64_t* data() const { return data_.data(); }
  int64_t& operator[](int64_t i) { return data_[i]; }
  int64_t operator[](int64_t i) const { return data_[i]; }

  bool same_shape(const IntArray& o) const { return shape_ == o.shape_; }

 private:
  Shape shape_;
  IntBuffer data_;
};

}  // namespace ivpt
