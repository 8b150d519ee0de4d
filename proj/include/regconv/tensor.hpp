#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace regconv {

/// Library-wide error type. Messages are part of the CLI contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles.
///
/// Planar operations interpret the last two dims as (H, W) and fold every
/// leading dim into a channel count, so a (K, N, H, W) regular field is
/// also a (K*N, H, W) planar tensor without copying.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t height() const;
  std::size_t width() const;
  /// Product of every dim but the last two.
  std::size_t planes() const;

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const double* data() const { return data_.data(); }
  double* data() { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * height() + y) * width() + x];
  }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * height() + y) * width() + x];
  }

  /// Same values, new shape; element counts must agree.
  Tensor reshaped(Shape shape) const;

  /// Slice along dim 0: returns the sub-tensor at index i.
  Tensor slice0(std::size_t i) const;

  bool all_finite() const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, Tensor a);

double l2_norm(const Tensor& t);
double sum(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Binary format: "RGT1", u32 rank, u32 dims[rank], f64 values row-major.
// Everything little-endian.
enum class Precision { F32, F64 };

/// Rounds every entry to the nearest float (no-op for F64).
void round_to(Tensor& t, Precision p);

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace regconv
