#include "regconv/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

namespace regconv {

namespace {

std::size_t element_count(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw Error("tensor dims must be >= 1, got " + shape_string(shape));
  }
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 8);
}

std::uint64_t get_le(std::istream& in, int bytes) {
  unsigned char b[8] = {};
  in.read(reinterpret_cast<char*>(b), bytes);
  if (in.gcount() != bytes) throw Error("truncated tensor data");
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  check_shape(shape_);
  if (data_.size() != element_count(shape_)) {
    throw Error("value count " + std::to_string(data_.size()) + " does not match shape " +
                shape_string(shape_));
  }
}

std::size_t Tensor::height() const {
  if (rank() < 2) throw Error("tensor of rank " + std::to_string(rank()) + " has no spatial dims");
  return shape_[rank() - 2];
}

std::size_t Tensor::width() const {
  if (rank() < 2) throw Error("tensor of rank " + std::to_string(rank()) + " has no spatial dims");
  return shape_[rank() - 1];
}

std::size_t Tensor::planes() const { return size() / (height() * width()); }

Tensor Tensor::reshaped(Shape shape) const {
  if (element_count(shape) != size()) {
    throw Error("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice0(std::size_t i) const {
  if (rank() < 2 || i >= shape_[0]) throw Error("slice index out of range");
  Shape sub(shape_.begin() + 1, shape_.end());
  const std::size_t n = size() / shape_[0];
  return Tensor(std::move(sub), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(i * n),
                                                    data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw Error("shape mismatch " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }

Tensor operator-(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  if (a.shape() != b.shape()) {
    throw Error("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(double s, Tensor a) { return a *= s; }

double l2_norm(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v * v;
  return std::sqrt(acc);
}

double sum(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  return acc;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void round_to(Tensor& t, Precision p) {
  if (p == Precision::F64) return;
  for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("RGT1", 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4) throw Error("truncated tensor data");
  if (std::string(magic, 4) != "RGT1") throw Error("bad magic");
  const auto rank = static_cast<std::uint32_t>(get_le(in, 4));
  if (rank == 0 || rank > 8) throw Error("unsupported tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get_le(in, 4));
  Tensor t(shape);
  for (auto& v : t.values()) v = std::bit_cast<double>(get_le(in, 8));
  return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_tensor(in);
}

}  // namespace regconv
