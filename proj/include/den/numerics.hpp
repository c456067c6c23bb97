#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace den {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  // Throws ShapeError when data.size() != rows*cols and ArgumentError on a
  // non-finite entry.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  std::vector<double> column(std::size_t c) const;

  // Structural edits used by network growth. New entries are zero.
  void append_columns(std::size_t count);
  void append_rows(std::size_t count);
  void erase_column(std::size_t c);
  void erase_row(std::size_t r);

  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Throws ShapeError when a.cols() != b.rows().
Matrix matmul(const Matrix& a, const Matrix& b);

inline double relu(double x) { return x > 0.0 ? x : 0.0; }
// Subgradient at exactly 0 is 0.
inline double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }
double sigmoid(double x);

// xoshiro256** seeded through splitmix64. The generator name is written into
// checkpoints so a reader knows how to resume the stream.
class SeededRng {
 public:
  static constexpr const char* kGeneratorName = "xoshiro256**";
  using State = std::array<std::uint64_t, 4>;

  explicit SeededRng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller; consumes two uniforms per draw.
  double normal();
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent stream derived from this generator's seed and a tag.
  static SeededRng derive(std::uint64_t seed, std::uint64_t tag);

  const State& state() const { return s_; }
  static SeededRng from_state(const State& s);

  friend bool operator==(const SeededRng&, const SeededRng&) = default;

 private:
  State s_{};
};

// Central-difference gradient of f at theta. Test oracle only.
// Throws ArgumentError for h <= 0 and OracleError on a non-finite f value.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double h);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

}  // namespace den
