#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

namespace oneref {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Dense rank-2 f64 tensor, row-major flat storage. Vectors are [n,1],
// scalars [1,1]. This is the only array type the autodiff graph carries.
struct Tensor {
  int64_t rows = 0;
  int64_t cols = 0;
  Eigen::ArrayXd data;

  Tensor() = default;
  Tensor(int64_t r, int64_t c) : rows(r), cols(c), data(Eigen::ArrayXd::Zero(r * c)) {}

  static Tensor zeros(int64_t r, int64_t c) { return Tensor(r, c); }
  static Tensor full(int64_t r, int64_t c, double v) {
    Tensor t(r, c);
    t.data.setConstant(v);
    return t;
  }
  static Tensor scalar(double v) { return full(1, 1, v); }
  static Tensor from_vector(const std::vector<double>& v, int64_t r, int64_t c);

  int64_t size() const { return rows * cols; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  double& at(int64_t r, int64_t c) { return data[r * cols + c]; }
  double at(int64_t r, int64_t c) const { return data[r * cols + c]; }

  MatMap mat() { return MatMap(data.data(), rows, cols); }
  ConstMatMap mat() const { return ConstMatMap(data.data(), rows, cols); }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + "," + std::to_string(cols) + "]";
  }
};

}  // namespace oneref
