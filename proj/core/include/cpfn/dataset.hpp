#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cpfn/errors.hpp"
#include "cpfn/model.hpp"

namespace cpfn {

// Row-major dense matrix; the only matrix type the library needs.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

enum class ColumnKind { Continuous, Discrete };

struct ColumnMeta {
  std::string name;
  ColumnKind kind = ColumnKind::Continuous;
};

// Paired covariate/response samples. When y_transform is Log1p the stored Y
// values are already in the transformed scale; the tag records that fact for
// inference-time change of variables.
struct Dataset {
  Matrix X;
  Matrix Y;
  std::vector<ColumnMeta> x_columns;
  std::vector<ColumnMeta> y_columns;
  ResponseTransform y_transform = ResponseTransform::Identity;

  std::size_t n() const { return X.rows; }
  int d() const { return static_cast<int>(X.cols); }
  int q() const { return static_cast<int>(Y.cols); }

  void validate() const;
};

}  // namespace cpfn
