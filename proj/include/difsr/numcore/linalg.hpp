#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/SVD>

#include "difsr/errors.hpp"
#include "difsr/numcore/value.hpp"

namespace difsr::numcore {

inline constexpr double kDefaultRankTolerance = 1e-8;

struct RankReport {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> singular_values;  // descending
  std::size_t rank = 0;
  double rel_tol = kDefaultRankTolerance;
};

/// Singular values of a row-major rows x cols matrix, descending.
inline std::vector<double> singular_values(std::span<const double> data, std::size_t rows, std::size_t cols) {
  if (data.size() != rows * cols) throw DimensionError("singular_values: data does not match extents");
  if (rows == 0 || cols == 0) return {};
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMajor> m(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  std::vector<double> out(s.data(), s.data() + s.size());
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

/// Count of singular values above rel_tol * sigma_max (0 for the zero matrix).
inline RankReport numeric_rank(std::span<const double> data, std::size_t rows, std::size_t cols,
                               double rel_tol = kDefaultRankTolerance) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw ContractError("numeric_rank: rel_tol must lie in (0, 1)");
  RankReport report;
  report.rows = rows;
  report.cols = cols;
  report.rel_tol = rel_tol;
  report.singular_values = singular_values(data, rows, cols);
  if (!report.singular_values.empty() && report.singular_values.front() > 0.0) {
    const double cutoff = rel_tol * report.singular_values.front();
    report.rank = static_cast<std::size_t>(std::count_if(report.singular_values.begin(), report.singular_values.end(),
                                                         [cutoff](double s) { return s > cutoff; }));
  }
  return report;
}

inline RankReport numeric_rank(const Value& m, double rel_tol = kDefaultRankTolerance) {
  if (m.rank() != 2) throw DimensionError("numeric_rank: expected a matrix, got " + shape_string(m.shape()));
  return numeric_rank(m.data(), m.dim(0), m.dim(1), rel_tol);
}

}  // namespace difsr::numcore
