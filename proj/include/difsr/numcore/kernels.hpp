#pragma once

// Dense kernels on row-major buffers, backed by Eigen's blocked GEMM. All
// accumulate into the output (c += ...). For fixed shapes on one machine the
// summation order is fixed, so results are reproducible bit for bit.

#include <cstddef>

#include <Eigen/Core>

namespace difsr::numcore::kernels {

namespace detail {
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;
}  // namespace detail

/// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  detail::Map(c, M, N).noalias() += detail::ConstMap(a, M, K) * detail::ConstMap(b, K, N);
}

/// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  detail::Map(c, M, N).noalias() += detail::ConstMap(a, M, K) * detail::ConstMap(b, N, K).transpose();
}

/// c[m x n] += a[k x m]^T * b[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
  detail::Map(c, M, N).noalias() += detail::ConstMap(a, K, M).transpose() * detail::ConstMap(b, K, N);
}

}  // namespace difsr::numcore::kernels
