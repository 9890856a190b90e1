#pragma once

#include <Eigen/Dense>

namespace forge {

// Dimension is at most 4 throughout; fixed max sizes keep hot paths off the heap.
inline constexpr int kMaxDim = 4;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;
using IMat = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;
using IVec = Eigen::Matrix<long long, Eigen::Dynamic, 1, 0, kMaxDim, 1>;

/// Spectral norm (largest singular value).
inline double op_norm(const Mat& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Mat> svd(m);
  return svd.singularValues()(0);
}

/// Smallest singular value (conorm) of a possibly rectangular matrix.
inline double min_singular(const Mat& m) {
  Eigen::JacobiSVD<Mat> svd(m);
  const auto& s = svd.singularValues();
  return s(s.size() - 1);
}

}  // namespace forge
