#pragma once

// Dense row-major matrix with the handful of kernels the network needs.
// Templated on the scalar so training runs in f32 and gradient checks in f64.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "vgt/rng.hpp"

namespace vgt {

template <typename T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, T(0)) {}

  static Mat zeros(int r, int c) { return Mat(r, c); }

  static Mat full(int r, int c, T v) {
    Mat m(r, c);
    std::fill(m.a.begin(), m.a.end(), v);
    return m;
  }

  T& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  T operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }

  T* row(int i) { return a.data() + static_cast<std::size_t>(i) * cols; }
  const T* row(int i) const { return a.data() + static_cast<std::size_t>(i) * cols; }

  std::size_t size() const { return a.size(); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (T v : a)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <typename T>
inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("shape mismatch: " + what);
}

// C = A * B
template <typename T>
Mat<T> matmul(const Mat<T>& A, const Mat<T>& B) {
  check_shape<T>(A.cols == B.rows, "matmul " + std::to_string(A.rows) + "x" + std::to_string(A.cols) +
                                       " * " + std::to_string(B.rows) + "x" + std::to_string(B.cols));
  Mat<T> C(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    const T* arow = A.row(i);
    T* crow = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const T aik = arow[k];
      if (aik == T(0)) continue;
      const T* brow = B.row(k);
      for (int j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return C;
}

// C = A * B^T
template <typename T>
Mat<T> matmul_nt(const Mat<T>& A, const Mat<T>& B) {
  check_shape<T>(A.cols == B.cols, "matmul_nt");
  Mat<T> C(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const T* arow = A.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const T* brow = B.row(j);
      T s = 0;
      for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
      C(i, j) = s;
    }
  }
  return C;
}

// C = A^T * B
template <typename T>
Mat<T> matmul_tn(const Mat<T>& A, const Mat<T>& B) {
  check_shape<T>(A.rows == B.rows, "matmul_tn");
  Mat<T> C(A.cols, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    const T* arow = A.row(i);
    const T* brow = B.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const T aik = arow[k];
      if (aik == T(0)) continue;
      T* crow = C.row(k);
      for (int j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return C;
}

template <typename T>
void add_inplace(Mat<T>& dst, const Mat<T>& src) {
  check_shape<T>(dst.same_shape(src), "add_inplace");
  for (std::size_t i = 0; i < dst.a.size(); ++i) dst.a[i] += src.a[i];
}

template <typename T>
Mat<T> transpose(const Mat<T>& A) {
  Mat<T> C(A.cols, A.rows);
  for (int i = 0; i < A.rows; ++i)
    for (int j = 0; j < A.cols; ++j) C(j, i) = A(i, j);
  return C;
}

// Boolean attention mask; allow(i, j) == true means key j is visible to query i.
struct BoolMask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> allow;

  BoolMask() = default;
  BoolMask(int r, int c, bool init = true)
      : rows(r), cols(c), allow(static_cast<std::size_t>(r) * c, init ? 1 : 0) {}

  static BoolMask causal(int n) {
    BoolMask m(n, n, false);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) m.set(i, j, true);
    return m;
  }

  void set(int i, int j, bool v) { allow[static_cast<std::size_t>(i) * cols + j] = v ? 1 : 0; }
  bool at(int i, int j) const { return allow[static_cast<std::size_t>(i) * cols + j] != 0; }
};

// Row-wise softmax restricted to allowed entries; disallowed entries are
// exactly zero. Shared by the plain forward path and the autodiff op.
template <typename T>
void softmax_rows_masked(Mat<T>& m, const BoolMask* mask) {
  if (mask != nullptr) check_shape<T>(mask->rows == m.rows && mask->cols == m.cols, "softmax mask");
  for (int i = 0; i < m.rows; ++i) {
    T* r = m.row(i);
    T mx = -std::numeric_limits<T>::infinity();
    int allowed = 0;
    for (int j = 0; j < m.cols; ++j) {
      if (mask == nullptr || mask->at(i, j)) {
        mx = std::max(mx, r[j]);
        ++allowed;
      }
    }
    if (mask != nullptr && allowed == 0)
      throw std::invalid_argument("softmax: fully masked row " + std::to_string(i));
    T sum = 0;
    for (int j = 0; j < m.cols; ++j) {
      if (mask == nullptr || mask->at(i, j)) {
        r[j] = std::exp(r[j] - mx);
        sum += r[j];
      } else {
        r[j] = T(0);
      }
    }
    for (int j = 0; j < m.cols; ++j) r[j] /= sum;
  }
}

// Row-wise layer norm forward, shared by the plain path and the autodiff op
// so both produce bit-identical activations. xhat/inv_std are optional
// saved-for-backward outputs.
template <typename T>
void layernorm_forward(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, T eps, Mat<T>& out,
                       Mat<T>* xhat = nullptr, Mat<T>* inv_std = nullptr) {
  check_shape<T>(gamma.rows == 1 && gamma.cols == x.cols && beta.rows == 1 && beta.cols == x.cols,
                 "layernorm params");
  const int n = x.cols;
  out = Mat<T>(x.rows, n);
  if (xhat) *xhat = Mat<T>(x.rows, n);
  if (inv_std) *inv_std = Mat<T>(x.rows, 1);
  for (int i = 0; i < x.rows; ++i) {
    T mean = 0;
    for (int j = 0; j < n; ++j) mean += x(i, j);
    mean /= n;
    T var = 0;
    for (int j = 0; j < n; ++j) {
      const T d = x(i, j) - mean;
      var += d * d;
    }
    var /= n;
    const T is = T(1) / std::sqrt(var + eps);
    if (inv_std) (*inv_std)(i, 0) = is;
    for (int j = 0; j < n; ++j) {
      const T xh = (x(i, j) - mean) * is;
      if (xhat) (*xhat)(i, j) = xh;
      out(i, j) = xh * gamma(0, j) + beta(0, j);
    }
  }
}

template <typename T>
inline T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

template <typename T>
inline T gelu_grad_scalar(T x) {
  const T phi = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
  return phi + x * pdf;
}

template <typename T>
Mat<T> random_normal(int r, int c, double stddev, std::mt19937_64& rng) {
  Mat<T> m(r, c);
  for (auto& v : m.a) v = static_cast<T>(gaussian(rng) * stddev);
  return m;
}

}  // namespace vgt
