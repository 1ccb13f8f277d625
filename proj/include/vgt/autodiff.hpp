#pragma once

// Matrix-level reverse-mode autodiff. A Graph owns a tape of nodes; ops
// append nodes whose ids are already topologically ordered, so backward is a
// single reverse sweep. Forward kernels are shared with the plain inference
// path (mat.hpp), keeping the two paths numerically identical.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "vgt/mat.hpp"

namespace vgt {

template <typename T>
class Graph {
 public:
  using BackFn = std::function<void(Graph&, int)>;

  struct Node {
    Mat<T> val;
    Mat<T> grad;
    BackFn back;        // empty for leaves/constants
    bool needs_grad = false;
  };

  int leaf(Mat<T> v, bool needs_grad) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int constant(Mat<T> v) { return leaf(std::move(v), false); }

  const Mat<T>& val(int id) const { return nodes_[id].val; }
  Mat<T>& grad(int id) { return nodes_[id].grad; }

  // d(out)/d(node) accumulation target; lazily sized.
  Mat<T>& grad_of(int id) {
    Node& n = nodes_[id];
    if (n.grad.rows == 0) n.grad = Mat<T>::zeros(n.val.rows, n.val.cols);
    return n.grad;
  }

  int matmul(int a, int b) {
    int id = push(vgt::matmul(nodes_[a].val, nodes_[b].val), [a, b](Graph& g, int self) {
      const Mat<T>& dc = g.grad_of(self);
      if (g.nodes_[a].needs_grad) add_inplace(g.grad_of(a), matmul_nt(dc, g.nodes_[b].val));
      if (g.nodes_[b].needs_grad) add_inplace(g.grad_of(b), matmul_tn(g.nodes_[a].val, dc));
    });
    propagate_needs(id, {a, b});
    return id;
  }

  // A * B^T
  int matmul_nt_op(int a, int b) {
    int id = push(vgt::matmul_nt(nodes_[a].val, nodes_[b].val), [a, b](Graph& g, int self) {
      const Mat<T>& dc = g.grad_of(self);
      if (g.nodes_[a].needs_grad) add_inplace(g.grad_of(a), vgt::matmul(dc, g.nodes_[b].val));
      if (g.nodes_[b].needs_grad) add_inplace(g.grad_of(b), matmul_tn(dc, g.nodes_[a].val));
    });
    propagate_needs(id, {a, b});
    return id;
  }

  int add(int a, int b) {
    check_shape<T>(nodes_[a].val.same_shape(nodes_[b].val), "graph add");
    Mat<T> out = nodes_[a].val;
    add_inplace(out, nodes_[b].val);
    int id = push(std::move(out), [a, b](Graph& g, int self) {
      const Mat<T>& dc = g.grad_of(self);
      if (g.nodes_[a].needs_grad) add_inplace(g.grad_of(a), dc);
      if (g.nodes_[b].needs_grad) add_inplace(g.grad_of(b), dc);
    });
    propagate_needs(id, {a, b});
    return id;
  }

  // a (r x c) + bias (1 x c) broadcast over rows.
  int add_rowvec(int a, int bias) {
    const Mat<T>& av = nodes_[a].val;
    const Mat<T>& bv = nodes_[bias].val;
    check_shape<T>(bv.rows == 1 && bv.cols == av.cols, "add_rowvec");
    Mat<T> out = av;
    for (int i = 0; i < out.rows; ++i)
      for (int j = 0; j < out.cols; ++j) out(i, j) += bv(0, j);
    int id = push(std::move(out), [a, bias](Graph& g, int self) {
      const Mat<T>& dc = g.grad_of(self);
      if (g.nodes_[a].needs_grad) add_inplace(g.grad_of(a), dc);
      if (g.nodes_[bias].needs_grad) {
        Mat<T>& db = g.grad_of(bias);
        for (int i = 0; i < dc.rows; ++i)
          for (int j = 0; j < dc.cols; ++j) db(0, j) += dc(i, j);
      }
    });
    propagate_needs(id, {a, bias});
    return id;
  }

  int scale(int a, T s) {
    Mat<T> out = nodes_[a].val;
    for (auto& v : out.a) v *= s;
    int id = push(std::move(out), [a, s](Graph& g, int self) {
      if (!g.nodes_[a].needs_grad) return;
      const Mat<T>& dc = g.grad_of(self);
      Mat<T>& da = g.grad_of(a);
      for (std::size_t i = 0; i < dc.a.size(); ++i) da.a[i] += s * dc.a[i];
    });
    propagate_needs(id, {a});
    return id;
  }

  // Row softmax over allowed entries; disallowed entries are exactly zero in
  // both the output and the gradient. `mask` must outlive the graph.
  int softmax_rows(int a, const BoolMask* mask) {
    Mat<T> out = nodes_[a].val;
    softmax_rows_masked(out, mask);
    int id = push(std::move(out), [a, mask](Graph& g, int self) {
      if (!g.nodes_[a].needs_grad) return;
      const Mat<T>& w = g.nodes_[self].val;
      const Mat<T>& dc = g.grad_of(self);
      Mat<T>& da = g.grad_of(a);
      for (int i = 0; i < w.rows; ++i) {
        T dot = 0;
        for (int j = 0; j < w.cols; ++j) dot += dc(i, j) * w(i, j);
        for (int j = 0; j < w.cols; ++j) {
          if (mask != nullptr && !mask->at(i, j)) continue;
          da(i, j) += w(i, j) * (dc(i, j) - dot);
        }
      }
    });
    propagate_needs(id, {a});
    return id;
  }

  int gelu(int a) {
    Mat<T> out = nodes_[a].val;
    for (auto& v : out.a) v = gelu_scalar(v);
    int id = push(std::move(out), [a](Graph& g, int self) {
      if (!g.nodes_[a].needs_grad) return;
      const Mat<T>& x = g.nodes_[a].val;
      const Mat<T>& dc = g.grad_of(self);
      Mat<T>& da = g.grad_of(a);
      for (std::size_t i = 0; i < x.a.size(); ++i) da.a[i] += dc.a[i] * gelu_grad_scalar(x.a[i]);
    });
    propagate_needs(id, {a});
    return id;
  }

  // Row-wise layer norm with learned scale and shift (1 x cols each).
  int layer_norm(int a, int gamma, int beta, T eps = T(1e-5)) {
    Mat<T> xhat, inv_std, out;
    layernorm_forward(nodes_[a].val, nodes_[gamma].val, nodes_[beta].val, eps, out, &xhat, &inv_std);
    const int xhat_id = constant(std::move(xhat));
    const int istd_id = constant(std::move(inv_std));
    int id = push(std::move(out), [a, gamma, beta, xhat_id, istd_id](Graph& g, int self) {
      const Mat<T>& dc = g.grad_of(self);
      const Mat<T>& xh = g.nodes_[xhat_id].val;
      const Mat<T>& istd = g.nodes_[istd_id].val;
      const Mat<T>& gv = g.nodes_[gamma].val;
      const int n = xh.cols;
      if (g.nodes_[gamma].needs_grad) {
        Mat<T>& dg = g.grad_of(gamma);
        for (int i = 0; i < xh.rows; ++i)
          for (int j = 0; j < n; ++j) dg(0, j) += dc(i, j) * xh(i, j);
      }
      if (g.nodes_[beta].needs_grad) {
        Mat<T>& db = g.grad_of(beta);
        for (int i = 0; i < xh.rows; ++i)
          for (int j = 0; j < n; ++j) db(0, j) += dc(i, j);
      }
      if (g.nodes_[a].needs_grad) {
        Mat<T>& da = g.grad_of(a);
        for (int i = 0; i < xh.rows; ++i) {
          T sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (int j = 0; j < n; ++j) {
            const T dxh = dc(i, j) * gv(0, j);
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh(i, j);
          }
          for (int j = 0; j < n; ++j) {
            const T dxh = dc(i, j) * gv(0, j);
            da(i, j) += istd(i, 0) * (dxh - sum_dxhat / n - xh(i, j) * sum_dxhat_xhat / n);
          }
        }
      }
    });
    propagate_needs(id, {a, gamma, beta});
    return id;
  }

  int slice_cols(int a, int c0, int width) {
    const Mat<T>& av = nodes_[a].val;
    check_shape<T>(c0 >= 0 && c0 + width <= av.cols, "slice_cols");
    Mat<T> out(av.rows, width);
    for (int i = 0; i < av.rows; ++i)
      for (int j = 0; j < width; ++j) out(i, j) = av(i, c0 + j);
    int id = push(std::move(out), [a, c0, width](Graph& g, int self) {
      if (!g.nodes_[a].needs_grad) return;
      const Mat<T>& dc = g.grad_of(self);
      Mat<T>& da = g.grad_of(a);
      for (int i = 0; i < dc.rows; ++i)
        for (int j = 0; j < width; ++j) da(i, c0 + j) += dc(i, j);
    });
    propagate_needs(id, {a});
    return id;
  }

  int concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int rows = nodes_[parts[0]].val.rows;
    int cols = 0;
    for (int p : parts) {
      check_shape<T>(nodes_[p].val.rows == rows, "concat_cols rows");
      cols += nodes_[p].val.cols;
    }
    Mat<T> out(rows, cols);
    int off = 0;
    for (int p : parts) {
      const Mat<T>& pv = nodes_[p].val;
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < pv.cols; ++j) out(i, off + j) = pv(i, j);
      off += pv.cols;
    }
    int id = push(std::move(out), [parts](Graph& g, int self) {
      const Mat<T>& dc = g.grad_of(self);
      int off = 0;
      for (int p : parts) {
        const int w = g.nodes_[p].val.cols;
        if (g.nodes_[p].needs_grad) {
          Mat<T>& dp = g.grad_of(p);
          for (int i = 0; i < dc.rows; ++i)
            for (int j = 0; j < w; ++j) dp(i, j) += dc(i, off + j);
        }
        off += w;
      }
    });
    propagate_needs(id, parts);
    return id;
  }

  // Replaces rows where flag != 0 with the (1 x cols) vector node `vec`.
  // Used for the learned mask embedding: flagged rows take the mask vector
  // and contribute their gradient to it, unflagged rows pass through.
  int blend_rows(int a, int vec, std::vector<std::uint8_t> flags) {
    const Mat<T>& av = nodes_[a].val;
    const Mat<T>& vv = nodes_[vec].val;
    check_shape<T>(vv.rows == 1 && vv.cols == av.cols, "blend_rows vec");
    check_shape<T>(static_cast<int>(flags.size()) == av.rows, "blend_rows flags");
    Mat<T> out = av;
    for (int i = 0; i < av.rows; ++i)
      if (flags[i])
        for (int j = 0; j < av.cols; ++j) out(i, j) = vv(0, j);
    auto fl = std::make_shared<std::vector<std::uint8_t>>(std::move(flags));
    int id = push(std::move(out), [a, vec, fl](Graph& g, int self) {
      const Mat<T>& dc = g.grad_of(self);
      if (g.nodes_[a].needs_grad) {
        Mat<T>& da = g.grad_of(a);
        for (int i = 0; i < dc.rows; ++i)
          if (!(*fl)[i])
            for (int j = 0; j < dc.cols; ++j) da(i, j) += dc(i, j);
      }
      if (g.nodes_[vec].needs_grad) {
        Mat<T>& dv = g.grad_of(vec);
        for (int i = 0; i < dc.rows; ++i)
          if ((*fl)[i])
            for (int j = 0; j < dc.cols; ++j) dv(0, j) += dc(i, j);
      }
    });
    propagate_needs(id, {a, vec});
    return id;
  }

  // Mean squared error against a constant target, optionally restricted to
  // selected rows. Returns a 1x1 node.
  int mse(int a, Mat<T> target, std::vector<std::uint8_t> row_select = {}) {
    const Mat<T>& av = nodes_[a].val;
    check_shape<T>(av.same_shape(target), "mse target");
    if (!row_select.empty()) check_shape<T>(static_cast<int>(row_select.size()) == av.rows, "mse rows");
    std::size_t count = 0;
    T sum = 0;
    for (int i = 0; i < av.rows; ++i) {
      if (!row_select.empty() && !row_select[i]) continue;
      for (int j = 0; j < av.cols; ++j) {
        const T d = av(i, j) - target(i, j);
        sum += d * d;
        ++count;
      }
    }
    if (count == 0) throw std::invalid_argument("mse: no selected entries");
    Mat<T> out(1, 1);
    out(0, 0) = sum / static_cast<T>(count);
    const int tgt_id = constant(std::move(target));
    auto sel = std::make_shared<std::vector<std::uint8_t>>(std::move(row_select));
    int id = push(std::move(out), [a, tgt_id, sel, count](Graph& g, int self) {
      if (!g.nodes_[a].needs_grad) return;
      const T dl = g.grad_of(self)(0, 0);
      const Mat<T>& av = g.nodes_[a].val;
      const Mat<T>& tv = g.nodes_[tgt_id].val;
      Mat<T>& da = g.grad_of(a);
      const T scale = T(2) / static_cast<T>(count) * dl;
      for (int i = 0; i < av.rows; ++i) {
        if (!sel->empty() && !(*sel)[i]) continue;
        for (int j = 0; j < av.cols; ++j) da(i, j) += scale * (av(i, j) - tv(i, j));
      }
    });
    propagate_needs(id, {a});
    return id;
  }

  // Weighted sum of 1x1 nodes, for combining loss terms.
  int add_scaled(int a, int b, T wa, T wb) {
    check_shape<T>(nodes_[a].val.rows == 1 && nodes_[a].val.cols == 1 && nodes_[b].val.rows == 1 &&
                       nodes_[b].val.cols == 1,
                   "add_scaled scalars");
    Mat<T> out(1, 1);
    out(0, 0) = wa * nodes_[a].val(0, 0) + wb * nodes_[b].val(0, 0);
    int id = push(std::move(out), [a, b, wa, wb](Graph& g, int self) {
      const T dl = g.grad_of(self)(0, 0);
      if (g.nodes_[a].needs_grad) g.grad_of(a)(0, 0) += wa * dl;
      if (g.nodes_[b].needs_grad) g.grad_of(b)(0, 0) += wb * dl;
    });
    propagate_needs(id, {a, b});
    return id;
  }

  // Reverse sweep from `root` (must be 1x1). Node ids are construction-
  // ordered, hence already topological.
  void backward(int root) {
    check_shape<T>(nodes_[root].val.rows == 1 && nodes_[root].val.cols == 1, "backward root");
    grad_of(root)(0, 0) = T(1);
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.back || !n.needs_grad) continue;
      if (n.grad.rows == 0) continue;  // never contributed to the root
      n.back(*this, id);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  int push(Mat<T> val, BackFn back) {
    Node n;
    n.val = std::move(val);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void propagate_needs(int id, const std::vector<int>& parents) {
    for (int p : parents)
      if (nodes_[p].needs_grad) {
        nodes_[id].needs_grad = true;
        return;
      }
  }

  std::vector<Node> nodes_;
};

}  // namespace vgt
