#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "driveweave/common.hpp"

namespace driveweave {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Reverse-mode autodiff over matrix-valued nodes. Each operation records its
// value and a pull-back that routes the node's gradient to its inputs; the
// node list is already topologically ordered because inputs are created
// before their consumers.
template <typename T>
class Tape {
 public:
  using Mat = MatX<T>;

  struct Node {
    Mat value;
    Mat grad;  // empty until something flows back
    std::function<void(Tape&, int)> backward;  // (tape, own index)
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const Mat& val(int i) const { return nodes_[static_cast<size_t>(i)].value; }
  const Mat& grad(int i) const { return nodes_[static_cast<size_t>(i)].grad; }
  bool has_grad(int i) const { return nodes_[static_cast<size_t>(i)].grad.size() > 0; }

  // Adds grad `g` to node i, materializing the buffer on first touch.
  template <typename Expr>
  void accum(int i, const Expr& g) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  int leaf(Mat value) { return push(std::move(value), nullptr); }

  int custom(Mat value, std::function<void(Tape&, int)> backward) {
    return push(std::move(value), std::move(backward));
  }

  int matmul(int a, int b) {
    Mat out = val(a) * val(b);
    return push(std::move(out), [a, b](Tape& t, int self) {
      const Mat& g = t.grad(self);
      t.accum(a, g * t.val(b).transpose());
      t.accum(b, t.val(a).transpose() * g);
    });
  }

  // a * b^T without materializing the transpose as a node.
  int matmul_nt(int a, int b) {
    Mat out = val(a) * val(b).transpose();
    return push(std::move(out), [a, b](Tape& t, int self) {
      const Mat& g = t.grad(self);
      t.accum(a, g * t.val(b));
      t.accum(b, g.transpose() * t.val(a));
    });
  }

  int add(int a, int b) {
    Mat out = val(a) + val(b);
    return push(std::move(out), [a, b](Tape& t, int self) {
      t.accum(a, t.grad(self));
      t.accum(b, t.grad(self));
    });
  }

  // a [m x n] plus a broadcast row b [1 x n].
  int add_row(int a, int b) {
    Mat out = val(a).rowwise() + val(b).row(0);
    return push(std::move(out), [a, b](Tape& t, int self) {
      t.accum(a, t.grad(self));
      t.accum(b, t.grad(self).colwise().sum());
    });
  }

  int scale(int a, T c) {
    Mat out = val(a) * c;
    return push(std::move(out), [a, c](Tape& t, int self) {
      t.accum(a, t.grad(self) * c);
    });
  }

  int gelu(int a) {
    const Mat& x = val(a);
    Mat out = x.unaryExpr([](T v) { return gelu_fn(v); });
    return push(std::move(out), [a](Tape& t, int self) {
      Mat d = t.val(a).unaryExpr([](T v) { return gelu_grad(v); });
      t.accum(a, t.grad(self).cwiseProduct(d));
    });
  }

  // Row-wise layer norm with learned scale/offset rows [1 x n].
  int layernorm(int a, int scale_p, int offset_p) {
    const Mat& x = val(a);
    int rows = static_cast<int>(x.rows()), cols = static_cast<int>(x.cols());
    auto ctx = std::make_shared<Mat>(rows, 2);  // per-row mean, rstd
    Mat normed(rows, cols);
    for (int r = 0; r < rows; ++r) {
      T mean = x.row(r).mean();
      T var = (x.row(r).array() - mean).square().sum() / static_cast<T>(cols);
      T rstd = T(1) / std::sqrt(var + T(1e-5));
      (*ctx)(r, 0) = mean;
      (*ctx)(r, 1) = rstd;
      normed.row(r) = (x.row(r).array() - mean) * rstd;
    }
    Mat out = (normed.array().rowwise() * val(scale_p).row(0).array()).rowwise() +
              val(offset_p).row(0).array();
    auto normed_saved = std::make_shared<Mat>(std::move(normed));
    return push(std::move(out),
                [a, scale_p, offset_p, ctx, normed_saved](Tape& t, int self) {
                  const Mat& g = t.grad(self);
                  const Mat& nrm = *normed_saved;
                  int rows = static_cast<int>(g.rows()), cols = static_cast<int>(g.cols());
                  t.accum(scale_p, (g.cwiseProduct(nrm)).colwise().sum());
                  t.accum(offset_p, g.colwise().sum());
                  Mat gx(rows, cols);
                  const Mat& sc = t.val(scale_p);
                  for (int r = 0; r < rows; ++r) {
                    // d/dx of (x - mean) * rstd with rstd depending on x.
                    Eigen::Array<T, 1, Eigen::Dynamic> gy =
                        g.row(r).array() * sc.row(0).array();
                    T rstd = (*ctx)(r, 1);
                    T gy_sum = gy.sum();
                    T gy_dot_n = (gy * nrm.row(r).array()).sum();
                    gx.row(r) = (rstd * (gy - gy_sum / static_cast<T>(cols) -
                                         nrm.row(r).array() * gy_dot_n /
                                             static_cast<T>(cols)))
                                    .matrix();
                  }
                  t.accum(a, gx);
                });
  }

  // Row-wise softmax over keys 0..allow[r] (inclusive); other entries are
  // exact zeros. key_offset shifts the per-row bound into this matrix's
  // column space (columns are keys key_offset .. key_offset+cols-1).
  int softmax_rows(int a, std::vector<int> allow, int key_offset = 0) {
    const Mat& x = val(a);
    int rows = static_cast<int>(x.rows()), cols = static_cast<int>(x.cols());
    if (static_cast<int>(allow.size()) != rows)
      throw ConfigError("softmax mask rows do not match score rows");
    Mat out = Mat::Zero(rows, cols);
    for (int r = 0; r < rows; ++r) {
      int hi = std::min(allow[static_cast<size_t>(r)] - key_offset, cols - 1);
      if (hi < 0) throw ConfigError("softmax row with no allowed key");
      T mx = x.row(r).head(hi + 1).maxCoeff();
      T z = T(0);
      for (int k = 0; k <= hi; ++k) {
        T e = std::exp(x(r, k) - mx);
        out(r, k) = e;
        z += e;
      }
      out.row(r).head(hi + 1) /= z;
    }
    return push(std::move(out), [a](Tape& t, int self) {
      const Mat& p = t.val(self);
      const Mat& g = t.grad(self);
      // dx = p .* (g - rowsum(g .* p)); zero rows stay zero.
      Mat gp = g.cwiseProduct(p);
      Eigen::Matrix<T, Eigen::Dynamic, 1> s = gp.rowwise().sum();
      t.accum(a, gp - p.cwiseProduct(s.replicate(1, p.cols())));
    });
  }

  int slice_rows(int a, int start, int len) {
    Mat out = val(a).middleRows(start, len);
    return push(std::move(out), [a, start, len](Tape& t, int self) {
      Mat g = Mat::Zero(t.val(a).rows(), t.val(a).cols());
      g.middleRows(start, len) = t.grad(self);
      t.accum(a, g);
    });
  }

  int slice_cols(int a, int start, int len) {
    Mat out = val(a).middleCols(start, len);
    return push(std::move(out), [a, start, len](Tape& t, int self) {
      Mat g = Mat::Zero(t.val(a).rows(), t.val(a).cols());
      g.middleCols(start, len) = t.grad(self);
      t.accum(a, g);
    });
  }

  int concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw ConfigError("concat_cols needs at least one part");
    int rows = static_cast<int>(val(parts[0]).rows());
    int cols = 0;
    for (int p : parts) cols += static_cast<int>(val(p).cols());
    Mat out(rows, cols);
    int at = 0;
    for (int p : parts) {
      out.middleCols(at, val(p).cols()) = val(p);
      at += static_cast<int>(val(p).cols());
    }
    std::vector<int> ps = parts;
    return push(std::move(out), [ps](Tape& t, int self) {
      int at = 0;
      for (int p : ps) {
        int w = static_cast<int>(t.val(p).cols());
        t.accum(p, t.grad(self).middleCols(at, w));
        at += w;
      }
    });
  }

  // Embedding lookup: out row r = table row idx[r].
  int gather_rows(int table, std::vector<int> idx) {
    const Mat& tb = val(table);
    Mat out(static_cast<int>(idx.size()), tb.cols());
    for (size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= tb.rows())
        throw DataError("gather index " + std::to_string(idx[r]) +
                        " outside table with " + std::to_string(tb.rows()) + " rows");
      out.row(static_cast<int>(r)) = tb.row(idx[r]);
    }
    auto shared = std::make_shared<std::vector<int>>(std::move(idx));
    return push(std::move(out), [table, shared](Tape& t, int self) {
      Mat g = Mat::Zero(t.val(table).rows(), t.val(table).cols());
      const Mat& go = t.grad(self);
      for (size_t r = 0; r < shared->size(); ++r)
        g.row((*shared)[r]) += go.row(static_cast<int>(r));
      t.accum(table, g);
    });
  }

  // Copy of `base` with row spans replaced by other nodes' values.
  struct Overwrite {
    int start = 0;
    int node = -1;
  };
  int overwrite_rows(int base, const std::vector<Overwrite>& spans) {
    Mat out = val(base);
    for (const Overwrite& ow : spans) {
      const Mat& seg = val(ow.node);
      out.middleRows(ow.start, seg.rows()) = seg;
    }
    std::vector<Overwrite> ss = spans;
    return push(std::move(out), [base, ss](Tape& t, int self) {
      Mat g = t.grad(self);
      for (const Overwrite& ow : ss) {
        int len = static_cast<int>(t.val(ow.node).rows());
        t.accum(ow.node, g.middleRows(ow.start, len));
        g.middleRows(ow.start, len).setZero();
      }
      t.accum(base, g);
    });
  }

  int reduce_sum(int a) {
    Mat out(1, 1);
    out(0, 0) = val(a).sum();
    return push(std::move(out), [a](Tape& t, int self) {
      t.accum(a, Mat::Constant(t.val(a).rows(), t.val(a).cols(), t.grad(self)(0, 0)));
    });
  }

  // Backpropagates from a scalar node; grads land on every contributing node.
  void backward(int loss) {
    if (val(loss).rows() != 1 || val(loss).cols() != 1)
      throw ConfigError("backward needs a scalar (1x1) loss node");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    nodes_[static_cast<size_t>(loss)].grad = Mat::Ones(1, 1);
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad.size() > 0 && n.backward) n.backward(*this, i);
    }
  }

  static T gelu_fn(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
  }
  static T gelu_grad(T x) {
    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
    T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
    return cdf + x * pdf;
  }

 private:
  int push(Mat value, std::function<void(Tape&, int)> bw) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(bw)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

}  // namespace driveweave
