#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <vector>

#include "dpol/tensor.hpp"

namespace dpol {

// Reverse-mode autodiff over dense Eigen matrices. A Tape is built per forward
// pass and discarded afterwards; parameters enter as leaves and their gradients
// are read back by the caller after backward().
template <class S>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  struct ConvGeom {
    int h = 0, w = 0, c = 0;       // input height/width/channels
    int k = 3, stride = 1, pad = 1;
    int out_h() const { return (h + 2 * pad - k) / stride + 1; }
    int out_w() const { return (w + 2 * pad - k) / stride + 1; }
  };

  Var leaf(Mat<S> v, bool needs_grad = false) {
    return push(std::move(v), needs_grad, nullptr);
  }

  const Mat<S>& val(Var v) const { return nodes_[v.id].value; }

  const Mat<S>& grad(Var v) {
    ensure_grad(v.id);
    return nodes_[v.id].grad;
  }

  // loss must be 1x1.
  void backward(Var loss) {
    assert(nodes_[loss.id].value.rows() == 1 && nodes_[loss.id].value.cols() == 1);
    ensure_grad(loss.id);
    nodes_[loss.id].grad(0, 0) = S(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.grad.size() > 0) n.back(*this, i);
    }
  }

  // ---- arithmetic ----

  Var matmul(Var a, Var b) {
    Var out = push(nodes_[a.id].value * nodes_[b.id].value, needs(a) || needs(b),
                   [a, b](Tape& t, int id) {
                     const Mat<S>& g = t.nodes_[id].grad;
                     if (t.needs(a)) t.acc(a) += g * t.nodes_[b.id].value.transpose();
                     if (t.needs(b)) t.acc(b) += t.nodes_[a.id].value.transpose() * g;
                   });
    return out;
  }

  Var transpose(Var a) {
    return push(nodes_[a.id].value.transpose(), needs(a), [a](Tape& t, int id) {
      if (t.needs(a)) t.acc(a) += t.nodes_[id].grad.transpose();
    });
  }

  Var add(Var a, Var b) {
    return push(nodes_[a.id].value + nodes_[b.id].value, needs(a) || needs(b), [a, b](Tape& t, int id) {
      const Mat<S>& g = t.nodes_[id].grad;
      if (t.needs(a)) t.acc(a) += g;
      if (t.needs(b)) t.acc(b) += g;
    });
  }

  Var sub(Var a, Var b) {
    return push(nodes_[a.id].value - nodes_[b.id].value, needs(a) || needs(b), [a, b](Tape& t, int id) {
      const Mat<S>& g = t.nodes_[id].grad;
      if (t.needs(a)) t.acc(a) += g;
      if (t.needs(b)) t.acc(b) -= g;
    });
  }

  Var mul(Var a, Var b) {  // elementwise
    return push(nodes_[a.id].value.cwiseProduct(nodes_[b.id].value), needs(a) || needs(b),
                [a, b](Tape& t, int id) {
                  const Mat<S>& g = t.nodes_[id].grad;
                  if (t.needs(a)) t.acc(a) += g.cwiseProduct(t.nodes_[b.id].value);
                  if (t.needs(b)) t.acc(b) += g.cwiseProduct(t.nodes_[a.id].value);
                });
  }

  Var scale(Var a, S s) {
    return push(nodes_[a.id].value * s, needs(a), [a, s](Tape& t, int id) {
      if (t.needs(a)) t.acc(a) += t.nodes_[id].grad * s;
    });
  }

  Var mul_const(Var a, Mat<S> c) {  // elementwise by a constant mask
    Mat<S> v = nodes_[a.id].value.cwiseProduct(c);
    return push(std::move(v), needs(a), [a, c = std::move(c)](Tape& t, int id) {
      if (t.needs(a)) t.acc(a) += t.nodes_[id].grad.cwiseProduct(c);
    });
  }

  // x: T x d, r: 1 x d broadcast over rows
  Var add_rowvec(Var x, Var r) {
    Mat<S> v = nodes_[x.id].value;
    v.rowwise() += nodes_[r.id].value.row(0);
    return push(std::move(v), needs(x) || needs(r), [x, r](Tape& t, int id) {
      const Mat<S>& g = t.nodes_[id].grad;
      if (t.needs(x)) t.acc(x) += g;
      if (t.needs(r)) t.acc(r) += g.colwise().sum();
    });
  }

  Var mul_rowvec(Var x, Var r) {
    Mat<S> v = nodes_[x.id].value;
    v.array().rowwise() *= nodes_[r.id].value.row(0).array();
    return push(std::move(v), needs(x) || needs(r), [x, r](Tape& t, int id) {
      const Mat<S>& g = t.nodes_[id].grad;
      if (t.needs(x))
        t.acc(x).array() += g.array().rowwise() * t.nodes_[r.id].value.row(0).array();
      if (t.needs(r))
        t.acc(r) += g.cwiseProduct(t.nodes_[x.id].value).colwise().sum();
    });
  }

  Var gelu(Var a) {
    const Mat<S>& x = nodes_[a.id].value;
    Mat<S> v = x.unaryExpr([](S u) { return gelu_fwd(u); });
    return push(std::move(v), needs(a), [a](Tape& t, int id) {
      if (!t.needs(a)) return;
      const Mat<S>& g = t.nodes_[id].grad;
      const Mat<S>& x = t.nodes_[a.id].value;
      t.acc(a) += g.cwiseProduct(x.unaryExpr([](S u) { return gelu_bwd(u); }));
    });
  }

  // Row-wise layer norm without learned affine.
  Var layernorm_rows(Var a, S eps) {
    const Mat<S>& x = nodes_[a.id].value;
    const Eigen::Index d = x.cols();
    Mat<S> y(x.rows(), d);
    Vec<S> inv_std(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      S mu = x.row(i).mean();
      S var = (x.row(i).array() - mu).square().sum() / S(d);
      S is = S(1) / std::sqrt(var + eps);
      y.row(i) = (x.row(i).array() - mu) * is;
      inv_std(i) = is;
    }
    return push(std::move(y), needs(a), [a, inv_std = std::move(inv_std)](Tape& t, int id) {
      if (!t.needs(a)) return;
      const Mat<S>& g = t.nodes_[id].grad;
      const Mat<S>& y = t.nodes_[id].value;
      Mat<S>& gx = t.acc(a);
      const S d = S(y.cols());
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        S gm = g.row(i).mean();
        S gym = g.row(i).cwiseProduct(y.row(i)).mean();
        gx.row(i).array() +=
            inv_std(i) * (g.row(i).array() - gm - y.row(i).array() * gym);
        (void)d;
      }
    });
  }

  // Row-wise softmax of x (+ optional constant additive mask).
  Var softmax_rows(Var a, const Mat<S>* mask = nullptr) {
    Mat<S> z = nodes_[a.id].value;
    if (mask) z += *mask;
    Mat<S> y(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      Vec<S> e = (z.row(i).array() - z.row(i).maxCoeff()).exp();
      y.row(i) = e.transpose() / e.sum();
    }
    return push(std::move(y), needs(a), [a](Tape& t, int id) {
      if (!t.needs(a)) return;
      const Mat<S>& g = t.nodes_[id].grad;
      const Mat<S>& y = t.nodes_[id].value;
      Mat<S>& gx = t.acc(a);
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        S dot = g.row(i).dot(y.row(i));
        gx.row(i).array() += (g.row(i).array() - dot) * y.row(i).array();
      }
    });
  }

  Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n) {
    Mat<S> v = nodes_[a.id].value.middleRows(r0, n);
    return push(std::move(v), needs(a), [a, r0, n](Tape& t, int id) {
      if (t.needs(a)) t.acc(a).middleRows(r0, n) += t.nodes_[id].grad;
    });
  }

  Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n) {
    Mat<S> v = nodes_[a.id].value.middleCols(c0, n);
    return push(std::move(v), needs(a), [a, c0, n](Tape& t, int id) {
      if (t.needs(a)) t.acc(a).middleCols(c0, n) += t.nodes_[id].grad;
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    Eigen::Index rows = 0;
    const Eigen::Index cols = nodes_[parts[0].id].value.cols();
    for (Var p : parts) rows += nodes_[p.id].value.rows();
    Mat<S> v(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      const Mat<S>& pv = nodes_[p.id].value;
      v.middleRows(r, pv.rows()) = pv;
      r += pv.rows();
    }
    return push(std::move(v), needs_any(parts), [parts](Tape& t, int id) {
      const Mat<S>& g = t.nodes_[id].grad;
      Eigen::Index r = 0;
      for (Var p : parts) {
        Eigen::Index n = t.nodes_[p.id].value.rows();
        if (t.needs(p)) t.acc(p) += g.middleRows(r, n);
        r += n;
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    Eigen::Index cols = 0;
    const Eigen::Index rows = nodes_[parts[0].id].value.rows();
    for (Var p : parts) cols += nodes_[p.id].value.cols();
    Mat<S> v(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      const Mat<S>& pv = nodes_[p.id].value;
      v.middleCols(c, pv.cols()) = pv;
      c += pv.cols();
    }
    return push(std::move(v), needs_any(parts), [parts](Tape& t, int id) {
      const Mat<S>& g = t.nodes_[id].grad;
      Eigen::Index c = 0;
      for (Var p : parts) {
        Eigen::Index n = t.nodes_[p.id].value.cols();
        if (t.needs(p)) t.acc(p) += g.middleCols(c, n);
        c += n;
      }
    });
  }

  Var mean_rows(Var a) {  // T x d -> 1 x d
    Mat<S> v = nodes_[a.id].value.colwise().mean();
    return push(std::move(v), needs(a), [a](Tape& t, int id) {
      if (!t.needs(a)) return;
      const Mat<S>& g = t.nodes_[id].grad;
      Mat<S>& gx = t.acc(a);
      gx.array().rowwise() += g.row(0).array() / S(gx.rows());
    });
  }

  Var sum_all(Var a) {
    Mat<S> v(1, 1);
    v(0, 0) = nodes_[a.id].value.sum();
    return push(std::move(v), needs(a), [a](Tape& t, int id) {
      if (t.needs(a)) t.acc(a).array() += t.nodes_[id].grad(0, 0);
    });
  }

  // Feature map layout: (h*w) rows (pixel index y*w + x), c columns.
  // Output: (out_h*out_w) x (c*k*k); column index = (ch*k + ky)*k + kx.
  Var im2col(Var a, ConvGeom geo) {
    const Mat<S>& x = nodes_[a.id].value;
    assert(x.rows() == Eigen::Index(geo.h) * geo.w && x.cols() == geo.c);
    const int oh = geo.out_h(), ow = geo.out_w();
    Mat<S> v = Mat<S>::Zero(Eigen::Index(oh) * ow, Eigen::Index(geo.c) * geo.k * geo.k);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index row = Eigen::Index(oy) * ow + ox;
        for (int ky = 0; ky < geo.k; ++ky) {
          const int iy = oy * geo.stride - geo.pad + ky;
          if (iy < 0 || iy >= geo.h) continue;
          for (int kx = 0; kx < geo.k; ++kx) {
            const int ix = ox * geo.stride - geo.pad + kx;
            if (ix < 0 || ix >= geo.w) continue;
            for (int ch = 0; ch < geo.c; ++ch)
              v(row, (Eigen::Index(ch) * geo.k + ky) * geo.k + kx) =
                  x(Eigen::Index(iy) * geo.w + ix, ch);
          }
        }
      }
    return push(std::move(v), needs(a), [a, geo](Tape& t, int id) {
      if (!t.needs(a)) return;
      const Mat<S>& g = t.nodes_[id].grad;
      Mat<S>& gx = t.acc(a);
      const int oh = geo.out_h(), ow = geo.out_w();
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const Eigen::Index row = Eigen::Index(oy) * ow + ox;
          for (int ky = 0; ky < geo.k; ++ky) {
            const int iy = oy * geo.stride - geo.pad + ky;
            if (iy < 0 || iy >= geo.h) continue;
            for (int kx = 0; kx < geo.k; ++kx) {
              const int ix = ox * geo.stride - geo.pad + kx;
              if (ix < 0 || ix >= geo.w) continue;
              for (int ch = 0; ch < geo.c; ++ch)
                gx(Eigen::Index(iy) * geo.w + ix, ch) +=
                    g(row, (Eigen::Index(ch) * geo.k + ky) * geo.k + kx);
            }
          }
        }
    });
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool needs_grad = false;
    std::function<void(Tape&, int)> back;
  };

  static S gelu_fwd(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    S u = c * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
  }
  static S gelu_bwd(S x) {
    const S c = S(0.7978845608028654);
    S u = c * (x + S(0.044715) * x * x * x);
    S th = std::tanh(u);
    S du = c * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th * th) * du;
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  bool needs_any(const std::vector<Var>& vs) const {
    for (Var v : vs)
      if (needs(v)) return true;
    return false;
  }

  Mat<S>& acc(Var v) {
    ensure_grad(v.id);
    return nodes_[v.id].grad;
  }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
  }

  template <class F>
  Var push(Mat<S> v, bool needs_grad, F&& back) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    if constexpr (!std::is_same_v<std::decay_t<F>, std::nullptr_t>)
      n.back = std::forward<F>(back);
    nodes_.push_back(std::move(n));
    return Var{int(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace dpol
