#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "lambo/linalg.hpp"
#include "lambo/tensor.hpp"

namespace lambo::ad {

struct NotScalar : std::runtime_error {
  NotScalar() : std::runtime_error("backward: loss is not a scalar") {}
};
struct EmptySelection : std::runtime_error {
  explicit EmptySelection(const std::string& what) : std::runtime_error(what) {}
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Tensor& val() const;
};

// Single-use reverse-mode tape. Nodes record the saved state needed by their
// backward closure; backward() replays them in exact reverse order and
// accumulates gradients additively at fan-out.
class Tape {
 public:
  Var leaf(Tensor value) { return push_node(std::move(value), true, {}, nullptr); }
  Var constant(Tensor value) { return push_node(std::move(value), false, {}, nullptr); }

  Var push(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> back) {
    bool rg = false;
    for (int p : parents) rg = rg || nodes_[p].requires_grad;
    value.check_finite("primitive output");
    return push_node(std::move(value), rg, std::move(parents), rg ? std::move(back) : nullptr);
  }

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator; allocates zeros on first touch.
  Tensor& grad(int id) {
    auto& n = nodes_[id];
    if (!n.grad_alloc) {
      n.grad = Tensor::zeros(n.value.shape());
      n.grad_alloc = true;
    }
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[id].grad_alloc; }

  void backward(const Var& loss) {
    if (nodes_[loss.id].value.numel() != 1) throw NotScalar();
    grad(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[id];
      if (n.requires_grad && n.grad_alloc && n.back) n.back(*this, id);
    }
  }

  // Zero gradient for off-path tensors, by contract.
  Tensor grad_of(const Var& v) {
    if (!nodes_[v.id].grad_alloc) return Tensor::zeros(nodes_[v.id].value.shape());
    return nodes_[v.id].grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_alloc = false;
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;
  };

  Var push_node(Tensor value, bool rg, std::vector<int> parents,
                std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.parents = std::move(parents);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape->value(id); }

namespace detail {
inline void axpy(Tensor& dst, const Tensor& src, double a = 1.0) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += a * src[i];
}
}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
  if (!a.val().same_shape(b.val())) throw ShapeMismatch("add");
  Tensor out = a.val();
  detail::axpy(out, b.val());
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) detail::axpy(t.grad(ia), g);
    if (t.requires_grad(ib)) detail::axpy(t.grad(ib), g);
  });
}

inline Var mul(Var a, Var b) {
  if (!a.val().same_shape(b.val())) throw ShapeMismatch("mul");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var neg(Var a) {
  Tensor out = a.val();
  for (auto& x : out.values()) x = -x;
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    detail::axpy(t.grad(ia), t.grad(self), -1.0);
  });
}

inline Var sub(Var a, Var b) { return add(a, neg(b)); }

inline Var scale(Var a, double c) {
  Tensor out = a.val();
  for (auto& x : out.values()) x *= c;
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, c](Tape& t, int self) {
    detail::axpy(t.grad(ia), t.grad(self), c);
  });
}

inline Var add_scalar(Var a, double c) {
  Tensor out = a.val();
  for (auto& x : out.values()) x += c;
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    detail::axpy(t.grad(ia), t.grad(self));
  });
}

inline Var vexp(Var a) {
  Tensor out = a.val();
  for (auto& x : out.values()) x = std::exp(x);
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * y[i];
  });
}

inline Var vlog(Var a) {
  Tensor out = a.val();
  for (auto& x : out.values()) x = std::log(x);
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] / x[i];
  });
}

// sqrt with a tiny clamp so that gradients stay finite at exact zeros
// (pairwise distances put zeros on the diagonal).
inline Var vsqrt(Var a, double eps = 1e-30) {
  Tensor out = a.val();
  for (auto& x : out.values()) x = std::sqrt(std::max(x, eps));
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * 0.5 / y[i];
  });
}

// broadcast multiply by a scalar Var
inline Var smul(Var a, Var s) {
  if (s.val().numel() != 1) throw ShapeMismatch("smul: scalar expected");
  const double sv = s.val()[0];
  Tensor out = a.val();
  for (auto& x : out.values()) x *= sv;
  int ia = a.id, is = s.id;
  return a.tape->push(std::move(out), {ia, is}, [ia, is, sv](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) detail::axpy(t.grad(ia), g, sv);
    if (t.requires_grad(is)) {
      const Tensor& av = t.value(ia);
      double acc = 0.0;
      for (std::size_t i = 0; i < av.numel(); ++i) acc += g[i] * av[i];
      t.grad(is)[0] += acc;
    }
  });
}

inline Var mul_const(Var a, Tensor c) {
  if (!a.val().same_shape(c)) throw ShapeMismatch("mul_const");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, c = std::move(c)](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * c[i];
  });
}

inline Var add_const(Var a, Tensor c) {
  if (!a.val().same_shape(c)) throw ShapeMismatch("add_const");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c[i];
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    detail::axpy(t.grad(ia), t.grad(self));
  });
}

// ---- reductions / shape ----

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.val().values()) s += x;
  int ia = a.id;
  return a.tape->push(Tensor::scalar(s), {ia}, [ia](Tape& t, int self) {
    const double g = t.grad(self)[0];
    Tensor& ga = t.grad(ia);
    for (auto& x : ga.values()) x += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.val().numel())); }

inline Var reshape(Var a, std::vector<std::size_t> shape) {
  if (Tensor::numel_of(shape) != a.val().numel()) throw ShapeMismatch("reshape");
  Tensor out(shape, a.val().values());
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i];
  });
}

inline Var concat_lastdim(Var a, Var b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != bv.rank() || av.rank() < 1) throw ShapeMismatch("concat_lastdim");
  for (std::size_t i = 0; i + 1 < av.rank(); ++i)
    if (av.dim(i) != bv.dim(i)) throw ShapeMismatch("concat_lastdim");
  const std::size_t ca = av.dim(av.rank() - 1), cb = bv.dim(bv.rank() - 1);
  const std::size_t rows = av.numel() / ca;
  auto shape = av.shape();
  shape.back() = ca + cb;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ca; ++c) out[r * (ca + cb) + c] = av[r * ca + c];
    for (std::size_t c = 0; c < cb; ++c) out[r * (ca + cb) + ca + c] = bv[r * cb + c];
  }
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib, ca, cb, rows](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad(ia);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += g[r * (ca + cb) + ca + c];
    }
  });
}

inline Var take_diag(Var a) {
  const std::size_t n = a.val().dim(0);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = a.val().at2(i, i);
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, n](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i) ga.at2(i, i) += g[i];
  });
}

inline Var diag_embed(Var v) {
  const std::size_t n = v.val().dim(0);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out.at2(i, i) = v.val()[i];
  int iv = v.id;
  return v.tape->push(std::move(out), {iv}, [iv, n](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gv = t.grad(iv);
    for (std::size_t i = 0; i < n; ++i) gv[i] += g.at2(i, i);
  });
}

// ---- linear algebra ----

inline Var matmul(Var a, Var b) {
  Tensor out = linalg::matmul(a.val(), b.val());
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia))
      detail::axpy(t.grad(ia), linalg::matmul(g, linalg::transpose(t.value(ib))));
    if (t.requires_grad(ib))
      detail::axpy(t.grad(ib), linalg::matmul(linalg::transpose(t.value(ia)), g));
  });
}

inline Var transpose(Var a) {
  Tensor out = linalg::transpose(a.val());
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    detail::axpy(t.grad(ia), linalg::transpose(t.grad(self)));
  });
}

// Lower Cholesky factor; input must be symmetric positive definite.
inline Var cholesky(Var a) {
  Tensor l = linalg::cholesky(a.val());
  int ia = a.id;
  return a.tape->push(std::move(l), {ia}, [ia](Tape& t, int self) {
    const Tensor& l = t.value(self);
    const Tensor& dl = t.grad(self);
    const std::size_t n = l.dim(0);
    // P = Phi(L^T dL): lower triangle, halved diagonal
    Tensor p = linalg::matmul(linalg::transpose(l), dl);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (j > i) p.at2(i, j) = 0.0;
        else if (j == i) p.at2(i, j) *= 0.5;
      }
    // dA = 0.5 * (S + S^T), S = L^{-T} P L^{-1}
    Tensor x = linalg::solve_tri(l, p, true);                       // L^{-T} P
    Tensor s = linalg::transpose(linalg::solve_tri(l, linalg::transpose(x), true));
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        ga.at2(i, j) += 0.5 * (s.at2(i, j) + s.at2(j, i));
  });
}

// X = L^{-1} B, or L^{-T} B when trans.
inline Var solve_tri(Var l, Var b, bool trans) {
  Tensor x = linalg::solve_tri(l.val(), b.val(), trans);
  int il = l.id, ib = b.id;
  return l.tape->push(std::move(x), {il, ib}, [il, ib, trans](Tape& t, int self) {
    const Tensor& lv = t.value(il);
    const Tensor& xv = t.value(self);
    const Tensor& g = t.grad(self);
    const std::size_t n = lv.dim(0);
    const bool vec = (xv.rank() == 1);
    auto as_mat = [](const Tensor& v) {
      return v.rank() == 1 ? Tensor({v.dim(0), 1}, v.values()) : v;
    };
    Tensor xm = as_mat(xv), gm = as_mat(g);
    Tensor db = linalg::solve_tri(lv, gm, !trans);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad(ib);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += db[i];
    }
    if (t.requires_grad(il)) {
      Tensor dl = trans ? linalg::matmul(xm, linalg::transpose(db))
                        : linalg::matmul(db, linalg::transpose(xm));
      Tensor& gl = t.grad(il);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) gl.at2(i, j) -= dl.at2(i, j);
    }
    (void)vec;
  });
}

inline Var kron(Var a, Var b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  const std::size_t n = av.dim(0), m = av.dim(1), p = bv.dim(0), q = bv.dim(1);
  Tensor out({n * p, m * q});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double aij = av.at2(i, j);
      if (aij == 0.0) continue;
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < q; ++c)
          out.at2(i * p + r, j * q + c) = aij * bv.at2(r, c);
    }
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib, n, m, p, q](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    const bool ra = t.requires_grad(ia), rb = t.requires_grad(ib);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double acc_a = 0.0;
        for (std::size_t r = 0; r < p; ++r)
          for (std::size_t c = 0; c < q; ++c) {
            const double gv = g.at2(i * p + r, j * q + c);
            if (ra) acc_a += gv * bv.at2(r, c);
            if (rb) t.grad(ib).at2(r, c) += gv * av.at2(i, j);
          }
        if (ra) t.grad(ia).at2(i, j) += acc_a;
      }
  });
}

// Squared Euclidean distances between rows: out[i][j] = ||a_i - b_j||^2.
inline Var pairwise_sqdist(Var a, Var b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.dim(1) != bv.dim(1)) throw ShapeMismatch("pairwise_sqdist");
  const std::size_t n = av.dim(0), m = bv.dim(0), d = av.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = av.at2(i, c) - bv.at2(j, c);
        s += diff * diff;
      }
      out.at2(i, j) = s;
    }
  int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib, n, m, d](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double gv = 2.0 * g.at2(i, j);
        if (gv == 0.0) continue;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = av.at2(i, c) - bv.at2(j, c);
          if (t.requires_grad(ia)) t.grad(ia).at2(i, c) += gv * diff;
          if (t.requires_grad(ib)) t.grad(ib).at2(j, c) -= gv * diff;
        }
      }
  });
}

// ---- neural net primitives ----

// Vocabulary embedding lookup plus optional fixed positional encoding.
// ids: (n, t) token ids; rows at masked (padding) positions are zeroed.
inline Var embed(Var table, const std::vector<std::vector<std::size_t>>& ids, const Tensor& mask,
                 const Tensor* posenc = nullptr) {
  const Tensor& e = table.val();
  const std::size_t n = ids.size(), t_len = ids.empty() ? 0 : ids[0].size(), c = e.dim(1);
  Tensor out({n, t_len, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < t_len; ++p) {
      if (mask.at2(b, p) == 0.0) continue;
      const double* row = e.data() + ids[b][p] * c;
      double* o = &out.at3(b, p, 0);
      for (std::size_t j = 0; j < c; ++j) o[j] = row[j];
      if (posenc) {
        const double* pe = posenc->data() + p * c;
        for (std::size_t j = 0; j < c; ++j) o[j] += pe[j];
      }
    }
  int ie = table.id;
  return table.tape->push(std::move(out), {ie}, [ie, ids, mask, n, t_len, c](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& ge = t.grad(ie);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < t_len; ++p) {
        if (mask.at2(b, p) == 0.0) continue;
        double* row = ge.data() + ids[b][p] * c;
        const double* gv = &g.at3(b, p, 0);
        for (std::size_t j = 0; j < c; ++j) row[j] += gv[j];
      }
  });
}

// Masked same-padding 1D convolution over the time axis.
// x: (n, t, Cin), w: (Cout, Cin, K), bias: (Cout), mask: (n, t) in {0,1}.
// Masked positions are zeroed on input and output.
inline Var conv1d_masked(Var x, Var w, Var bias, const Tensor& mask) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  const Tensor& bv = bias.val();
  const std::size_t n = xv.dim(0), t_len = xv.dim(1), cin = xv.dim(2);
  const std::size_t cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin || bv.dim(0) != cout) throw ShapeMismatch("conv1d_masked");
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out({n, t_len, cout});
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> col(cin * k);
    for (std::size_t p = 0; p < t_len; ++p) {
      if (mask.at2(b, p) == 0.0) continue;
      // gather the masked input window
      for (std::size_t kk = 0; kk < k; ++kk) {
        const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(p) + static_cast<std::ptrdiff_t>(kk) - off;
        double* dst = col.data() + kk * cin;
        if (q < 0 || q >= static_cast<std::ptrdiff_t>(t_len) || mask.at2(b, q) == 0.0) {
          for (std::size_t ci = 0; ci < cin; ++ci) dst[ci] = 0.0;
        } else {
          const double* src = &xv.at3(b, static_cast<std::size_t>(q), 0);
          for (std::size_t ci = 0; ci < cin; ++ci) dst[ci] = src[ci];
        }
      }
      double* o = &out.at3(b, p, 0);
      for (std::size_t co = 0; co < cout; ++co) {
        double s = bv[co];
        const double* wr = wv.data() + co * cin * k;
        // w is (Cout, Cin, K); col is (K, Cin) — index accordingly
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double* cw = col.data() + kk * cin;
          for (std::size_t ci = 0; ci < cin; ++ci) s += wr[ci * k + kk] * cw[ci];
        }
        o[co] = s;
      }
    }
  }
  int ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->push(std::move(out), {ix, iw, ib},
                      [ix, iw, ib, mask, n, t_len, cin, cout, k, off](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& wv = t.value(iw);
    const bool rx = t.requires_grad(ix), rw = t.requires_grad(iw), rb = t.requires_grad(ib);
    if (rx) {
      Tensor& gx = t.grad(ix);
#pragma omp parallel for schedule(static)
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t q = 0; q < t_len; ++q) {
          if (mask.at2(b, q) == 0.0) continue;
          double* gxr = &gx.at3(b, q, 0);
          for (std::size_t kk = 0; kk < k; ++kk) {
            const std::ptrdiff_t p =
                static_cast<std::ptrdiff_t>(q) - static_cast<std::ptrdiff_t>(kk) + off;
            if (p < 0 || p >= static_cast<std::ptrdiff_t>(t_len) || mask.at2(b, p) == 0.0)
              continue;
            const double* gr = &g.at3(b, static_cast<std::size_t>(p), 0);
            for (std::size_t co = 0; co < cout; ++co) {
              const double gv = gr[co];
              if (gv == 0.0) continue;
              const double* wr = wv.data() + co * cin * k;
              for (std::size_t ci = 0; ci < cin; ++ci) gxr[ci] += gv * wr[ci * k + kk];
            }
          }
        }
      }
    }
    if (rw || rb) {
      Tensor& gw = t.grad(iw);
      Tensor& gb = t.grad(ib);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < t_len; ++p) {
          if (mask.at2(b, p) == 0.0) continue;
          const double* gr = &g.at3(b, p, 0);
          if (rb)
            for (std::size_t co = 0; co < cout; ++co) gb[co] += gr[co];
          if (!rw) continue;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const std::ptrdiff_t q =
                static_cast<std::ptrdiff_t>(p) + static_cast<std::ptrdiff_t>(kk) - off;
            if (q < 0 || q >= static_cast<std::ptrdiff_t>(t_len) || mask.at2(b, q) == 0.0)
              continue;
            const double* xr = &xv.at3(b, static_cast<std::size_t>(q), 0);
            for (std::size_t co = 0; co < cout; ++co) {
              const double gv = gr[co];
              if (gv == 0.0) continue;
              double* wr = gw.data() + co * cin * k;
              for (std::size_t ci = 0; ci < cin; ++ci) wr[ci * k + kk] += gv * xr[ci];
            }
          }
        }
    }
  });
}

// Per-position layer normalization over the channel axis with affine params.
// Masked positions stay zero and contribute nothing.
inline Var layer_norm(Var x, Var gain, Var bias, const Tensor& mask, double eps = 1e-5) {
  const Tensor& xv = x.val();
  const std::size_t n = xv.dim(0), t_len = xv.dim(1), c = xv.dim(2);
  Tensor out({n, t_len, c});
  Tensor mu({n, t_len}), rstd({n, t_len});
  const Tensor& gv = gain.val();
  const Tensor& bvv = bias.val();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < t_len; ++p) {
      if (mask.at2(b, p) == 0.0) continue;
      const double* xr = &xv.at3(b, p, 0);
      double m = 0.0;
      for (std::size_t j = 0; j < c; ++j) m += xr[j];
      m /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (xr[j] - m) * (xr[j] - m);
      var /= static_cast<double>(c);
      const double rs = 1.0 / std::sqrt(var + eps);
      mu.at2(b, p) = m;
      rstd.at2(b, p) = rs;
      double* o = &out.at3(b, p, 0);
      for (std::size_t j = 0; j < c; ++j) o[j] = gv[j] * (xr[j] - m) * rs + bvv[j];
    }
  int ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->push(std::move(out), {ix, ig, ib},
                      [ix, ig, ib, mask, mu, rstd, n, t_len, c](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& gv = t.value(ig);
    const bool rx = t.requires_grad(ix), rg = t.requires_grad(ig), rb = t.requires_grad(ib);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < t_len; ++p) {
        if (mask.at2(b, p) == 0.0) continue;
        const double* xr = &xv.at3(b, p, 0);
        const double* gr = &g.at3(b, p, 0);
        const double m = mu.at2(b, p), rs = rstd.at2(b, p);
        double sum_gy = 0.0, sum_gyx = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double xhat = (xr[j] - m) * rs;
          const double gy = gr[j] * gv[j];
          sum_gy += gy;
          sum_gyx += gy * xhat;
          if (rg) t.grad(ig)[j] += gr[j] * xhat;
          if (rb) t.grad(ib)[j] += gr[j];
        }
        if (rx) {
          Tensor& gx = t.grad(ix);
          double* gxr = &gx.at3(b, p, 0);
          const double invc = 1.0 / static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            const double xhat = (xr[j] - m) * rs;
            const double gy = gr[j] * gv[j];
            gxr[j] += rs * (gy - invc * sum_gy - invc * xhat * sum_gyx);
          }
        }
      }
  });
}

inline Var swish(Var a) {
  Tensor out = a.val();
  for (auto& x : out.values()) x = x / (1.0 + std::exp(-x));
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(ia);
    Tensor& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

// Affine map on the last axis. x: (..., Cin), w: (Cout, Cin), bias: (Cout).
inline Var linear(Var x, Var w, Var bias) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  const Tensor& bv = bias.val();
  const std::size_t cin = xv.dim(xv.rank() - 1);
  const std::size_t cout = wv.dim(0);
  if (wv.dim(1) != cin || bv.dim(0) != cout) throw ShapeMismatch("linear");
  const std::size_t rows = xv.numel() / cin;
  auto shape = xv.shape();
  shape.back() = cout;
  Tensor out(shape);
#pragma omp parallel for schedule(static) if (rows * cin * cout > 1u << 16)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cin;
    double* o = out.data() + r * cout;
    for (std::size_t co = 0; co < cout; ++co) {
      double s = bv[co];
      const double* wr = wv.data() + co * cin;
      for (std::size_t ci = 0; ci < cin; ++ci) s += wr[ci] * xr[ci];
      o[co] = s;
    }
  }
  int ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->push(std::move(out), {ix, iw, ib},
                      [ix, iw, ib, rows, cin, cout](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    const Tensor& wv = t.value(iw);
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad(ix);
#pragma omp parallel for schedule(static) if (rows * cin * cout > 1u << 16)
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * cout;
        double* gxr = gx.data() + r * cin;
        for (std::size_t co = 0; co < cout; ++co) {
          const double gvv = gr[co];
          if (gvv == 0.0) continue;
          const double* wr = wv.data() + co * cin;
          for (std::size_t ci = 0; ci < cin; ++ci) gxr[ci] += gvv * wr[ci];
        }
      }
    }
    if (t.requires_grad(iw) || t.requires_grad(ib)) {
      Tensor& gw = t.grad(iw);
      Tensor& gb = t.grad(ib);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * cout;
        const double* xr = xv.data() + r * cin;
        for (std::size_t co = 0; co < cout; ++co) {
          const double gvv = gr[co];
          if (gvv == 0.0) continue;
          gb[co] += gvv;
          double* wr = gw.data() + co * cin;
          for (std::size_t ci = 0; ci < cin; ++ci) wr[ci] += gvv * xr[ci];
        }
      }
    }
  });
}

// Mean over non-masked positions. x: (n, t, C) -> (n, C).
inline Var masked_mean_pool(Var x, const Tensor& mask) {
  const Tensor& xv = x.val();
  const std::size_t n = xv.dim(0), t_len = xv.dim(1), c = xv.dim(2);
  Tensor out({n, c});
  std::vector<double> counts(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < t_len; ++p) counts[b] += mask.at2(b, p);
    if (counts[b] == 0.0) throw EmptySelection("masked_mean_pool: empty index set");
    for (std::size_t p = 0; p < t_len; ++p) {
      if (mask.at2(b, p) == 0.0) continue;
      const double* xr = &xv.at3(b, p, 0);
      for (std::size_t j = 0; j < c; ++j) out.at2(b, j) += xr[j];
    }
    for (std::size_t j = 0; j < c; ++j) out.at2(b, j) /= counts[b];
  }
  int ix = x.id;
  return x.tape->push(std::move(out), {ix}, [ix, mask, counts, n, t_len, c](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(ix);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < t_len; ++p) {
        if (mask.at2(b, p) == 0.0) continue;
        double* gxr = &gx.at3(b, p, 0);
        for (std::size_t j = 0; j < c; ++j) gxr[j] += g.at2(b, j) / counts[b];
      }
  });
}

namespace detail {
inline void softmax_row(const double* z, double* p, std::size_t v) {
  double mx = z[0];
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < v; ++j) {
    p[j] = std::exp(z[j] - mx);
    s += p[j];
  }
  for (std::size_t j = 0; j < v; ++j) p[j] /= s;
}
}  // namespace detail

inline Var softmax_lastdim(Var a) {
  const Tensor& av = a.val();
  const std::size_t v = av.dim(av.rank() - 1);
  const std::size_t rows = av.numel() / v;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r)
    detail::softmax_row(av.data() + r * v, out.data() + r * v, v);
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, rows, v](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * v;
      const double* gr = g.data() + r * v;
      double s = 0.0;
      for (std::size_t j = 0; j < v; ++j) s += gr[j] * yr[j];
      double* gar = ga.data() + r * v;
      for (std::size_t j = 0; j < v; ++j) gar[j] += yr[j] * (gr[j] - s);
    }
  });
}

inline Var log_softmax_lastdim(Var a) {
  const Tensor& av = a.val();
  const std::size_t v = av.dim(av.rank() - 1);
  const std::size_t rows = av.numel() / v;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = av.data() + r * v;
    double mx = z[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    double* o = out.data() + r * v;
    for (std::size_t j = 0; j < v; ++j) o[j] = z[j] - lse;
  }
  int ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, rows, v](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * v;
      const double* gr = g.data() + r * v;
      double s = 0.0;
      for (std::size_t j = 0; j < v; ++j) s += gr[j];
      double* gar = ga.data() + r * v;
      for (std::size_t j = 0; j < v; ++j) gar[j] += gr[j] - std::exp(yr[j]) * s;
    }
  });
}

// Mean categorical cross-entropy at selected positions.
// logits: (n, t, v); targets: (n, t) token ids; sel: (n, t) in {0,1}.
inline Var cross_entropy_masked(Var logits, const std::vector<std::vector<std::size_t>>& targets,
                                const Tensor& sel) {
  const Tensor& lv = logits.val();
  const std::size_t n = lv.dim(0), t_len = lv.dim(1), v = lv.dim(2);
  double cnt = 0.0, loss = 0.0;
  std::vector<double> p(v);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < t_len; ++q) {
      if (sel.at2(b, q) == 0.0) continue;
      cnt += 1.0;
      const double* z = &lv.at3(b, q, 0);
      double mx = z[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
      double s = 0.0;
      for (std::size_t j = 0; j < v; ++j) s += std::exp(z[j] - mx);
      loss += (mx + std::log(s)) - z[targets[b][q]];
    }
  if (cnt == 0.0) throw EmptySelection("cross_entropy_masked: empty selection");
  loss /= cnt;
  int il = logits.id;
  return logits.tape->push(Tensor::scalar(loss), {il},
                           [il, targets, sel, n, t_len, v, cnt](Tape& t, int self) {
    const double g = t.grad(self)[0] / cnt;
    const Tensor& lv = t.value(il);
    Tensor& gl = t.grad(il);
    std::vector<double> p(v);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t q = 0; q < t_len; ++q) {
        if (sel.at2(b, q) == 0.0) continue;
        detail::softmax_row(&lv.at3(b, q, 0), p.data(), v);
        double* gr = &gl.at3(b, q, 0);
        for (std::size_t j = 0; j < v; ++j) gr[j] += g * p[j];
        gr[targets[b][q]] -= g;
      }
  });
}

// Mean Shannon entropy (nats) of the per-position categorical distributions
// at selected positions.
inline Var entropy_masked(Var logits, const Tensor& sel) {
  const Tensor& lv = logits.val();
  const std::size_t n = lv.dim(0), t_len = lv.dim(1), v = lv.dim(2);
  double cnt = 0.0, total = 0.0;
  std::vector<double> p(v);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < t_len; ++q) {
      if (sel.at2(b, q) == 0.0) continue;
      cnt += 1.0;
      detail::softmax_row(&lv.at3(b, q, 0), p.data(), v);
      for (std::size_t j = 0; j < v; ++j)
        if (p[j] > 0.0) total -= p[j] * std::log(p[j]);
    }
  if (cnt == 0.0) throw EmptySelection("entropy_masked: empty selection");
  total /= cnt;
  int il = logits.id;
  return logits.tape->push(Tensor::scalar(total), {il},
                           [il, sel, n, t_len, v, cnt](Tape& t, int self) {
    const double g = t.grad(self)[0] / cnt;
    const Tensor& lv = t.value(il);
    Tensor& gl = t.grad(il);
    std::vector<double> p(v);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t q = 0; q < t_len; ++q) {
        if (sel.at2(b, q) == 0.0) continue;
        detail::softmax_row(&lv.at3(b, q, 0), p.data(), v);
        double h = 0.0;
        for (std::size_t j = 0; j < v; ++j)
          if (p[j] > 0.0) h -= p[j] * std::log(p[j]);
        double* gr = &gl.at3(b, q, 0);
        for (std::size_t j = 0; j < v; ++j)
          if (p[j] > 0.0) gr[j] += g * (-p[j] * (std::log(p[j]) + h));
      }
  });
}

}  // namespace lambo::ad
