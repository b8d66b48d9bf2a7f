#include "kgadapt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "kgadapt/kernels.hpp"

namespace kgadapt {

Var Tape::leaf(Matrix value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (Var v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
  nodes_.push_back(Node{std::move(value), Matrix{}, needs, needs ? std::move(fn) : nullptr});
  return Var{nodes_.size() - 1};
}

const Matrix* Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad.empty() && n.value.size() != 0 ? nullptr : &n.grad;
}

Matrix* Tape::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  return &n.grad;
}

void Tape::accumulate(Var v, const Matrix& delta) {
  Matrix* g = grad_buffer(v);
  if (g == nullptr) return;
  require_same_shape(*g, delta, "gradient accumulate");
  for (std::size_t i = 0; i < delta.size(); ++i) (*g)[i] += delta[i];
}

void Tape::backward(Var out) {
  const Matrix& v = value(out);
  if (v.size() != 1) throw ShapeError("backward() without seed needs a 1x1 output");
  backward(out, Matrix(1, 1, 1.0));
}

void Tape::backward(Var out, const Matrix& seed) {
  require_same_shape(value(out), seed, "backward seed");
  accumulate(out, seed);
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

namespace ad {
namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

Matrix column_sums(const Matrix& m) {
  Matrix s(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) s[c] += m(r, c);
  }
  return s;
}

}  // namespace

Var affine(Tape& t, Var x, Var w, Var b) {
  const Matrix& xv = t.value(x);
  const Matrix& wv = t.value(w);
  const Matrix& bv = t.value(b);
  check(bv.rows() == 1 && bv.cols() == wv.rows(),
        "affine: bias " + bv.shape_string() + " for weight " + wv.shape_string());
  Matrix y = kernels::gemm_nt(xv, wv);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += bv[c];
  }
  const Var inputs[] = {x, w, b};
  return t.record(std::move(y), inputs, [x, w, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(x)) tp.accumulate(x, kernels::gemm_nn(g, tp.value(w)));
    if (tp.requires_grad(w)) tp.accumulate(w, kernels::gemm_tn(g, tp.value(x)));
    if (tp.requires_grad(b)) tp.accumulate(b, column_sums(g));
  });
}

Var matmul(Tape& t, Var a, Var b) {
  Matrix y = kernels::gemm_nn(t.value(a), t.value(b));
  const Var inputs[] = {a, b};
  return t.record(std::move(y), inputs, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, kernels::gemm_nt(g, tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, kernels::gemm_tn(tp.value(a), g));
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  Matrix y = kernels::gemm_nt(t.value(a), t.value(b));
  const Var inputs[] = {a, b};
  return t.record(std::move(y), inputs, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, kernels::gemm_nn(g, tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, kernels::gemm_tn(g, tp.value(a)));
  });
}

Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Matrix y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const Var inputs[] = {a, b};
  return t.record(std::move(y), inputs, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var scale(Tape& t, Var a, double s) {
  Matrix y = t.value(a);
  for (auto& v : y.values()) v *= s;
  const Var inputs[] = {a};
  return t.record(std::move(y), inputs, [a, s](Tape& tp, const Matrix& g) {
    Matrix d = g;
    for (auto& v : d.values()) v *= s;
    tp.accumulate(a, d);
  });
}

Var elu(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  Matrix y(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = xv[i] > 0.0 ? xv[i] : std::expm1(xv[i]);
  }
  const Var inputs[] = {x};
  return t.record(std::move(y), inputs, [x](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(x);
    Matrix d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] = g[i] * (xv[i] > 0.0 ? 1.0 : std::exp(xv[i]));
    }
    tp.accumulate(x, d);
  });
}

Var gelu(Tape& t, Var x) {
  static constexpr double kC = 0.044715;
  const double k = std::sqrt(2.0 / std::numbers::pi);
  const Matrix& xv = t.value(x);
  Matrix y(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = xv[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(k * (v + kC * v * v * v)));
  }
  const Var inputs[] = {x};
  return t.record(std::move(y), inputs, [x, k](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(x);
    Matrix d(g.rows(), g.cols());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(k * (v + kC * v * v * v));
      const double du = k * (1.0 + 3.0 * kC * v * v);
      d[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
    tp.accumulate(x, d);
  });
}

Var softmax_rows(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  Matrix y(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto in = xv.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      y(r, c) = std::exp(in[c] - mx);
      z += y(r, c);
    }
    for (std::size_t c = 0; c < in.size(); ++c) y(r, c) /= z;
  }
  const Var inputs[] = {x};
  Matrix ycopy = y;
  return t.record(std::move(y), inputs, [x, yv = std::move(ycopy)](Tape& tp, const Matrix& g) {
    Matrix d(g.rows(), g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * yv(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) d(r, c) = yv(r, c) * (g(r, c) - dot);
    }
    tp.accumulate(x, d);
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gamma);
  const Matrix& bv = t.value(beta);
  const std::size_t n = xv.cols();
  check(gv.rows() == 1 && gv.cols() == n && bv.same_shape(gv), "layer_norm: parameter shape");
  Matrix xhat(xv.rows(), n);
  Matrix inv_std(xv.rows(), 1);
  Matrix y(xv.rows(), n);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += xv(r, c);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mean) * is;
      y(r, c) = gv[c] * xhat(r, c) + bv[c];
    }
  }
  const Var inputs[] = {x, gamma, beta};
  return t.record(std::move(y), inputs,
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, const Matrix& g) {
                    const Matrix& gv = tp.value(gamma);
                    const std::size_t n = g.cols();
                    const double nd = static_cast<double>(n);
                    if (tp.requires_grad(x)) {
                      Matrix dx(g.rows(), n);
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        double s1 = 0.0;
                        double s2 = 0.0;
                        for (std::size_t c = 0; c < n; ++c) {
                          const double dxh = g(r, c) * gv[c];
                          s1 += dxh;
                          s2 += dxh * xhat(r, c);
                        }
                        for (std::size_t c = 0; c < n; ++c) {
                          const double dxh = g(r, c) * gv[c];
                          dx(r, c) = inv_std[r] / nd * (nd * dxh - s1 - xhat(r, c) * s2);
                        }
                      }
                      tp.accumulate(x, dx);
                    }
                    if (tp.requires_grad(gamma)) {
                      Matrix dg(1, n);
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        for (std::size_t c = 0; c < n; ++c) dg[c] += g(r, c) * xhat(r, c);
                      }
                      tp.accumulate(gamma, dg);
                    }
                    if (tp.requires_grad(beta)) tp.accumulate(beta, column_sums(g));
                  });
}

Var batch_norm_train(Tape& t, Var x, Var gamma, Var beta, double eps, BatchStats* stats) {
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gamma);
  const Matrix& bv = t.value(beta);
  const std::size_t rows = xv.rows();
  const std::size_t n = xv.cols();
  check(rows > 0, "batch_norm_train: empty batch");
  check(gv.rows() == 1 && gv.cols() == n && bv.same_shape(gv), "batch_norm: parameter shape");
  const double rd = static_cast<double>(rows);
  Matrix mean(1, n);
  Matrix var(1, n);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) mean[c] += xv(r, c);
  }
  for (std::size_t c = 0; c < n; ++c) mean[c] /= rd;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double d = xv(r, c) - mean[c];
      var[c] += d * d;
    }
  }
  for (std::size_t c = 0; c < n; ++c) var[c] /= rd;
  Matrix inv_std(1, n);
  for (std::size_t c = 0; c < n; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  Matrix xhat(rows, n);
  Matrix y(rows, n);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mean[c]) * inv_std[c];
      y(r, c) = gv[c] * xhat(r, c) + bv[c];
    }
  }
  if (stats != nullptr) *stats = BatchStats{mean, var};
  const Var inputs[] = {x, gamma, beta};
  return t.record(std::move(y), inputs,
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, const Matrix& g) {
                    const Matrix& gv = tp.value(gamma);
                    const std::size_t rows = g.rows();
                    const std::size_t n = g.cols();
                    const double rd = static_cast<double>(rows);
                    if (tp.requires_grad(x)) {
                      Matrix s1(1, n);
                      Matrix s2(1, n);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < n; ++c) {
                          const double dxh = g(r, c) * gv[c];
                          s1[c] += dxh;
                          s2[c] += dxh * xhat(r, c);
                        }
                      }
                      Matrix dx(rows, n);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < n; ++c) {
                          const double dxh = g(r, c) * gv[c];
                          dx(r, c) = inv_std[c] / rd * (rd * dxh - s1[c] - xhat(r, c) * s2[c]);
                        }
                      }
                      tp.accumulate(x, dx);
                    }
                    if (tp.requires_grad(gamma)) {
                      Matrix dg(1, n);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < n; ++c) dg[c] += g(r, c) * xhat(r, c);
                      }
                      tp.accumulate(gamma, dg);
                    }
                    if (tp.requires_grad(beta)) tp.accumulate(beta, column_sums(g));
                  });
}

Var batch_norm_eval(Tape& t, Var x, Var gamma, Var beta, const Matrix& running_mean,
                    const Matrix& running_var, double eps) {
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gamma);
  const Matrix& bv = t.value(beta);
  const std::size_t n = xv.cols();
  check(gv.cols() == n && bv.cols() == n && running_mean.cols() == n && running_var.cols() == n,
        "batch_norm_eval: parameter shape");
  Matrix inv_std(1, n);
  for (std::size_t c = 0; c < n; ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
  Matrix xhat(xv.rows(), n);
  Matrix y(xv.rows(), n);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - running_mean[c]) * inv_std[c];
      y(r, c) = gv[c] * xhat(r, c) + bv[c];
    }
  }
  const Var inputs[] = {x, gamma, beta};
  return t.record(std::move(y), inputs,
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, const Matrix& g) {
                    const Matrix& gv = tp.value(gamma);
                    const std::size_t n = g.cols();
                    if (tp.requires_grad(x)) {
                      Matrix dx(g.rows(), n);
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        for (std::size_t c = 0; c < n; ++c) dx(r, c) = g(r, c) * gv[c] * inv_std[c];
                      }
                      tp.accumulate(x, dx);
                    }
                    if (tp.requires_grad(gamma)) {
                      Matrix dg(1, n);
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        for (std::size_t c = 0; c < n; ++c) dg[c] += g(r, c) * xhat(r, c);
                      }
                      tp.accumulate(gamma, dg);
                    }
                    if (tp.requires_grad(beta)) tp.accumulate(beta, column_sums(g));
                  });
}

Var gather_mean_rows(Tape& t, Var table, const std::vector<std::vector<std::size_t>>& groups) {
  const Matrix& tv = t.value(table);
  Matrix y(groups.size(), tv.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& ids = groups[g];
    if (ids.empty()) continue;
    for (std::size_t id : ids) {
      check(id < tv.rows(), "gather_mean_rows: token id " + std::to_string(id) +
                                " outside table of " + std::to_string(tv.rows()) + " rows");
      const auto src = tv.row(id);
      for (std::size_t c = 0; c < tv.cols(); ++c) y(g, c) += src[c];
    }
    const double k = static_cast<double>(ids.size());
    for (std::size_t c = 0; c < tv.cols(); ++c) y(g, c) /= k;
  }
  const Var inputs[] = {table};
  return t.record(std::move(y), inputs, [table, groups](Tape& tp, const Matrix& g) {
    Matrix* dt = tp.grad_buffer(table);
    if (dt == nullptr) return;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& ids = groups[gi];
      if (ids.empty()) continue;
      const double inv = 1.0 / static_cast<double>(ids.size());
      for (std::size_t id : ids) {
        auto dst = dt->row(id);
        for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += g(gi, c) * inv;
      }
    }
  });
}

Var set_row(Tape& t, Var x, std::size_t r, Var v) {
  const Matrix& xv = t.value(x);
  const Matrix& vv = t.value(v);
  check(r < xv.rows() && vv.rows() == 1 && vv.cols() == xv.cols(),
        "set_row: row " + std::to_string(r) + " of " + xv.shape_string() + " from " +
            vv.shape_string());
  Matrix y = xv;
  for (std::size_t c = 0; c < xv.cols(); ++c) y(r, c) = vv[c];
  const Var inputs[] = {x, v};
  return t.record(std::move(y), inputs, [x, v, r](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(x)) {
      Matrix dx = g;
      for (std::size_t c = 0; c < g.cols(); ++c) dx(r, c) = 0.0;
      tp.accumulate(x, dx);
    }
    if (tp.requires_grad(v)) tp.accumulate(v, Matrix::row_vector(g.row(r)));
  });
}

Var select_row(Tape& t, Var x, std::size_t r) {
  const Matrix& xv = t.value(x);
  check(r < xv.rows(), "select_row: row out of range");
  const Var inputs[] = {x};
  return t.record(Matrix::row_vector(xv.row(r)), inputs, [x, r](Tape& tp, const Matrix& g) {
    Matrix* dx = tp.grad_buffer(x);
    if (dx == nullptr) return;
    auto dst = dx->row(r);
    for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += g[c];
  });
}

Var slice_cols(Tape& t, Var x, std::size_t first, std::size_t last) {
  const Matrix& xv = t.value(x);
  check(first <= last && last <= xv.cols(), "slice_cols: bad range");
  Matrix y(xv.rows(), last - first);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = first; c < last; ++c) y(r, c - first) = xv(r, c);
  }
  const Var inputs[] = {x};
  return t.record(std::move(y), inputs, [x, first](Tape& tp, const Matrix& g) {
    Matrix* dx = tp.grad_buffer(x);
    if (dx == nullptr) return;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) (*dx)(r, c + first) += g(r, c);
    }
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  check(!parts.empty(), "concat_cols: no parts");
  const std::size_t rows = t.value(parts[0]).rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    check(t.value(p).rows() == rows, "concat_cols: row mismatch");
    cols += t.value(p).cols();
  }
  Matrix y(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& pv = t.value(p);
    offsets.push_back(off);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) y(r, off + c) = pv(r, c);
    }
    off += pv.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [ins, offsets](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (!tp.requires_grad(ins[i])) continue;
      const Matrix& pv = tp.value(ins[i]);
      Matrix d(pv.rows(), pv.cols());
      for (std::size_t r = 0; r < pv.rows(); ++r) {
        for (std::size_t c = 0; c < pv.cols(); ++c) d(r, c) = g(r, offsets[i] + c);
      }
      tp.accumulate(ins[i], d);
    }
  });
}

Var stack_rows(Tape& t, std::span<const Var> parts) {
  check(!parts.empty(), "stack_rows: no parts");
  const std::size_t cols = t.value(parts[0]).cols();
  std::size_t rows = 0;
  for (Var p : parts) {
    check(t.value(p).cols() == cols, "stack_rows: column mismatch");
    rows += t.value(p).rows();
  }
  Matrix y(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& pv = t.value(p);
    offsets.push_back(off);
    std::copy(pv.values().begin(), pv.values().end(), y.data() + off * cols);
    off += pv.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [ins, offsets](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (!tp.requires_grad(ins[i])) continue;
      const Matrix& pv = tp.value(ins[i]);
      Matrix d(pv.rows(), pv.cols());
      const double* src = g.data() + offsets[i] * g.cols();
      std::copy(src, src + d.size(), d.data());
      tp.accumulate(ins[i], d);
    }
  });
}

Var hadamard_messages(Tape& t, Var x, std::span<const std::size_t> src,
                      std::span<const std::size_t> dst) {
  const Matrix& xv = t.value(x);
  check(src.size() == dst.size(), "hadamard_messages: endpoint lists differ in length");
  Matrix m(src.size(), xv.cols());
  for (std::size_t e = 0; e < src.size(); ++e) {
    check(src[e] < xv.rows() && dst[e] < xv.rows(), "hadamard_messages: endpoint out of range");
    for (std::size_t c = 0; c < xv.cols(); ++c) m(e, c) = xv(src[e], c) * xv(dst[e], c);
  }
  const Var inputs[] = {x};
  std::vector<std::size_t> s(src.begin(), src.end());
  std::vector<std::size_t> d(dst.begin(), dst.end());
  return t.record(std::move(m), inputs, [x, s, d](Tape& tp, const Matrix& g) {
    Matrix* dx = tp.grad_buffer(x);
    if (dx == nullptr) return;
    const Matrix& xv = tp.value(x);
    for (std::size_t e = 0; e < s.size(); ++e) {
      for (std::size_t c = 0; c < g.cols(); ++c) {
        (*dx)(s[e], c) += g(e, c) * xv(d[e], c);
        (*dx)(d[e], c) += g(e, c) * xv(s[e], c);
      }
    }
  });
}

Var hierarchical_aggregate(Tape& t, Var x, Var messages, std::span<const std::size_t> dst,
                           const std::vector<bool>& receiving) {
  const Matrix& xv = t.value(x);
  const Matrix& mv = t.value(messages);
  check(mv.rows() == dst.size() && (mv.cols() == xv.cols() || dst.empty()),
        "hierarchical_aggregate: message shape");
  check(receiving.size() == xv.rows(), "hierarchical_aggregate: receiving mask size");
  std::vector<double> in_degree(xv.rows(), 0.0);
  for (std::size_t v : dst) {
    check(v < xv.rows(), "hierarchical_aggregate: destination out of range");
    check(receiving[v], "hierarchical_aggregate: message addressed to a non-receiving node");
    in_degree[v] += 1.0;
  }
  Matrix y = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (!receiving[r]) continue;
    check(in_degree[r] > 0.0, "hierarchical_aggregate: receiving node " + std::to_string(r) +
                                  " has no incoming message");
    for (std::size_t c = 0; c < xv.cols(); ++c) y(r, c) = 0.0;
  }
  // Sum first, then divide, so the result matches a direct mean.
  for (std::size_t e = 0; e < dst.size(); ++e) {
    for (std::size_t c = 0; c < xv.cols(); ++c) y(dst[e], c) += mv(e, c);
  }
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (!receiving[r]) continue;
    for (std::size_t c = 0; c < xv.cols(); ++c) y(r, c) /= in_degree[r];
  }
  const Var inputs[] = {x, messages};
  std::vector<std::size_t> d(dst.begin(), dst.end());
  return t.record(std::move(y), inputs,
                  [x, messages, d, receiving, in_degree](Tape& tp, const Matrix& g) {
                    if (tp.requires_grad(x)) {
                      Matrix dx = g;
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        if (!receiving[r]) continue;
                        for (std::size_t c = 0; c < g.cols(); ++c) dx(r, c) = 0.0;
                      }
                      tp.accumulate(x, dx);
                    }
                    if (tp.requires_grad(messages)) {
                      Matrix dm(d.size(), g.cols());
                      for (std::size_t e = 0; e < d.size(); ++e) {
                        for (std::size_t c = 0; c < g.cols(); ++c) {
                          dm(e, c) = g(d[e], c) / in_degree[d[e]];
                        }
                      }
                      tp.accumulate(messages, dm);
                    }
                  });
}

Var anomaly_loss(Tape& t, Var logits, std::span<const int> labels, double lambda_spa,
                 double lambda_smt, LossTerms* terms) {
  const Matrix& z = t.value(logits);
  const std::size_t batch = z.rows();
  const std::size_t classes = z.cols();
  check(batch == labels.size() && batch > 0, "anomaly_loss: labels do not match logits");
  Matrix probs(batch, classes);
  std::vector<double> p_anomaly(batch);
  double ce = 0.0;
  std::size_t normal_count = 0;
  double spa = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    check(labels[b] >= 0 && static_cast<std::size_t>(labels[b]) < classes,
          "anomaly_loss: label out of range");
    const auto row = z.row(b);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(row[c] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < classes; ++c) probs(b, c) = std::exp(row[c] - lse);
    ce += lse - row[static_cast<std::size_t>(labels[b])];
    p_anomaly[b] = 1.0 - probs(b, 0);
    if (labels[b] == 0) {
      ++normal_count;
      spa += p_anomaly[b];
    }
  }
  ce /= static_cast<double>(batch);
  if (normal_count > 0) spa /= static_cast<double>(normal_count);
  double smt = 0.0;
  if (batch > 1) {
    for (std::size_t b = 1; b < batch; ++b) {
      const double d = p_anomaly[b] - p_anomaly[b - 1];
      smt += d * d;
    }
    smt /= static_cast<double>(batch - 1);
  }
  const double total = ce + lambda_spa * spa + lambda_smt * smt;
  if (terms != nullptr) *terms = LossTerms{total, ce, spa, smt};

  std::vector<int> lab(labels.begin(), labels.end());
  const Var inputs[] = {logits};
  return t.record(
      Matrix(1, 1, total), inputs,
      [logits, lab, probs = std::move(probs), p_anomaly = std::move(p_anomaly), normal_count,
       lambda_spa, lambda_smt](Tape& tp, const Matrix& g) {
        const std::size_t batch = probs.rows();
        const std::size_t classes = probs.cols();
        const double bd = static_cast<double>(batch);
        Matrix dz(batch, classes);
        for (std::size_t b = 0; b < batch; ++b) {
          // dL/dp_A for this row from the sparsity and smoothness terms.
          double dp = 0.0;
          if (lab[b] == 0 && normal_count > 0) dp += lambda_spa / static_cast<double>(normal_count);
          if (batch > 1) {
            const double k = 2.0 * lambda_smt / static_cast<double>(batch - 1);
            if (b >= 1) dp += k * (p_anomaly[b] - p_anomaly[b - 1]);
            if (b + 1 < batch) dp -= k * (p_anomaly[b + 1] - p_anomaly[b]);
          }
          const double s0 = probs(b, 0);
          for (std::size_t c = 0; c < classes; ++c) {
            const double onehot = static_cast<std::size_t>(lab[b]) == c ? 1.0 : 0.0;
            const double dce = (probs(b, c) - onehot) / bd;
            const double dpa = -s0 * ((c == 0 ? 1.0 : 0.0) - probs(b, c));
            dz(b, c) = g[0] * (dce + dp * dpa);
          }
        }
        tp.accumulate(logits, dz);
      });
}

}  // namespace ad
}  // namespace kgadapt
