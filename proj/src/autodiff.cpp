#include "refseg/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "refseg/error.hpp"

namespace refseg::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_mat(const Tensor& t, int rows, int cols) { return {t.data.data(), rows, cols}; }
MapMat as_mat(Tensor& t, int rows, int cols) { return {t.data.data(), rows, cols}; }

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(what);
}

// Interpolation matrix (out×in) for 1-D bilinear resampling.
RowMat interp_matrix(int out, int in) {
  RowMat m = RowMat::Zero(out, in);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::max(src, 0.0);
    const int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    const double w = src - i0;
    m(o, i0) += 1.0 - w;
    m(o, i1) += w;
  }
  return m;
}

}  // namespace

Tensor::Tensor(std::vector<int> s, double fill)
    : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(std::vector<int> s, const std::vector<double>& values)
    : shape(std::move(s)), data(values.begin(), values.end()) {
  require(data.size() == shape_numel(shape), "tensor data does not match shape " + shape_str(shape));
}

int Tensor::inner() const {
  int n = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) n *= shape[i];
  return n;
}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor value, Tensor* grad_sink) {
  nodes_.push_back(Node{std::move(value), {}, grad_sink != nullptr, nullptr, grad_sink});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    require(p.tape() == this, "operand recorded on a different tape");
    needs = needs || p.requires_grad();
  }
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : nullptr, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor* Tape::grad_buffer(const Var& v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.requires_grad) return nullptr;
  if (n.grad.data.empty() && !n.value.data.empty()) n.grad = Tensor(n.value.shape, 0.0);
  return &n.grad;
}

void Tape::backward(const Var& root) {
  require(root.value().numel() == 1, "backward() needs a scalar root");
  if (!root.requires_grad()) return;
  grad_buffer(root)->data[0] = 1.0;
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.data.empty()) continue;
    if (n.backward) n.backward(n.grad, *this);
    if (n.sink) {
      require(n.sink->data.size() == n.grad.data.size(), "gradient sink shape mismatch");
      for (std::size_t k = 0; k < n.grad.data.size(); ++k) n.sink->data[k] += n.grad.data[k];
    }
  }
}

// --- operations -----------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 3 && wv.rank() == 4, "conv2d expects C×H×W input and 4-D weights");
  const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int cout = wv.dim(0), k = wv.dim(2);
  require(wv.dim(1) == cin, "conv2d channel mismatch: input " + shape_str(xv.shape) +
                                " weights " + shape_str(wv.shape));
  require(b.value().numel() == static_cast<std::size_t>(cout), "conv2d bias size mismatch");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  const int ncol = oh * ow;
  const int krows = cin * k * k;

  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  auto cols = std::make_shared<Tensor>();
  if (!pointwise) {
    *cols = Tensor({krows, ncol}, 0.0);
    for (int c = 0; c < cin; ++c) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double* row = cols->data.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * ncol;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const double* src = xv.data.data() + (static_cast<std::size_t>(c) * h + iy) * wd;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < wd) row[oy * ow + ox] = src[ix];
            }
          }
        }
      }
    }
  }
  const Tensor& colv = pointwise ? xv : *cols;

  Tensor out({cout, oh, ow});
  auto om = as_mat(out, cout, ncol);
  om.noalias() = as_mat(wv, cout, krows) * as_mat(colv, krows, ncol);
  const auto& bv = b.value().data;
  for (int o = 0; o < cout; ++o) om.row(o).array() += bv[o];

  Tape& tape = *x.tape();
  return tape.record(std::move(out), {x, w, b},
                     [x, w, b, cols, pointwise, cin, h, wd, cout, k, stride, pad, oh, ow, ncol,
                      krows](const Tensor& g, Tape& t) {
                       const auto gm = as_mat(g, cout, ncol);
                       const Tensor& colv = pointwise ? x.value() : *cols;
                       if (Tensor* gw = t.grad_buffer(w)) {
                         as_mat(*gw, cout, krows).noalias() +=
                             gm * as_mat(colv, krows, ncol).transpose();
                       }
                       if (Tensor* gb = t.grad_buffer(b)) {
                         for (int o = 0; o < cout; ++o) gb->data[o] += gm.row(o).sum();
                       }
                       Tensor* gx = t.grad_buffer(x);
                       if (!gx) return;
                       if (pointwise) {
                         as_mat(*gx, cin, ncol).noalias() +=
                             as_mat(w.value(), cout, krows).transpose() * gm;
                         return;
                       }
                       RowMat gcols = as_mat(w.value(), cout, krows).transpose() * gm;
                       for (int c = 0; c < cin; ++c) {
                         for (int ky = 0; ky < k; ++ky) {
                           for (int kx = 0; kx < k; ++kx) {
                             const double* row = gcols.data() +
                                 static_cast<std::size_t>((c * k + ky) * k + kx) * ncol;
                             for (int oy = 0; oy < oh; ++oy) {
                               const int iy = oy * stride + ky - pad;
                               if (iy < 0 || iy >= h) continue;
                               double* dst = gx->data.data() + (static_cast<std::size_t>(c) * h + iy) * wd;
                               for (int ox = 0; ox < ow; ++ox) {
                                 const int ix = ox * stride + kx - pad;
                                 if (ix >= 0 && ix < wd) dst[ix] += row[oy * ow + ox];
                               }
                             }
                           }
                         }
                       }
                     });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  Tape* tape = x.tape();
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const bool on = out.data[i] > 0.0;
    if (!on) out.data[i] = 0.0;
    word = (word << 1) | (on ? 1u : 0u);
    if (i % 64 == 63 || i + 1 == out.data.size()) {
      tape->mix_pattern(word);
      word = 0;
    }
  }
  return tape->record(std::move(out), {x}, [x](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    const auto& xv = x.value().data;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      if (xv[i] > 0.0) gx->data[i] += g.data[i];
    }
  });
}

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "add shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Tensor out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](const Tensor& g, Tape& t) {
    for (const Var* v : {&a, &b}) {
      if (Tensor* gv = t.grad_buffer(*v)) {
        for (std::size_t i = 0; i < g.data.size(); ++i) gv->data[i] += g.data[i];
      }
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (double& v : out.data) v *= s;
  return x.tape()->record(std::move(out), {x}, [x, s](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.data.size(); ++i) gx->data[i] += s * g.data[i];
  });
}

Var add_channel_vector(const Var& x, const Var& v) {
  const Tensor& xv = x.value();
  const int c = xv.dim(0);
  const int inner = xv.inner();
  require(v.value().numel() == static_cast<std::size_t>(c), "channel vector size mismatch");
  Tensor out = xv;
  for (int ch = 0; ch < c; ++ch) {
    const double add = v.value().data[ch];
    for (int i = 0; i < inner; ++i) out.data[static_cast<std::size_t>(ch) * inner + i] += add;
  }
  return x.tape()->record(std::move(out), {x, v}, [x, v, c, inner](const Tensor& g, Tape& t) {
    if (Tensor* gx = t.grad_buffer(x)) {
      for (std::size_t i = 0; i < g.data.size(); ++i) gx->data[i] += g.data[i];
    }
    if (Tensor* gv = t.grad_buffer(v)) {
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int i = 0; i < inner; ++i) s += g.data[static_cast<std::size_t>(ch) * inner + i];
        gv->data[ch] += s;
      }
    }
  });
}

Var scale_channels(const Var& x, const std::vector<double>& factors) {
  const Tensor& xv = x.value();
  const int c = xv.dim(0);
  const int inner = xv.inner();
  require(factors.size() == static_cast<std::size_t>(c), "channel factor count mismatch");
  Tensor out = xv;
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < inner; ++i) out.data[static_cast<std::size_t>(ch) * inner + i] *= factors[ch];
  }
  return x.tape()->record(std::move(out), {x}, [x, factors, c, inner](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < inner; ++i) {
        const std::size_t k = static_cast<std::size_t>(ch) * inner + i;
        gx->data[k] += factors[ch] * g.data[k];
      }
    }
  });
}

Var concat(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat of nothing");
  std::vector<int> shape = parts.front().shape();
  int rows = 0;
  for (const Var& p : parts) {
    const auto& s = p.shape();
    require(s.size() == shape.size() &&
                std::equal(s.begin() + 1, s.end(), shape.begin() + 1),
            "concat trailing shape mismatch");
    rows += s[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.value().numel();
  }
  return parts.front().tape()->record(std::move(out), parts,
                                      [parts, offsets](const Tensor& g, Tape& t) {
                                        for (std::size_t i = 0; i < parts.size(); ++i) {
                                          Tensor* gp = t.grad_buffer(parts[i]);
                                          if (!gp) continue;
                                          for (std::size_t k = 0; k < gp->data.size(); ++k) {
                                            gp->data[k] += g.data[offsets[i] + k];
                                          }
                                        }
                                      });
}

Var slice(const Var& x, int begin, int end) {
  const Tensor& xv = x.value();
  require(0 <= begin && begin < end && end <= xv.dim(0), "slice out of range");
  std::vector<int> shape = xv.shape;
  shape[0] = end - begin;
  const std::size_t inner = static_cast<std::size_t>(xv.inner());
  Tensor out(shape);
  std::copy_n(xv.data.begin() + static_cast<std::ptrdiff_t>(begin * inner), out.numel(), out.data.begin());
  return x.tape()->record(std::move(out), {x}, [x, begin, inner](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    for (std::size_t k = 0; k < g.data.size(); ++k) gx->data[begin * inner + k] += g.data[k];
  });
}

Var reshape(const Var& x, std::vector<int> shape) {
  require(shape_numel(shape) == x.value().numel(), "reshape changes element count");
  Tensor out;
  out.shape = std::move(shape);
  out.data = x.value().data;
  return x.tape()->record(std::move(out), {x}, [x](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    for (std::size_t k = 0; k < g.data.size(); ++k) gx->data[k] += g.data[k];
  });
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const RowMat ry = interp_matrix(out_h, h);
  const RowMat rx = interp_matrix(out_w, w);
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    ConstMapMat src(x.data.data() + static_cast<std::size_t>(ch) * h * w, h, w);
    MapMat dst(out.data.data() + static_cast<std::size_t>(ch) * out_h * out_w, out_h, out_w);
    dst.noalias() = ry * src * rx.transpose();
  }
  return out;
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "resize expects C×H×W");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor out = resize_bilinear(xv, out_h, out_w);
  return x.tape()->record(std::move(out), {x}, [x, c, h, w, out_h, out_w](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    const RowMat ry = interp_matrix(out_h, h);
    const RowMat rx = interp_matrix(out_w, w);
    for (int ch = 0; ch < c; ++ch) {
      ConstMapMat go(g.data.data() + static_cast<std::size_t>(ch) * out_h * out_w, out_h, out_w);
      MapMat gi(gx->data.data() + static_cast<std::size_t>(ch) * h * w, h, w);
      gi.noalias() += ry.transpose() * go * rx;
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
          "matmul shape mismatch " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  as_mat(out, m, n).noalias() = as_mat(av, m, k) * as_mat(bv, k, n);
  return a.tape()->record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor& g, Tape& t) {
    const auto gm = as_mat(g, m, n);
    if (Tensor* ga = t.grad_buffer(a)) {
      as_mat(*ga, m, k).noalias() += gm * as_mat(b.value(), k, n).transpose();
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      as_mat(*gb, k, n).noalias() += as_mat(a.value(), m, k).transpose() * gm;
    }
  });
}

Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, "transpose expects a matrix");
  const int m = xv.dim(0), n = xv.dim(1);
  Tensor out({n, m});
  as_mat(out, n, m) = as_mat(xv, m, n).transpose();
  return x.tape()->record(std::move(out), {x}, [x, m, n](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    as_mat(*gx, m, n) += as_mat(g, n, m).transpose();
  });
}

Var softmax_rows(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, "softmax_rows expects a matrix");
  const int m = xv.dim(0), n = xv.dim(1);
  Tensor out({m, n});
  for (int r = 0; r < m; ++r) {
    const double* src = xv.data.data() + static_cast<std::size_t>(r) * n;
    double* dst = out.data.data() + static_cast<std::size_t>(r) * n;
    const double mx = *std::max_element(src, src + n);
    double total = 0.0;
    for (int c = 0; c < n; ++c) {
      dst[c] = std::exp(src[c] - mx);
      total += dst[c];
    }
    for (int c = 0; c < n; ++c) dst[c] /= total;
  }
  auto probs = std::make_shared<Tensor>(out);
  return x.tape()->record(std::move(out), {x}, [x, probs, m, n](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    for (int r = 0; r < m; ++r) {
      const double* p = probs->data.data() + static_cast<std::size_t>(r) * n;
      const double* gr = g.data.data() + static_cast<std::size_t>(r) * n;
      double dot = 0.0;
      for (int c = 0; c < n; ++c) dot += p[c] * gr[c];
      double* dst = gx->data.data() + static_cast<std::size_t>(r) * n;
      for (int c = 0; c < n; ++c) dst[c] += p[c] * (gr[c] - dot);
    }
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& xv = x.value();
  const int c = xv.dim(0);
  const int inner = xv.inner();
  Tensor out({c, 1});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int i = 0; i < inner; ++i) s += xv.data[static_cast<std::size_t>(ch) * inner + i];
    out.data[ch] = s / inner;
  }
  return x.tape()->record(std::move(out), {x}, [x, c, inner](const Tensor& g, Tape& t) {
    Tensor* gx = t.grad_buffer(x);
    for (int ch = 0; ch < c; ++ch) {
      const double gi = g.data[ch] / inner;
      for (int i = 0; i < inner; ++i) gx->data[static_cast<std::size_t>(ch) * inner + i] += gi;
    }
  });
}

Tensor avg_pool(const Tensor& x, int k) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = h / k, ow = w / k;
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) {
            s += x.data[(static_cast<std::size_t>(ch) * h + oy * k + dy) * w + ox * k + dx];
          }
        }
        out.data[(static_cast<std::size_t>(ch) * oh + oy) * ow + ox] = s / (k * k);
      }
    }
  }
  return out;
}

}  // namespace refseg::ad
