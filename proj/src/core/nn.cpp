#include "cxrinf/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

#include <Eigen/Dense>

namespace cxrinf::nn {
namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

int out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

void im2col(const double* x, int c, int h, int w, int k, int stride, int pad,
            int oh, int ow, double* col) {
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci) {
    const double* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* dst = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix < 0 || ix >= w) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, int c, int h, int w, int k, int stride, int pad,
            int oh, int ow, double* x) {
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci) {
    double* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row =
            col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * ow;
          double* dst = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

Graph& graph_of(Var v) {
  if (v == nullptr || v->graph == nullptr) {
    throw std::invalid_argument("op applied to a null variable");
  }
  return *v->graph;
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, int stride, int pad) {
  const Shape xs = x->value.shape();
  const Shape ws = weight->value.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw std::invalid_argument("conv2d: weight " + ws.str() +
                                " incompatible with input " + xs.str());
  }
  const int k = ws.h;
  const int cout = ws.n;
  const int oh = out_extent(xs.h, k, stride, pad);
  const int ow = out_extent(xs.w, k, stride, pad);
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");
  const int kk = xs.c * k * k;
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor out({xs.n, cout, oh, ow});
  ConstMapMat wm(weight->value.data(), cout, kk);
  RowMat col;
  if (!direct) col.resize(kk, static_cast<Eigen::Index>(p));
  for (int n = 0; n < xs.n; ++n) {
    const double* xn = x->value.data() + static_cast<std::size_t>(n) * xs.c * xs.plane();
    MapMat on(out.data() + static_cast<std::size_t>(n) * cout * p, cout, static_cast<Eigen::Index>(p));
    if (direct) {
      on.noalias() = wm * ConstMapMat(xn, kk, static_cast<Eigen::Index>(p));
    } else {
      im2col(xn, xs.c, xs.h, xs.w, k, stride, pad, oh, ow, col.data());
      on.noalias() = wm * col;
    }
    if (bias != nullptr) {
      for (int co = 0; co < cout; ++co) on.row(co).array() += bias->value.data()[co];
    }
  }

  return graph_of(x).record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, stride, pad, k, cout, oh, ow, kk, p, direct](Node& self) {
        const Shape xs = x->value.shape();
        ConstMapMat wm(weight->value.data(), cout, kk);
        RowMat col;
        RowMat dcol;
        if (!direct) col.resize(kk, static_cast<Eigen::Index>(p));
        for (int n = 0; n < xs.n; ++n) {
          const double* xn = x->value.data() + static_cast<std::size_t>(n) * xs.c * xs.plane();
          ConstMapMat gn(self.grad.data() + static_cast<std::size_t>(n) * cout * p, cout,
                         static_cast<Eigen::Index>(p));
          if (!direct && weight->requires_grad) {
            im2col(xn, xs.c, xs.h, xs.w, k, stride, pad, oh, ow, col.data());
          }
          if (weight->requires_grad) {
            MapMat gw(weight->grad_buffer().data(), cout, kk);
            if (direct) {
              gw.noalias() += gn * ConstMapMat(xn, kk, static_cast<Eigen::Index>(p)).transpose();
            } else {
              gw.noalias() += gn * col.transpose();
            }
          }
          if (bias != nullptr && bias->requires_grad) {
            double* gb = bias->grad_buffer().data();
            for (int co = 0; co < cout; ++co) gb[co] += gn.row(co).sum();
          }
          if (x->requires_grad) {
            double* gx = x->grad_buffer().data() + static_cast<std::size_t>(n) * xs.c * xs.plane();
            if (direct) {
              MapMat(gx, kk, static_cast<Eigen::Index>(p)).noalias() += wm.transpose() * gn;
            } else {
              dcol.noalias() = wm.transpose() * gn;
              col2im(dcol.data(), xs.c, xs.h, xs.w, k, stride, pad, oh, ow, gx);
            }
          }
        }
      });
}

Var relu(Var x) {
  Tensor out = x->value;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return graph_of(x).record(std::move(out), {x}, [x](Node& self) {
    if (!x->requires_grad) return;
    auto gx = x->grad_buffer().values();
    auto g = self.grad.values();
    auto y = self.value.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (y[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var sigmoid(Var x) {
  Tensor out = x->value;
  for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return graph_of(x).record(std::move(out), {x}, [x](Node& self) {
    if (!x->requires_grad) return;
    auto gx = x->grad_buffer().values();
    auto g = self.grad.values();
    auto y = self.value.values();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var add(Var a, Var b) {
  if (!(a->value.shape() == b->value.shape())) {
    throw std::invalid_argument("add: shape mismatch " + a->value.shape().str() +
                                " vs " + b->value.shape().str());
  }
  Tensor out = a->value;
  out.add_inplace(b->value);
  return graph_of(a).record(std::move(out), {a, b}, [a, b](Node& self) {
    if (a->requires_grad) a->grad_buffer().add_inplace(self.grad);
    if (b->requires_grad) b->grad_buffer().add_inplace(self.grad);
  });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape s0 = parts.front()->value.shape();
  int channels = 0;
  for (Var v : parts) {
    const Shape s = v->value.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw std::invalid_argument("concat: spatial mismatch " + s.str() +
                                  " vs " + s0.str());
    }
    channels += s.c;
  }
  Tensor out({s0.n, channels, s0.h, s0.w});
  const std::size_t plane = s0.plane();
  for (int n = 0; n < s0.n; ++n) {
    double* dst = out.data() + static_cast<std::size_t>(n) * channels * plane;
    for (Var v : parts) {
      const std::size_t len = static_cast<std::size_t>(v->value.shape().c) * plane;
      const double* src = v->value.data() + static_cast<std::size_t>(n) * len;
      dst = std::copy(src, src + len, dst);
    }
  }
  return graph_of(parts.front())
      .record(std::move(out), parts, [parts, channels, plane](Node& self) {
        const int batch = self.value.shape().n;
        for (int n = 0; n < batch; ++n) {
          const double* src =
              self.grad.data() + static_cast<std::size_t>(n) * channels * plane;
          for (Var v : parts) {
            const std::size_t len = static_cast<std::size_t>(v->value.shape().c) * plane;
            if (v->requires_grad) {
              double* dst = v->grad_buffer().data() + static_cast<std::size_t>(n) * len;
              for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
            }
            src += len;
          }
        }
      });
}

Var max_pool(Var x, int kernel, int stride, int pad) {
  const Shape xs = x->value.shape();
  const int oh = out_extent(xs.h, kernel, stride, pad);
  const int ow = out_extent(xs.w, kernel, stride, pad);
  Tensor out({xs.n, xs.c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) * xs.plane();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = base;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= xs.w) continue;
              const std::size_t i = base + static_cast<std::size_t>(iy) * xs.w + ix;
              if (x->value.data()[i] > best) {
                best = x->value.data()[i];
                best_i = i;
              }
            }
          }
          out.data()[o] = best;
          (*argmax)[o] = best_i;
        }
      }
    }
  }
  return graph_of(x).record(std::move(out), {x}, [x, argmax](Node& self) {
    if (!x->requires_grad) return;
    double* gx = x->grad_buffer().data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += g[i];
  });
}

Var avg_pool(Var x, int kernel, int stride, int pad) {
  const Shape xs = x->value.shape();
  const int oh = out_extent(xs.h, kernel, stride, pad);
  const int ow = out_extent(xs.w, kernel, stride, pad);
  Tensor out({xs.n, xs.c, oh, ow});
  auto visit = [=](int oy, int ox, auto&& fn) {
    int count = 0;
    for (int ky = 0; ky < kernel; ++ky) {
      const int iy = oy * stride - pad + ky;
      if (iy < 0 || iy >= xs.h) continue;
      for (int kx = 0; kx < kernel; ++kx) {
        const int ix = ox * stride - pad + kx;
        if (ix < 0 || ix >= xs.w) continue;
        ++count;
      }
    }
    for (int ky = 0; ky < kernel; ++ky) {
      const int iy = oy * stride - pad + ky;
      if (iy < 0 || iy >= xs.h) continue;
      for (int kx = 0; kx < kernel; ++kx) {
        const int ix = ox * stride - pad + kx;
        if (ix < 0 || ix >= xs.w) continue;
        fn(static_cast<std::size_t>(iy) * xs.w + ix, 1.0 / count);
      }
    }
  };
  std::size_t o = 0;
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const double* xp = x->value.data() + static_cast<std::size_t>(nc) * xs.plane();
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++o) {
        double acc = 0.0;
        visit(oy, ox, [&](std::size_t i, double wgt) { acc += wgt * xp[i]; });
        out.data()[o] = acc;
      }
    }
  }
  return graph_of(x).record(std::move(out), {x}, [x, visit, oh, ow](Node& self) {
    if (!x->requires_grad) return;
    const Shape xs = x->value.shape();
    std::size_t o = 0;
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
      double* gx = x->grad_buffer().data() + static_cast<std::size_t>(nc) * xs.plane();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          const double g = self.grad.data()[o];
          visit(oy, ox, [&](std::size_t i, double wgt) { gx[i] += wgt * g; });
        }
      }
    }
  });
}

Var upsample_nearest(Var x, int factor) {
  const Shape xs = x->value.shape();
  const int oh = xs.h * factor;
  const int ow = xs.w * factor;
  Tensor out({xs.n, xs.c, oh, ow});
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const double* src = x->value.data() + static_cast<std::size_t>(nc) * xs.plane();
    double* dst = out.data() + static_cast<std::size_t>(nc) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        dst[static_cast<std::size_t>(y) * ow + xx] =
            src[static_cast<std::size_t>(y / factor) * xs.w + xx / factor];
      }
    }
  }
  return graph_of(x).record(std::move(out), {x}, [x, factor, oh, ow](Node& self) {
    if (!x->requires_grad) return;
    const Shape xs = x->value.shape();
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
      double* gx = x->grad_buffer().data() + static_cast<std::size_t>(nc) * xs.plane();
      const double* g = self.grad.data() + static_cast<std::size_t>(nc) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
          gx[static_cast<std::size_t>(y / factor) * xs.w + xx / factor] +=
              g[static_cast<std::size_t>(y) * ow + xx];
        }
      }
    }
  });
}

Var global_avg_pool(Var x) {
  const Shape xs = x->value.shape();
  Tensor out({xs.n, xs.c, 1, 1});
  const std::size_t plane = xs.plane();
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const double* src = x->value.data() + static_cast<std::size_t>(nc) * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += src[i];
    out.data()[nc] = acc / static_cast<double>(plane);
  }
  return graph_of(x).record(std::move(out), {x}, [x, plane](Node& self) {
    if (!x->requires_grad) return;
    const Shape xs = x->value.shape();
    for (int nc = 0; nc < xs.n * xs.c; ++nc) {
      double* gx = x->grad_buffer().data() + static_cast<std::size_t>(nc) * plane;
      const double g = self.grad.data()[nc] / static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) gx[i] += g;
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  const Shape xs = x->value.shape();
  const Shape ws = weight->value.shape();
  const int in = xs.c * xs.h * xs.w;
  if (ws.c * ws.h * ws.w != in) {
    throw std::invalid_argument("linear: weight " + ws.str() +
                                " incompatible with input " + xs.str());
  }
  const int out_features = ws.n;
  Tensor out({xs.n, out_features, 1, 1});
  ConstMapMat wm(weight->value.data(), out_features, in);
  ConstMapMat xm(x->value.data(), xs.n, in);
  MapMat om(out.data(), xs.n, out_features);
  om.noalias() = xm * wm.transpose();
  if (bias != nullptr) {
    for (int n = 0; n < xs.n; ++n) {
      for (int o = 0; o < out_features; ++o) om(n, o) += bias->value.data()[o];
    }
  }
  return graph_of(x).record(
      std::move(out), {x, weight, bias}, [x, weight, bias, in, out_features](Node& self) {
        const int batch = x->value.shape().n;
        ConstMapMat g(self.grad.data(), batch, out_features);
        if (weight->requires_grad) {
          MapMat(weight->grad_buffer().data(), out_features, in).noalias() +=
              g.transpose() * ConstMapMat(x->value.data(), batch, in);
        }
        if (bias != nullptr && bias->requires_grad) {
          double* gb = bias->grad_buffer().data();
          for (int n = 0; n < batch; ++n) {
            for (int o = 0; o < out_features; ++o) gb[o] += g(n, o);
          }
        }
        if (x->requires_grad) {
          MapMat(x->grad_buffer().data(), batch, in).noalias() +=
              g * ConstMapMat(weight->value.data(), out_features, in);
        }
      });
}

Tensor softmax(const Tensor& logits) {
  const Shape s = logits.shape();
  Tensor out(s);
  const int width = s.c * s.h * s.w;
  for (int n = 0; n < s.n; ++n) {
    const double* z = logits.data() + static_cast<std::size_t>(n) * width;
    double* y = out.data() + static_cast<std::size_t>(n) * width;
    const double mx = *std::max_element(z, z + width);
    double total = 0.0;
    for (int i = 0; i < width; ++i) {
      y[i] = std::exp(z[i] - mx);
      total += y[i];
    }
    for (int i = 0; i < width; ++i) y[i] /= total;
  }
  return out;
}

}  // namespace cxrinf::nn
