#include "mpae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace mpae::tensor {

std::string to_string(Act a) {
  switch (a) {
    case Act::SiLU:
      return "silu";
    case Act::ReLU:
      return "relu";
    case Act::Tanh:
      return "tanh";
  }
  throw ConfigError("activation: invalid kind");
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::L1:
      return "l1";
    case LossKind::MSE:
      return "mse";
  }
  throw ConfigError("loss: invalid kind");
}

std::string to_string(PadMode m) {
  switch (m) {
    case PadMode::Zero:
      return "zero";
    case PadMode::Circular:
      return "circular";
  }
  throw ConfigError("padding: invalid mode");
}

Act act_from_string(const std::string& s) {
  if (s == "silu") return Act::SiLU;
  if (s == "relu") return Act::ReLU;
  if (s == "tanh") return Act::Tanh;
  throw ConfigError("activation: unknown kind '" + s + "'");
}

LossKind loss_from_string(const std::string& s) {
  if (s == "l1") return LossKind::L1;
  if (s == "mse") return LossKind::MSE;
  throw ConfigError("loss: unknown kind '" + s + "'");
}

PadMode pad_mode_from_string(const std::string& s) {
  if (s == "zero") return PadMode::Zero;
  if (s == "circular") return PadMode::Circular;
  throw ConfigError("padding: unknown mode '" + s + "'");
}

namespace {

using detail::Node;

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimensionError("tensor: extents must be positive");
    n *= e;
  }
  return n;
}

template <class T>
std::shared_ptr<Node<T>> make_leaf(std::vector<int> shape, std::vector<T> values,
                                   bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  std::int64_t n = shape_numel(shape);
  if (static_cast<std::int64_t>(values.size()) != n)
    throw DimensionError("tensor: value count does not match shape");
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

template <class T>
void ensure_grad(Node<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
}

template <class T>
std::shared_ptr<Node<T>> make_op(std::vector<int> shape,
                                 std::vector<std::shared_ptr<Node<T>>> parents) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value.assign(static_cast<std::size_t>(shape_numel(node->shape)), T(0));
  node->parents = std::move(parents);
  for (const auto& p : node->parents) node->requires_grad |= p->requires_grad;
  return node;
}

inline int floor_div(int a, int b) {
  int q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
inline int ceil_div(int a, int b) { return -floor_div(-a, b); }
inline int wrap(int x, int n) {
  int m = x % n;
  return m < 0 ? m + n : m;
}

// Fixed-order double-accumulator reductions: fast enough without breaking
// run-to-run determinism.
template <class T>
double dot_rows(const T* a, const T* b, int n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(a[i]) * b[i];
    s1 += static_cast<double>(a[i + 1]) * b[i + 1];
    s2 += static_cast<double>(a[i + 2]) * b[i + 2];
    s3 += static_cast<double>(a[i + 3]) * b[i + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

template <class T>
double sum_row(const T* a, std::int64_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(a[i]);
    s1 += static_cast<double>(a[i + 1]);
    s2 += static_cast<double>(a[i + 2]);
    s3 += static_cast<double>(a[i + 3]);
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; i < n; ++i) s += static_cast<double>(a[i]);
  return s;
}

struct ConvDims {
  int n, ci, di, hi, wi;
  int co, k;
  int stride, padding;
  int d_out, h_out, w_out;
};

ConvDims conv_dims(const std::vector<int>& xs, const std::vector<int>& ws,
                   const std::vector<int>& bs, int stride, int padding) {
  if (xs.size() != 5) throw DimensionError("conv3d: input must be rank 5 (N,C,D,H,W)");
  if (ws.size() != 5) throw DimensionError("conv3d: kernel must be rank 5 (O,I,k,k,k)");
  if (bs.size() != 1) throw DimensionError("conv3d: bias must be rank 1");
  if (ws[2] != ws[3] || ws[3] != ws[4]) throw DimensionError("conv3d: kernel must be cubic");
  if (ws[2] % 2 == 0) throw DimensionError("conv3d: kernel extent must be odd");
  if (ws[1] != xs[1])
    throw DimensionError("conv3d: kernel input channels do not match input");
  if (bs[0] != ws[0]) throw DimensionError("conv3d: bias length must equal output channels");
  if (stride < 1) throw ConfigError("conv3d: stride must be >= 1");
  if (padding < 0) throw ConfigError("conv3d: padding must be >= 0");

  ConvDims c{};
  c.n = xs[0];
  c.ci = xs[1];
  c.di = xs[2];
  c.hi = xs[3];
  c.wi = xs[4];
  c.co = ws[0];
  c.k = ws[2];
  c.stride = stride;
  c.padding = padding;
  c.d_out = (c.di + 2 * padding - c.k) / stride + 1;
  c.h_out = (c.hi + 2 * padding - c.k) / stride + 1;
  c.w_out = (c.wi + 2 * padding - c.k) / stride + 1;
  if (c.di + 2 * padding < c.k || c.hi + 2 * padding < c.k || c.wi + 2 * padding < c.k)
    throw DimensionError("conv3d: kernel larger than padded input");
  return c;
}

// out[xo] += wv * in[xo*stride + off] over the xo range where the input index
// stays within [0, wi). Callers precompute the range for zero padding.
template <class T>
inline void axpy_row(T* out, const T* in, T wv, int lo, int hi, int stride, int off) {
  if (stride == 1) {
    const T* ip = in + off;
    for (int xo = lo; xo <= hi; ++xo) out[xo] += wv * ip[xo];
  } else {
    for (int xo = lo; xo <= hi; ++xo) out[xo] += wv * in[xo * stride + off];
  }
}

template <class T>
void conv3d_forward_generic(const ConvDims& c, const T* xv, const T* wv, const T* bv, T* ov,
                            PadMode mode) {
  const std::int64_t in_plane = static_cast<std::int64_t>(c.hi) * c.wi;
  const std::int64_t in_chan = in_plane * c.di;
  const std::int64_t out_plane = static_cast<std::int64_t>(c.h_out) * c.w_out;
  const std::int64_t out_chan = out_plane * c.d_out;
  const int k = c.k, s = c.stride, p = c.padding;

  for (int n = 0; n < c.n; ++n) {
    for (int co = 0; co < c.co; ++co) {
      T* out_base = ov + (static_cast<std::int64_t>(n) * c.co + co) * out_chan;
      std::fill(out_base, out_base + out_chan, bv[co]);
      for (int ci = 0; ci < c.ci; ++ci) {
        const T* in_base = xv + (static_cast<std::int64_t>(n) * c.ci + ci) * in_chan;
        const T* wk = wv + (static_cast<std::int64_t>(co) * c.ci + ci) * k * k * k;
        for (int kz = 0; kz < k; ++kz) {
          for (int ky = 0; ky < k; ++ky) {
            if (mode == PadMode::Zero) {
              const int zlo = std::max(0, ceil_div(p - kz, s));
              const int zhi = std::min(c.d_out - 1, floor_div(c.di - 1 + p - kz, s));
              const int ylo = std::max(0, ceil_div(p - ky, s));
              const int yhi = std::min(c.h_out - 1, floor_div(c.hi - 1 + p - ky, s));
              for (int kx = 0; kx < k; ++kx) {
                const T w_el = wk[(kz * k + ky) * k + kx];
                if (w_el == T(0)) continue;
                const int xlo = std::max(0, ceil_div(p - kx, s));
                const int xhi = std::min(c.w_out - 1, floor_div(c.wi - 1 + p - kx, s));
                const int off = kx - p;
                for (int zo = zlo; zo <= zhi; ++zo) {
                  const int zi = zo * s - p + kz;
                  for (int yo = ylo; yo <= yhi; ++yo) {
                    const int yi = yo * s - p + ky;
                    axpy_row(out_base + zo * out_plane + static_cast<std::int64_t>(yo) * c.w_out,
                             in_base + zi * in_plane + static_cast<std::int64_t>(yi) * c.wi, w_el,
                             xlo, xhi, s, off);
                  }
                }
              }
            } else {  // circular
              for (int kx = 0; kx < k; ++kx) {
                const T w_el = wk[(kz * k + ky) * k + kx];
                for (int zo = 0; zo < c.d_out; ++zo) {
                  const int zi = wrap(zo * s - p + kz, c.di);
                  for (int yo = 0; yo < c.h_out; ++yo) {
                    const int yi = wrap(yo * s - p + ky, c.hi);
                    const T* in_row = in_base + zi * in_plane + static_cast<std::int64_t>(yi) * c.wi;
                    T* out_row = out_base + zo * out_plane + static_cast<std::int64_t>(yo) * c.w_out;
                    for (int xo = 0; xo < c.w_out; ++xo)
                      out_row[xo] += w_el * in_row[wrap(xo * s - p + kx, c.wi)];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void conv3d_backward_generic(const ConvDims& c, const T* xv, const T* wv, const T* gout, T* gx,
                             T* gw, T* gb, PadMode mode) {
  const std::int64_t in_plane = static_cast<std::int64_t>(c.hi) * c.wi;
  const std::int64_t in_chan = in_plane * c.di;
  const std::int64_t out_plane = static_cast<std::int64_t>(c.h_out) * c.w_out;
  const std::int64_t out_chan = out_plane * c.d_out;
  const int k = c.k, s = c.stride, p = c.padding;

  if (gb) {
    for (int n = 0; n < c.n; ++n)
      for (int co = 0; co < c.co; ++co)
        gb[co] += static_cast<T>(
            sum_row(gout + (static_cast<std::int64_t>(n) * c.co + co) * out_chan, out_chan));
  }

  if (gx) {
    for (int n = 0; n < c.n; ++n) {
      for (int ci = 0; ci < c.ci; ++ci) {
        T* gx_base = gx + (static_cast<std::int64_t>(n) * c.ci + ci) * in_chan;
        for (int co = 0; co < c.co; ++co) {
          const T* go_base = gout + (static_cast<std::int64_t>(n) * c.co + co) * out_chan;
          const T* wk = wv + (static_cast<std::int64_t>(co) * c.ci + ci) * k * k * k;
          for (int kz = 0; kz < k; ++kz) {
            for (int ky = 0; ky < k; ++ky) {
              if (mode == PadMode::Zero) {
                const int zlo = std::max(0, ceil_div(p - kz, s));
                const int zhi = std::min(c.d_out - 1, floor_div(c.di - 1 + p - kz, s));
                const int ylo = std::max(0, ceil_div(p - ky, s));
                const int yhi = std::min(c.h_out - 1, floor_div(c.hi - 1 + p - ky, s));
                for (int kx = 0; kx < k; ++kx) {
                  const T w_el = wk[(kz * k + ky) * k + kx];
                  if (w_el == T(0)) continue;
                  const int xlo = std::max(0, ceil_div(p - kx, s));
                  const int xhi = std::min(c.w_out - 1, floor_div(c.wi - 1 + p - kx, s));
                  const int off = kx - p;
                  for (int zo = zlo; zo <= zhi; ++zo) {
                    const int zi = zo * s - p + kz;
                    for (int yo = ylo; yo <= yhi; ++yo) {
                      const int yi = yo * s - p + ky;
                      T* gx_row = gx_base + zi * in_plane + static_cast<std::int64_t>(yi) * c.wi;
                      const T* go_row =
                          go_base + zo * out_plane + static_cast<std::int64_t>(yo) * c.w_out;
                      if (s == 1) {
                        T* gp = gx_row + off;
                        for (int xo = xlo; xo <= xhi; ++xo) gp[xo] += w_el * go_row[xo];
                      } else {
                        for (int xo = xlo; xo <= xhi; ++xo)
                          gx_row[xo * s + off] += w_el * go_row[xo];
                      }
                    }
                  }
                }
              } else {
                for (int kx = 0; kx < k; ++kx) {
                  const T w_el = wk[(kz * k + ky) * k + kx];
                  for (int zo = 0; zo < c.d_out; ++zo) {
                    const int zi = wrap(zo * s - p + kz, c.di);
                    for (int yo = 0; yo < c.h_out; ++yo) {
                      const int yi = wrap(yo * s - p + ky, c.hi);
                      T* gx_row = gx_base + zi * in_plane + static_cast<std::int64_t>(yi) * c.wi;
                      const T* go_row =
                          go_base + zo * out_plane + static_cast<std::int64_t>(yo) * c.w_out;
                      for (int xo = 0; xo < c.w_out; ++xo)
                        gx_row[wrap(xo * s - p + kx, c.wi)] += w_el * go_row[xo];
                    }
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  if (gw) {
    for (int co = 0; co < c.co; ++co) {
      for (int ci = 0; ci < c.ci; ++ci) {
        T* gwk = gw + (static_cast<std::int64_t>(co) * c.ci + ci) * k * k * k;
        for (int kz = 0; kz < k; ++kz) {
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              double acc = 0.0;
              for (int n = 0; n < c.n; ++n) {
                const T* in_base = xv + (static_cast<std::int64_t>(n) * c.ci + ci) * in_chan;
                const T* go_base = gout + (static_cast<std::int64_t>(n) * c.co + co) * out_chan;
                if (mode == PadMode::Zero) {
                  const int zlo = std::max(0, ceil_div(p - kz, s));
                  const int zhi = std::min(c.d_out - 1, floor_div(c.di - 1 + p - kz, s));
                  const int ylo = std::max(0, ceil_div(p - ky, s));
                  const int yhi = std::min(c.h_out - 1, floor_div(c.hi - 1 + p - ky, s));
                  const int xlo = std::max(0, ceil_div(p - kx, s));
                  const int xhi = std::min(c.w_out - 1, floor_div(c.wi - 1 + p - kx, s));
                  const int off = kx - p;
                  for (int zo = zlo; zo <= zhi; ++zo) {
                    const int zi = zo * s - p + kz;
                    for (int yo = ylo; yo <= yhi; ++yo) {
                      const int yi = yo * s - p + ky;
                      const T* in_row =
                          in_base + zi * in_plane + static_cast<std::int64_t>(yi) * c.wi;
                      const T* go_row =
                          go_base + zo * out_plane + static_cast<std::int64_t>(yo) * c.w_out;
                      if (s == 1) {
                        acc += dot_rows(go_row + xlo, in_row + xlo + off, xhi - xlo + 1);
                      } else {
                        for (int xo = xlo; xo <= xhi; ++xo)
                          acc += static_cast<double>(go_row[xo]) * in_row[xo * s + off];
                      }
                    }
                  }
                } else {
                  for (int zo = 0; zo < c.d_out; ++zo) {
                    const int zi = wrap(zo * s - p + kz, c.di);
                    for (int yo = 0; yo < c.h_out; ++yo) {
                      const int yi = wrap(yo * s - p + ky, c.hi);
                      const T* in_row =
                          in_base + zi * in_plane + static_cast<std::int64_t>(yi) * c.wi;
                      const T* go_row =
                          go_base + zo * out_plane + static_cast<std::int64_t>(yo) * c.w_out;
                      for (int xo = 0; xo < c.w_out; ++xo)
                        acc += static_cast<double>(go_row[xo]) * in_row[wrap(xo * s - p + kx, c.wi)];
                    }
                  }
                }
              }
              gwk[(kz * k + ky) * k + kx] += static_cast<T>(acc);
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Fast paths for 3x3x3 kernels with padding 1 and zero boundaries (the
// shapes the autoencoder actually runs). Each input channel of a sample is
// copied once into a volume whose rows carry one zero on each side; slab
// kernels then sweep whole planes with restrict-qualified pointers so the
// inner loops vectorize without aliasing checks, and four output channels
// share every input load.

// Copies channel volumes into row-padded layout (row stride w+2, zeros in
// the first and last column; the buffer is pre-zeroed once).
template <class T>
void pad_rows(const T* src, T* dst, std::int64_t rows, int w) {
  const int prs = w + 2;
  for (std::int64_t r = 0; r < rows; ++r)
    std::memcpy(dst + r * prs + 1, src + r * w, sizeof(T) * w);
}

// Repacks the tap weights of one block of (up to four) output channels into
// the layout the slab kernels consume: ((ci*9 + kz*3+ky)*12 + 3j+t), with
// unused j slots zeroed.
template <class T>
void repack_block_weights(const T* wv, int c_in, int cb, int jb, std::vector<T>& blk) {
  std::fill(blk.begin(), blk.end(), T(0));
  for (int ci = 0; ci < c_in; ++ci)
    for (int tap = 0; tap < 9; ++tap)
      for (int j = 0; j < jb; ++j)
        for (int t = 0; t < 3; ++t)
          blk[(static_cast<std::size_t>(ci) * 9 + tap) * 12 + j * 3 + t] =
              wv[((static_cast<std::int64_t>(cb) + j) * c_in + ci) * 27 + tap * 3 + t];
}

// Adds the 27 taps of one input channel into four output-channel accumulator
// planes for output plane z. acc planes are h*w; pv is the padded volume.
template <class T, int JB>
void slab_taps(const T* __restrict__ pv, int d, int h, int w, int z, const T* __restrict__ w9,
               T* __restrict__ a0, T* __restrict__ a1, T* __restrict__ a2, T* __restrict__ a3) {
  const int prs = w + 2;
  const std::int64_t pplane = static_cast<std::int64_t>(h) * prs;
  for (int kz = 0; kz < 3; ++kz) {
    const int zi = z + kz - 1;
    if (zi < 0 || zi >= d) continue;
    const T* pvz = pv + zi * pplane;
    for (int ky = 0; ky < 3; ++ky) {
      const T* wj = w9 + (kz * 3 + ky) * 12;
      const T w00 = wj[0], w01 = wj[1], w02 = wj[2];
      const T w10 = wj[3], w11 = wj[4], w12 = wj[5];
      const T w20 = wj[6], w21 = wj[7], w22 = wj[8];
      const T w30 = wj[9], w31 = wj[10], w32 = wj[11];
      const int ylo = std::max(0, 1 - ky);
      const int yhi = std::min(h - 1, h - ky);
      for (int y = ylo; y <= yhi; ++y) {
        const T* pr = pvz + static_cast<std::int64_t>(y + ky - 1) * prs;
        T* r0 = a0 + static_cast<std::int64_t>(y) * w;
        T* r1 = a1 + static_cast<std::int64_t>(y) * w;
        T* r2 = a2 + static_cast<std::int64_t>(y) * w;
        T* r3 = a3 + static_cast<std::int64_t>(y) * w;
        for (int xo = 0; xo < w; ++xo) {
          const T p0 = pr[xo], p1 = pr[xo + 1], p2 = pr[xo + 2];
          r0[xo] += w00 * p0 + w01 * p1 + w02 * p2;
          if constexpr (JB > 1) r1[xo] += w10 * p0 + w11 * p1 + w12 * p2;
          if constexpr (JB > 2) r2[xo] += w20 * p0 + w21 * p1 + w22 * p2;
          if constexpr (JB > 3) r3[xo] += w30 * p0 + w31 * p1 + w32 * p2;
        }
      }
    }
  }
}

// Stride-2 counterpart writing a d_out/h_out/w_out accumulator plane for
// output plane zo. Input index 2*xo+t-1 becomes even[xo], odd[xo],
// even[xo+1] over phase rows scratch e/o.
template <class T, int JB>
void slab_taps_s2(const T* __restrict__ pv, int di, int hi, int wi, int zo, int h_out, int w_out,
                  const T* __restrict__ w9, T* __restrict__ e, T* __restrict__ o,
                  T* __restrict__ a0, T* __restrict__ a1, T* __restrict__ a2,
                  T* __restrict__ a3) {
  const int prs = wi + 2;
  const std::int64_t pplane = static_cast<std::int64_t>(hi) * prs;
  for (int kz = 0; kz < 3; ++kz) {
    const int zi = 2 * zo + kz - 1;
    if (zi < 0 || zi >= di) continue;
    const T* pvz = pv + zi * pplane;
    for (int ky = 0; ky < 3; ++ky) {
      const T* wj = w9 + (kz * 3 + ky) * 12;
      const T w00 = wj[0], w01 = wj[1], w02 = wj[2];
      const T w10 = wj[3], w11 = wj[4], w12 = wj[5];
      const T w20 = wj[6], w21 = wj[7], w22 = wj[8];
      const T w30 = wj[9], w31 = wj[10], w32 = wj[11];
      const int ylo = std::max(0, ceil_div(1 - ky, 2));
      const int yhi = std::min(h_out - 1, floor_div(hi - ky, 2));
      for (int yo = ylo; yo <= yhi; ++yo) {
        const T* pr = pvz + static_cast<std::int64_t>(2 * yo + ky - 1) * prs;
        for (int i = 0; i <= w_out; ++i) e[i] = pr[2 * i];
        for (int i = 0; i < w_out; ++i) o[i] = pr[2 * i + 1];
        T* r0 = a0 + static_cast<std::int64_t>(yo) * w_out;
        T* r1 = a1 + static_cast<std::int64_t>(yo) * w_out;
        T* r2 = a2 + static_cast<std::int64_t>(yo) * w_out;
        T* r3 = a3 + static_cast<std::int64_t>(yo) * w_out;
        for (int xo = 0; xo < w_out; ++xo) {
          const T p0 = e[xo], p1 = o[xo], p2 = e[xo + 1];
          r0[xo] += w00 * p0 + w01 * p1 + w02 * p2;
          if constexpr (JB > 1) r1[xo] += w10 * p0 + w11 * p1 + w12 * p2;
          if constexpr (JB > 2) r2[xo] += w20 * p0 + w21 * p1 + w22 * p2;
          if constexpr (JB > 3) r3[xo] += w30 * p0 + w31 * p1 + w32 * p2;
        }
      }
    }
  }
}

// Weight-gradient slab: accumulates go[j] x pr[xo+t] products for one
// (kz, ky) tap row of one input channel into 3*JB row buffers across the
// whole sample volume. S is the stride; phase scratch e/o is used when S=2.
template <class T, int JB, int S>
void slab_taps_dw(const T* __restrict__ pv, int di, int hi, int wi, int d_out, int h_out,
                  int w_out, int kz, int ky, const T* __restrict__ g0, const T* __restrict__ g1,
                  const T* __restrict__ g2, const T* __restrict__ g3, T* __restrict__ e,
                  T* __restrict__ o, T* __restrict__ r0, T* __restrict__ r1, T* __restrict__ r2,
                  T* __restrict__ r3, T* __restrict__ r4, T* __restrict__ r5, T* __restrict__ r6,
                  T* __restrict__ r7, T* __restrict__ r8, T* __restrict__ r9,
                  T* __restrict__ r10, T* __restrict__ r11) {
  const int prs = wi + 2;
  const std::int64_t pplane = static_cast<std::int64_t>(hi) * prs;
  const std::int64_t oplane = static_cast<std::int64_t>(h_out) * w_out;
  const int zlo = std::max(0, ceil_div(1 - kz, S));
  const int zhi = std::min(d_out - 1, floor_div(di - kz, S));
  const int ylo = std::max(0, ceil_div(1 - ky, S));
  const int yhi = std::min(h_out - 1, floor_div(hi - ky, S));
  for (int zo = zlo; zo <= zhi; ++zo) {
    const T* pvz = pv + static_cast<std::int64_t>(S * zo + kz - 1) * pplane;
    for (int yo = ylo; yo <= yhi; ++yo) {
      const T* pr = pvz + static_cast<std::int64_t>(S * yo + ky - 1) * prs;
      const T* e_row;
      const T* o_row;
      const T* f_row;  // third tap: pr[S*xo + 2]
      if constexpr (S == 2) {
        for (int i = 0; i <= w_out; ++i) e[i] = pr[2 * i];
        for (int i = 0; i < w_out; ++i) o[i] = pr[2 * i + 1];
        e_row = e;
        o_row = o;
        f_row = e + 1;
      } else {
        e_row = pr;
        o_row = pr + 1;
        f_row = pr + 2;
      }
      const std::int64_t off = zo * oplane + static_cast<std::int64_t>(yo) * w_out;
      const T* q0 = g0 + off;
      const T* q1 = g1 + off;
      const T* q2 = g2 + off;
      const T* q3 = g3 + off;
      for (int xo = 0; xo < w_out; ++xo) {
        const T p0 = e_row[xo], p1 = o_row[xo], p2 = f_row[xo];
        {
          const T g = q0[xo];
          r0[xo] += g * p0;
          r1[xo] += g * p1;
          r2[xo] += g * p2;
        }
        if constexpr (JB > 1) {
          const T g = q1[xo];
          r3[xo] += g * p0;
          r4[xo] += g * p1;
          r5[xo] += g * p2;
        }
        if constexpr (JB > 2) {
          const T g = q2[xo];
          r6[xo] += g * p0;
          r7[xo] += g * p1;
          r8[xo] += g * p2;
        }
        if constexpr (JB > 3) {
          const T g = q3[xo];
          r9[xo] += g * p0;
          r10[xo] += g * p1;
          r11[xo] += g * p2;
        }
      }
    }
  }
}

// y(n,co,...) = bias[co] + sum_ci w3 * x(n,ci,...) at equal spatial dims.
// With Accumulate the result is added to y and bias is ignored (dX reuses
// this core with flipped taps and transposed channels).
template <class T, bool Accumulate>
void conv3x3_s1_core(int n, int c_in, int c_out, int d, int h, int w, const T* xv, const T* wr,
                     const T* bias, T* yv) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t chan = plane * d;
  const std::int64_t pchan = static_cast<std::int64_t>(h) * (w + 2) * d;
  std::vector<T> pv_buf(static_cast<std::size_t>(c_in) * pchan, T(0));
  std::vector<T> acc_buf(static_cast<std::size_t>(4) * plane);
  std::vector<T> blk(static_cast<std::size_t>(c_in) * 108);
  T* acc[4];
  for (int j = 0; j < 4; ++j) acc[j] = acc_buf.data() + static_cast<std::size_t>(j) * plane;

  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c_in; ++ci)
      pad_rows(xv + (static_cast<std::int64_t>(ni) * c_in + ci) * chan,
               pv_buf.data() + static_cast<std::size_t>(ci) * pchan,
               static_cast<std::int64_t>(d) * h, w);
    for (int cb = 0; cb < c_out; cb += 4) {
      const int jb = std::min(4, c_out - cb);
      repack_block_weights(wr, c_in, cb, jb, blk);
      for (int z = 0; z < d; ++z) {
        for (int j = 0; j < jb; ++j)
          std::fill(acc[j], acc[j] + plane, Accumulate ? T(0) : bias[cb + j]);
        for (int ci = 0; ci < c_in; ++ci) {
          const T* pv = pv_buf.data() + static_cast<std::size_t>(ci) * pchan;
          const T* w9 = blk.data() + static_cast<std::size_t>(ci) * 108;
          switch (jb) {
            case 4:
              slab_taps<T, 4>(pv, d, h, w, z, w9, acc[0], acc[1], acc[2], acc[3]);
              break;
            case 3:
              slab_taps<T, 3>(pv, d, h, w, z, w9, acc[0], acc[1], acc[2], acc[3]);
              break;
            case 2:
              slab_taps<T, 2>(pv, d, h, w, z, w9, acc[0], acc[1], acc[2], acc[3]);
              break;
            default:
              slab_taps<T, 1>(pv, d, h, w, z, w9, acc[0], acc[1], acc[2], acc[3]);
              break;
          }
        }
        for (int j = 0; j < jb; ++j) {
          T* yp = yv + (static_cast<std::int64_t>(ni) * c_out + cb + j) * chan + z * plane;
          if constexpr (Accumulate) {
            const T* aj = acc[j];
            for (std::int64_t i = 0; i < plane; ++i) yp[i] += aj[i];
          } else {
            std::memcpy(yp, acc[j], sizeof(T) * plane);
          }
        }
      }
    }
  }
}

template <class T>
void conv3x3_s2_forward(const ConvDims& c, const T* xv, const T* wv, const T* bv, T* yv) {
  const std::int64_t in_chan = static_cast<std::int64_t>(c.di) * c.hi * c.wi;
  const std::int64_t pchan = static_cast<std::int64_t>(c.di) * c.hi * (c.wi + 2);
  const std::int64_t out_plane = static_cast<std::int64_t>(c.h_out) * c.w_out;
  const std::int64_t out_chan = out_plane * c.d_out;
  std::vector<T> pv_buf(static_cast<std::size_t>(c.ci) * pchan, T(0));
  std::vector<T> acc_buf(static_cast<std::size_t>(4) * out_plane);
  std::vector<T> phase_buf(static_cast<std::size_t>(2) * (c.w_out + 1));
  std::vector<T> blk(static_cast<std::size_t>(c.ci) * 108);
  T* e = phase_buf.data();
  T* o = e + c.w_out + 1;
  T* acc[4];
  for (int j = 0; j < 4; ++j) acc[j] = acc_buf.data() + static_cast<std::size_t>(j) * out_plane;

  for (int ni = 0; ni < c.n; ++ni) {
    for (int ci = 0; ci < c.ci; ++ci)
      pad_rows(xv + (static_cast<std::int64_t>(ni) * c.ci + ci) * in_chan,
               pv_buf.data() + static_cast<std::size_t>(ci) * pchan,
               static_cast<std::int64_t>(c.di) * c.hi, c.wi);
    for (int cb = 0; cb < c.co; cb += 4) {
      const int jb = std::min(4, c.co - cb);
      repack_block_weights(wv, c.ci, cb, jb, blk);
      for (int zo = 0; zo < c.d_out; ++zo) {
        for (int j = 0; j < jb; ++j) std::fill(acc[j], acc[j] + out_plane, bv[cb + j]);
        for (int ci = 0; ci < c.ci; ++ci) {
          const T* pv = pv_buf.data() + static_cast<std::size_t>(ci) * pchan;
          const T* w9 = blk.data() + static_cast<std::size_t>(ci) * 108;
          switch (jb) {
            case 4:
              slab_taps_s2<T, 4>(pv, c.di, c.hi, c.wi, zo, c.h_out, c.w_out, w9, e, o, acc[0],
                                 acc[1], acc[2], acc[3]);
              break;
            case 3:
              slab_taps_s2<T, 3>(pv, c.di, c.hi, c.wi, zo, c.h_out, c.w_out, w9, e, o, acc[0],
                                 acc[1], acc[2], acc[3]);
              break;
            case 2:
              slab_taps_s2<T, 2>(pv, c.di, c.hi, c.wi, zo, c.h_out, c.w_out, w9, e, o, acc[0],
                                 acc[1], acc[2], acc[3]);
              break;
            default:
              slab_taps_s2<T, 1>(pv, c.di, c.hi, c.wi, zo, c.h_out, c.w_out, w9, e, o, acc[0],
                                 acc[1], acc[2], acc[3]);
              break;
          }
        }
        for (int j = 0; j < jb; ++j)
          std::memcpy(yv + (static_cast<std::int64_t>(ni) * c.co + cb + j) * out_chan +
                          zo * out_plane,
                      acc[j], sizeof(T) * out_plane);
      }
    }
  }
}

// dW for the 3x3x3 zero-padded cases. Products are accumulated into row
// buffers across each sample, then reduced in fixed order.
template <class T>
void conv3x3_dw(const ConvDims& c, const T* xv, const T* gout, T* gw) {
  const std::int64_t in_chan = static_cast<std::int64_t>(c.di) * c.hi * c.wi;
  const std::int64_t pchan = static_cast<std::int64_t>(c.di) * c.hi * (c.wi + 2);
  const std::int64_t out_chan = static_cast<std::int64_t>(c.d_out) * c.h_out * c.w_out;
  const int s = c.stride;
  std::vector<T> pv_buf(static_cast<std::size_t>(c.ci) * pchan, T(0));
  std::vector<T> phase_buf(static_cast<std::size_t>(2) * (c.w_out + 1));
  std::vector<T> rowacc_buf(static_cast<std::size_t>(12) * c.w_out);
  T* e = phase_buf.data();
  T* o = e + c.w_out + 1;
  T* ra[12];
  for (int t = 0; t < 12; ++t) ra[t] = rowacc_buf.data() + static_cast<std::size_t>(t) * c.w_out;

  for (int ni = 0; ni < c.n; ++ni) {
    for (int ci = 0; ci < c.ci; ++ci)
      pad_rows(xv + (static_cast<std::int64_t>(ni) * c.ci + ci) * in_chan,
               pv_buf.data() + static_cast<std::size_t>(ci) * pchan,
               static_cast<std::int64_t>(c.di) * c.hi, c.wi);
    for (int cb = 0; cb < c.co; cb += 4) {
      const int jb = std::min(4, c.co - cb);
      const T* g[4];
      for (int j = 0; j < 4; ++j)
        g[j] = gout + (static_cast<std::int64_t>(ni) * c.co + cb + std::min(j, jb - 1)) * out_chan;
      for (int ci = 0; ci < c.ci; ++ci) {
        const T* pv = pv_buf.data() + static_cast<std::size_t>(ci) * pchan;
        for (int kz = 0; kz < 3; ++kz) {
          for (int ky = 0; ky < 3; ++ky) {
            std::fill(rowacc_buf.begin(), rowacc_buf.end(), T(0));
            if (s == 1) {
              switch (jb) {
                case 4:
                  slab_taps_dw<T, 4, 1>(pv, c.di, c.hi, c.wi, c.d_out, c.h_out, c.w_out, kz, ky,
                                        g[0], g[1], g[2], g[3], e, o, ra[0], ra[1], ra[2], ra[3],
                                        ra[4], ra[5], ra[6], ra[7], ra[8], ra[9], ra[10], ra[11]);
                  break;
                case 3:
                  slab_taps_dw<T, 3, 1>(pv, c.di, c.hi, c.wi, c.d_out, c.h_out, c.w_out, kz, ky,
                                        g[0], g[1], g[2], g[3], e, o, ra[0], ra[1], ra[2], ra[3],
                                        ra[4], ra[5], ra[6], ra[7], ra[8], ra[9], ra[10], ra[11]);
                  break;
                case 2:
                  slab_taps_dw<T, 2, 1>(pv, c.di, c.hi, c.wi, c.d_out, c.h_out, c.w_out, kz, ky,
                                        g[0], g[1], g[2], g[3], e, o, ra[0], ra[1], ra[2], ra[3],
                                        ra[4], ra[5], ra[6], ra[7], ra[8], ra[9], ra[10], ra[11]);
                  break;
                default:
                  slab_taps_dw<T, 1, 1>(pv, c.di, c.hi, c.wi, c.d_out, c.h_out, c.w_out, kz, ky,
                                        g[0], g[1], g[2], g[3], e, o, ra[0], ra[1], ra[2], ra[3],
                                        ra[4], ra[5], ra[6], ra[7], ra[8], ra[9], ra[10], ra[11]);
                  break;
              }
            } else {
              switch (jb) {
                case 4:
                  slab_taps_dw<T, 4, 2>(pv, c.di, c.hi, c.wi, c.d_out, c.h_out, c.w_out, kz, ky,
                                        g[0], g[1], g[2], g[3], e, o, ra[0], ra[1], ra[2], ra[3],
                                        ra[4], ra[5], ra[6], ra[7], ra[8], ra[9], ra[10], ra[11]);
                  break;
                case 3:
                  slab_taps_dw<T, 3, 2>(pv, c.di, c.hi, c.wi, c.d_out, c.h_out, c.w_out, kz, ky,
                                        g[0], g[1], g[2], g[3], e, o, ra[0], ra[1], ra[2], ra[3],
                                        ra[4], ra[5], ra[6], ra[7], ra[8], ra[9], ra[10], ra[11]);
                  break;
                case 2:
                  slab_taps_dw<T, 2, 2>(pv, c.di, c.hi, c.wi, c.d_out, c.h_out, c.w_out, kz, ky,
                                        g[0], g[1], g[2], g[3], e, o, ra[0], ra[1], ra[2], ra[3],
                                        ra[4], ra[5], ra[6], ra[7], ra[8], ra[9], ra[10], ra[11]);
                  break;
                default:
                  slab_taps_dw<T, 1, 2>(pv, c.di, c.hi, c.wi, c.d_out, c.h_out, c.w_out, kz, ky,
                                        g[0], g[1], g[2], g[3], e, o, ra[0], ra[1], ra[2], ra[3],
                                        ra[4], ra[5], ra[6], ra[7], ra[8], ra[9], ra[10], ra[11]);
                  break;
              }
            }
            for (int j = 0; j < jb; ++j)
              for (int t = 0; t < 3; ++t)
                gw[((static_cast<std::int64_t>(cb) + j) * c.ci + ci) * 27 + (kz * 3 + ky) * 3 +
                   t] += static_cast<T>(sum_row(ra[j * 3 + t], c.w_out));
          }
        }
      }
    }
  }
}

template <class T>
bool conv3d_fast_eligible(const ConvDims& c, PadMode mode) {
  return mode == PadMode::Zero && c.k == 3 && c.padding == 1 &&
         (c.stride == 1 || c.stride == 2);
}

template <class T>
void conv3d_forward(const ConvDims& c, const T* xv, const T* wv, const T* bv, T* ov,
                    PadMode mode) {
  if (conv3d_fast_eligible<T>(c, mode)) {
    if (c.stride == 1)
      conv3x3_s1_core<T, false>(c.n, c.ci, c.co, c.di, c.hi, c.wi, xv, wv, bv, ov);
    else
      conv3x3_s2_forward(c, xv, wv, bv, ov);
    return;
  }
  conv3d_forward_generic(c, xv, wv, bv, ov, mode);
}

template <class T>
void conv3d_backward(const ConvDims& c, const T* xv, const T* wv, const T* gout, T* gx, T* gw,
                     T* gb, PadMode mode) {
  if (!conv3d_fast_eligible<T>(c, mode)) {
    conv3d_backward_generic(c, xv, wv, gout, gx, gw, gb, mode);
    return;
  }

  if (gb) {
    const std::int64_t out_chan = static_cast<std::int64_t>(c.d_out) * c.h_out * c.w_out;
    for (int n = 0; n < c.n; ++n)
      for (int co = 0; co < c.co; ++co)
        gb[co] += static_cast<T>(
            sum_row(gout + (static_cast<std::int64_t>(n) * c.co + co) * out_chan, out_chan));
  }

  if (gx) {
    if (c.stride == 1) {
      // dX is the same-stride convolution of the output gradient with the
      // kernel flipped along every spatial axis and transposed in channels.
      std::vector<T> wr(static_cast<std::size_t>(c.ci) * c.co * 27);
      for (int co = 0; co < c.co; ++co)
        for (int ci = 0; ci < c.ci; ++ci)
          for (int t = 0; t < 27; ++t)
            wr[(static_cast<std::int64_t>(ci) * c.co + co) * 27 + t] =
                wv[(static_cast<std::int64_t>(co) * c.ci + ci) * 27 + 26 - t];
      conv3x3_s1_core<T, true>(c.n, c.co, c.ci, c.di, c.hi, c.wi, gout, wr.data(), nullptr, gx);
    } else {
      conv3d_backward_generic<T>(c, xv, wv, gout, gx, nullptr, nullptr, mode);
    }
  }

  if (gw) conv3x3_dw(c, xv, gout, gw);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor methods

template <class T>
Tensor<T> Tensor<T>::zeros(std::vector<int> shape, bool requires_grad) {
  std::int64_t n = shape_numel(shape);
  return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(n, T(0)), requires_grad));
}

template <class T>
Tensor<T> Tensor<T>::full(std::vector<int> shape, T value, bool requires_grad) {
  std::int64_t n = shape_numel(shape);
  return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(n, value), requires_grad));
}

template <class T>
Tensor<T> Tensor<T>::from(std::vector<int> shape, std::vector<T> values, bool requires_grad) {
  return Tensor(make_leaf<T>(std::move(shape), std::move(values), requires_grad));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(make_leaf<T>({}, {value}, false));
}

template <class T>
const std::vector<int>& Tensor<T>::shape() const {
  if (!node_) throw UsageError("tensor: undefined");
  return node_->shape;
}

template <class T>
std::int64_t Tensor<T>::numel() const {
  if (!node_) throw UsageError("tensor: undefined");
  return node_->numel();
}

template <class T>
std::span<T> Tensor<T>::values() {
  if (!node_) throw UsageError("tensor: undefined");
  return node_->value;
}

template <class T>
std::span<const T> Tensor<T>::values() const {
  if (!node_) throw UsageError("tensor: undefined");
  return node_->value;
}

template <class T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <class T>
bool Tensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <class T>
std::span<const T> Tensor<T>::grad() const {
  if (!node_) throw UsageError("tensor: undefined");
  if (node_->grad.empty()) throw UsageError("tensor: no gradient accumulated");
  return node_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
  if (!node_) throw UsageError("tensor: undefined");
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
T Tensor<T>::item() const {
  if (!node_) throw UsageError("tensor: undefined");
  if (node_->numel() != 1) throw UsageError("tensor: item() requires a single element");
  return node_->value[0];
}

template <class T>
int Tensor<T>::backward_visits() const {
  if (!node_) throw UsageError("tensor: undefined");
  return node_->backward_visits;
}

template <class T>
void Tensor<T>::backward() const {
  if (!node_) throw UsageError("tensor: undefined");
  if (node_->numel() != 1) throw UsageError("backward: root must be a scalar");

  // Post-order DFS over the requires-grad subgraph: parents land before the
  // nodes that consume them, so the reversed order is a valid reverse sweep.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  struct Frame {
    Node<T>* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  seen.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<T>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  // Interior gradients are per-sweep scratch; leaf gradients accumulate.
  for (Node<T>* n : order) {
    if (n->backprop) {
      ensure_grad(*n);
      std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
  }
  ensure_grad(*node_);
  node_->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    n->backward_visits += 1;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Ops

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding, PadMode pad_mode) {
  auto xn = x.node(), wn = w.node(), bn = b.node();
  if (!xn || !wn || !bn) throw UsageError("conv3d: undefined tensor");
  ConvDims c = conv_dims(xn->shape, wn->shape, bn->shape, stride, padding);

  auto out = make_op<T>({c.n, c.co, c.d_out, c.h_out, c.w_out}, {xn, wn, bn});
  conv3d_forward(c, xn->value.data(), wn->value.data(), bn->value.data(), out->value.data(),
                 pad_mode);

  if (out->requires_grad) {
    out->backprop = [xn, wn, bn, c, pad_mode](Node<T>& self) {
      T* gx = nullptr;
      T* gw = nullptr;
      T* gb = nullptr;
      if (xn->requires_grad) {
        ensure_grad(*xn);
        gx = xn->grad.data();
      }
      if (wn->requires_grad) {
        ensure_grad(*wn);
        gw = wn->grad.data();
      }
      if (bn->requires_grad) {
        ensure_grad(*bn);
        gb = bn->grad.data();
      }
      conv3d_backward(c, xn->value.data(), wn->value.data(), self.grad.data(), gx, gw, gb,
                      pad_mode);
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> weight_standardize(const Tensor<T>& w, T eps) {
  auto wn = w.node();
  if (!wn) throw UsageError("weight_standardize: undefined tensor");
  if (wn->shape.size() != 5)
    throw DimensionError("weight_standardize: kernel must be rank 5 (O,I,k,k,k)");
  if (!(eps > T(0))) throw ConfigError("weight_standardize: eps must be positive");

  const int o = wn->shape[0];
  const std::int64_t fan = wn->numel() / o;
  auto out = make_op<T>(wn->shape, {wn});

  auto mean = std::make_shared<std::vector<double>>(o);
  auto inv_std = std::make_shared<std::vector<double>>(o);
  for (int c = 0; c < o; ++c) {
    const T* src = wn->value.data() + c * fan;
    double mu = sum_row(src, fan) / static_cast<double>(fan);
    double var = 0;
    for (std::int64_t i = 0; i < fan; ++i) {
      double d = static_cast<double>(src[i]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(fan);
    double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*mean)[c] = mu;
    (*inv_std)[c] = is;
    T* dst = out->value.data() + c * fan;
    for (std::int64_t i = 0; i < fan; ++i)
      dst[i] = static_cast<T>((static_cast<double>(src[i]) - mu) * is);
  }

  if (out->requires_grad) {
    out->backprop = [wn, mean, inv_std, o, fan](Node<T>& self) {
      ensure_grad(*wn);
      for (int c = 0; c < o; ++c) {
        const T* src = wn->value.data() + c * fan;
        const T* g = self.grad.data() + c * fan;
        T* gw = wn->grad.data() + c * fan;
        const double mu = (*mean)[c];
        const double is = (*inv_std)[c];
        double g_mean = sum_row(g, fan) / static_cast<double>(fan);
        double gx_mean = 0;
        for (std::int64_t i = 0; i < fan; ++i)
          gx_mean += static_cast<double>(g[i]) * ((static_cast<double>(src[i]) - mu) * is);
        gx_mean /= static_cast<double>(fan);
        for (std::int64_t i = 0; i < fan; ++i) {
          double xhat = (static_cast<double>(src[i]) - mu) * is;
          gw[i] += static_cast<T>(is * (static_cast<double>(g[i]) - g_mean - xhat * gx_mean));
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  if (!xn || !gn || !bn) throw UsageError("group_norm: undefined tensor");
  if (xn->shape.size() != 5) throw DimensionError("group_norm: input must be rank 5 (N,C,D,H,W)");
  const int n = xn->shape[0], ch = xn->shape[1];
  const std::int64_t spatial =
      static_cast<std::int64_t>(xn->shape[2]) * xn->shape[3] * xn->shape[4];
  if (groups <= 0 || ch % groups != 0)
    throw ConfigError("group_norm: channels must be divisible by groups");
  if (gn->shape != std::vector<int>{ch} || bn->shape != std::vector<int>{ch})
    throw DimensionError("group_norm: gamma/beta must have one value per channel");
  if (!(eps > T(0))) throw ConfigError("group_norm: eps must be positive");

  const int cpg = ch / groups;
  const std::int64_t group_size = cpg * spatial;
  auto out = make_op<T>(xn->shape, {xn, gn, bn});

  auto mean = std::make_shared<std::vector<double>>(n * groups);
  auto inv_std = std::make_shared<std::vector<double>>(n * groups);
  for (int ni = 0; ni < n; ++ni) {
    for (int g = 0; g < groups; ++g) {
      const std::int64_t base = (static_cast<std::int64_t>(ni) * ch + g * cpg) * spatial;
      const T* src = xn->value.data() + base;
      double mu = sum_row(src, group_size) / static_cast<double>(group_size);
      double var = 0;
      for (std::int64_t i = 0; i < group_size; ++i) {
        double d = static_cast<double>(src[i]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(group_size);
      double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
      (*mean)[ni * groups + g] = mu;
      (*inv_std)[ni * groups + g] = is;
      T* dst = out->value.data() + base;
      for (int cc = 0; cc < cpg; ++cc) {
        const int c = g * cpg + cc;
        const double ga = static_cast<double>(gn->value[c]);
        const double be = static_cast<double>(bn->value[c]);
        const T* s = src + cc * spatial;
        T* d = dst + cc * spatial;
        for (std::int64_t i = 0; i < spatial; ++i)
          d[i] = static_cast<T>(ga * ((static_cast<double>(s[i]) - mu) * is) + be);
      }
    }
  }

  if (out->requires_grad) {
    const int cpg_c = cpg;
    const std::int64_t spatial_c = spatial;
    out->backprop = [xn, gn, bn, mean, inv_std, n, groups, cpg_c, spatial_c](Node<T>& self) {
      const int ch = xn->shape[1];
      const std::int64_t group_size = cpg_c * spatial_c;
      const bool want_x = xn->requires_grad;
      const bool want_g = gn->requires_grad;
      const bool want_b = bn->requires_grad;
      if (want_x) ensure_grad(*xn);
      if (want_g) ensure_grad(*gn);
      if (want_b) ensure_grad(*bn);

      for (int ni = 0; ni < n; ++ni) {
        for (int g = 0; g < groups; ++g) {
          const std::int64_t base = (static_cast<std::int64_t>(ni) * ch + g * cpg_c) * spatial_c;
          const T* src = xn->value.data() + base;
          const T* go = self.grad.data() + base;
          const double mu = (*mean)[ni * groups + g];
          const double is = (*inv_std)[ni * groups + g];

          // Per-channel reductions feed dgamma/dbeta; the group-wide means of
          // ghat and ghat*xhat feed dx.
          double ghat_mean = 0, ghat_x_mean = 0;
          for (int cc = 0; cc < cpg_c; ++cc) {
            const int c = g * cpg_c + cc;
            const double ga = static_cast<double>(gn->value[c]);
            const T* s = src + cc * spatial_c;
            const T* gout = go + cc * spatial_c;
            double sum_g = 0, sum_gx = 0;
            for (std::int64_t i = 0; i < spatial_c; ++i) {
              double xhat = (static_cast<double>(s[i]) - mu) * is;
              double gd = static_cast<double>(gout[i]);
              sum_g += gd;
              sum_gx += gd * xhat;
            }
            if (want_g) gn->grad[c] += static_cast<T>(sum_gx);
            if (want_b) bn->grad[c] += static_cast<T>(sum_g);
            ghat_mean += ga * sum_g;
            ghat_x_mean += ga * sum_gx;
          }
          if (!want_x) continue;
          ghat_mean /= static_cast<double>(group_size);
          ghat_x_mean /= static_cast<double>(group_size);

          T* gx = xn->grad.data() + base;
          for (int cc = 0; cc < cpg_c; ++cc) {
            const int c = g * cpg_c + cc;
            const double ga = static_cast<double>(gn->value[c]);
            const T* s = src + cc * spatial_c;
            const T* gout = go + cc * spatial_c;
            T* gxx = gx + cc * spatial_c;
            for (std::int64_t i = 0; i < spatial_c; ++i) {
              double xhat = (static_cast<double>(s[i]) - mu) * is;
              double ghat = ga * static_cast<double>(gout[i]);
              gxx[i] += static_cast<T>(is * (ghat - ghat_mean - xhat * ghat_x_mean));
            }
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
  auto xn = x.node();
  if (!xn) throw UsageError("activation: undefined tensor");
  auto out = make_op<T>(xn->shape, {xn});

  const std::int64_t n = xn->numel();
  const T* src = xn->value.data();
  T* dst = out->value.data();
  switch (kind) {
    case Act::SiLU:
      for (std::int64_t i = 0; i < n; ++i) {
        double v = static_cast<double>(src[i]);
        dst[i] = static_cast<T>(v / (1.0 + std::exp(-v)));
      }
      break;
    case Act::ReLU:
      for (std::int64_t i = 0; i < n; ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
      break;
    case Act::Tanh:
      for (std::int64_t i = 0; i < n; ++i)
        dst[i] = static_cast<T>(std::tanh(static_cast<double>(src[i])));
      break;
  }

  if (out->requires_grad) {
    out->backprop = [xn, kind](Node<T>& self) {
      ensure_grad(*xn);
      const std::int64_t n = xn->numel();
      const T* src = xn->value.data();
      const T* g = self.grad.data();
      T* gx = xn->grad.data();
      switch (kind) {
        case Act::SiLU:
          for (std::int64_t i = 0; i < n; ++i) {
            double v = static_cast<double>(src[i]);
            double sig = 1.0 / (1.0 + std::exp(-v));
            gx[i] += static_cast<T>(static_cast<double>(g[i]) * sig * (1.0 + v * (1.0 - sig)));
          }
          break;
        case Act::ReLU:
          for (std::int64_t i = 0; i < n; ++i)
            if (src[i] > T(0)) gx[i] += g[i];
          break;
        case Act::Tanh:
          for (std::int64_t i = 0; i < n; ++i) {
            double y = static_cast<double>(self.value[i]);
            gx[i] += static_cast<T>(static_cast<double>(g[i]) * (1.0 - y * y));
          }
          break;
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> loss(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
  auto pn = pred.node(), tn = target.node();
  if (!pn || !tn) throw UsageError("loss: undefined tensor");
  if (pn->shape != tn->shape) throw DimensionError("loss: prediction/target shapes differ");

  const std::int64_t n = pn->numel();
  auto out = make_op<T>({}, {pn, tn});
  double acc = 0;
  const T* a = pn->value.data();
  const T* b = tn->value.data();
  if (kind == LossKind::L1) {
    for (std::int64_t i = 0; i < n; ++i)
      acc += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
      acc += d * d;
    }
  }
  out->value[0] = static_cast<T>(acc / static_cast<double>(n));

  if (out->requires_grad) {
    out->backprop = [pn, tn, kind, n](Node<T>& self) {
      const double g = static_cast<double>(self.grad[0]) / static_cast<double>(n);
      const T* a = pn->value.data();
      const T* b = tn->value.data();
      const bool want_p = pn->requires_grad;
      const bool want_t = tn->requires_grad;
      if (want_p) ensure_grad(*pn);
      if (want_t) ensure_grad(*tn);
      for (std::int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        double gi;
        if (kind == LossKind::L1)
          gi = g * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
        else
          gi = g * 2.0 * d;
        if (want_p) pn->grad[i] += static_cast<T>(gi);
        if (want_t) tn->grad[i] -= static_cast<T>(gi);
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto an = a.node(), bn = b.node();
  if (!an || !bn) throw UsageError("add: undefined tensor");
  if (an->shape != bn->shape) throw DimensionError("add: shapes differ");
  auto out = make_op<T>(an->shape, {an, bn});
  const std::int64_t n = an->numel();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = an->value[i] + bn->value[i];
  if (out->requires_grad) {
    out->backprop = [an, bn, n](Node<T>& self) {
      if (an->requires_grad) {
        ensure_grad(*an);
        for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        ensure_grad(*bn);
        for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto an = a.node(), bn = b.node();
  if (!an || !bn) throw UsageError("mul: undefined tensor");
  if (an->shape != bn->shape) throw DimensionError("mul: shapes differ");
  auto out = make_op<T>(an->shape, {an, bn});
  const std::int64_t n = an->numel();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = an->value[i] * bn->value[i];
  if (out->requires_grad) {
    out->backprop = [an, bn, n](Node<T>& self) {
      if (an->requires_grad) {
        ensure_grad(*an);
        for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        ensure_grad(*bn);
        for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += self.grad[i] * an->value[i];
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  auto xn = x.node();
  if (!xn) throw UsageError("sum: undefined tensor");
  auto out = make_op<T>({}, {xn});
  out->value[0] = static_cast<T>(sum_row(xn->value.data(), xn->numel()));
  if (out->requires_grad) {
    out->backprop = [xn](Node<T>& self) {
      ensure_grad(*xn);
      const T g = self.grad[0];
      for (auto& v : xn->grad) v += g;
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  auto xn = x.node();
  if (!xn) throw UsageError("upsample_nearest2x: undefined tensor");
  if (xn->shape.size() != 5)
    throw DimensionError("upsample_nearest2x: input must be rank 5 (N,C,D,H,W)");
  const int n = xn->shape[0], c = xn->shape[1];
  const int d = xn->shape[2], h = xn->shape[3], w = xn->shape[4];
  auto out = make_op<T>({n, c, 2 * d, 2 * h, 2 * w}, {xn});

  const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t out_w = 2 * w;
  const std::int64_t out_plane = static_cast<std::int64_t>(2 * h) * out_w;
  for (int nc = 0; nc < n * c; ++nc) {
    const T* src = xn->value.data() + static_cast<std::int64_t>(nc) * d * in_plane;
    T* dst = out->value.data() + static_cast<std::int64_t>(nc) * (2 * d) * out_plane;
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y) {
        const T* row = src + z * in_plane + static_cast<std::int64_t>(y) * w;
        for (int zz = 0; zz < 2; ++zz)
          for (int yy = 0; yy < 2; ++yy) {
            T* orow = dst + (2 * z + zz) * out_plane + (2 * y + yy) * out_w;
            for (int xx = 0; xx < w; ++xx) {
              orow[2 * xx] = row[xx];
              orow[2 * xx + 1] = row[xx];
            }
          }
      }
  }

  if (out->requires_grad) {
    out->backprop = [xn, n, c, d, h, w](Node<T>& self) {
      ensure_grad(*xn);
      const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
      const std::int64_t out_w = 2 * w;
      const std::int64_t out_plane = static_cast<std::int64_t>(2 * h) * out_w;
      for (int nc = 0; nc < n * c; ++nc) {
        T* gx = xn->grad.data() + static_cast<std::int64_t>(nc) * d * in_plane;
        const T* go = self.grad.data() + static_cast<std::int64_t>(nc) * (2 * d) * out_plane;
        for (int z = 0; z < d; ++z)
          for (int y = 0; y < h; ++y) {
            T* grow = gx + z * in_plane + static_cast<std::int64_t>(y) * w;
            for (int zz = 0; zz < 2; ++zz)
              for (int yy = 0; yy < 2; ++yy) {
                const T* orow = go + (2 * z + zz) * out_plane + (2 * y + yy) * out_w;
                for (int xx = 0; xx < w; ++xx)
                  grow[xx] += orow[2 * xx] + orow[2 * xx + 1];
              }
          }
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
void zero_grads(std::vector<Parameter<T>>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <class T>
void Adam<T>::step(std::vector<Parameter<T>>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::size_t n = static_cast<std::size_t>(params[i].tensor.numel());
      m_[i].assign(n, T(0));
      v_[i].assign(n, T(0));
    }
  }
  if (m_.size() != params.size())
    throw UsageError("adam: parameter list changed between steps");

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    if (!p.tensor.has_grad())
      throw UsageError("adam: parameter '" + p.name + "' has no gradient");
    auto w = p.tensor.values();
    auto g = p.tensor.grad();
    if (m_[i].size() != w.size()) throw UsageError("adam: parameter size changed");
    for (std::size_t j = 0; j < w.size(); ++j) {
      double grad = static_cast<double>(g[j]) + cfg_.weight_decay * static_cast<double>(w[j]);
      double m = cfg_.beta1 * static_cast<double>(m_[i][j]) + (1.0 - cfg_.beta1) * grad;
      double v = cfg_.beta2 * static_cast<double>(v_[i][j]) + (1.0 - cfg_.beta2) * grad * grad;
      m_[i][j] = static_cast<T>(m);
      v_[i][j] = static_cast<T>(v);
      double update = cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
    }
  }
}

// Explicit instantiations: 32-bit for training, 64-bit for verification.
template class Tensor<float>;
template class Tensor<double>;
template class Adam<float>;
template class Adam<double>;

#define MPAE_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,    \
                               int, PadMode);                                                 \
  template Tensor<T> weight_standardize<T>(const Tensor<T>&, T);                             \
  template Tensor<T> group_norm<T>(const Tensor<T>&, int, const Tensor<T>&, const Tensor<T>&, \
                                   T);                                                        \
  template Tensor<T> activation<T>(const Tensor<T>&, Act);                                    \
  template Tensor<T> loss<T>(const Tensor<T>&, const Tensor<T>&, LossKind);                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                \
  template Tensor<T> upsample_nearest2x<T>(const Tensor<T>&);                                 \
  template void zero_grads<T>(std::vector<Parameter<T>>&);

MPAE_INSTANTIATE_OPS(float)
MPAE_INSTANTIATE_OPS(double)

#undef MPAE_INSTANTIATE_OPS

}  // namespace mpae::tensor
