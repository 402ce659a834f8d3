#include "ean/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>

namespace ean {

namespace {

std::int64_t prod(const std::vector<std::int64_t>& v) {
  std::int64_t p = 1;
  for (auto e : v) p *= e;
  return p;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

// Per-axis output extent and low-side padding under the "same" rule
// (out = ceil(in / stride)) or an explicit symmetric padding.
void resolve_axis(std::int64_t in, std::int64_t k, std::int64_t st, std::int64_t dil,
                  bool explicit_pad, std::int64_t pad, std::int64_t& out,
                  std::int64_t& pad_lo) {
  const std::int64_t eff = (k - 1) * dil + 1;
  if (explicit_pad) {
    const std::int64_t span = in + 2 * pad - eff;
    check(span >= 0, "convolution window larger than padded input (extent " +
                         std::to_string(in) + ", effective kernel " +
                         std::to_string(eff) + ", padding " + std::to_string(pad) + ")");
    out = span / st + 1;
    pad_lo = pad;
  } else {
    out = ceil_div(in, st);
    const std::int64_t total = std::max<std::int64_t>(0, (out - 1) * st + eff - in);
    pad_lo = total / 2;
  }
}

}  // namespace

// ---- ConvSpec ---------------------------------------------------------------

ConvSpec ConvSpec::normalized() const {
  ConvSpec s = *this;
  const std::size_t m = static_cast<std::size_t>(s.axes());
  check(s.kernel.size() == m, "conv spec: expected " + std::to_string(m) +
                                  " kernel extents, got " + std::to_string(s.kernel.size()));
  if (s.stride.empty()) s.stride.assign(m, 1);
  if (s.dilation.empty()) s.dilation.assign(m, 1);
  check(s.stride.size() == m, "conv spec: stride length mismatch");
  check(s.dilation.size() == m, "conv spec: dilation length mismatch");
  check(s.padding.empty() || s.padding.size() == m, "conv spec: padding length mismatch");
  check(s.groups >= 1, "conv spec: groups must be positive");
  for (std::size_t i = 0; i < m; ++i) {
    check(s.kernel[i] >= 1 && s.kernel[i] % 2 == 1,
          "conv spec: kernel extents must be odd, got " + std::to_string(s.kernel[i]));
    check(s.stride[i] >= 1 && s.dilation[i] >= 1,
          "conv spec: stride and dilation must be positive");
    if (!s.padding.empty())
      check(s.padding[i] >= 0, "conv spec: padding must be nonnegative");
  }
  return s;
}

ConvSpec conv_spec(ConvKind kind, std::vector<std::int64_t> kernel,
                   std::vector<std::int64_t> stride,
                   std::vector<std::int64_t> dilation, std::int64_t groups) {
  ConvSpec s;
  s.kind = kind;
  s.kernel = std::move(kernel);
  s.stride = std::move(stride);
  s.dilation = std::move(dilation);
  s.groups = groups;
  return s.normalized();
}

// ---- unfold -----------------------------------------------------------------

namespace {

// Walks every (sample, channel, kernel-position, output-position) pair once.
// Gather copies input sites into the column buffer; Scatter accumulates the
// column buffer back into the input-shaped buffer (the transpose).
template <typename T, bool Scatter>
void unfold_walk(const T* xs_in, T* cols_out, T* xs_out, const T* cols_in,
                 std::int64_t N, std::int64_t C, const std::vector<std::int64_t>& S,
                 const std::vector<std::int64_t>& K, const std::vector<std::int64_t>& ST,
                 const std::vector<std::int64_t>& DIL, const std::vector<std::int64_t>& PAD,
                 const std::vector<std::int64_t>& O) {
  const int m = static_cast<int>(S.size());
  const std::int64_t sprod = prod(S), kprod = prod(K), oprod = prod(O);
  std::vector<std::int64_t> xstr(static_cast<std::size_t>(m), 1);
  std::vector<std::int64_t> ostr(static_cast<std::size_t>(m), 1);
  for (int i = m - 2; i >= 0; --i) {
    xstr[i] = xstr[i + 1] * S[i + 1];
    ostr[i] = ostr[i + 1] * O[i + 1];
  }
  std::vector<std::int64_t> off(static_cast<std::size_t>(m), 0);
  std::vector<std::int64_t> o(static_cast<std::size_t>(m), 0);
  const std::int64_t st_in = ST[m - 1], s_ext = S[m - 1], o_ext = O[m - 1];

  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int64_t xplane = (n * C + c) * sprod;
      for (std::int64_t kidx = 0; kidx < kprod; ++kidx) {
        std::int64_t rem = kidx;
        for (int i = m - 1; i >= 0; --i) {
          off[i] = (rem % K[i]) * DIL[i] - PAD[i];
          rem /= K[i];
        }
        // Valid output range along the innermost axis.
        const std::int64_t off_in = off[m - 1];
        std::int64_t olo = off_in < 0 ? ceil_div(-off_in, st_in) : 0;
        std::int64_t ohi = -1;
        if (s_ext - 1 - off_in >= 0) ohi = std::min(o_ext - 1, (s_ext - 1 - off_in) / st_in);

        const std::int64_t colplane = ((n * C + c) * kprod + kidx) * oprod;
        std::fill(o.begin(), o.end(), 0);
        for (;;) {
          bool valid = true;
          std::int64_t xoff = 0, oflat = 0;
          for (int i = 0; i < m - 1; ++i) {
            const std::int64_t s = o[i] * ST[i] + off[i];
            if (s < 0 || s >= S[i]) {
              valid = false;
              break;
            }
            xoff += s * xstr[i];
            oflat += o[i] * ostr[i];
          }
          if (valid && ohi >= olo) {
            if constexpr (Scatter) {
              T* xrow = xs_out + xplane + xoff;
              const T* crow = cols_in + colplane + oflat;
              for (std::int64_t oi = olo; oi <= ohi; ++oi)
                xrow[oi * st_in + off_in] += crow[oi];
            } else {
              const T* xrow = xs_in + xplane + xoff;
              T* crow = cols_out + colplane + oflat;
              for (std::int64_t oi = olo; oi <= ohi; ++oi)
                crow[oi] = xrow[oi * st_in + off_in];
            }
          }
          int i = m - 2;
          for (; i >= 0; --i) {
            if (++o[i] < O[i]) break;
            o[i] = 0;
          }
          if (i < 0) break;
        }
      }
    }
  }
}

}  // namespace

Tensor unfold(const Tensor& x, const std::vector<std::int64_t>& kernel,
              const std::vector<std::int64_t>& stride,
              const std::vector<std::int64_t>& dilation,
              const std::vector<std::int64_t>& pad_lo,
              const std::vector<std::int64_t>& out_extents) {
  const std::size_t m = kernel.size();
  check(m >= 1, "unfold: need at least one sliding axis");
  check(stride.size() == m && dilation.size() == m && pad_lo.size() == m &&
            out_extents.size() == m,
        "unfold: kernel/stride/dilation/padding/output vectors must have equal length");
  check(x.rank() == static_cast<int>(m) + 2,
        "unfold: input rank must be 2 + sliding axes, got shape " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1);
  std::vector<std::int64_t> S;
  for (std::size_t i = 0; i < m; ++i) S.push_back(x.dim(static_cast<int>(i) + 2));
  for (std::size_t i = 0; i < m; ++i) {
    check(kernel[i] >= 1 && stride[i] >= 1 && dilation[i] >= 1 && pad_lo[i] >= 0 &&
              out_extents[i] >= 1,
          "unfold: non-positive geometry entry");
  }
  const std::int64_t kprod = prod(kernel), oprod = prod(out_extents);

  Tensor out = Tensor::zeros({N, C * kprod, oprod}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = typename decltype(tag)::type;
    unfold_walk<T, false>(x.vec<T>().data(), out.mutable_vec<T>().data(), nullptr,
                          nullptr, N, C, S, kernel, stride, dilation, pad_lo,
                          out_extents);
  });

  Tensor xc = x;
  std::vector<std::int64_t> k = kernel, st = stride, dil = dilation, pl = pad_lo,
                            oe = out_extents;
  autograd_record(out, {x}, [xc, k, st, dil, pl, oe, N, C, S](const Tensor& g) {
    Tensor gx = Tensor::zeros(xc.shape(), xc.dtype());
    dispatch(xc.dtype(), [&](auto tag) {
      using T = typename decltype(tag)::type;
      unfold_walk<T, true>(nullptr, nullptr, gx.mutable_vec<T>().data(),
                           g.vec<T>().data(), N, C, S, k, st, dil, pl, oe);
    });
    accumulate_grad(xc, gx);
  });
  return out;
}

// ---- conv -------------------------------------------------------------------

namespace {

// Geometry of a convolution over [B, C, T, H, W], with the spec's convolved
// axes embedded into the full (T, H, W) triple (untouched axes get kernel 1).
struct ConvGeom {
  std::int64_t B, Cin, Cout, G, Cg, Cog, kprod;
  std::vector<std::int64_t> K, ST, DIL, PAD, S, OUT;  // length 3 each
};

ConvGeom resolve_conv(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  const int m = spec.axes();
  check(x.rank() == 5,
        "conv: input must be [B, C, T, H, W], got " + shape_str(x.shape()));
  check(w.rank() == m + 2, "conv: weight rank must be " + std::to_string(m + 2) +
                               " for this kind, got " + shape_str(w.shape()));
  ConvGeom gm;
  gm.B = x.dim(0);
  gm.Cin = x.dim(1);
  gm.Cout = w.dim(0);
  gm.G = spec.groups;
  check(gm.Cin % gm.G == 0, "conv: input channels " + std::to_string(gm.Cin) +
                                " not divisible by groups " + std::to_string(gm.G));
  check(gm.Cout % gm.G == 0, "conv: output channels " + std::to_string(gm.Cout) +
                                 " not divisible by groups " + std::to_string(gm.G));
  gm.Cg = gm.Cin / gm.G;
  gm.Cog = gm.Cout / gm.G;
  check(w.dim(1) == gm.Cg, "conv: weight expects " + std::to_string(w.dim(1)) +
                               " channels per group, input provides " +
                               std::to_string(gm.Cg));
  for (int i = 0; i < m; ++i)
    check(w.dim(2 + i) == spec.kernel[static_cast<std::size_t>(i)],
          "conv: weight kernel extents " + shape_str(w.shape()) +
              " do not match the spec");

  gm.K.assign(3, 1);
  gm.ST.assign(3, 1);
  gm.DIL.assign(3, 1);
  gm.PAD.assign(3, 0);
  gm.S = {x.dim(2), x.dim(3), x.dim(4)};
  gm.OUT.assign(3, 0);
  const int base = spec.kind == ConvKind::Spatial2D ? 1 : 0;
  for (int i = 0; i < m; ++i) {
    gm.K[base + i] = spec.kernel[static_cast<std::size_t>(i)];
    gm.ST[base + i] = spec.stride[static_cast<std::size_t>(i)];
    gm.DIL[base + i] = spec.dilation[static_cast<std::size_t>(i)];
  }
  for (int a = 0; a < 3; ++a) {
    const bool convolved = a >= base && a < base + m;
    const bool explicit_pad = convolved && !spec.padding.empty();
    const std::int64_t pad =
        explicit_pad ? spec.padding[static_cast<std::size_t>(a - base)] : 0;
    resolve_axis(gm.S[a], gm.K[a], gm.ST[a], gm.DIL[a], explicit_pad, pad, gm.OUT[a],
                 gm.PAD[a]);
  }
  gm.kprod = gm.K[0] * gm.K[1] * gm.K[2];
  return gm;
}

}  // namespace

Tensor conv(const Tensor& x, const Tensor& w, const ConvSpec& spec_in) {
  const ConvSpec spec = spec_in.normalized();
  const ConvGeom g = resolve_conv(x, w, spec);

  Tensor cols = unfold(x, g.K, g.ST, g.DIL, g.PAD, g.OUT);  // [B, Cin*kprod, O]
  Tensor wmat = reshape(w, {g.Cout, g.Cg * g.kprod});
  Tensor y2;
  if (g.G == 1) {
    y2 = matmul(wmat, cols);  // [B, Cout, O]
  } else {
    std::vector<Tensor> parts;
    for (std::int64_t grp = 0; grp < g.G; ++grp) {
      Tensor cg = slice(cols, 1, grp * g.Cg * g.kprod, g.Cg * g.kprod);
      Tensor wg = slice(wmat, 0, grp * g.Cog, g.Cog);
      parts.push_back(matmul(wg, cg));
    }
    y2 = concat(parts, 1);
  }
  return reshape(y2, {g.B, g.Cout, g.OUT[0], g.OUT[1], g.OUT[2]});
}

Tensor conv_oracle(const Tensor& x, const Tensor& w, const ConvSpec& spec_in) {
  const ConvSpec spec = spec_in.normalized();
  const ConvGeom g = resolve_conv(x, w, spec);

  Tensor y = Tensor::zeros({g.B, g.Cout, g.OUT[0], g.OUT[1], g.OUT[2]}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = typename decltype(tag)::type;
    const T* xp = x.vec<T>().data();
    const T* wp = w.vec<T>().data();
    T* yp = y.mutable_vec<T>().data();
    const std::int64_t sT = g.S[0], sH = g.S[1], sW = g.S[2];
    std::int64_t yi = 0;
    for (std::int64_t b = 0; b < g.B; ++b)
      for (std::int64_t co = 0; co < g.Cout; ++co) {
        const std::int64_t cbase = (co / g.Cog) * g.Cg;
        for (std::int64_t ot = 0; ot < g.OUT[0]; ++ot)
          for (std::int64_t oh = 0; oh < g.OUT[1]; ++oh)
            for (std::int64_t ow = 0; ow < g.OUT[2]; ++ow, ++yi) {
              double acc = 0.0;
              for (std::int64_t cg = 0; cg < g.Cg; ++cg) {
                const T* xc = xp + ((b * g.Cin + cbase + cg) * sT) * sH * sW;
                const T* wc = wp + (co * g.Cg + cg) * g.kprod;
                std::int64_t kk = 0;
                for (std::int64_t kt = 0; kt < g.K[0]; ++kt) {
                  const std::int64_t t = ot * g.ST[0] + kt * g.DIL[0] - g.PAD[0];
                  for (std::int64_t kh = 0; kh < g.K[1]; ++kh) {
                    const std::int64_t h = oh * g.ST[1] + kh * g.DIL[1] - g.PAD[1];
                    for (std::int64_t kw = 0; kw < g.K[2]; ++kw, ++kk) {
                      const std::int64_t wpos = ow * g.ST[2] + kw * g.DIL[2] - g.PAD[2];
                      if (t < 0 || t >= sT || h < 0 || h >= sH || wpos < 0 || wpos >= sW)
                        continue;
                      acc += static_cast<double>(xc[(t * sH + h) * sW + wpos]) *
                             static_cast<double>(wc[kk]);
                    }
                  }
                }
              }
              yp[yi] = static_cast<T>(acc);
            }
      }
  });
  return y;
}

// ---- pooling ----------------------------------------------------------------

Tensor pool3d(const Tensor& x, PoolKind kind, std::vector<std::int64_t> kernel,
              std::vector<std::int64_t> stride, std::vector<std::int64_t> padding) {
  check(x.rank() == 5,
        "pool3d: input must be [B, C, T, H, W], got " + shape_str(x.shape()));
  check(kernel.size() == 3 && stride.size() == 3,
        "pool3d: kernel and stride must each have 3 extents");
  check(padding.empty() || padding.size() == 3,
        "pool3d: padding must be empty (same) or have 3 extents");
  const std::int64_t B = x.dim(0), C = x.dim(1);
  const std::vector<std::int64_t> S{x.dim(2), x.dim(3), x.dim(4)};
  std::vector<std::int64_t> OUT(3), PAD(3);
  for (int a = 0; a < 3; ++a)
    resolve_axis(S[a], kernel[a], stride[a], 1, !padding.empty(),
                 padding.empty() ? 0 : padding[a], OUT[a], PAD[a]);

  const std::int64_t oprod = OUT[0] * OUT[1] * OUT[2];
  const std::int64_t sprod = S[0] * S[1] * S[2];
  Tensor y = Tensor::zeros({B, C, OUT[0], OUT[1], OUT[2]}, x.dtype());
  std::vector<std::int64_t> argmax;
  if (kind == PoolKind::Max) argmax.assign(static_cast<std::size_t>(B * C * oprod), -1);

  dispatch(x.dtype(), [&](auto tag) {
    using T = typename decltype(tag)::type;
    const T* xp = x.vec<T>().data();
    T* yp = y.mutable_vec<T>().data();
    std::int64_t yi = 0;
    for (std::int64_t p = 0; p < B * C; ++p) {
      const T* plane = xp + p * sprod;
      for (std::int64_t ot = 0; ot < OUT[0]; ++ot)
        for (std::int64_t oh = 0; oh < OUT[1]; ++oh)
          for (std::int64_t ow = 0; ow < OUT[2]; ++ow, ++yi) {
            const std::int64_t t0 = ot * stride[0] - PAD[0];
            const std::int64_t h0 = oh * stride[1] - PAD[1];
            const std::int64_t w0 = ow * stride[2] - PAD[2];
            const std::int64_t tl = std::max<std::int64_t>(0, t0),
                               th = std::min(S[0] - 1, t0 + kernel[0] - 1);
            const std::int64_t hl = std::max<std::int64_t>(0, h0),
                               hh = std::min(S[1] - 1, h0 + kernel[1] - 1);
            const std::int64_t wl = std::max<std::int64_t>(0, w0),
                               wh = std::min(S[2] - 1, w0 + kernel[2] - 1);
            if (kind == PoolKind::Max) {
              T best = -std::numeric_limits<T>::infinity();
              std::int64_t arg = -1;
              for (std::int64_t t = tl; t <= th; ++t)
                for (std::int64_t h = hl; h <= hh; ++h)
                  for (std::int64_t wv = wl; wv <= wh; ++wv) {
                    const std::int64_t idx = (t * S[1] + h) * S[2] + wv;
                    if (plane[idx] > best) {
                      best = plane[idx];
                      arg = p * sprod + idx;
                    }
                  }
              yp[yi] = arg >= 0 ? best : T(0);
              argmax[static_cast<std::size_t>(yi)] = arg;
            } else {
              double acc = 0.0;
              std::int64_t cnt = 0;
              for (std::int64_t t = tl; t <= th; ++t)
                for (std::int64_t h = hl; h <= hh; ++h)
                  for (std::int64_t wv = wl; wv <= wh; ++wv, ++cnt)
                    acc += static_cast<double>(plane[(t * S[1] + h) * S[2] + wv]);
              yp[yi] = cnt > 0 ? static_cast<T>(acc / static_cast<double>(cnt)) : T(0);
            }
          }
    }
  });

  Tensor xc = x;
  if (kind == PoolKind::Max) {
    autograd_record(y, {x}, [xc, argmax](const Tensor& g) {
      Tensor gx = Tensor::zeros(xc.shape(), xc.dtype());
      dispatch(xc.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        const T* gp = g.vec<T>().data();
        T* gxp = gx.mutable_vec<T>().data();
        for (std::size_t i = 0; i < argmax.size(); ++i)
          if (argmax[i] >= 0) gxp[argmax[i]] += gp[i];
      });
      accumulate_grad(xc, gx);
    });
  } else {
    std::vector<std::int64_t> K = kernel, ST = stride;
    autograd_record(y, {x}, [xc, K, ST, PAD, S, OUT, B, C, sprod](const Tensor& g) {
      Tensor gx = Tensor::zeros(xc.shape(), xc.dtype());
      dispatch(xc.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        const T* gp = g.vec<T>().data();
        T* gxp = gx.mutable_vec<T>().data();
        std::int64_t yi = 0;
        for (std::int64_t p = 0; p < B * C; ++p) {
          T* plane = gxp + p * sprod;
          for (std::int64_t ot = 0; ot < OUT[0]; ++ot)
            for (std::int64_t oh = 0; oh < OUT[1]; ++oh)
              for (std::int64_t ow = 0; ow < OUT[2]; ++ow, ++yi) {
                const std::int64_t t0 = ot * ST[0] - PAD[0];
                const std::int64_t h0 = oh * ST[1] - PAD[1];
                const std::int64_t w0 = ow * ST[2] - PAD[2];
                const std::int64_t tl = std::max<std::int64_t>(0, t0),
                                   th = std::min(S[0] - 1, t0 + K[0] - 1);
                const std::int64_t hl = std::max<std::int64_t>(0, h0),
                                   hh = std::min(S[1] - 1, h0 + K[1] - 1);
                const std::int64_t wl = std::max<std::int64_t>(0, w0),
                                   wh = std::min(S[2] - 1, w0 + K[2] - 1);
                const std::int64_t cnt =
                    (th - tl + 1) * (hh - hl + 1) * (wh - wl + 1);
                if (cnt <= 0) continue;
                const T share = gp[yi] / static_cast<T>(cnt);
                for (std::int64_t t = tl; t <= th; ++t)
                  for (std::int64_t h = hl; h <= hh; ++h)
                    for (std::int64_t wv = wl; wv <= wh; ++wv)
                      plane[(t * S[1] + h) * S[2] + wv] += share;
              }
        }
      });
      accumulate_grad(xc, gx);
    });
  }
  return y;
}

Tensor global_avg_pool(const Tensor& x, const std::vector<int>& axes) {
  return mean(x, axes);
}

// ---- batchnorm --------------------------------------------------------------

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 const Tensor& running_mean, const Tensor& running_var,
                 bool training, int channel_axis, double momentum, double eps) {
  const int rank = x.rank();
  const int ca = channel_axis < 0 ? channel_axis + rank : channel_axis;
  check(ca >= 0 && ca < rank, "batchnorm: channel axis out of range");
  const std::int64_t C = x.dim(ca);
  for (const Tensor* t : {&gamma, &beta, &running_mean, &running_var})
    check(t->numel() == C, "batchnorm: state sized " + std::to_string(t->numel()) +
                               " does not match " + std::to_string(C) + " channels");

  Shape bshape(static_cast<std::size_t>(rank), 1);
  bshape[static_cast<std::size_t>(ca)] = C;
  std::vector<int> axes;
  for (int i = 0; i < rank; ++i)
    if (i != ca) axes.push_back(i);

  Tensor y;
  if (training) {
    Tensor mu_flat = mean(x, axes);  // [C]
    Tensor mu = reshape(mu_flat, bshape);
    Tensor xc = sub(x, mu);
    Tensor var_flat = mean(mul(xc, xc), axes);  // biased variance, [C]
    Tensor var = reshape(var_flat, bshape);
    y = div(xc, sqrt(add_scalar(var, eps)));
    {
      NoGradGuard ng;
      copy_values(running_mean, add(mul_scalar(running_mean, 1.0 - momentum),
                                    mul_scalar(mu_flat.detach(), momentum)));
      copy_values(running_var, add(mul_scalar(running_var, 1.0 - momentum),
                                   mul_scalar(var_flat.detach(), momentum)));
    }
  } else {
    Tensor rm = reshape(running_mean, bshape);
    Tensor rv = reshape(running_var, bshape);
    y = div(sub(x, rm), sqrt(add_scalar(rv, eps)));
  }
  return add(mul(y, reshape(gamma, bshape)), reshape(beta, bshape));
}

// ---- linear / attention -----------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check(w.rank() == 2, "linear: weight must be [d_in, d_out], got " + shape_str(w.shape()));
  check(x.rank() >= 1, "linear: input must have at least one axis");
  check(x.dim(x.rank() - 1) == w.dim(0),
        "linear: input trailing dim " + std::to_string(x.dim(x.rank() - 1)) +
            " does not match weight d_in " + std::to_string(w.dim(0)));
  const bool was_1d = x.rank() == 1;
  Tensor x2 = was_1d ? reshape(x, {1, x.dim(0)}) : x;
  Tensor y = matmul(x2, w);
  if (b.defined()) {
    check(b.numel() == w.dim(1), "linear: bias sized " + std::to_string(b.numel()) +
                                     " does not match d_out " + std::to_string(w.dim(1)));
    y = add(y, b);
  }
  return was_1d ? reshape(y, {w.dim(1)}) : y;
}

Tensor multihead_self_attention(const Tensor& tokens, const Tensor& wq,
                                const Tensor& wk, const Tensor& wv,
                                const Tensor& wo, std::int64_t heads) {
  check(tokens.rank() == 3,
        "attention: tokens must be [B, L, d], got " + shape_str(tokens.shape()));
  const std::int64_t B = tokens.dim(0), L = tokens.dim(1), d = tokens.dim(2);
  check(heads >= 1 && d % heads == 0,
        "attention: model dim " + std::to_string(d) + " not divisible by " +
            std::to_string(heads) + " heads");
  const std::int64_t dh = d / heads;

  auto split = [&](const Tensor& t) {
    return permute(reshape(t, {B, L, heads, dh}), {0, 2, 1, 3});  // [B, h, L, dh]
  };
  Tensor Q = split(matmul(tokens, wq));
  Tensor K = split(matmul(tokens, wk));
  Tensor V = split(matmul(tokens, wv));
  Tensor scores =
      mul_scalar(matmul(Q, permute(K, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, 3);  // rows sum to 1
  Tensor ctx = matmul(attn, V);      // [B, h, L, dh]
  Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {B, L, d});
  return matmul(merged, wo);
}

// ---- misc -------------------------------------------------------------------

void copy_values(const Tensor& dst, const Tensor& src) {
  check(dst.shape() == src.shape(), "copy_values: shape mismatch " +
                                        shape_str(dst.shape()) + " vs " +
                                        shape_str(src.shape()));
  check(dst.dtype() == src.dtype(), "copy_values: dtype mismatch");
  dispatch(dst.dtype(), [&](auto tag) {
    using T = typename decltype(tag)::type;
    const auto& s = src.vec<T>();
    auto& d = const_cast<Tensor&>(dst).mutable_vec<T>();
    std::copy(s.begin(), s.end(), d.begin());
  });
}

// ---- module system ----------------------------------------------------------

void Module::train(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->train(on);
}

void Module::collect(const std::string& prefix, bool with_buffers,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
  for (const auto& [name, t] : params_) out.emplace_back(prefix + name, t);
  if (with_buffers)
    for (const auto& [name, t] : buffers_) out.emplace_back(prefix + name, t);
  for (const auto& [name, child] : children_)
    child->collect(prefix + name + ".", with_buffers, out);
}

std::vector<std::pair<std::string, Tensor>> Module::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  collect("", false, out);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Module::named_state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  collect("", true, out);
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void Module::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

Tensor Module::register_parameter(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(name, t);
  return t;
}

Tensor Module::register_buffer(const std::string& name, Tensor t) {
  buffers_.emplace_back(name, t);
  return t;
}

// ---- layers -----------------------------------------------------------------

Conv::Conv(std::int64_t in_ch, std::int64_t out_ch, ConvSpec spec_in, bool with_bias,
           DType dt, Rng& rng, bool zero_init)
    : spec(spec_in.normalized()), in_channels(in_ch), out_channels(out_ch) {
  check(in_ch % spec.groups == 0, "conv layer: in_channels " + std::to_string(in_ch) +
                                      " not divisible by groups " +
                                      std::to_string(spec.groups));
  check(out_ch % spec.groups == 0, "conv layer: out_channels " + std::to_string(out_ch) +
                                       " not divisible by groups " +
                                       std::to_string(spec.groups));
  Shape ws{out_ch, in_ch / spec.groups};
  std::int64_t kprod = 1;
  for (auto k : spec.kernel) {
    ws.push_back(k);
    kprod *= k;
  }
  const std::int64_t fan_in = (in_ch / spec.groups) * kprod;
  w = register_parameter(
      "weight", zero_init ? Tensor::zeros(ws, dt)
                          : Tensor::randn(ws, rng, std::sqrt(2.0 / static_cast<double>(fan_in)), dt));
  if (with_bias) b = register_parameter("bias", Tensor::zeros({out_ch}, dt));
}

Tensor Conv::forward(const Tensor& x) {
  Tensor y = conv(x, w, spec);
  if (b.defined()) y = add(y, reshape(b, {1, out_channels, 1, 1, 1}));
  return y;
}

BatchNorm::BatchNorm(std::int64_t ch, int axis, DType dt)
    : channels(ch), channel_axis(axis) {
  gamma = register_parameter("gamma", Tensor::full({ch}, 1.0, dt));
  beta = register_parameter("beta", Tensor::zeros({ch}, dt));
  running_mean = register_buffer("running_mean", Tensor::zeros({ch}, dt));
  running_var = register_buffer("running_var", Tensor::full({ch}, 1.0, dt));
}

Tensor BatchNorm::forward(const Tensor& x) {
  return batchnorm(x, gamma, beta, running_mean, running_var, is_training(),
                   channel_axis);
}

Linear::Linear(std::int64_t in, std::int64_t out, bool with_bias, DType dt, Rng& rng,
               bool zero_init)
    : d_in(in), d_out(out) {
  w = register_parameter(
      "weight", zero_init ? Tensor::zeros({in, out}, dt)
                          : Tensor::randn({in, out}, rng,
                                          std::sqrt(1.0 / static_cast<double>(in)), dt));
  if (with_bias) b = register_parameter("bias", Tensor::zeros({out}, dt));
}

Tensor Linear::forward(const Tensor& x) { return linear(x, w, b); }

MultiheadSelfAttention::MultiheadSelfAttention(std::int64_t d, std::int64_t h, DType dt,
                                               Rng& rng, bool zero_init_out)
    : dim(d), heads(h) {
  check(h >= 1 && d % h == 0, "attention: model dim " + std::to_string(d) +
                                  " not divisible by " + std::to_string(h) + " heads");
  const double s = std::sqrt(1.0 / static_cast<double>(d));
  wq = register_parameter("wq", Tensor::randn({d, d}, rng, s, dt));
  wk = register_parameter("wk", Tensor::randn({d, d}, rng, s, dt));
  wv = register_parameter("wv", Tensor::randn({d, d}, rng, s, dt));
  wo = register_parameter("wo", zero_init_out ? Tensor::zeros({d, d}, dt)
                                              : Tensor::randn({d, d}, rng, s, dt));
}

Tensor MultiheadSelfAttention::forward(const Tensor& tokens) {
  return multihead_self_attention(tokens, wq, wk, wv, wo, heads);
}

}  // namespace ean
