#pragma once

#include "sarmae/tensor.hpp"

namespace sarmae {

namespace detail {

// im2col: x_s [c,h,w] -> cols [c*kh*kw, oh*ow]
template <typename S>
void im2col(const S* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, S* cols) {
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                S* row = cols + ((ch * kh + ky) * kw + kx) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        row[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(ch * h + iy) * w + ix]
                                                : S(0);
                    }
                }
            }
}

template <typename S>
void col2im_accum(const S* cols, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
                  std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
                  std::int64_t ow, S* x) {
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t ky = 0; ky < kh; ++ky)
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                const S* row = cols + ((ch * kh + ky) * kw + kx) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        x[(ch * h + iy) * w + ix] += row[oy * ow + ox];
                    }
                }
            }
}

}  // namespace detail

// Cross-correlation, x [n,c,h,w] * w [o,c,kh,kw], no bias (see add_channel_bias).
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, std::int64_t stride = 1,
                  std::int64_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4) shape_error("conv2d expects 4-d input and kernel");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t oc = w.dim(0), kc = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (kc != c) shape_error("conv2d channel mismatch");
    if (h + 2 * pad < kh || wd + 2 * pad < kw) shape_error("conv2d kernel larger than padded input");
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    const std::int64_t ckk = c * kh * kw;
    std::vector<S> out(static_cast<std::size_t>(n * oc * oh * ow));
    std::vector<S> cols(static_cast<std::size_t>(ckk * oh * ow));
    detail::ConstMatMap<S> W(w.raw().data(), oc, ckk);
    for (std::int64_t s = 0; s < n; ++s) {
        detail::im2col(x.raw().data() + s * c * h * wd, c, h, wd, kh, kw, stride, pad, oh, ow,
                       cols.data());
        detail::ConstMatMap<S> C(cols.data(), ckk, oh * ow);
        detail::MatMap<S> Y(out.data() + s * oc * oh * ow, oc, oh * ow);
        Y.noalias() = W * C;
    }
    auto xn = x.node();
    auto wn = w.node();
    return detail::make_result<S>(
        {n, oc, oh, ow}, std::move(out), {x, w},
        [xn, wn, n, c, h, wd, oc, kh, kw, stride, pad, oh, ow, ckk](Node<S>& o) {
            std::vector<S> cols(static_cast<std::size_t>(ckk * oh * ow));
            detail::ConstMatMap<S> W(wn->data.data(), oc, ckk);
            for (std::int64_t s = 0; s < n; ++s) {
                detail::ConstMatMap<S> G(o.grad.data() + s * oc * oh * ow, oc, oh * ow);
                if (wn->requires_grad) {
                    wn->ensure_grad();
                    detail::im2col(xn->data.data() + s * c * h * wd, c, h, wd, kh, kw, stride, pad,
                                   oh, ow, cols.data());
                    detail::ConstMatMap<S> C(cols.data(), ckk, oh * ow);
                    detail::MatMap<S> dW(wn->grad.data(), oc, ckk);
                    dW.noalias() += G * C.transpose();
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    detail::MatMap<S> dC(cols.data(), ckk, oh * ow);
                    dC.noalias() = W.transpose() * G;
                    detail::col2im_accum(cols.data(), c, h, wd, kh, kw, stride, pad, oh, ow,
                                         xn->grad.data() + s * c * h * wd);
                }
            }
        });
}

// bias over the channel axis of [n,c,h,w]
template <typename S>
TensorT<S> add_channel_bias(const TensorT<S>& x, const TensorT<S>& b) {
    if (x.rank() != 4 || b.numel() != x.dim(1)) shape_error("add_channel_bias");
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<S> out(x.raw().size());
    for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const S bv = b.raw()[ch];
            const S* src = x.raw().data() + (s * c + ch) * hw;
            S* dst = out.data() + (s * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
        }
    auto xn = x.node();
    auto bn = b.node();
    return detail::make_result<S>(x.shape(), std::move(out), {x, b},
                                  [xn, bn, n, c, hw](Node<S>& o) {
                                      if (xn->requires_grad) {
                                          xn->ensure_grad();
                                          for (std::size_t i = 0; i < o.grad.size(); ++i)
                                              xn->grad[i] += o.grad[i];
                                      }
                                      if (bn->requires_grad) {
                                          bn->ensure_grad();
                                          for (std::int64_t s = 0; s < n; ++s)
                                              for (std::int64_t ch = 0; ch < c; ++ch) {
                                                  const S* g = o.grad.data() + (s * c + ch) * hw;
                                                  double acc = 0;
                                                  for (std::int64_t i = 0; i < hw; ++i) acc += g[i];
                                                  bn->grad[ch] += static_cast<S>(acc);
                                              }
                                  });
}

// Bilinear 2x upsampling, align_corners=false: output center (o+0.5)/2-0.5 in
// input coordinates, edge samples clamped.
template <typename S>
TensorT<S> upsample2x(const TensorT<S>& x) {
    if (x.rank() != 4) shape_error("upsample2x expects [n,c,h,w]");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = 2 * h, ow = 2 * w;

    // per-axis source index pair + weight
    auto axis_plan = [](std::int64_t in, std::int64_t out) {
        std::vector<std::int64_t> i0(out), i1(out);
        std::vector<S> w1(out);
        for (std::int64_t o = 0; o < out; ++o) {
            const double src = (o + 0.5) / 2.0 - 0.5;
            const double f = std::floor(src);
            std::int64_t a = static_cast<std::int64_t>(f);
            double frac = src - f;
            if (a < 0) {
                a = 0;
                frac = 0;
            }
            std::int64_t b = a + 1;
            if (b > in - 1) {
                b = in - 1;
                frac = 0;
            }
            i0[o] = a;
            i1[o] = b;
            w1[o] = static_cast<S>(frac);
        }
        return std::tuple(i0, i1, w1);
    };
    auto [y0, y1, wy] = axis_plan(h, oh);
    auto [x0, x1, wx] = axis_plan(w, ow);

    std::vector<S> out(static_cast<std::size_t>(n * c * oh * ow));
    const auto& src = x.raw();
    for (std::int64_t p = 0; p < n * c; ++p) {
        const S* plane = src.data() + p * h * w;
        S* dst = out.data() + p * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy)
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                const S a = plane[y0[oy] * w + x0[ox]];
                const S b = plane[y0[oy] * w + x1[ox]];
                const S cc = plane[y1[oy] * w + x0[ox]];
                const S d = plane[y1[oy] * w + x1[ox]];
                const S top = a + wx[ox] * (b - a);
                const S bot = cc + wx[ox] * (d - cc);
                dst[oy * ow + ox] = top + wy[oy] * (bot - top);
            }
    }
    auto xn = x.node();
    return detail::make_result<S>(
        {n, c, oh, ow}, std::move(out), {x},
        [xn, n, c, h, w, oh, ow, y0 = y0, y1 = y1, wy = wy, x0 = x0, x1 = x1,
         wx = wx](Node<S>& o) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::int64_t p = 0; p < n * c; ++p) {
                S* dplane = xn->grad.data() + p * h * w;
                const S* g = o.grad.data() + p * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy)
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const S gv = g[oy * ow + ox];
                        const S wyf = wy[oy], wxf = wx[ox];
                        dplane[y0[oy] * w + x0[ox]] += (1 - wyf) * (1 - wxf) * gv;
                        dplane[y0[oy] * w + x1[ox]] += (1 - wyf) * wxf * gv;
                        dplane[y1[oy] * w + x0[ox]] += wyf * (1 - wxf) * gv;
                        dplane[y1[oy] * w + x1[ox]] += wyf * wxf * gv;
                    }
            }
        });
}

}  // namespace sarmae
