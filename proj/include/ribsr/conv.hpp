#pragma once

#include <memory>
#include <vector>

#include "ribsr/autodiff.hpp"
#include "ribsr/tensor.hpp"

namespace ribsr {

// NHWC convolutions with zero "same" padding, 3x3 kernels only (the only
// size the model uses). Plain loops; deterministic accumulation order.

template <typename T>
TensorT<T> conv3x3(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias) {
    if (x.rank() != 4) throw DimError("conv3x3: want x [B,H,W,Cin]");
    if (w.rank() != 4 || w.dim(0) != 3 || w.dim(1) != 3 || w.dim(2) != x.dim(3))
        throw DimError("conv3x3: want w [3,3,Cin,Cout] matching x, got " +
                       format_dims(w.dims()) + " for x " + format_dims(x.dims()));
    const std::size_t b = x.dim(0), h = x.dim(1), wd = x.dim(2), ci = x.dim(3), co = w.dim(3);
    if (bias && bias->numel() != co) throw DimError("conv3x3: bias size mismatch");
    TensorT<T> out = TensorT<T>::zeros({b, h, wd, co});
    for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < wd; ++xx)
                for (std::size_t oc = 0; oc < co; ++oc) {
                    T acc = bias ? (*bias)[oc] : T(0);
                    for (int ky = 0; ky < 3; ++ky) {
                        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + ky - 1;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + kx - 1;
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
                            const T* in_px = x.data() + ((bb * h + sy) * wd + sx) * ci;
                            const T* w_px = w.data() + ((ky * 3 + kx) * ci) * co + oc;
                            for (std::size_t c = 0; c < ci; ++c)
                                acc += in_px[c] * w_px[c * co];
                        }
                    }
                    out[((bb * h + y) * wd + xx) * co + oc] = acc;
                }
    return out;
}

template <typename T>
TensorT<T> dwconv3x3(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias) {
    if (x.rank() != 4) throw DimError("dwconv3x3: want x [B,H,W,C]");
    if (w.rank() != 3 || w.dim(0) != 3 || w.dim(1) != 3 || w.dim(2) != x.dim(3))
        throw DimError("dwconv3x3: want w [3,3,C] matching x, got " + format_dims(w.dims()));
    const std::size_t b = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
    if (bias && bias->numel() != c) throw DimError("dwconv3x3: bias size mismatch");
    TensorT<T> out = TensorT<T>::zeros({b, h, wd, c});
    for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < wd; ++xx)
                for (std::size_t cc = 0; cc < c; ++cc) {
                    T acc = bias ? (*bias)[cc] : T(0);
                    for (int ky = 0; ky < 3; ++ky) {
                        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + ky - 1;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + kx - 1;
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
                            acc += x[((bb * h + sy) * wd + sx) * c + cc] *
                                   w[(ky * 3 + kx) * c + cc];
                        }
                    }
                    out[((bb * h + y) * wd + xx) * c + cc] = acc;
                }
    return out;
}

template <typename T>
Var<T> ad_conv3x3(Tape<T>& tp, Var<T> x, Var<T> w, Var<T> bias = Var<T>{}) {
    const TensorT<T>* bp = bias.valid() ? &tp.val(bias) : nullptr;
    TensorT<T> out = conv3x3(tp.val(x), tp.val(w), bp);
    return tp.emplace(std::move(out), [x, w, bias](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& xv = t.val(x);
        const TensorT<T>& wv = t.val(w);
        const std::size_t b = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), ci = xv.dim(3),
                          co = wv.dim(3);
        TensorT<T> gx = TensorT<T>::zeros(xv.dims());
        TensorT<T> gw = TensorT<T>::zeros(wv.dims());
        TensorT<T> gb = bias.valid() ? TensorT<T>::zeros({co}) : TensorT<T>();
        for (std::size_t bb = 0; bb < b; ++bb)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < wd; ++xx)
                    for (std::size_t oc = 0; oc < co; ++oc) {
                        const T go = g[((bb * h + y) * wd + xx) * co + oc];
                        if (bias.valid()) gb[oc] += go;
                        for (int ky = 0; ky < 3; ++ky) {
                            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + ky - 1;
                            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + kx - 1;
                                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
                                const std::size_t xoff = ((bb * h + sy) * wd + sx) * ci;
                                const std::size_t woff = ((ky * 3 + kx) * ci) * co + oc;
                                for (std::size_t c = 0; c < ci; ++c) {
                                    gx[xoff + c] += wv[woff + c * co] * go;
                                    gw[woff + c * co] += xv[xoff + c] * go;
                                }
                            }
                        }
                    }
        t.accum_grad(x.id, gx);
        t.accum_grad(w.id, gw);
        if (bias.valid()) t.accum_grad(bias.id, gb);
    });
}

template <typename T>
Var<T> ad_dwconv3x3(Tape<T>& tp, Var<T> x, Var<T> w, Var<T> bias = Var<T>{}) {
    const TensorT<T>* bp = bias.valid() ? &tp.val(bias) : nullptr;
    TensorT<T> out = dwconv3x3(tp.val(x), tp.val(w), bp);
    return tp.emplace(std::move(out), [x, w, bias](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& xv = t.val(x);
        const TensorT<T>& wv = t.val(w);
        const std::size_t b = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), c = xv.dim(3);
        TensorT<T> gx = TensorT<T>::zeros(xv.dims());
        TensorT<T> gw = TensorT<T>::zeros(wv.dims());
        TensorT<T> gb = bias.valid() ? TensorT<T>::zeros({c}) : TensorT<T>();
        for (std::size_t bb = 0; bb < b; ++bb)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < wd; ++xx)
                    for (std::size_t cc = 0; cc < c; ++cc) {
                        const T go = g[((bb * h + y) * wd + xx) * c + cc];
                        if (bias.valid()) gb[cc] += go;
                        for (int ky = 0; ky < 3; ++ky) {
                            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + ky - 1;
                            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + kx - 1;
                                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
                                gx[((bb * h + sy) * wd + sx) * c + cc] +=
                                    wv[(ky * 3 + kx) * c + cc] * go;
                                gw[(ky * 3 + kx) * c + cc] +=
                                    xv[((bb * h + sy) * wd + sx) * c + cc] * go;
                            }
                        }
                    }
        t.accum_grad(x.id, gx);
        t.accum_grad(w.id, gw);
        if (bias.valid()) t.accum_grad(bias.id, gb);
    });
}

/// Depth-to-space map [B,rH,rW,C] <- [B,H,W,r^2*C], input channel
/// (c*r + dy)*r + dx ... i.e. channel c*r^2 + (y%r)*r + (x%r) feeds output
/// pixel (y, x, c).
inline std::shared_ptr<const std::vector<std::int64_t>> pixel_shuffle_indices(std::size_t b,
                                                                              std::size_t h,
                                                                              std::size_t w,
                                                                              std::size_t c_out,
                                                                              int r) {
    const std::size_t rr = static_cast<std::size_t>(r);
    auto idx = std::make_shared<std::vector<std::int64_t>>(b * h * rr * w * rr * c_out);
    std::size_t pos = 0;
    const std::size_t c_in = c_out * rr * rr;
    for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t y = 0; y < h * rr; ++y)
            for (std::size_t x = 0; x < w * rr; ++x)
                for (std::size_t c = 0; c < c_out; ++c) {
                    const std::size_t sy = y / rr, sx = x / rr;
                    const std::size_t ic = c * rr * rr + (y % rr) * rr + (x % rr);
                    (*idx)[pos++] = static_cast<std::int64_t>(
                        ((bb * h + sy) * w + sx) * c_in + ic);
                }
    return idx;
}

/// Nearest-neighbor upsample map [B,rH,rW,C] <- [B,H,W,C].
inline std::shared_ptr<const std::vector<std::int64_t>> nearest_upsample_indices(std::size_t b,
                                                                                 std::size_t h,
                                                                                 std::size_t w,
                                                                                 std::size_t c,
                                                                                 int r) {
    const std::size_t rr = static_cast<std::size_t>(r);
    auto idx = std::make_shared<std::vector<std::int64_t>>(b * h * rr * w * rr * c);
    std::size_t pos = 0;
    for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t y = 0; y < h * rr; ++y)
            for (std::size_t x = 0; x < w * rr; ++x)
                for (std::size_t cc = 0; cc < c; ++cc)
                    (*idx)[pos++] = static_cast<std::int64_t>(
                        ((bb * h + y / rr) * w + x / rr) * c + cc);
    return idx;
}

}  // namespace ribsr
