#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ribsr/alloc_stats.hpp"
#include "ribsr/autodiff.hpp"
#include "ribsr/posbias.hpp"
#include "ribsr/tensor.hpp"

namespace ribsr {

enum class BiasKind { none, rpb, rope, rib };
enum class KernelKind { naive, streaming };

inline const char* to_string(BiasKind b) {
    switch (b) {
        case BiasKind::none: return "none";
        case BiasKind::rpb: return "rpb";
        case BiasKind::rope: return "rope";
        case BiasKind::rib: return "rib";
    }
    return "?";
}

inline const char* to_string(KernelKind k) {
    return k == KernelKind::naive ? "naive" : "streaming";
}

inline BiasKind bias_from_string(const std::string& s) {
    if (s == "none") return BiasKind::none;
    if (s == "rpb") return BiasKind::rpb;
    if (s == "rope") return BiasKind::rope;
    if (s == "rib") return BiasKind::rib;
    throw ConfigError("unknown bias kind: " + s);
}

inline KernelKind kernel_from_string(const std::string& s) {
    if (s == "naive") return KernelKind::naive;
    if (s == "streaming") return KernelKind::streaming;
    throw ConfigError("unknown kernel kind: " + s);
}

/// Per-layer attention configuration. Content channels are scaled by
/// 1/sqrt(D_head) and positional channels by 1/sqrt(R), folded into Q before
/// the kernel so both kernels stay bias-agnostic.
struct AttentionConfig {
    int heads = 1;
    int dim = 16;   // content dim D for the layer
    int rank = 8;   // R (per head), used when bias == rib
    BiasKind bias = BiasKind::none;
    KernelKind kernel = KernelKind::streaming;
    int tile = 0;   // streaming key-block size; <= 0 selects min(N, 64)

    int d_head() const { return dim / heads; }

    void validate() const {
        if (heads < 1 || dim < 1) throw ConfigError("attention: heads and dim must be >= 1");
        if (dim % heads != 0)
            throw ConfigError("attention: dim " + std::to_string(dim) +
                              " not divisible by heads " + std::to_string(heads));
        if (bias == BiasKind::rib && rank < 1) throw ConfigError("attention: rib needs rank >= 1");
        if (bias == BiasKind::rpb && kernel == KernelKind::streaming)
            throw ConfigError(
                "attention: rpb bias requires the naive kernel; the additive N^2 table cannot "
                "enter a non-materializing kernel");
    }

    int effective_tile(int n) const { return tile > 0 ? tile : std::min(n, 64); }
};

/// Kernel-side bookkeeping. `peak_aux_scalars` comes from the instrumented
/// scratch counter (kernel-allocated attention buffers only, never inputs or
/// outputs); `flops` counts 2 per multiply-add of the QK^T and PV
/// contractions and nothing else, so it matches the closed form
/// 2*N^2*(d_q + d_v) per head exactly for both kernels.
struct AttentionStats {
    Tensor row_max;  // [heads, N] final running max per query row
    Tensor row_sum;  // [heads, N] final softmax denominator per query row
    std::int64_t peak_aux_scalars = 0;
    std::int64_t flops = 0;
};

namespace attn_detail {

template <typename T>
void check_finite_inputs(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v) {
    for (std::size_t i = 0; i < q.numel(); ++i)
        if (std::isnan(static_cast<double>(q[i]))) throw NumericError("attention: NaN in Q");
    for (std::size_t i = 0; i < k.numel(); ++i)
        if (std::isnan(static_cast<double>(k[i]))) throw NumericError("attention: NaN in K");
    for (std::size_t i = 0; i < v.numel(); ++i)
        if (std::isnan(static_cast<double>(v[i]))) throw NumericError("attention: NaN in V");
}

template <typename T>
void check_qkv_shapes(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                      const std::vector<std::uint8_t>& mask) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw DimError("attention: Q/K/V must be [heads,N,d]");
    if (q.dim(0) != k.dim(0) || q.dim(0) != v.dim(0) || q.dim(1) != k.dim(1) ||
        q.dim(1) != v.dim(1) || q.dim(2) != k.dim(2))
        throw DimError("attention: inconsistent shapes " + format_dims(q.dims()) + " " +
                       format_dims(k.dims()) + " " + format_dims(v.dims()));
    if (!mask.empty() && mask.size() != q.dim(1))
        throw DimError("attention: mask length " + std::to_string(mask.size()) +
                       " does not match N " + std::to_string(q.dim(1)));
}

}  // namespace attn_detail

template <typename T>
struct NaiveAttendResult {
    TensorT<T> out;     // [heads, N, d_v]
    TensorT<T> scores;  // [heads, N, N], -inf at masked key columns
    TensorT<T> probs;   // [heads, N, N]
    AttentionStats stats;
};

/// Reference attention: materializes S and P. Masked key columns get -inf
/// logits; a fully masked row yields zeros (softmax_rows convention).
/// Supports an optional additive bias (the RPB path).
template <typename T>
NaiveAttendResult<T> attend_naive(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                  const std::vector<std::uint8_t>& mask = {},
                                  const TensorT<T>* bias = nullptr) {
    attn_detail::check_qkv_shapes(q, k, v, mask);
    attn_detail::check_finite_inputs(q, k, v);
    const std::size_t h = q.dim(0), n = q.dim(1), dq = q.dim(2), dv = v.dim(2);
    if (bias && (bias->rank() != 3 || bias->dim(0) != h || bias->dim(1) != n ||
                 bias->dim(2) != n))
        throw DimError("attention: bias must be [heads,N,N], got " + format_dims(bias->dims()));

    NaiveAttendResult<T> res;
    ScratchScope scope;
    // The materialized score and probability matrices are the point of this
    // kernel; both are charged to the scratch counter.
    scratch_note_alloc(static_cast<std::int64_t>(2 * h * n * n));
    res.scores = matmul(q, k, true);
    if (bias) res.scores = add(res.scores, *bias);
    const T ninf = -std::numeric_limits<T>::infinity();
    if (!mask.empty())
        for (std::size_t hh = 0; hh < h; ++hh)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (!mask[j]) res.scores[(hh * n + i) * n + j] = ninf;
    res.probs = softmax_rows(res.scores);
    res.out = matmul(res.probs, v);

    res.stats.flops = static_cast<std::int64_t>(2 * h * n * n * dq) +
                      static_cast<std::int64_t>(2 * h * n * n * dv);
    res.stats.row_max = Tensor::zeros({h, n});
    res.stats.row_sum = Tensor::zeros({h, n});
    for (std::size_t hh = 0; hh < h; ++hh)
        for (std::size_t i = 0; i < n; ++i) {
            T m = ninf, l = T(0);
            for (std::size_t j = 0; j < n; ++j)
                m = std::max(m, res.scores[(hh * n + i) * n + j]);
            if (m != ninf)
                for (std::size_t j = 0; j < n; ++j)
                    l += std::exp(res.scores[(hh * n + i) * n + j] - m);
            res.stats.row_max.at2(hh, i) = static_cast<float>(m);
            res.stats.row_sum.at2(hh, i) = static_cast<float>(l);
        }
    res.stats.peak_aux_scalars = scope.peak_scalars();
    return res;
}

template <typename T>
struct StreamingAttendResult {
    TensorT<T> out;  // [heads, N, d_v]
    AttentionStats stats;
};

namespace attn_detail {

/// Online-softmax pass for one head. Walks key tiles per query row keeping
/// (running max m, running denominator l, unnormalized accumulator); never
/// touches an N x N buffer. Writes the final (m, l) per row for the backward
/// pass and fully masked rows as zeros.
template <typename T>
void stream_forward_head(const T* q, const T* k, const T* v, const std::uint8_t* mask,
                         std::size_t n, std::size_t dq, std::size_t dv, std::size_t tile, T* out,
                         T* row_max, T* row_sum) {
    const T ninf = -std::numeric_limits<T>::infinity();
    ScratchBuffer<T> scores(tile);
    ScratchBuffer<T> acc(dv);
    for (std::size_t i = 0; i < n; ++i) {
        T m = ninf, l = T(0);
        acc.fill(T(0));
        for (std::size_t t0 = 0; t0 < n; t0 += tile) {
            const std::size_t t1 = std::min(t0 + tile, n);
            T tile_max = ninf;
            for (std::size_t j = t0; j < t1; ++j) {
                if (mask && !mask[j]) {
                    scores[j - t0] = ninf;
                    continue;
                }
                T s = T(0);
                for (std::size_t d = 0; d < dq; ++d) s += q[i * dq + d] * k[j * dq + d];
                scores[j - t0] = s;
                tile_max = std::max(tile_max, s);
            }
            if (tile_max == ninf) continue;  // whole tile masked
            const T m_new = std::max(m, tile_max);
            const T rescale = m == ninf ? T(0) : std::exp(m - m_new);
            l *= rescale;
            for (std::size_t d = 0; d < dv; ++d) acc[d] *= rescale;
            for (std::size_t j = t0; j < t1; ++j) {
                if (scores[j - t0] == ninf) continue;
                const T w = std::exp(scores[j - t0] - m_new);
                l += w;
                for (std::size_t d = 0; d < dv; ++d) acc[d] += w * v[j * dv + d];
            }
            m = m_new;
        }
        row_max[i] = m;
        row_sum[i] = l;
        if (l == T(0)) {
            for (std::size_t d = 0; d < dv; ++d) out[i * dv + d] = T(0);
        } else {
            for (std::size_t d = 0; d < dv; ++d) out[i * dv + d] = acc[d] / l;
        }
    }
}

/// Streaming backward from the saved (m, l) statistics; replays key tiles
/// instead of replaying naive attention, so nothing N x N is materialized
/// here either.
template <typename T>
void stream_backward_head(const T* q, const T* k, const T* v, const std::uint8_t* mask,
                          const T* out, const T* gout, const T* row_max, const T* row_sum,
                          std::size_t n, std::size_t dq, std::size_t dv, std::size_t tile, T* gq,
                          T* gk, T* gv) {
    ScratchBuffer<T> scores(tile);
    for (std::size_t i = 0; i < n; ++i) {
        const T l = row_sum[i];
        if (l == T(0)) continue;  // fully masked row: zero output, zero grads
        const T m = row_max[i];
        T drow = T(0);  // sum_d gout[i,d] * out[i,d]
        for (std::size_t d = 0; d < dv; ++d) drow += gout[i * dv + d] * out[i * dv + d];
        for (std::size_t t0 = 0; t0 < n; t0 += tile) {
            const std::size_t t1 = std::min(t0 + tile, n);
            for (std::size_t j = t0; j < t1; ++j) {
                if (mask && !mask[j]) continue;
                T s = T(0);
                for (std::size_t d = 0; d < dq; ++d) s += q[i * dq + d] * k[j * dq + d];
                scores[j - t0] = std::exp(s - m) / l;  // P_ij
            }
            for (std::size_t j = t0; j < t1; ++j) {
                if (mask && !mask[j]) continue;
                const T p = scores[j - t0];
                T dp = T(0);
                for (std::size_t d = 0; d < dv; ++d) {
                    gv[j * dv + d] += p * gout[i * dv + d];
                    dp += gout[i * dv + d] * v[j * dv + d];
                }
                const T ds = p * (dp - drow);
                for (std::size_t d = 0; d < dq; ++d) {
                    gq[i * dq + d] += ds * k[j * dq + d];
                    gk[j * dq + d] += ds * q[i * dq + d];
                }
            }
        }
    }
}

}  // namespace attn_detail

/// Exact attention in one pass over key tiles per query row; output matches
/// attend_naive within rounding for every shape, including N not divisible by
/// the tile size. Additive-bias configurations are rejected: they would need
/// the materialized score matrix this kernel exists to avoid.
template <typename T>
StreamingAttendResult<T> attend_streaming(const TensorT<T>& q, const TensorT<T>& k,
                                          const TensorT<T>& v,
                                          const std::vector<std::uint8_t>& mask, int tile_size) {
    attn_detail::check_qkv_shapes(q, k, v, mask);
    attn_detail::check_finite_inputs(q, k, v);
    const std::size_t h = q.dim(0), n = q.dim(1), dq = q.dim(2), dv = v.dim(2);
    if (tile_size < 1) throw ConfigError("attend_streaming: tile must be >= 1");
    const std::size_t tile = std::min<std::size_t>(static_cast<std::size_t>(tile_size), n);

    StreamingAttendResult<T> res;
    res.out = TensorT<T>::zeros({h, n, dv});
    res.stats.row_max = Tensor::zeros({h, n});
    res.stats.row_sum = Tensor::zeros({h, n});

    ScratchScope scope;
    // The per-row softmax statistics are the only O(N) state the kernel keeps.
    ScratchBuffer<T> rm(h * n);
    ScratchBuffer<T> rs(h * n);
    const std::uint8_t* mp = mask.empty() ? nullptr : mask.data();
    for (std::size_t hh = 0; hh < h; ++hh) {
        attn_detail::stream_forward_head(q.data() + hh * n * dq, k.data() + hh * n * dq,
                                         v.data() + hh * n * dv, mp, n, dq, dv, tile,
                                         res.out.data() + hh * n * dv, rm.data() + hh * n,
                                         rs.data() + hh * n);
    }
    for (std::size_t i = 0; i < h * n; ++i) {
        res.stats.row_max[i] = static_cast<float>(rm[i]);
        res.stats.row_sum[i] = static_cast<float>(rs[i]);
    }
    res.stats.flops = static_cast<std::int64_t>(2 * h * n * n * dq) +
                      static_cast<std::int64_t>(2 * h * n * n * dv);
    res.stats.peak_aux_scalars = scope.peak_scalars();
    return res;
}

/// Streaming attention with an rpb-style additive bias is the configuration
/// the split kernels exist to avoid; reject it uniformly.
template <typename T>
StreamingAttendResult<T> attend_streaming_cfg(const TensorT<T>& q, const TensorT<T>& k,
                                              const TensorT<T>& v,
                                              const std::vector<std::uint8_t>& mask,
                                              const AttentionConfig& cfg) {
    if (cfg.bias == BiasKind::rpb)
        throw ConfigError("attend_streaming: bias=rpb unsupported, use the naive kernel");
    return attend_streaming(q, k, v, mask, cfg.effective_tile(static_cast<int>(q.dim(1))));
}

// --- tape nodes ---------------------------------------------------------------

/// Batched naive attention over a leading window axis: Q [W,heads,N,dq].
/// Saves P per window for the backward pass. `bias` (optional) is shared
/// across windows and its gradient sums over them.
template <typename T>
Var<T> ad_attend_naive(Tape<T>& tp, Var<T> q, Var<T> k, Var<T> v,
                       std::shared_ptr<const std::vector<std::vector<std::uint8_t>>> masks,
                       Var<T> bias = Var<T>{}) {
    const TensorT<T>& qv = tp.val(q);
    const TensorT<T>& kv = tp.val(k);
    const TensorT<T>& vv = tp.val(v);
    if (qv.rank() != 4) throw DimError("ad_attend_naive: want [W,heads,N,dq]");
    const std::size_t w = qv.dim(0), h = qv.dim(1), n = qv.dim(2), dq = qv.dim(3),
                      dv = vv.dim(3);
    if (masks && !masks->empty() && masks->size() != w)
        throw DimError("ad_attend_naive: need one mask per window");

    TensorT<T> out = TensorT<T>::zeros({w, h, n, dv});
    auto probs = std::make_shared<std::vector<TensorT<T>>>();
    probs->reserve(w);
    const TensorT<T>* bptr = bias.valid() ? &tp.val(bias) : nullptr;
    static const std::vector<std::uint8_t> no_mask;
    for (std::size_t wi = 0; wi < w; ++wi) {
        TensorT<T> qs({h, n, dq}, std::vector<T>(qv.data() + wi * h * n * dq,
                                                 qv.data() + (wi + 1) * h * n * dq));
        TensorT<T> ks({h, n, dq}, std::vector<T>(kv.data() + wi * h * n * dq,
                                                 kv.data() + (wi + 1) * h * n * dq));
        TensorT<T> vs({h, n, dv}, std::vector<T>(vv.data() + wi * h * n * dv,
                                                 vv.data() + (wi + 1) * h * n * dv));
        const auto& mask = (masks && !masks->empty()) ? (*masks)[wi] : no_mask;
        auto res = attend_naive(qs, ks, vs, mask, bptr);
        std::copy(res.out.data(), res.out.data() + h * n * dv, out.data() + wi * h * n * dv);
        probs->push_back(std::move(res.probs));
    }

    return tp.emplace(std::move(out), [q, k, v, bias, masks, probs, w, h, n, dq, dv](
                                          Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& qv = t.val(q);
        const TensorT<T>& kv = t.val(k);
        const TensorT<T>& vv = t.val(v);
        TensorT<T> gq = TensorT<T>::zeros(qv.dims());
        TensorT<T> gk = TensorT<T>::zeros(kv.dims());
        TensorT<T> gv = TensorT<T>::zeros(vv.dims());
        TensorT<T> gb =
            bias.valid() ? TensorT<T>::zeros(t.val(bias).dims()) : TensorT<T>();
        for (std::size_t wi = 0; wi < w; ++wi) {
            const TensorT<T>& p = (*probs)[wi];
            for (std::size_t hh = 0; hh < h; ++hh) {
                const T* qp = qv.data() + ((wi * h) + hh) * n * dq;
                const T* kp = kv.data() + ((wi * h) + hh) * n * dq;
                const T* vp = vv.data() + ((wi * h) + hh) * n * dv;
                const T* gp = g.data() + ((wi * h) + hh) * n * dv;
                T* gqp = gq.data() + ((wi * h) + hh) * n * dq;
                T* gkp = gk.data() + ((wi * h) + hh) * n * dq;
                T* gvp = gv.data() + ((wi * h) + hh) * n * dv;
                const T* pp = p.data() + hh * n * n;
                for (std::size_t i = 0; i < n; ++i) {
                    // dP = dO V^T, dS = P o (dP - rowsum(dP o P))
                    T rowdot = T(0);
                    for (std::size_t j = 0; j < n; ++j) {
                        T dp = T(0);
                        for (std::size_t d = 0; d < dv; ++d)
                            dp += gp[i * dv + d] * vp[j * dv + d];
                        rowdot += dp * pp[i * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        const T pij = pp[i * n + j];
                        if (pij == T(0)) continue;
                        T dp = T(0);
                        for (std::size_t d = 0; d < dv; ++d) {
                            gvp[j * dv + d] += pij * gp[i * dv + d];
                            dp += gp[i * dv + d] * vp[j * dv + d];
                        }
                        const T ds = pij * (dp - rowdot);
                        for (std::size_t d = 0; d < dq; ++d) {
                            gqp[i * dq + d] += ds * kp[j * dq + d];
                            gkp[j * dq + d] += ds * qp[i * dq + d];
                        }
                        if (bias.valid()) gb[(hh * n + i) * n + j] += ds;
                    }
                }
            }
        }
        t.accum_grad(q.id, gq);
        t.accum_grad(k.id, gk);
        t.accum_grad(v.id, gv);
        if (bias.valid()) t.accum_grad(bias.id, gb);
    });
}

/// Batched streaming attention node. The backward uses the stored per-row
/// (max, denominator) statistics and walks key tiles again; the
/// non-materialization contract holds end to end.
template <typename T>
Var<T> ad_attend_streaming(Tape<T>& tp, Var<T> q, Var<T> k, Var<T> v,
                           std::shared_ptr<const std::vector<std::vector<std::uint8_t>>> masks,
                           int tile_size) {
    const TensorT<T>& qv = tp.val(q);
    const TensorT<T>& kv = tp.val(k);
    const TensorT<T>& vv = tp.val(v);
    if (qv.rank() != 4) throw DimError("ad_attend_streaming: want [W,heads,N,dq]");
    const std::size_t w = qv.dim(0), h = qv.dim(1), n = qv.dim(2), dq = qv.dim(3),
                      dv = vv.dim(3);
    if (tile_size < 1) throw ConfigError("ad_attend_streaming: tile must be >= 1");
    const std::size_t tile = std::min<std::size_t>(static_cast<std::size_t>(tile_size), n);
    attn_detail::check_finite_inputs(qv, kv, vv);

    TensorT<T> out = TensorT<T>::zeros({w, h, n, dv});
    auto row_max = std::make_shared<std::vector<T>>(w * h * n);
    auto row_sum = std::make_shared<std::vector<T>>(w * h * n);
    static const std::vector<std::uint8_t> no_mask;
    for (std::size_t wi = 0; wi < w; ++wi) {
        const auto& mask = (masks && !masks->empty()) ? (*masks)[wi] : no_mask;
        const std::uint8_t* mp = mask.empty() ? nullptr : mask.data();
        for (std::size_t hh = 0; hh < h; ++hh)
            attn_detail::stream_forward_head(
                qv.data() + ((wi * h) + hh) * n * dq, kv.data() + ((wi * h) + hh) * n * dq,
                vv.data() + ((wi * h) + hh) * n * dv, mp, n, dq, dv, tile,
                out.data() + ((wi * h) + hh) * n * dv, row_max->data() + (wi * h + hh) * n,
                row_sum->data() + (wi * h + hh) * n);
    }
    TensorT<T> out_copy = out;  // backward needs O for the rowsum(dO o O) term
    return tp.emplace(
        std::move(out),
        [q, k, v, masks, row_max, row_sum, out_copy, w, h, n, dq, dv, tile](
            Tape<T>& t, const TensorT<T>& g) {
            const TensorT<T>& qv = t.val(q);
            const TensorT<T>& kv = t.val(k);
            const TensorT<T>& vv = t.val(v);
            TensorT<T> gq = TensorT<T>::zeros(qv.dims());
            TensorT<T> gk = TensorT<T>::zeros(kv.dims());
            TensorT<T> gv = TensorT<T>::zeros(vv.dims());
            static const std::vector<std::uint8_t> no_mask_b;
            for (std::size_t wi = 0; wi < w; ++wi) {
                const auto& mask = (masks && !masks->empty()) ? (*masks)[wi] : no_mask_b;
                const std::uint8_t* mp = mask.empty() ? nullptr : mask.data();
                for (std::size_t hh = 0; hh < h; ++hh) {
                    const std::size_t base_q = ((wi * h) + hh) * n * dq;
                    const std::size_t base_v = ((wi * h) + hh) * n * dv;
                    attn_detail::stream_backward_head(
                        qv.data() + base_q, kv.data() + base_q, vv.data() + base_v, mp,
                        out_copy.data() + base_v, g.data() + base_v,
                        row_max->data() + (wi * h + hh) * n, row_sum->data() + (wi * h + hh) * n,
                        n, dq, dv, tile, gq.data() + base_q, gk.data() + base_q,
                        gv.data() + base_v);
                }
            }
            t.accum_grad(q.id, gq);
            t.accum_grad(k.id, gk);
            t.accum_grad(v.id, gv);
        });
}

// --- window partition / reverse -------------------------------------------------

struct WindowPartitionInfo {
    std::size_t batch = 0, height = 0, width = 0, channels = 0;
    int window = 0;
    std::size_t padded_h = 0, padded_w = 0;
    std::size_t windows_y = 0, windows_x = 0;
    std::size_t num_windows() const { return batch * windows_y * windows_x; }
    std::size_t tokens() const { return static_cast<std::size_t>(window) * window; }
};

inline WindowPartitionInfo plan_window_partition(std::size_t b, std::size_t hh, std::size_t ww,
                                                 std::size_t c, int m) {
    if (m < 1) throw ConfigError("window_partition: M must be >= 1");
    WindowPartitionInfo info;
    info.batch = b;
    info.height = hh;
    info.width = ww;
    info.channels = c;
    info.window = m;
    info.padded_h = (hh + m - 1) / m * m;
    info.padded_w = (ww + m - 1) / m * m;
    info.windows_y = info.padded_h / m;
    info.windows_x = info.padded_w / m;
    return info;
}

/// Gather map [B*nW, N, C] <- [B,H,W,C]; padding positions map to -1 (zeros).
inline std::shared_ptr<const std::vector<std::int64_t>> window_partition_indices(
    const WindowPartitionInfo& info) {
    auto idx = std::make_shared<std::vector<std::int64_t>>();
    idx->resize(info.num_windows() * info.tokens() * info.channels);
    std::size_t pos = 0;
    const int m = info.window;
    for (std::size_t b = 0; b < info.batch; ++b)
        for (std::size_t wy = 0; wy < info.windows_y; ++wy)
            for (std::size_t wx = 0; wx < info.windows_x; ++wx)
                for (int ty = 0; ty < m; ++ty)
                    for (int tx = 0; tx < m; ++tx) {
                        const std::size_t y = wy * m + ty, x = wx * m + tx;
                        for (std::size_t c = 0; c < info.channels; ++c) {
                            if (y < info.height && x < info.width)
                                (*idx)[pos] = static_cast<std::int64_t>(
                                    ((b * info.height + y) * info.width + x) * info.channels + c);
                            else
                                (*idx)[pos] = -1;
                            ++pos;
                        }
                    }
    return idx;
}

/// Gather map [B,H,W,C] <- [B*nW, N, C]: the exact inverse on the unpadded
/// region, so reverse(partition(x)) == x.
inline std::shared_ptr<const std::vector<std::int64_t>> window_reverse_indices(
    const WindowPartitionInfo& info) {
    auto idx = std::make_shared<std::vector<std::int64_t>>();
    idx->resize(info.batch * info.height * info.width * info.channels);
    const int m = info.window;
    std::size_t pos = 0;
    for (std::size_t b = 0; b < info.batch; ++b)
        for (std::size_t y = 0; y < info.height; ++y)
            for (std::size_t x = 0; x < info.width; ++x) {
                const std::size_t wy = y / m, wx = x / m;
                const std::size_t ty = y % m, tx = x % m;
                const std::size_t win = (b * info.windows_y + wy) * info.windows_x + wx;
                for (std::size_t c = 0; c < info.channels; ++c)
                    (*idx)[pos++] = static_cast<std::int64_t>(
                        (win * info.tokens() + ty * m + tx) * info.channels + c);
            }
    return idx;
}

/// Validity mask (1 = real token, 0 = padding) for each window.
inline std::shared_ptr<const std::vector<std::vector<std::uint8_t>>> window_masks(
    const WindowPartitionInfo& info) {
    auto masks = std::make_shared<std::vector<std::vector<std::uint8_t>>>();
    const int m = info.window;
    bool any_pad = info.padded_h != info.height || info.padded_w != info.width;
    if (!any_pad) return masks;  // empty => all valid
    masks->resize(info.num_windows());
    std::size_t wi = 0;
    for (std::size_t b = 0; b < info.batch; ++b)
        for (std::size_t wy = 0; wy < info.windows_y; ++wy)
            for (std::size_t wx = 0; wx < info.windows_x; ++wx) {
                auto& mask = (*masks)[wi++];
                mask.resize(info.tokens());
                for (int ty = 0; ty < m; ++ty)
                    for (int tx = 0; tx < m; ++tx)
                        mask[ty * m + tx] = (wy * m + ty < info.height) &&
                                            (wx * m + tx < info.width);
            }
    return masks;
}

template <typename T>
struct WindowPartitionResult {
    TensorT<T> windows;  // [B*nW, N, C]
    WindowPartitionInfo info;
    std::shared_ptr<const std::vector<std::vector<std::uint8_t>>> masks;
};

template <typename T>
WindowPartitionResult<T> window_partition(const TensorT<T>& x, int m) {
    if (x.rank() != 4) throw DimError("window_partition: want [B,H,W,C]");
    WindowPartitionResult<T> res;
    res.info = plan_window_partition(x.dim(0), x.dim(1), x.dim(2), x.dim(3), m);
    res.masks = window_masks(res.info);
    auto idx = window_partition_indices(res.info);
    res.windows = TensorT<T>::zeros({res.info.num_windows(), res.info.tokens(), x.dim(3)});
    for (std::size_t i = 0; i < res.windows.numel(); ++i) {
        const std::int64_t j = (*idx)[i];
        if (j >= 0) res.windows[i] = x[static_cast<std::size_t>(j)];
    }
    return res;
}

template <typename T>
TensorT<T> window_reverse(const TensorT<T>& windows, const WindowPartitionInfo& info) {
    if (windows.rank() != 3 || windows.dim(0) != info.num_windows() ||
        windows.dim(1) != info.tokens() || windows.dim(2) != info.channels)
        throw DimError("window_reverse: windows shape " + format_dims(windows.dims()) +
                       " does not match partition info");
    auto idx = window_reverse_indices(info);
    TensorT<T> x = TensorT<T>::zeros({info.batch, info.height, info.width, info.channels});
    for (std::size_t i = 0; i < x.numel(); ++i)
        x[i] = windows[static_cast<std::size_t>((*idx)[i])];
    return x;
}

// --- cyclic window schedule ------------------------------------------------------

/// Per-layer window side: sizes[i mod len]. The cycle runs small-to-large and
/// repeats within a block, replacing shifted windows.
inline int cyclic_schedule(const std::vector<int>& sizes, int layer_index) {
    if (sizes.empty()) throw ConfigError("cyclic_schedule: size list is empty");
    if (layer_index < 0) throw ConfigError("cyclic_schedule: negative layer index");
    return sizes[static_cast<std::size_t>(layer_index) % sizes.size()];
}

// --- augmented Q/K assembly ------------------------------------------------------

template <typename T>
struct AugmentedQKV {
    TensorT<T> q;  // [heads, N, d_head (+ rank when rib)]
    TensorT<T> k;
    TensorT<T> v;  // [heads, N, d_head]
};

namespace attn_detail {

template <typename T>
TensorT<T> split_heads(const TensorT<T>& x, std::size_t heads) {
    // [N, D] -> [heads, N, D/heads]
    const std::size_t n = x.dim(0), d = x.dim(1), dh = d / heads;
    TensorT<T> out = TensorT<T>::zeros({heads, n, dh});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < dh; ++c)
                out[(h * n + i) * dh + c] = x[i * d + h * dh + c];
    return out;
}

}  // namespace attn_detail

/// Content projections plus the configured positional treatment, producing
/// head-split tensors ready for either kernel:
///   none: Q = Q_c/sqrt(D_head), K = K_c
///   rope: rotated Q_c/sqrt(D_head), rotated K_c
///   rib:  Q = [Q_c/sqrt(D_head), Q_p/sqrt(R)], K = [K_c, K_p]
/// V is always the plain value projection. Scaling is folded into Q here so
/// the kernels never see the bias variant.
template <typename T>
AugmentedQKV<T> build_augmented_qk(const TensorT<T>& x, const TensorT<T>& w_q,
                                   const TensorT<T>& w_k, const TensorT<T>& w_v,
                                   const AttentionConfig& cfg,
                                   const WindowGeometryT<T>* geom = nullptr,
                                   const TensorT<T>* q_p = nullptr,
                                   const TensorT<T>* k_p = nullptr) {
    cfg.validate();
    if (x.rank() != 2 || x.dim(1) != static_cast<std::size_t>(cfg.dim))
        throw DimError("build_augmented_qk: want X [N,D] with D=" + std::to_string(cfg.dim) +
                       ", got " + format_dims(x.dims()));
    const std::size_t heads = static_cast<std::size_t>(cfg.heads);
    const std::size_t dh = static_cast<std::size_t>(cfg.d_head());
    const T content_scale = T(1) / std::sqrt(static_cast<T>(dh));

    AugmentedQKV<T> out;
    TensorT<T> qc = attn_detail::split_heads(matmul(x, w_q), heads);
    TensorT<T> kc = attn_detail::split_heads(matmul(x, w_k), heads);
    out.v = attn_detail::split_heads(matmul(x, w_v), heads);

    switch (cfg.bias) {
        case BiasKind::none:
        case BiasKind::rpb:
            // rpb adds its table inside the naive kernel; Q/K are plain.
            out.q = scale(qc, content_scale);
            out.k = std::move(kc);
            break;
        case BiasKind::rope: {
            if (!geom) throw ConfigError("build_augmented_qk: rope needs window geometry");
            auto rope = make_rope_config(static_cast<int>(dh));
            out.q = scale(rope_rotate(qc, *geom, rope), content_scale);
            out.k = rope_rotate(kc, *geom, rope);
            break;
        }
        case BiasKind::rib: {
            if (!q_p || !k_p)
                throw ConfigError("build_augmented_qk: rib needs positional tokens");
            if (q_p->rank() != 3 || q_p->dim(0) != heads ||
                q_p->dim(1) != x.dim(0) ||
                q_p->dim(2) != static_cast<std::size_t>(cfg.rank))
                throw DimError("build_augmented_qk: Q_p must be [heads,N,R], got " +
                               format_dims(q_p->dims()));
            const T pos_scale = T(1) / std::sqrt(static_cast<T>(cfg.rank));
            const std::size_t n = x.dim(0), r = static_cast<std::size_t>(cfg.rank);
            out.q = TensorT<T>::zeros({heads, n, dh + r});
            out.k = TensorT<T>::zeros({heads, n, dh + r});
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < n; ++i) {
                    T* qrow = out.q.data() + (h * n + i) * (dh + r);
                    T* krow = out.k.data() + (h * n + i) * (dh + r);
                    for (std::size_t c = 0; c < dh; ++c) {
                        qrow[c] = qc[(h * n + i) * dh + c] * content_scale;
                        krow[c] = kc[(h * n + i) * dh + c];
                    }
                    for (std::size_t c = 0; c < r; ++c) {
                        qrow[dh + c] = (*q_p)[(h * n + i) * r + c] * pos_scale;
                        krow[dh + c] = (*k_p)[(h * n + i) * r + c];
                    }
                }
            break;
        }
    }
    return out;
}

// --- deterministic window-parallel helper ------------------------------------------

/// Runs fn(i) for i in [0, count) across `threads` workers on contiguous
/// chunks. Callers write disjoint output regions, so results are bitwise
/// independent of the schedule.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk, hi = std::min(lo + chunk, count);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace ribsr
