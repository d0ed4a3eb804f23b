#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include "ribsr/autodiff.hpp"
#include "ribsr/tensor.hpp"

namespace ribsr {

// Positional-prior variants for windowed attention:
//   - RIB: low-rank positional tokens from a coordinate MLP, concatenated to
//     content tokens so the bias enters the logits through the dot product.
//   - RPB: learnable (2M-1)^2 table per head indexed by relative offset,
//     added to the logits (requires a materialized score matrix).
//   - RoPE: axial 2D rotations of Q/K, norm-preserving.

/// M x M token window with normalized per-token 2D coordinates. Coordinates
/// are the tensor product of M evenly spaced values spanning [-1,1] inclusive
/// (0 for M=1), row-major token order: y outer, x inner.
template <typename T>
struct WindowGeometryT {
    int m = 0;
    int n = 0;                // m*m tokens
    TensorT<T> coords;        // [N,2], (y,x) per token
};

template <typename T>
WindowGeometryT<T> make_window_geometry(int m) {
    if (m < 1) throw ConfigError("window side must be >= 1");
    WindowGeometryT<T> g;
    g.m = m;
    g.n = m * m;
    g.coords = TensorT<T>::zeros({static_cast<std::size_t>(g.n), 2});
    for (int y = 0; y < m; ++y) {
        for (int x = 0; x < m; ++x) {
            const std::size_t tok = static_cast<std::size_t>(y * m + x);
            g.coords.at2(tok, 0) = m == 1 ? T(0) : T(-1) + T(2) * T(y) / T(m - 1);
            g.coords.at2(tok, 1) = m == 1 ? T(0) : T(-1) + T(2) * T(x) / T(m - 1);
        }
    }
    return g;
}

using WindowGeometry = WindowGeometryT<float>;

/// Fourier feature embedding of normalized coordinates:
/// [x, sin(2^0 x), cos(2^0 x), ..., sin(2^{L-1} x), cos(2^{L-1} x)],
/// sin/cos elementwise on the 2-vector, output width 2+4L.
template <typename T>
TensorT<T> fourier_embed(const TensorT<T>& x, int bands) {
    if (x.rank() != 2 || x.dim(1) != 2)
        throw DimError("fourier_embed: coords must be [N,2], got " + format_dims(x.dims()));
    if (bands < 0) throw ConfigError("fourier_embed: L must be >= 0");
    const std::size_t n = x.dim(0);
    const std::size_t width = 2 + 4 * static_cast<std::size_t>(bands);
    TensorT<T> out = TensorT<T>::zeros({n, width});
    for (std::size_t i = 0; i < n; ++i) {
        out.at2(i, 0) = x.at2(i, 0);
        out.at2(i, 1) = x.at2(i, 1);
        T freq = T(1);
        for (int l = 0; l < bands; ++l) {
            const std::size_t base = 2 + 4 * static_cast<std::size_t>(l);
            out.at2(i, base + 0) = std::sin(freq * x.at2(i, 0));
            out.at2(i, base + 1) = std::sin(freq * x.at2(i, 1));
            out.at2(i, base + 2) = std::cos(freq * x.at2(i, 0));
            out.at2(i, base + 3) = std::cos(freq * x.at2(i, 1));
            freq *= T(2);
        }
    }
    return out;
}

/// Learnable positional-bias MLP. One shared hidden layer, per-head low-rank
/// projections; the parameter count is independent of the window size.
template <typename T>
struct RIBParamsT {
    int bands = 10;     // L
    int hidden = 32;    // d_h
    int rank = 16;      // R per head
    int heads = 1;
    TensorT<T> w_h;     // [2+4L, d_h]
    TensorT<T> b_h;     // [d_h]
    TensorT<T> w_pq;    // [heads, d_h, R]
    TensorT<T> w_pk;    // [heads, d_h, R]
    std::uint64_t version = 0;  // bumped by whoever mutates the tensors

    std::size_t in_width() const { return 2 + 4 * static_cast<std::size_t>(bands); }
};

using RIBParams = RIBParamsT<float>;

/// Uniform(-1/sqrt(fan_in), +) init, zero hidden bias.
template <typename T>
RIBParamsT<T> init_rib_params(int bands, int hidden, int rank, int heads, Rng& rng) {
    if (bands < 0 || hidden < 1 || rank < 1 || heads < 1)
        throw ConfigError("init_rib_params: bad hyperparameters");
    RIBParamsT<T> p;
    p.bands = bands;
    p.hidden = hidden;
    p.rank = rank;
    p.heads = heads;
    const std::size_t in_w = p.in_width();
    const double a_h = 1.0 / std::sqrt(static_cast<double>(in_w));
    const double a_p = 1.0 / std::sqrt(static_cast<double>(hidden));
    p.w_h = random_uniform<T>({in_w, static_cast<std::size_t>(hidden)}, rng, T(-a_h), T(a_h));
    p.b_h = TensorT<T>::zeros({static_cast<std::size_t>(hidden)});
    p.w_pq = random_uniform<T>({static_cast<std::size_t>(heads), static_cast<std::size_t>(hidden),
                                static_cast<std::size_t>(rank)},
                               rng, T(-a_p), T(a_p));
    p.w_pk = random_uniform<T>({static_cast<std::size_t>(heads), static_cast<std::size_t>(hidden),
                                static_cast<std::size_t>(rank)},
                               rng, T(-a_p), T(a_p));
    p.version = 1;
    return p;
}

template <typename T>
std::int64_t rib_param_count(const RIBParamsT<T>& p) {
    const std::int64_t in_w = static_cast<std::int64_t>(p.in_width());
    return in_w * p.hidden + p.hidden +
           2ll * p.heads * p.hidden * p.rank;
}

inline std::int64_t rpb_param_count(int m, int heads) {
    const std::int64_t side = 2ll * m - 1;
    return static_cast<std::int64_t>(heads) * side * side;
}

/// Positional tokens for a window: h = ReLU(r_in W_h + b_h) shared across
/// heads, then Q_p = h W_pq[h], K_p = h W_pk[h]. Depends on geometry and
/// parameters only -- no pixel content enters.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> rib_positional_tokens(const WindowGeometryT<T>& geom,
                                                        const RIBParamsT<T>& p) {
    const TensorT<T> r_in = fourier_embed(geom.coords, p.bands);
    if (r_in.dim(1) != p.w_h.dim(0))
        throw DimError("rib_positional_tokens: embed width " + std::to_string(r_in.dim(1)) +
                       " vs W_h rows " + std::to_string(p.w_h.dim(0)));
    TensorT<T> h = matmul(r_in, p.w_h);
    for (std::size_t i = 0; i < h.numel(); ++i) {
        h[i] += p.b_h[i % p.b_h.numel()];
        if (h[i] < T(0)) h[i] = T(0);
    }
    TensorT<T> qp = matmul(h, p.w_pq);  // [heads, N, R] via batch broadcast
    TensorT<T> kp = matmul(h, p.w_pk);
    return {std::move(qp), std::move(kp)};
}

/// Tape version used for training and bias fitting. `coords` enters as a
/// constant leaf; gradients flow to the four parameter vars.
template <typename T>
std::pair<Var<T>, Var<T>> rib_positional_tokens_ad(Tape<T>& tape, const WindowGeometryT<T>& geom,
                                                   int bands, Var<T> w_h, Var<T> b_h, Var<T> w_pq,
                                                   Var<T> w_pk) {
    Var<T> r_in = tape.leaf(fourier_embed(geom.coords, bands));
    Var<T> h = ad_relu(tape, ad_add_rowvec(tape, ad_matmul(tape, r_in, w_h), b_h));
    return {ad_matmul(tape, h, w_pq), ad_matmul(tape, h, w_pk)};
}

// --- RPB ---------------------------------------------------------------------

/// Relative-offset index map: idx[i,j] encodes (dy, dx) = (y_j - y_i + M-1,
/// x_j - x_i + M-1) as dy*(2M-1)+dx. Depends only on the offset, so
/// idx[i,j] == idx[i+k,j+k] whenever both pairs share the same 2D offset.
inline std::vector<std::size_t> rpb_index_map(int m) {
    const int n = m * m, side = 2 * m - 1;
    std::vector<std::size_t> idx(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
        const int yi = i / m, xi = i % m;
        for (int j = 0; j < n; ++j) {
            const int yj = j / m, xj = j % m;
            const int dy = yj - yi + m - 1, dx = xj - xi + m - 1;
            idx[static_cast<std::size_t>(i) * n + j] =
                static_cast<std::size_t>(dy * side + dx);
        }
    }
    return idx;
}

template <typename T>
struct RPBTableT {
    int m = 0;
    int heads = 1;
    TensorT<T> table;                 // [heads, (2M-1)^2]
    std::vector<std::size_t> idx;     // [N*N]
};

using RPBTable = RPBTableT<float>;

template <typename T>
RPBTableT<T> make_rpb_table(int m, int heads, const TensorT<T>& table) {
    if (m < 1 || heads < 1) throw ConfigError("make_rpb_table: bad m/heads");
    const std::size_t side2 = static_cast<std::size_t>(2 * m - 1) * (2 * m - 1);
    if (table.rank() != 2 || table.dim(0) != static_cast<std::size_t>(heads) ||
        table.dim(1) != side2)
        throw DimError("make_rpb_table: table must be [heads,(2M-1)^2], got " +
                       format_dims(table.dims()));
    return RPBTableT<T>{m, heads, table, rpb_index_map(m)};
}

template <typename T>
RPBTableT<T> init_rpb_table(int m, int heads, Rng& rng, T scale = T(0.02)) {
    const std::size_t side2 = static_cast<std::size_t>(2 * m - 1) * (2 * m - 1);
    return make_rpb_table<T>(
        m, heads,
        random_uniform<T>({static_cast<std::size_t>(heads), side2}, rng, -scale, scale));
}

/// Expand the table into the dense additive bias B[h,i,j] = table[h, idx[i,j]].
template <typename T>
TensorT<T> rpb_bias_matrix(const RPBTableT<T>& t) {
    const std::size_t n = static_cast<std::size_t>(t.m) * t.m;
    const std::size_t side2 = static_cast<std::size_t>(2 * t.m - 1) * (2 * t.m - 1);
    TensorT<T> b = TensorT<T>::zeros({static_cast<std::size_t>(t.heads), n, n});
    for (int h = 0; h < t.heads; ++h)
        for (std::size_t ij = 0; ij < n * n; ++ij) {
            const std::size_t k = t.idx[ij];
            if (k >= side2) throw std::logic_error("rpb_bias_matrix: index out of table range");
            b[static_cast<std::size_t>(h) * n * n + ij] = t.table[h * side2 + k];
        }
    return b;
}

// --- RoPE --------------------------------------------------------------------

/// Axial 2D rotary scheme: the first half of each head's dims rotates with
/// the y grid position, the second half with x, frequency ladder
/// theta_t = 100^(-2t / (D_head/2)). Stand-in constants for the usual
/// vision-RoPE convention; not a tuned contribution.
struct RoPEConfig {
    int d_head = 0;
    std::vector<double> theta;  // [d_head/4]
};

inline RoPEConfig make_rope_config(int d_head) {
    if (d_head < 4 || d_head % 4 != 0)
        throw ConfigError("rope: head dim must be divisible by 4, got " + std::to_string(d_head));
    RoPEConfig c;
    c.d_head = d_head;
    const int pairs_per_axis = d_head / 4;
    c.theta.resize(pairs_per_axis);
    for (int t = 0; t < pairs_per_axis; ++t)
        c.theta[t] = std::pow(100.0, -2.0 * t / (d_head / 2.0));
    return c;
}

/// Rotate Q or K [..., N, D_head] by offset-dependent phases (any leading
/// batch/head dims). Uses integer grid positions (row-major over the window),
/// so dot products depend only on content and the 2D offset between tokens;
/// rotations preserve norms.
template <typename T>
TensorT<T> rope_rotate(const TensorT<T>& qk, const WindowGeometryT<T>& geom,
                       const RoPEConfig& cfg) {
    if (qk.rank() < 2 || qk.dim(qk.rank() - 2) != static_cast<std::size_t>(geom.n) ||
        qk.dim(qk.rank() - 1) != static_cast<std::size_t>(cfg.d_head))
        throw DimError("rope_rotate: want [...,N,D_head], got " + format_dims(qk.dims()));
    const std::size_t n = qk.dim(qk.rank() - 2), d = qk.dim(qk.rank() - 1);
    const std::size_t batch = qk.numel() / (n * d);
    const int pairs = cfg.d_head / 4, half = cfg.d_head / 2;
    TensorT<T> out = qk;
    for (std::size_t h = 0; h < batch; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            const int y = static_cast<int>(i) / geom.m, x = static_cast<int>(i) % geom.m;
            T* row = out.data() + (h * n + i) * d;
            for (int t = 0; t < pairs; ++t) {
                const double ay = y * cfg.theta[t];
                const double ax = x * cfg.theta[t];
                const T cy = static_cast<T>(std::cos(ay)), sy = static_cast<T>(std::sin(ay));
                const T cx = static_cast<T>(std::cos(ax)), sx = static_cast<T>(std::sin(ax));
                T a = row[2 * t], b = row[2 * t + 1];
                row[2 * t] = a * cy - b * sy;
                row[2 * t + 1] = a * sy + b * cy;
                a = row[half + 2 * t];
                b = row[half + 2 * t + 1];
                row[half + 2 * t] = a * cx - b * sx;
                row[half + 2 * t + 1] = a * sx + b * cx;
            }
        }
    }
    return out;
}

/// Tape version; backward applies the inverse rotation to the gradient.
template <typename T>
Var<T> ad_rope_rotate(Tape<T>& tp, Var<T> qk, const WindowGeometryT<T>& geom, RoPEConfig cfg) {
    TensorT<T> v = rope_rotate(tp.val(qk), geom, cfg);
    const int m = geom.m;
    return tp.emplace(std::move(v), [qk, m, cfg](Tape<T>& t, const TensorT<T>& g) {
        // transpose of a rotation = rotation by -angle
        RoPEConfig inv = cfg;
        for (auto& th : inv.theta) th = -th;
        WindowGeometryT<T> geo = make_window_geometry<T>(m);
        t.accum_grad(qk.id, rope_rotate(g, geo, inv));
    });
}

// --- offset-averaged bias analysis --------------------------------------------

/// Number of token pairs at each relative offset: (M-|dy|)(M-|dx|).
inline std::vector<std::size_t> offset_group_sizes(int m) {
    const int side = 2 * m - 1;
    std::vector<std::size_t> c(static_cast<std::size_t>(side) * side);
    for (int dy = -(m - 1); dy <= m - 1; ++dy)
        for (int dx = -(m - 1); dx <= m - 1; ++dx)
            c[static_cast<std::size_t>((dy + m - 1) * side + dx + m - 1)] =
                static_cast<std::size_t>((m - std::abs(dy)) * (m - std::abs(dx)));
    return c;
}

/// Mean of single-head positional scores grouped by relative 2D offset.
/// A low-rank bias does not guarantee equal values across equal offsets, so
/// the table reports the average per offset.
template <typename T>
TensorT<T> bias_by_offset(const TensorT<T>& s_p, int m) {
    const std::size_t n = static_cast<std::size_t>(m) * m;
    if (s_p.rank() != 2 || s_p.dim(0) != n || s_p.dim(1) != n)
        throw DimError("bias_by_offset: want [N,N] with N=M*M, got " + format_dims(s_p.dims()));
    const int side = 2 * m - 1;
    TensorT<T> sums = TensorT<T>::zeros({static_cast<std::size_t>(side) * side});
    const auto idx = rpb_index_map(m);
    const auto counts = offset_group_sizes(m);
    for (std::size_t ij = 0; ij < n * n; ++ij) sums[idx[ij]] += s_p[ij];
    for (std::size_t k = 0; k < sums.numel(); ++k)
        sums[k] /= static_cast<T>(counts[k]);
    return sums;
}

// --- positional token cache ----------------------------------------------------

/// Cache of (Q_p, K_p) keyed by (window side, params version). Hits return
/// bitwise-identical tensors to a fresh recomputation because entries are the
/// stored results of one. Concurrent readers are safe against an exclusive
/// inserter; entries are fully built before publication.
template <typename T>
class PosTokenCacheT {
public:
    std::pair<TensorT<T>, TensorT<T>> get_or_compute(const WindowGeometryT<T>& geom,
                                                     const RIBParamsT<T>& p) {
        const Key key{geom.m, p.version};
        {
            std::shared_lock lock(mu_);
            auto it = map_.find(key);
            if (it != map_.end()) {
                ++hits_;
                return it->second;
            }
        }
        auto fresh = rib_positional_tokens(geom, p);
        {
            std::unique_lock lock(mu_);
            auto [it, inserted] = map_.emplace(key, fresh);
            if (!inserted) return it->second;  // another thread won the race
        }
        ++misses_;
        return fresh;
    }

    std::size_t entries() const {
        std::shared_lock lock(mu_);
        return map_.size();
    }
    std::int64_t hits() const { return hits_; }
    std::int64_t misses() const { return misses_; }

private:
    using Key = std::pair<int, std::uint64_t>;
    mutable std::shared_mutex mu_;
    std::map<Key, std::pair<TensorT<T>, TensorT<T>>> map_;
    std::atomic<std::int64_t> hits_{0};
    std::atomic<std::int64_t> misses_{0};
};

using PosTokenCache = PosTokenCacheT<float>;

// --- RPB-fitting diagnostic -----------------------------------------------------

template <typename T>
struct FitResult {
    RIBParamsT<T> params;
    double final_mse = 0.0;
    std::vector<double> curve;  // mse per recorded step
};

/// Plain fixed-step gradient descent of the RIB bias term Q_p K_p^T / sqrt(R)
/// onto a dense target bias matrix [heads,N,N], minimizing mean squared error
/// over all heads and entries. Diagnostic for what the low-rank field can
/// express; also accepts targets with no offset structure at all.
template <typename T>
FitResult<T> fit_rib_to_dense(const TensorT<T>& bias, int m, const RIBParamsT<T>& p0, int steps,
                              double lr) {
    const std::size_t n = static_cast<std::size_t>(m) * m;
    if (bias.rank() != 3 || bias.dim(0) != static_cast<std::size_t>(p0.heads) ||
        bias.dim(1) != n || bias.dim(2) != n)
        throw DimError("fit_rib_to_dense: target must be [heads,N,N], got " +
                       format_dims(bias.dims()));
    const auto geom = make_window_geometry<T>(m);
    const T inv_sqrt_r = T(1) / std::sqrt(static_cast<T>(p0.rank));

    FitResult<T> res;
    res.params = p0;
    auto mse_loss = [&](Tape<T>& tape, std::map<std::string, Var<T>>& vars) {
        auto [qp, kp] = rib_positional_tokens_ad(tape, geom, res.params.bands, vars["wh"],
                                                 vars["bh"], vars["wpq"], vars["wpk"]);
        Var<T> sp = ad_scale(tape, ad_matmul(tape, qp, kp, true), inv_sqrt_r);
        Var<T> diff = ad_sub(tape, sp, tape.leaf(bias));
        return ad_mean(tape, ad_mul(tape, diff, diff));
    };

    for (int step = 0; step < steps; ++step) {
        Tape<T> tape;
        std::map<std::string, Var<T>> vars;
        vars["wh"] = tape.param("wh", res.params.w_h);
        vars["bh"] = tape.param("bh", res.params.b_h);
        vars["wpq"] = tape.param("wpq", res.params.w_pq);
        vars["wpk"] = tape.param("wpk", res.params.w_pk);
        Var<T> loss = mse_loss(tape, vars);
        const double lv = static_cast<double>(tape.val(loss)[0]);
        if (!std::isfinite(lv))
            throw NumericError("fit_rib_to_dense: non-finite loss at step " + std::to_string(step));
        if (lv > 1e30)
            throw NumericError("fit_rib_to_dense: diverged at step " + std::to_string(step));
        res.curve.push_back(lv);
        auto grads = tape.backward(loss);
        auto apply = [&](TensorT<T>& w, const TensorT<T>& g) {
            for (std::size_t i = 0; i < w.numel(); ++i)
                w[i] -= static_cast<T>(lr) * g[i];
        };
        apply(res.params.w_h, grads.at("wh"));
        apply(res.params.b_h, grads.at("bh"));
        apply(res.params.w_pq, grads.at("wpq"));
        apply(res.params.w_pk, grads.at("wpk"));
    }
    res.params.version = p0.version + static_cast<std::uint64_t>(steps);

    // Final mse after the last update.
    {
        Tape<T> tape;
        std::map<std::string, Var<T>> vars;
        vars["wh"] = tape.param("wh", res.params.w_h);
        vars["bh"] = tape.param("bh", res.params.b_h);
        vars["wpq"] = tape.param("wpq", res.params.w_pq);
        vars["wpk"] = tape.param("wpk", res.params.w_pk);
        Var<T> loss = mse_loss(tape, vars);
        res.final_mse = static_cast<double>(tape.val(loss)[0]);
        if (!std::isfinite(res.final_mse))
            throw NumericError("fit_rib_to_dense: non-finite final loss");
    }
    return res;
}

/// Table-target convenience: expands the RPB table into its dense bias and
/// fits that.
template <typename T>
FitResult<T> fit_rib_to_rpb(const RPBTableT<T>& target, const RIBParamsT<T>& p0, int steps,
                            double lr) {
    if (target.heads != p0.heads) throw ConfigError("fit_rib_to_rpb: head count mismatch");
    return fit_rib_to_dense(rpb_bias_matrix(target), target.m, p0, steps, lr);
}

}  // namespace ribsr
