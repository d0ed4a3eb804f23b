#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ribsr/tensor.hpp"

namespace ribsr {

// Reverse-mode tape. Creation order is topological order; backward walks the
// nodes in strict reverse creation order exactly once, accumulating into
// per-node gradient buffers (fan-out adds, per the multivariate chain rule).
// One tape per training step; tapes are not shared across threads.

template <typename T>
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
};

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const TensorT<T>&)>;

    Var<T> leaf(TensorT<T> value) { return emplace(std::move(value), nullptr); }

    Var<T> param(const std::string& name, TensorT<T> value) {
        if (params_.count(name)) throw ContractError("duplicate parameter name: " + name);
        Var<T> v = emplace(std::move(value), nullptr);
        nodes_[v.id].param_name = name;
        params_[name] = v.id;
        return v;
    }

    /// Record a new node. `backward` receives the accumulated output gradient
    /// and is responsible for pushing contributions to the node's inputs via
    /// accum_grad. Custom ops (the attention kernels) use this directly.
    Var<T> emplace(TensorT<T> value, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), std::move(backward), std::string()});
        return Var<T>{nodes_.size() - 1};
    }

    const TensorT<T>& val(Var<T> v) const { return nodes_.at(v.id).value; }
    std::size_t size() const { return nodes_.size(); }

    void accum_grad(std::size_t id, const TensorT<T>& g) {
        TensorT<T>& slot = grads_.at(id);
        if (slot.empty()) {
            slot = g;
        } else {
            detail::check_same_shape(slot, g, "accum_grad");
            for (std::size_t i = 0; i < slot.numel(); ++i) slot[i] += g[i];
        }
    }

    /// Gradient of the most recent backward() for a node; zeros if the node
    /// did not influence the loss.
    TensorT<T> grad(Var<T> v) const {
        const TensorT<T>& g = grads_.at(v.id);
        if (g.empty()) return TensorT<T>::zeros(nodes_[v.id].value.dims());
        return g;
    }

    /// Reverse sweep from a scalar loss. Returns dLoss/dParam for every
    /// registered parameter; parameters the loss never touched get zeros.
    std::map<std::string, TensorT<T>> backward(Var<T> loss) {
        if (!loss.valid() || loss.id >= nodes_.size())
            throw ContractError("backward: loss is not a node on this tape");
        if (nodes_[loss.id].value.numel() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                format_dims(nodes_[loss.id].value.dims()));
        grads_.assign(nodes_.size(), TensorT<T>());
        accum_grad(loss.id, TensorT<T>::full(nodes_[loss.id].value.dims(), T(1)));
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            if (grads_[id].empty() || !nodes_[id].backward) continue;
            nodes_[id].backward(*this, grads_[id]);
        }
        std::map<std::string, TensorT<T>> out;
        for (const auto& [name, id] : params_) out[name] = grad(Var<T>{id});
        return out;
    }

private:
    struct Node {
        TensorT<T> value;
        BackwardFn backward;
        std::string param_name;
    };

    std::vector<Node> nodes_;
    std::vector<TensorT<T>> grads_;
    std::map<std::string, std::size_t> params_;
};

// --- gradient shape reduction for broadcasting ops --------------------------

namespace ad_detail {

/// Sum `g` down to `target` dims: leading extra dims collapse, and dims of
/// size 1 in the target sum over the corresponding axis.
template <typename T>
TensorT<T> reduce_to_shape(const TensorT<T>& g, const Dims& target) {
    if (g.dims() == target) return g;
    const std::size_t gr = g.rank(), tr = target.size();
    if (tr > gr) throw DimError("reduce_to_shape: target rank exceeds source");
    TensorT<T> out = TensorT<T>::zeros(target);
    // Row-major walk over g, computing the target offset per element.
    std::vector<std::size_t> tstride(tr);
    {
        std::size_t s = 1;
        for (std::size_t i = tr; i-- > 0;) {
            tstride[i] = s;
            s *= target[i];
        }
    }
    std::vector<std::size_t> coord(gr, 0);
    for (std::size_t flat = 0; flat < g.numel(); ++flat) {
        std::size_t rem = flat;
        for (std::size_t i = gr; i-- > 0;) {
            coord[i] = rem % g.dim(i);
            rem /= g.dim(i);
        }
        std::size_t toff = 0;
        for (std::size_t i = 0; i < tr; ++i) {
            const std::size_t c = coord[gr - tr + i];
            toff += (target[i] == 1 ? 0 : c) * tstride[i];
        }
        out[toff] += g[flat];
    }
    return out;
}

}  // namespace ad_detail

// --- differentiable ops ------------------------------------------------------

template <typename T>
Var<T> ad_add(Tape<T>& tp, Var<T> a, Var<T> b) {
    TensorT<T> v = add(tp.val(a), tp.val(b));
    return tp.emplace(std::move(v), [a, b](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(a.id, g);
        t.accum_grad(b.id, g);
    });
}

template <typename T>
Var<T> ad_sub(Tape<T>& tp, Var<T> a, Var<T> b) {
    TensorT<T> v = sub(tp.val(a), tp.val(b));
    return tp.emplace(std::move(v), [a, b](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(a.id, g);
        t.accum_grad(b.id, scale(g, T(-1)));
    });
}

template <typename T>
Var<T> ad_mul(Tape<T>& tp, Var<T> a, Var<T> b) {
    TensorT<T> v = mul(tp.val(a), tp.val(b));
    return tp.emplace(std::move(v), [a, b](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(a.id, mul(g, t.val(b)));
        t.accum_grad(b.id, mul(g, t.val(a)));
    });
}

template <typename T>
Var<T> ad_scale(Tape<T>& tp, Var<T> a, T c) {
    return tp.emplace(scale(tp.val(a), c), [a, c](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(a.id, scale(g, c));
    });
}

/// x[..., n] + v[n], v broadcast over all leading dims.
template <typename T>
Var<T> ad_add_rowvec(Tape<T>& tp, Var<T> x, Var<T> v) {
    const TensorT<T>& xv = tp.val(x);
    const TensorT<T>& vv = tp.val(v);
    const std::size_t n = xv.dim(xv.rank() - 1);
    if (vv.rank() != 1 || vv.dim(0) != n)
        throw DimError("add_rowvec: vector shape " + format_dims(vv.dims()) +
                       " does not match last dim of " + format_dims(xv.dims()));
    TensorT<T> out = xv;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vv[i % n];
    return tp.emplace(std::move(out), [x, v, n](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(x.id, g);
        TensorT<T> gv = TensorT<T>::zeros({n});
        for (std::size_t i = 0; i < g.numel(); ++i) gv[i % n] += g[i];
        t.accum_grad(v.id, gv);
    });
}

template <typename T>
Var<T> ad_matmul(Tape<T>& tp, Var<T> a, Var<T> b, bool trans_b = false) {
    TensorT<T> v = matmul(tp.val(a), tp.val(b), trans_b);
    return tp.emplace(std::move(v), [a, b, trans_b](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& av = t.val(a);
        const TensorT<T>& bv = t.val(b);
        if (!trans_b) {
            // C = A B: dA = dC B^T, dB = A^T dC.
            t.accum_grad(a.id, ad_detail::reduce_to_shape(matmul(g, bv, true), av.dims()));
            t.accum_grad(b.id,
                         ad_detail::reduce_to_shape(matmul(transpose_last2(av), g), bv.dims()));
        } else {
            // C = A B^T: dA = dC B, dB = dC^T A.
            t.accum_grad(a.id, ad_detail::reduce_to_shape(matmul(g, bv), av.dims()));
            t.accum_grad(b.id,
                         ad_detail::reduce_to_shape(matmul(transpose_last2(g), av), bv.dims()));
        }
    });
}

template <typename T>
Var<T> ad_relu(Tape<T>& tp, Var<T> a) {
    return tp.emplace(relu(tp.val(a)), [a](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& av = t.val(a);
        TensorT<T> ga = g;
        for (std::size_t i = 0; i < ga.numel(); ++i)
            if (av[i] <= T(0)) ga[i] = T(0);  // subgradient at 0 is 0
        t.accum_grad(a.id, ga);
    });
}

template <typename T>
Var<T> ad_sigmoid(Tape<T>& tp, Var<T> a) {
    TensorT<T> y = sigmoid(tp.val(a));
    TensorT<T> saved = y;
    return tp.emplace(std::move(y), [a, saved](Tape<T>& t, const TensorT<T>& g) {
        TensorT<T> ga = g;
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= saved[i] * (T(1) - saved[i]);
        t.accum_grad(a.id, ga);
    });
}

template <typename T>
Var<T> ad_gelu(Tape<T>& tp, Var<T> a) {
    return tp.emplace(gelu(tp.val(a)), [a](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& av = t.val(a);
        TensorT<T> ga = g;
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= gelu_grad_scalar(av[i]);
        t.accum_grad(a.id, ga);
    });
}

template <typename T>
Var<T> ad_sum(Tape<T>& tp, Var<T> a) {
    TensorT<T> v({1}, {sum(tp.val(a))});
    return tp.emplace(std::move(v), [a](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(a.id, TensorT<T>::full(t.val(a).dims(), g[0]));
    });
}

template <typename T>
Var<T> ad_mean(Tape<T>& tp, Var<T> a) {
    const std::size_t n = tp.val(a).numel();
    TensorT<T> v({1}, {sum(tp.val(a)) / static_cast<T>(n)});
    return tp.emplace(std::move(v), [a, n](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(a.id, TensorT<T>::full(t.val(a).dims(), g[0] / static_cast<T>(n)));
    });
}

/// Mean absolute error. Subgradient at 0 is 0.
template <typename T>
Var<T> ad_l1_loss(Tape<T>& tp, Var<T> pred, Var<T> target) {
    const TensorT<T>& p = tp.val(pred);
    const TensorT<T>& y = tp.val(target);
    detail::check_same_shape(p, y, "l1_loss");
    T acc = T(0);
    for (std::size_t i = 0; i < p.numel(); ++i) acc += std::abs(p[i] - y[i]);
    const std::size_t n = p.numel();
    TensorT<T> v({1}, {acc / static_cast<T>(n)});
    return tp.emplace(std::move(v), [pred, target, n](Tape<T>& t, const TensorT<T>& g) {
        const TensorT<T>& pv = t.val(pred);
        const TensorT<T>& yv = t.val(target);
        TensorT<T> gp = TensorT<T>::zeros(pv.dims());
        const T s = g[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < pv.numel(); ++i) {
            const T d = pv[i] - yv[i];
            gp[i] = d > T(0) ? s : (d < T(0) ? -s : T(0));
        }
        t.accum_grad(pred.id, gp);
        t.accum_grad(target.id, scale(gp, T(-1)));
    });
}

/// LayerNorm over the last dim with learnable affine.
template <typename T>
Var<T> ad_layer_norm(Tape<T>& tp, Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    const TensorT<T>& xv = tp.val(x);
    const std::size_t n = xv.dim(xv.rank() - 1);
    const std::size_t rows = xv.numel() / n;
    const TensorT<T>& gv = tp.val(gamma);
    const TensorT<T>& bv = tp.val(beta);
    if (gv.numel() != n || bv.numel() != n)
        throw DimError("layer_norm: affine params must have " + std::to_string(n) + " entries");
    TensorT<T> out = xv;
    TensorT<T> xhat = TensorT<T>::zeros(xv.dims());
    TensorT<T> inv_std = TensorT<T>::zeros({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * n;
        T mu = T(0);
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const T xh = (row[j] - mu) * is;
            xhat[r * n + j] = xh;
            out[r * n + j] = xh * gv[j] + bv[j];
        }
    }
    return tp.emplace(
        std::move(out),
        [x, gamma, beta, xhat, inv_std, n, rows](Tape<T>& t, const TensorT<T>& g) {
            const TensorT<T>& gv = t.val(gamma);
            TensorT<T> gx = TensorT<T>::zeros(t.val(x).dims());
            TensorT<T> ggam = TensorT<T>::zeros({n});
            TensorT<T> gbet = TensorT<T>::zeros({n});
            for (std::size_t r = 0; r < rows; ++r) {
                const T* grow = g.data() + r * n;
                const T* xh = xhat.data() + r * n;
                T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
                for (std::size_t j = 0; j < n; ++j) {
                    const T dxhat = grow[j] * gv[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xh[j];
                    ggam[j] += grow[j] * xh[j];
                    gbet[j] += grow[j];
                }
                mean_dxhat /= static_cast<T>(n);
                mean_dxhat_xhat /= static_cast<T>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const T dxhat = grow[j] * gv[j];
                    gx[r * n + j] = (dxhat - mean_dxhat - xh[j] * mean_dxhat_xhat) * inv_std[r];
                }
            }
            t.accum_grad(x.id, gx);
            t.accum_grad(gamma.id, ggam);
            t.accum_grad(beta.id, gbet);
        });
}

/// gather: out[i] = idx[i] >= 0 ? x[idx[i]] : 0. One linear op covers window
/// partition/reverse, pixel shuffle, nearest-neighbor upsampling and the
/// head split/merge permutations; backward is scatter-add.
template <typename T>
Var<T> ad_gather(Tape<T>& tp, Var<T> x, Dims out_dims,
                 std::shared_ptr<const std::vector<std::int64_t>> idx) {
    const TensorT<T>& xv = tp.val(x);
    if (idx->size() != dims_numel(out_dims))
        throw DimError("gather: index count does not match output dims");
    TensorT<T> out = TensorT<T>::zeros(out_dims);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const std::int64_t j = (*idx)[i];
        if (j >= 0) out[i] = xv[static_cast<std::size_t>(j)];
    }
    return tp.emplace(std::move(out), [x, idx](Tape<T>& t, const TensorT<T>& g) {
        TensorT<T> gx = TensorT<T>::zeros(t.val(x).dims());
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const std::int64_t j = (*idx)[i];
            if (j >= 0) gx[static_cast<std::size_t>(j)] += g[i];
        }
        t.accum_grad(x.id, gx);
    });
}

template <typename T>
Var<T> ad_reshape(Tape<T>& tp, Var<T> x, Dims dims) {
    TensorT<T> v = tp.val(x).reshaped(dims);
    return tp.emplace(std::move(v), [x](Tape<T>& t, const TensorT<T>& g) {
        t.accum_grad(x.id, g.reshaped(t.val(x).dims()));
    });
}

template <typename T>
Var<T> ad_concat_last(Tape<T>& tp, Var<T> a, Var<T> b) {
    const TensorT<T>& av = tp.val(a);
    const TensorT<T>& bv = tp.val(b);
    if (av.rank() != bv.rank()) throw DimError("concat_last: rank mismatch");
    for (std::size_t i = 0; i + 1 < av.rank(); ++i)
        if (av.dim(i) != bv.dim(i))
            throw DimError("concat_last: leading dims disagree, " + format_dims(av.dims()) +
                           " vs " + format_dims(bv.dims()));
    const std::size_t na = av.dim(av.rank() - 1), nb = bv.dim(bv.rank() - 1);
    Dims od = av.dims();
    od.back() = na + nb;
    TensorT<T> out = TensorT<T>::zeros(od);
    const std::size_t rows = av.numel() / na;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < na; ++j) out[r * (na + nb) + j] = av[r * na + j];
        for (std::size_t j = 0; j < nb; ++j) out[r * (na + nb) + na + j] = bv[r * nb + j];
    }
    return tp.emplace(std::move(out), [a, b, na, nb, rows](Tape<T>& t, const TensorT<T>& g) {
        TensorT<T> ga = TensorT<T>::zeros(t.val(a).dims());
        TensorT<T> gb = TensorT<T>::zeros(t.val(b).dims());
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < na; ++j) ga[r * na + j] = g[r * (na + nb) + j];
            for (std::size_t j = 0; j < nb; ++j) gb[r * nb + j] = g[r * (na + nb) + na + j];
        }
        t.accum_grad(a.id, ga);
        t.accum_grad(b.id, gb);
    });
}

/// Slice [lo, hi) of the last dim.
template <typename T>
Var<T> ad_slice_last(Tape<T>& tp, Var<T> a, std::size_t lo, std::size_t hi) {
    const TensorT<T>& av = tp.val(a);
    const std::size_t n = av.dim(av.rank() - 1);
    if (lo >= hi || hi > n) throw DimError("slice_last: bad range");
    Dims od = av.dims();
    od.back() = hi - lo;
    TensorT<T> out = TensorT<T>::zeros(od);
    const std::size_t rows = av.numel() / n;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = lo; j < hi; ++j) out[r * (hi - lo) + (j - lo)] = av[r * n + j];
    return tp.emplace(std::move(out), [a, lo, hi, n, rows](Tape<T>& t, const TensorT<T>& g) {
        TensorT<T> ga = TensorT<T>::zeros(t.val(a).dims());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = lo; j < hi; ++j) ga[r * n + j] = g[r * (hi - lo) + (j - lo)];
        t.accum_grad(a.id, ga);
    });
}

// --- finite-difference gradient checking -------------------------------------

struct GradCheckReport {
    double max_err = 0.0;  // |analytic - fd| / max(1, |analytic|, |fd|)
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double fd_at_worst = 0.0;
    std::size_t coords_checked = 0;
    bool pass = false;
};

/// Central-difference check of tape gradients. `build` must be deterministic:
/// it gets a fresh tape plus one Var per entry of `params` and returns the
/// scalar loss. Coordinates are sampled across all parameters when
/// `total_coords` is positive, otherwise every coordinate is checked.
/// Per-coordinate step is eps * (1 + |x|).
template <typename T, typename BuildFn>
GradCheckReport grad_check(BuildFn&& build, std::map<std::string, TensorT<T>>& params, T eps,
                           double tol, Rng& rng, std::int64_t total_coords = -1) {
    if (eps < T(1e-5) || eps > T(1e-2)) throw ContractError("grad_check: eps outside [1e-5, 1e-2]");

    auto eval_loss = [&](void) -> T {
        Tape<T> tape;
        std::map<std::string, Var<T>> vars;
        for (auto& [name, t] : params) vars[name] = tape.param(name, t);
        Var<T> loss = build(tape, vars);
        const TensorT<T>& lv = tape.val(loss);
        if (lv.numel() != 1) throw ContractError("grad_check: loss must be scalar");
        if (!std::isfinite(static_cast<double>(lv[0])))
            throw NumericError("grad_check: non-finite loss");
        return lv[0];
    };

    // Analytic gradients once.
    std::map<std::string, TensorT<T>> analytic;
    {
        Tape<T> tape;
        std::map<std::string, Var<T>> vars;
        for (auto& [name, t] : params) vars[name] = tape.param(name, t);
        Var<T> loss = build(tape, vars);
        if (tape.val(loss).numel() != 1) throw ContractError("grad_check: loss must be scalar");
        if (!std::isfinite(static_cast<double>(tape.val(loss)[0])))
            throw NumericError("grad_check: non-finite loss");
        analytic = tape.backward(loss);
    }

    std::vector<std::pair<std::string, std::size_t>> coords;
    if (total_coords < 0) {
        for (auto& [name, t] : params)
            for (std::size_t i = 0; i < t.numel(); ++i) coords.emplace_back(name, i);
    } else {
        std::vector<std::pair<std::string, std::size_t>> all;
        for (auto& [name, t] : params) all.emplace_back(name, t.numel());
        std::size_t total = 0;
        for (auto& [n, c] : all) total += c;
        for (std::int64_t k = 0; k < total_coords; ++k) {
            std::size_t pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
            for (auto& [name, c] : all) {
                if (pick < c) {
                    coords.emplace_back(name, pick);
                    break;
                }
                pick -= c;
            }
        }
    }

    GradCheckReport rep;
    rep.coords_checked = coords.size();
    for (const auto& [name, idx] : coords) {
        TensorT<T>& t = params.at(name);
        const T x0 = t[idx];
        const T h = eps * (T(1) + std::abs(x0));
        t[idx] = x0 + h;
        const T fp = eval_loss();
        t[idx] = x0 - h;
        const T fm = eval_loss();
        t[idx] = x0;
        const double fd = (static_cast<double>(fp) - static_cast<double>(fm)) /
                          (2.0 * static_cast<double>(h));
        const double an = static_cast<double>(analytic.at(name)[idx]);
        const double err = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
        if (err > rep.max_err) {
            rep.max_err = err;
            rep.worst_param = name;
            rep.worst_index = idx;
            rep.analytic_at_worst = an;
            rep.fd_at_worst = fd;
        }
    }
    rep.pass = rep.max_err <= tol;
    return rep;
}

}  // namespace ribsr
