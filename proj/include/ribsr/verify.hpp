#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ribsr/attention.hpp"
#include "ribsr/blocks.hpp"
#include "ribsr/posbias.hpp"
#include "ribsr/report.hpp"

namespace ribsr {

// The verify suites back the `verify` CLI subcommand: the score-decomposition
// identity, streaming-vs-naive equivalence (values and gradients), the FD
// gradient suites, and cache bit-identity. Everything is seeded and
// deterministic.

struct VerifyCase {
    std::string name;
    bool pass = false;
    double metric = 0.0;   // suite-specific: max error, mismatch count, ...
    double tolerance = 0.0;
    std::string detail;
};

struct VerifyOptions {
    bool use_f64 = false;
    bool break_eq6 = false;  // fault-injection hook: perturbs one route's scaling
};

namespace verify_detail {

template <typename T>
VerifyCase eq6_identity(int cases, double tol, bool broken) {
    VerifyCase vc;
    vc.name = "eq6-identity";
    vc.tolerance = tol;
    Rng rng(2024);
    double worst = 0;
    for (int t = 0; t < cases; ++t) {
        const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 48));
        const std::size_t dh = static_cast<std::size_t>(rng.uniform_int(1, 32));
        const std::size_t r = static_cast<std::size_t>(rng.uniform_int(1, 24));
        TensorT<T> qc = random_uniform<T>({1, n, dh}, rng);
        TensorT<T> kc = random_uniform<T>({1, n, dh}, rng);
        TensorT<T> qp = random_uniform<T>({1, n, r}, rng);
        TensorT<T> kp = random_uniform<T>({1, n, r}, rng);
        T sc = T(1) / std::sqrt(static_cast<T>(dh));
        const T sp = T(1) / std::sqrt(static_cast<T>(r));
        TensorT<T> sum_route =
            add(scale(matmul(qc, kc, true), sc), scale(matmul(qp, kp, true), sp));
        if (broken) sc *= T(1.001);  // concat route gets a wrong content scale
        TensorT<T> q = TensorT<T>::zeros({1, n, dh + r});
        TensorT<T> k = TensorT<T>::zeros({1, n, dh + r});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t d = 0; d < dh; ++d) {
                q.at3(0, i, d) = qc.at3(0, i, d) * sc;
                k.at3(0, i, d) = kc.at3(0, i, d);
            }
            for (std::size_t d = 0; d < r; ++d) {
                q.at3(0, i, dh + d) = qp.at3(0, i, d) * sp;
                k.at3(0, i, dh + d) = kp.at3(0, i, d);
            }
        }
        worst = std::max(worst,
                         static_cast<double>(max_abs_diff(matmul(q, k, true), sum_route)));
    }
    vc.metric = worst;
    vc.pass = worst <= tol;
    vc.detail = "concat route vs content+bias sum over " + std::to_string(cases) + " cases";
    return vc;
}

template <typename T>
VerifyCase stream_equiv(int cases, double tol) {
    VerifyCase vc;
    vc.name = "streaming-vs-naive";
    vc.tolerance = tol;
    Rng rng(2025);
    double worst = 0;
    const int tiles[] = {1, 3, 16, 64};
    for (int t = 0; t < cases; ++t) {
        const std::size_t heads = rng.uniform_int(0, 1) ? 1 : 3;
        const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 257));
        const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 8));
        TensorT<T> q = random_uniform<T>({heads, n, d}, rng);
        TensorT<T> k = random_uniform<T>({heads, n, d}, rng);
        TensorT<T> v = random_uniform<T>({heads, n, d}, rng);
        std::vector<std::uint8_t> mask;
        if (rng.uniform_int(0, 1)) {
            mask.assign(n, 1);
            for (auto& b : mask) b = rng.uniform_int(0, 4) > 0;
        }
        auto nv = attend_naive(q, k, v, mask);
        auto st = attend_streaming(q, k, v, mask, tiles[rng.uniform_int(0, 3)]);
        worst = std::max(worst, static_cast<double>(max_abs_diff(st.out, nv.out)));
    }
    vc.metric = worst;
    vc.pass = worst <= tol;
    vc.detail = std::to_string(cases) + " randomized cases, N up to 257";
    return vc;
}

template <typename T>
VerifyCase stream_grad_equiv(int cases, double tol) {
    VerifyCase vc;
    vc.name = "streaming-grad-vs-naive";
    vc.tolerance = tol;
    Rng rng(2026);
    double worst = 0;
    for (int t = 0; t < cases; ++t) {
        const std::size_t heads = rng.uniform_int(0, 1) ? 1 : 2;
        const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 64));
        const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 6));
        const int tile = static_cast<int>(rng.uniform_int(1, 17));
        TensorT<T> q = random_uniform<T>({1, heads, n, d}, rng);
        TensorT<T> k = random_uniform<T>({1, heads, n, d}, rng);
        TensorT<T> v = random_uniform<T>({1, heads, n, d}, rng);
        TensorT<T> w = random_uniform<T>({1, heads, n, d}, rng);
        auto masks = std::make_shared<std::vector<std::vector<std::uint8_t>>>();
        if (rng.uniform_int(0, 1)) {
            masks->emplace_back(n, 1);
            for (auto& b : masks->back()) b = rng.uniform_int(0, 4) > 0;
        }
        auto shared_masks =
            std::shared_ptr<const std::vector<std::vector<std::uint8_t>>>(masks);
        auto grads_for = [&](bool streaming) {
            Tape<T> tape;
            std::map<std::string, Var<T>> vars;
            vars["q"] = tape.param("q", q);
            vars["k"] = tape.param("k", k);
            vars["v"] = tape.param("v", v);
            Var<T> o = streaming
                           ? ad_attend_streaming(tape, vars["q"], vars["k"], vars["v"],
                                                 shared_masks, tile)
                           : ad_attend_naive(tape, vars["q"], vars["k"], vars["v"],
                                             shared_masks);
            return tape.backward(ad_sum(tape, ad_mul(tape, o, tape.leaf(w))));
        };
        auto gn = grads_for(false);
        auto gs = grads_for(true);
        for (const char* name : {"q", "k", "v"})
            worst = std::max(worst,
                             static_cast<double>(max_abs_diff(gn.at(name), gs.at(name))));
    }
    vc.metric = worst;
    vc.pass = worst <= tol;
    vc.detail = std::to_string(cases) + " randomized backward comparisons";
    return vc;
}

template <typename T>
GradCheckReport rib_grad_report(T eps, std::int64_t coords) {
    Rng rng(2027);
    auto geom = make_window_geometry<T>(4);
    auto p = init_rib_params<T>(3, 8, 4, 2, rng);
    std::map<std::string, TensorT<T>> params{{"wh", p.w_h},
                                             {"bh", p.b_h},
                                             {"wpq", p.w_pq},
                                             {"wpk", p.w_pk}};
    auto build = [&](Tape<T>& t, const std::map<std::string, Var<T>>& v) {
        auto [qp, kp] = rib_positional_tokens_ad(t, geom, 3, v.at("wh"), v.at("bh"),
                                                 v.at("wpq"), v.at("wpk"));
        auto sp = ad_matmul(t, qp, kp, true);
        return ad_mean(t, ad_mul(t, sp, sp));
    };
    Rng coord_rng(2028);
    return grad_check<T>(build, params, eps, 1.0, coord_rng, coords);
}

template <typename T>
GradCheckReport cla_grad_report(T eps, std::int64_t coords) {
    Rng rng(2029);
    const std::size_t d = 6;
    std::map<std::string, TensorT<T>> params;
    params["x"] = random_uniform<T>({1, 4, 4, d}, rng);
    params["o"] = random_uniform<T>({1, 4, 4, d}, rng);
    params["dww"] = random_uniform<T>({3, 3, d}, rng, T(-0.4), T(0.4));
    params["dwb"] = random_uniform<T>({d}, rng, T(-0.1), T(0.1));
    params["pww"] = random_uniform<T>({d, d}, rng, T(-0.4), T(0.4));
    params["pwb"] = random_uniform<T>({d}, rng, T(-0.1), T(0.1));
    params["wo"] = random_uniform<T>({d, d}, rng, T(-0.4), T(0.4));
    auto build = [](Tape<T>& t, const std::map<std::string, Var<T>>& v) {
        Var<T> y = ad_cla_gate(t, v.at("x"), v.at("o"), GatingMode::cla, v.at("dww"),
                               v.at("dwb"), v.at("pww"), v.at("pwb"), v.at("wo"));
        return ad_mean(t, ad_mul(t, y, y));
    };
    Rng coord_rng(2030);
    return grad_check<T>(build, params, eps, 1.0, coord_rng, coords);
}

template <typename T>
GradCheckReport ffn_grad_report(T eps, std::int64_t coords) {
    Rng rng(2031);
    const std::size_t d = 6, fh = 9;
    std::map<std::string, TensorT<T>> params;
    params["x"] = random_uniform<T>({1, 4, 4, d}, rng);
    params["w1"] = random_uniform<T>({d, fh}, rng, T(-0.4), T(0.4));
    params["b1"] = random_uniform<T>({fh}, rng, T(-0.1), T(0.1));
    params["dww"] = random_uniform<T>({3, 3, fh}, rng, T(-0.4), T(0.4));
    params["dwb"] = random_uniform<T>({fh}, rng, T(-0.1), T(0.1));
    params["w2"] = random_uniform<T>({fh, d}, rng, T(-0.4), T(0.4));
    params["b2"] = random_uniform<T>({d}, rng, T(-0.1), T(0.1));
    auto build = [](Tape<T>& t, const std::map<std::string, Var<T>>& v) {
        Var<T> y = ad_conv_ffn(t, v.at("x"), v.at("w1"), v.at("b1"), v.at("dww"),
                               v.at("dwb"), v.at("w2"), v.at("b2"));
        return ad_mean(t, ad_mul(t, y, y));
    };
    Rng coord_rng(2032);
    return grad_check<T>(build, params, eps, 1.0, coord_rng, coords);
}

template <typename T>
GradCheckReport layer_grad_report(T eps, std::int64_t coords) {
    SSTConfig cfg = SSTConfig::micro();
    Rng rng(2033);
    auto ps = init_sst_params<T>(cfg, rng);
    Rng data_rng(2034);
    TensorT<T> input = random_uniform<T>({1, 8, 8, 16}, data_rng);
    TensorT<T> target = random_uniform<T>({1, 8, 8, 16}, data_rng);
    std::map<std::string, TensorT<T>> params;
    for (auto& [name, t] : ps)
        if (name.rfind("b0.l0.", 0) == 0) params[name] = t;
    auto build = [&](Tape<T>& t, const std::map<std::string, Var<T>>& v) {
        ForwardOptions<T> opt;
        Var<T> y = ad_sst_layer(t, t.leaf(input), cfg, 0, v, "b0.l0.", opt);
        // smooth objective: |.| kinks would dominate the FD error at f32 steps
        Var<T> d = ad_sub(t, y, t.leaf(target));
        return ad_mean(t, ad_mul(t, d, d));
    };
    Rng coord_rng(2035);
    return grad_check<T>(build, params, eps, 1.0, coord_rng, coords);
}

template <typename T>
VerifyCase cache_identity() {
    VerifyCase vc;
    vc.name = "pos-token-cache-bit-identity";
    vc.tolerance = 0;
    Rng rng(2036);
    auto p = init_rib_params<T>(6, 16, 8, 2, rng);
    auto geom = make_window_geometry<T>(8);
    PosTokenCacheT<T> cache;
    auto [q1, k1] = cache.get_or_compute(geom, p);
    auto [q2, k2] = cache.get_or_compute(geom, p);
    auto [fq, fk] = rib_positional_tokens(geom, p);
    const bool ok = q1.bit_equal(q2) && k1.bit_equal(k2) && q1.bit_equal(fq) && k1.bit_equal(fk);
    vc.metric = ok ? 0 : 1;
    vc.pass = ok;
    vc.detail = "cached == fresh, bitwise";
    return vc;
}

}  // namespace verify_detail

template <typename T>
std::vector<VerifyCase> run_verify_suites_t(const VerifyOptions& opt) {
    using namespace verify_detail;
    const bool f64 = opt.use_f64;
    const double eq6_tol = f64 ? 1e-12 : 1e-5;
    const double equiv_tol = f64 ? 1e-12 : 1e-5;
    const double grad_tol = f64 ? 1e-6 : 1e-3;
    const T eps = f64 ? T(1e-5) : T(1e-2);

    std::vector<VerifyCase> out;
    out.push_back(eq6_identity<T>(200, eq6_tol, opt.break_eq6));
    out.push_back(stream_equiv<T>(100, equiv_tol));
    out.push_back(stream_grad_equiv<T>(40, f64 ? 1e-11 : 1e-5));
    {
        auto rep = rib_grad_report<T>(eps, 40);
        out.push_back({"grad-rib", rep.max_err <= grad_tol, rep.max_err, grad_tol,
                       "worst " + rep.worst_param});
    }
    {
        auto rep = cla_grad_report<T>(eps, 40);
        out.push_back({"grad-cla", rep.max_err <= grad_tol, rep.max_err, grad_tol,
                       "worst " + rep.worst_param});
    }
    {
        auto rep = ffn_grad_report<T>(eps, 40);
        out.push_back({"grad-ffn", rep.max_err <= grad_tol, rep.max_err, grad_tol,
                       "worst " + rep.worst_param});
    }
    {
        auto rep = layer_grad_report<T>(eps, 40);
        out.push_back({"grad-sst-layer", rep.max_err <= grad_tol, rep.max_err, grad_tol,
                       "worst " + rep.worst_param});
    }
    out.push_back(cache_identity<T>());
    return out;
}

inline std::vector<VerifyCase> run_verify_suites(const VerifyOptions& opt) {
    return opt.use_f64 ? run_verify_suites_t<double>(opt) : run_verify_suites_t<float>(opt);
}

}  // namespace ribsr
