#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <thread>

#include "ribsr/posbias.hpp"

using namespace ribsr;

TEST_CASE("window geometry: inclusive endpoints, row-major (y,x)") {
    auto g = make_window_geometry<float>(3);
    CHECK(g.n == 9);
    CHECK(g.coords.at2(0, 0) == -1.0f);  // token 0 = (y=0,x=0)
    CHECK(g.coords.at2(0, 1) == -1.0f);
    CHECK(g.coords.at2(1, 1) == 0.0f);   // token 1 = (y=0,x=1)
    CHECK(g.coords.at2(1, 0) == -1.0f);
    CHECK(g.coords.at2(8, 0) == 1.0f);
    CHECK(g.coords.at2(8, 1) == 1.0f);
    for (std::size_t i = 0; i < g.coords.numel(); ++i) CHECK(std::abs(g.coords[i]) <= 1.0f);

    auto g1 = make_window_geometry<float>(1);
    CHECK(g1.coords.at2(0, 0) == 0.0f);
    CHECK(g1.coords.at2(0, 1) == 0.0f);
}

TEST_CASE("fourier embed: width 2+4L, L=10 gives 42") {
    auto g = make_window_geometry<float>(4);
    for (int l = 0; l <= 20; ++l) {
        auto e = fourier_embed(g.coords, l);
        CHECK(e.dim(1) == static_cast<std::size_t>(2 + 4 * l));
    }
    CHECK(fourier_embed(g.coords, 10).dim(1) == 42);
}

TEST_CASE("fourier embed at origin: sin blocks 0, cos blocks 1") {
    Tensor x = Tensor::zeros({1, 2});
    auto e = fourier_embed(x, 3);
    CHECK(e[0] == 0.0f);
    CHECK(e[1] == 0.0f);
    for (int l = 0; l < 3; ++l) {
        CHECK(e[2 + 4 * l + 0] == 0.0f);
        CHECK(e[2 + 4 * l + 1] == 0.0f);
        CHECK(e[2 + 4 * l + 2] == 1.0f);
        CHECK(e[2 + 4 * l + 3] == 1.0f);
    }
}

TEST_CASE("fourier embed L=1 at (1,-1): odd/even symmetry") {
    Tensor x = Tensor::from_list({1, 2}, {1.0f, -1.0f});
    auto e = fourier_embed(x, 1);
    CHECK(e.dim(1) == 6);
    CHECK(e[0] == 1.0f);
    CHECK(e[1] == -1.0f);
    CHECK(e[2] == doctest::Approx(std::sin(1.0f)));
    CHECK(e[3] == doctest::Approx(-std::sin(1.0f)));
    CHECK(e[4] == doctest::Approx(std::cos(1.0f)));
    CHECK(e[5] == doctest::Approx(std::cos(1.0f)));
}

TEST_CASE("fourier embed determinism and Lipschitz bound") {
    auto g = make_window_geometry<float>(8);
    auto e1 = fourier_embed(g.coords, 10);
    auto e2 = fourier_embed(g.coords, 10);
    CHECK(e1.bit_equal(e2));

    // every component of the embedding has |d/dx| <= 2^(L-1), so
    // |gamma(x)-gamma(y)|_inf <= 2^(L-1) * |x-y|_1 on [-1,1]^2
    Rng rng(77);
    const int bands = 6;
    const float lip = std::pow(2.0f, bands - 1);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor x = random_uniform<float>({1, 2}, rng);
        Tensor y = random_uniform<float>({1, 2}, rng);
        const float dist = std::abs(x[0] - y[0]) + std::abs(x[1] - y[1]);
        Tensor ex = fourier_embed(x, bands);
        Tensor ey = fourier_embed(y, bands);
        CHECK(max_abs_diff(ex, ey) <= lip * dist + 1e-6f);
    }
}

TEST_CASE("rib positional tokens: zero projections give zero tokens") {
    Rng rng(1);
    auto p = init_rib_params<float>(4, 8, 4, 2, rng);
    p.w_pq = Tensor::zeros(p.w_pq.dims());
    p.w_pk = Tensor::zeros(p.w_pk.dims());
    auto g = make_window_geometry<float>(4);
    auto [qp, kp] = rib_positional_tokens(g, p);
    CHECK(max_abs(qp) == 0.0f);
    CHECK(max_abs(kp) == 0.0f);
}

TEST_CASE("rib positional tokens: shapes and determinism") {
    Rng rng(2);
    auto p = init_rib_params<float>(10, 32, 16, 3, rng);
    auto g = make_window_geometry<float>(8);
    auto [qp1, kp1] = rib_positional_tokens(g, p);
    auto [qp2, kp2] = rib_positional_tokens(g, p);
    CHECK(qp1.dims() == Dims{3, 64, 16});
    CHECK(kp1.dims() == Dims{3, 64, 16});
    CHECK(qp1.bit_equal(qp2));
    CHECK(kp1.bit_equal(kp2));
}

TEST_CASE("param counts: RPB grows as (2M-1)^2, RIB independent of M") {
    CHECK(rpb_param_count(64, 6) == 96774);
    CHECK(rpb_param_count(1, 1) == 1);
    CHECK(rpb_param_count(2, 1) == 9);

    Rng rng(3);
    auto p = init_rib_params<float>(10, 32, 18, 6, rng);
    CHECK(rib_param_count(p) == 8288);
    // The count is a pure function of (L, d_h, R, heads); instantiating the
    // geometry at different M cannot change it.
    for (int m : {8, 16, 32, 64, 96}) {
        auto g = make_window_geometry<float>(m);
        auto [qp, kp] = rib_positional_tokens(g, p);
        CHECK(qp.dim(2) == 18);
        CHECK(rib_param_count(p) == 8288);
        (void)g;
    }
}

TEST_CASE("rpb bias matrix: zero table, diag equality, translation property") {
    Rng rng(4);
    auto zero = make_rpb_table<float>(3, 2, Tensor::zeros({2, 25}));
    CHECK(max_abs(rpb_bias_matrix(zero)) == 0.0f);

    auto t = init_rpb_table<float>(3, 2, rng, 1.0f);
    auto b = rpb_bias_matrix(t);
    CHECK(b.dims() == Dims{2, 9, 9});
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 1; i < 9; ++i)
            CHECK(b.at3(h, i, i) == b.at3(h, 0, 0));  // offset (0,0) everywhere

    // Same-offset pairs share the bias value.
    const int m = 3, n = 9;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k)
                for (int l = 0; l < n; ++l) {
                    const int dyi = j / m - i / m, dxi = j % m - i % m;
                    const int dyk = l / m - k / m, dxk = l % m - k % m;
                    if (dyi == dyk && dxi == dxk)
                        CHECK(b.at3(0, i, j) == b.at3(0, k, l));
                }
}

TEST_CASE("rpb index map: M=2 yields exactly 9 distinct values") {
    // Enumeration oracle over all 16 pairs.
    auto idx = rpb_index_map(2);
    CHECK(idx.size() == 16);
    std::set<std::size_t> distinct(idx.begin(), idx.end());
    CHECK(distinct.size() == 9);
    for (auto v : distinct) CHECK(v < 9);
}

TEST_CASE("rope: config validation and norm preservation") {
    CHECK_THROWS_AS(make_rope_config(30), ConfigError);
    CHECK_THROWS_AS(make_rope_config(2), ConfigError);

    Rng rng(5);
    auto cfg = make_rope_config(16);
    auto g = make_window_geometry<float>(5);
    Tensor q = random_uniform<float>({2, 25, 16}, rng);
    Tensor r = rope_rotate(q, g, cfg);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < 25; ++i) {
            double n0 = 0, n1 = 0;
            for (std::size_t d = 0; d < 16; ++d) {
                n0 += q.at3(h, i, d) * q.at3(h, i, d);
                n1 += r.at3(h, i, d) * r.at3(h, i, d);
            }
            CHECK(std::abs(std::sqrt(n0) - std::sqrt(n1)) <= 1e-6 * std::max(1.0, std::sqrt(n0)));
        }
}

TEST_CASE("rope: zero offset leaves dot products unchanged") {
    Rng rng(6);
    auto cfg = make_rope_config(16);
    auto g = make_window_geometry<float>(4);
    Tensor q = random_uniform<float>({1, 16, 16}, rng);
    Tensor k = random_uniform<float>({1, 16, 16}, rng);
    Tensor rq = rope_rotate(q, g, cfg);
    Tensor rk = rope_rotate(k, g, cfg);
    for (std::size_t i = 0; i < 16; ++i) {
        double plain = 0, rot = 0;
        for (std::size_t d = 0; d < 16; ++d) {
            plain += q.at3(0, i, d) * k.at3(0, i, d);
            rot += rq.at3(0, i, d) * rk.at3(0, i, d);
        }
        CHECK(rot == doctest::Approx(plain).epsilon(1e-5));
    }
}

TEST_CASE("rope: dot products invariant under joint translation") {
    Rng rng(7);
    const int m = 6;
    auto cfg = make_rope_config(16);
    auto g = make_window_geometry<float>(m);
    Tensor q = random_uniform<float>({1, 36, 16}, rng);
    Tensor k = random_uniform<float>({1, 36, 16}, rng);
    Tensor rq = rope_rotate(q, g, cfg);
    Tensor rk = rope_rotate(k, g, cfg);

    auto dot = [&](const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
        double s = 0;
        for (std::size_t d = 0; d < 16; ++d) s += a.at3(0, i, d) * b.at3(0, j, d);
        return s;
    };

    // Compare (i,j) with (i+shift, j+shift): same content would be required
    // for the full property, so copy content accordingly: use tokens with the
    // same content rows by re-rotating a constant pair.
    Tensor qc = Tensor::zeros({1, 36, 16});
    Tensor kc = Tensor::zeros({1, 36, 16});
    for (std::size_t i = 0; i < 36; ++i)
        for (std::size_t d = 0; d < 16; ++d) {
            qc.at3(0, i, d) = q.at3(0, 0, d);
            kc.at3(0, i, d) = k.at3(0, 0, d);
        }
    Tensor rqc = rope_rotate(qc, g, cfg);
    Tensor rkc = rope_rotate(kc, g, cfg);
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            // pair (1,1)->(2,3) vs shifted by (dy,dx)
            const std::size_t i0 = 1 * m + 1, j0 = 2 * m + 3;
            const std::size_t i1 = (1 + dy) * m + 1 + dx, j1 = (2 + dy) * m + 3 + dx;
            CHECK(std::abs(dot(rqc, i0, rkc, j0) - dot(rqc, i1, rkc, j1)) <= 1e-5);
        }
}

TEST_CASE("rope rotation gradient matches finite differences") {
    Rng rng(78);
    const int m = 4;
    auto g = make_window_geometry<double>(m);
    auto cfg = make_rope_config(8);
    std::map<std::string, TensorD> params;
    params["x"] = random_uniform<double>({2, 16, 8}, rng);
    TensorD w = random_uniform<double>({2, 16, 8}, rng);
    auto build = [&](Tape<double>& t, const std::map<std::string, Var<double>>& v) {
        Var<double> r = ad_rope_rotate(t, v.at("x"), g, cfg);
        return ad_sum(t, ad_mul(t, r, t.leaf(w)));
    };
    Rng coord_rng(79);
    auto rep = grad_check<double>(build, params, 1e-5, 1e-6, coord_rng, 60);
    INFO("max_err " << rep.max_err);
    CHECK(rep.pass);
}

TEST_CASE("bias_by_offset: zeros, constants, exact recovery of index values") {
    auto z = bias_by_offset(Tensor::zeros({16, 16}), 4);
    CHECK(z.dims() == Dims{49});
    CHECK(max_abs(z) == 0.0f);

    auto c = bias_by_offset(Tensor::full({9, 9}, 2.5f), 3);
    for (std::size_t i = 0; i < c.numel(); ++i) CHECK(c[i] == doctest::Approx(2.5f));

    // M=2: fill S_p with the index map itself; each offset group is constant,
    // so the mean recovers the 9 index values exactly.
    auto idx = rpb_index_map(2);
    Tensor sp = Tensor::zeros({4, 4});
    for (std::size_t i = 0; i < 16; ++i) sp[i] = static_cast<float>(idx[i]);
    auto rec = bias_by_offset(sp, 2);
    CHECK(rec.dims() == Dims{9});
    for (std::size_t k = 0; k < 9; ++k) CHECK(rec[k] == doctest::Approx(static_cast<float>(k)));
}

TEST_CASE("offset group sizes are (M-|dy|)(M-|dx|) and sum to N^2") {
    for (int m : {1, 2, 3, 5, 8}) {
        auto c = offset_group_sizes(m);
        std::size_t total = 0;
        const int side = 2 * m - 1;
        for (int dy = -(m - 1); dy <= m - 1; ++dy)
            for (int dx = -(m - 1); dx <= m - 1; ++dx) {
                const std::size_t expect =
                    static_cast<std::size_t>((m - std::abs(dy)) * (m - std::abs(dx)));
                CHECK(c[(dy + m - 1) * side + dx + m - 1] == expect);
                total += expect;
            }
        CHECK(total == static_cast<std::size_t>(m) * m * m * m);
    }
}

TEST_CASE("pos token cache: hits are bitwise identical to fresh computation") {
    Rng rng(8);
    auto p = init_rib_params<float>(6, 16, 8, 2, rng);
    auto g = make_window_geometry<float>(8);
    PosTokenCache cache;
    auto [q1, k1] = cache.get_or_compute(g, p);
    auto [q2, k2] = cache.get_or_compute(g, p);
    auto [fq, fk] = rib_positional_tokens(g, p);
    CHECK(q1.bit_equal(q2));
    CHECK(q1.bit_equal(fq));
    CHECK(k1.bit_equal(k2));
    CHECK(k1.bit_equal(fk));
    CHECK(cache.entries() == 1);
    CHECK(cache.hits() == 1);

    // Param mutation must miss via the version key.
    p.w_h[0] += 1.0f;
    p.version++;
    auto [q3, k3] = cache.get_or_compute(g, p);
    CHECK(cache.entries() == 2);
    CHECK_FALSE(q3.bit_equal(q1));
    (void)k3;
}

TEST_CASE("pos token cache: concurrent readers with exclusive insert") {
    Rng rng(9);
    auto p = init_rib_params<float>(4, 8, 4, 1, rng);
    PosTokenCacheT<float> cache;
    auto g = make_window_geometry<float>(6);
    auto [ref_q, ref_k] = rib_positional_tokens(g, p);
    std::vector<std::thread> workers;
    std::atomic<int> bad{0};
    for (int w = 0; w < 4; ++w)
        workers.emplace_back([&] {
            for (int it = 0; it < 50; ++it) {
                auto [q, k] = cache.get_or_compute(g, p);
                if (!q.bit_equal(ref_q) || !k.bit_equal(ref_k)) ++bad;
            }
        });
    for (auto& t : workers) t.join();
    CHECK(bad.load() == 0);
    CHECK(cache.entries() == 1);
}

TEST_CASE("rib gradient path (coordinate MLP through projections) FD check") {
    Rng rng(10);
    auto g = make_window_geometry<double>(4);
    std::map<std::string, TensorD> params;
    auto p = init_rib_params<double>(3, 8, 4, 2, rng);
    params["wh"] = p.w_h;
    params["bh"] = p.b_h;
    params["wpq"] = p.w_pq;
    params["wpk"] = p.w_pk;
    auto build = [&](Tape<double>& t, const std::map<std::string, Var<double>>& v) {
        auto [qp, kp] = rib_positional_tokens_ad(t, g, 3, v.at("wh"), v.at("bh"), v.at("wpq"),
                                                 v.at("wpk"));
        auto sp = ad_matmul(t, qp, kp, true);
        return ad_mean(t, ad_mul(t, sp, sp));
    };
    Rng coord_rng(11);
    auto rep = grad_check<double>(build, params, 1e-5, 1e-6, coord_rng);
    INFO("max_err " << rep.max_err << " at " << rep.worst_param);
    CHECK(rep.pass);

    // f32 at the documented tolerance
    std::map<std::string, Tensor> params32;
    for (auto& [k, v] : params) params32[k] = cast_tensor<float>(v);
    auto g32 = make_window_geometry<float>(4);
    auto build32 = [&](Tape<float>& t, const std::map<std::string, Var<float>>& v) {
        auto [qp, kp] =
            rib_positional_tokens_ad(t, g32, 3, v.at("wh"), v.at("bh"), v.at("wpq"), v.at("wpk"));
        auto sp = ad_matmul(t, qp, kp, true);
        return ad_mean(t, ad_mul(t, sp, sp));
    };
    Rng coord_rng2(12);
    auto rep32 = grad_check<float>(build32, params32, 1e-2f, 1e-3, coord_rng2, 40);
    INFO("f32 max_err " << rep32.max_err << " at " << rep32.worst_param);
    CHECK(rep32.pass);
}

TEST_CASE("fit_rib_to_rpb: zero target is exactly representable") {
    Rng rng(13);
    auto target = make_rpb_table<float>(4, 1, Tensor::zeros({1, 49}));
    auto p0 = init_rib_params<float>(4, 16, 4, 1, rng);
    // The zero minimum is quartic in the joint projections, so plain GD
    // converges like 1/t; crossing 1e-6 takes a few thousand steps.
    auto res = fit_rib_to_rpb(target, p0, 8000, 1.0);
    INFO("final mse " << res.final_mse);
    CHECK(res.final_mse <= 1e-6);
}

TEST_CASE("fit: rank-1 separable target b(i,j)=u_i*v_j fits below 1e-3") {
    Rng rng(14);
    const int m = 4, n = 16;
    // Exactly representable by the factored form for any R >= 1. An outer
    // product has no offset structure, so this exercises the dense-target
    // path directly.
    Tensor u = random_uniform<float>({static_cast<std::size_t>(n)}, rng, -1.0f, 1.0f);
    Tensor v = random_uniform<float>({static_cast<std::size_t>(n)}, rng, -1.0f, 1.0f);
    Tensor dense = Tensor::zeros({1, static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) dense.at3(0, i, j) = u[i] * v[j];
    auto p0 = init_rib_params<float>(6, 32, 4, 1, rng);
    auto res = fit_rib_to_dense(dense, m, p0, 3000, 0.25);
    INFO("final mse " << res.final_mse);
    CHECK(res.final_mse <= 1e-3);
}

TEST_CASE("fit_rib_to_rpb: smooth Gaussian bump, higher rank fits at least as well") {
    Rng rng(15);
    const int m = 8;
    const int side = 2 * m - 1;
    Tensor table = Tensor::zeros({1, static_cast<std::size_t>(side * side)});
    for (int dy = -(m - 1); dy <= m - 1; ++dy)
        for (int dx = -(m - 1); dx <= m - 1; ++dx)
            table[(dy + m - 1) * side + dx + m - 1] =
                std::exp(-(dy * dy + dx * dx) / (2.0f * 2.5f * 2.5f));
    auto target = make_rpb_table<float>(m, 1, table);

    auto fit_at_rank = [&](int rank) {
        Rng init_rng(42);  // matched init stream across ranks
        auto p0 = init_rib_params<float>(6, 32, rank, 1, init_rng);
        return fit_rib_to_rpb(target, p0, 2000, 0.1).final_mse;
    };
    const double mse2 = fit_at_rank(2);
    const double mse16 = fit_at_rank(16);
    INFO("mse(R=2) " << mse2 << " mse(R=16) " << mse16);
    CHECK(mse16 < mse2);
}

TEST_CASE("fit_rib_to_rpb: divergence raises a numeric error naming the step") {
    Rng rng(16);
    auto target = init_rpb_table<float>(4, 1, rng, 1.0f);
    auto p0 = init_rib_params<float>(4, 16, 4, 1, rng);
    CHECK_THROWS_AS(fit_rib_to_rpb(target, p0, 200, 1e6), NumericError);
}
