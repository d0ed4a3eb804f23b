#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "ribsr/autodiff.hpp"
#include "ribsr/tensor.hpp"

using namespace ribsr;

TEST_CASE("grad of sum(x*x) is 2x") {
    Tape<float> tape;
    Var<float> x = tape.param("x", Tensor::from_list({3}, {1, 2, 3}));
    Var<float> loss = ad_sum(tape, ad_mul(tape, x, x));
    auto grads = tape.backward(loss);
    CHECK(grads.at("x").bit_equal(Tensor::from_list({3}, {2, 4, 6})));
}

TEST_CASE("grad of sum(matmul(A,B)) has ones*B^T / A^T*ones structure") {
    Rng rng(1);
    std::map<std::string, Tensor> params;
    params["A"] = random_uniform<float>({3, 4}, rng);
    params["B"] = random_uniform<float>({4, 2}, rng);

    auto build = [](Tape<float>& t, const std::map<std::string, Var<float>>& v) {
        return ad_sum(t, ad_matmul(t, v.at("A"), v.at("B")));
    };

    // Analytic structure: dA[i,k] = sum_j B[k,j].
    {
        Tape<float> tape;
        std::map<std::string, Var<float>> vars;
        for (auto& [n, t] : params) vars[n] = tape.param(n, t);
        auto grads = tape.backward(build(tape, vars));
        const Tensor& B = params["B"];
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t k = 0; k < 4; ++k) {
                float expect = B.at2(k, 0) + B.at2(k, 1);
                CHECK(grads.at("A").at2(i, k) == doctest::Approx(expect).epsilon(1e-5));
            }
    }

    Rng coord_rng(2);
    auto rep = grad_check<float>(build, params, 1e-3f, 1e-3, coord_rng);
    INFO("worst: " << rep.worst_param << "[" << rep.worst_index << "] analytic "
                   << rep.analytic_at_worst << " fd " << rep.fd_at_worst);
    CHECK(rep.pass);
}

TEST_CASE("unused parameter gets exactly zero gradient") {
    Tape<float> tape;
    Var<float> x = tape.param("x", Tensor::from_list({2}, {1, 2}));
    tape.param("unused", Tensor::from_list({3}, {5, 5, 5}));
    Var<float> loss = ad_sum(tape, ad_mul(tape, x, x));
    auto grads = tape.backward(loss);
    CHECK(grads.at("unused").bit_equal(Tensor::zeros({3})));
}

TEST_CASE("non-scalar loss is a contract error") {
    Tape<float> tape;
    Var<float> x = tape.param("x", Tensor::from_list({2}, {1, 2}));
    Var<float> y = ad_mul(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("grad_check: sigmoid derivative at 0 is 0.25 (f64)") {
    std::map<std::string, TensorD> params;
    params["x"] = TensorD::from_list({1}, {0.0});
    auto build = [](Tape<double>& t, const std::map<std::string, Var<double>>& v) {
        return ad_sum(t, ad_sigmoid(t, v.at("x")));
    };
    Tape<double> tape;
    std::map<std::string, Var<double>> vars;
    vars["x"] = tape.param("x", params["x"]);
    auto grads = tape.backward(build(tape, vars));
    CHECK(grads.at("x")[0] == doctest::Approx(0.25).epsilon(1e-12));

    Rng rng(3);
    auto rep = grad_check<double>(build, params, 1e-5, 1e-6, rng);
    CHECK(rep.pass);
    CHECK(std::abs(rep.fd_at_worst - 0.25) <= 1e-6);
}

TEST_CASE("grad_check rejects eps outside contract range") {
    std::map<std::string, TensorD> params;
    params["x"] = TensorD::from_list({1}, {0.0});
    auto build = [](Tape<double>& t, const std::map<std::string, Var<double>>& v) {
        return ad_sum(t, v.at("x"));
    };
    Rng rng(4);
    CHECK_THROWS_AS(grad_check<double>(build, params, 1e-6, 1e-6, rng), ContractError);
}

TEST_CASE("composite graph: layer_norm + gelu + rowvec + concat/slice FD check") {
    Rng rng(5);
    std::map<std::string, TensorD> params;
    params["x"] = random_uniform<double>({3, 6}, rng);
    params["gamma"] = random_uniform<double>({6}, rng, 0.5, 1.5);
    params["beta"] = random_uniform<double>({6}, rng, -0.2, 0.2);
    params["b"] = random_uniform<double>({6}, rng);
    params["w"] = random_uniform<double>({6, 4}, rng);

    auto build = [](Tape<double>& t, const std::map<std::string, Var<double>>& v) {
        auto h = ad_layer_norm(t, v.at("x"), v.at("gamma"), v.at("beta"), 1e-6);
        h = ad_add_rowvec(t, h, v.at("b"));
        h = ad_gelu(t, h);
        auto p = ad_matmul(t, h, v.at("w"));
        auto c = ad_concat_last(t, p, h);
        auto s = ad_slice_last(t, c, 1, 7);
        auto r = ad_reshape(t, s, Dims{18});
        return ad_mean(t, ad_mul(t, r, r));
    };
    Rng coord_rng(6);
    auto rep = grad_check<double>(build, params, 1e-5, 1e-6, coord_rng);
    INFO("max_err " << rep.max_err << " at " << rep.worst_param << "[" << rep.worst_index << "]");
    CHECK(rep.pass);
}

TEST_CASE("gather backward scatter-adds, -1 entries drop gradient") {
    Tape<float> tape;
    Var<float> x = tape.param("x", Tensor::from_list({3}, {10, 20, 30}));
    auto idx = std::make_shared<const std::vector<std::int64_t>>(
        std::vector<std::int64_t>{2, 0, 0, -1});
    Var<float> g = ad_gather(tape, x, Dims{4}, idx);
    CHECK(tape.val(g).bit_equal(Tensor::from_list({4}, {30, 10, 10, 0})));
    Var<float> loss = ad_sum(tape, ad_mul(tape, g, g));
    auto grads = tape.backward(loss);
    CHECK(grads.at("x").bit_equal(Tensor::from_list({3}, {40, 0, 60})));
}

TEST_CASE("matmul trans_b and broadcast batch FD check (f64)") {
    Rng rng(7);
    std::map<std::string, TensorD> params;
    params["a"] = random_uniform<double>({2, 3, 4}, rng);
    params["b"] = random_uniform<double>({5, 4}, rng);
    auto build = [](Tape<double>& t, const std::map<std::string, Var<double>>& v) {
        auto c = ad_matmul(t, v.at("a"), v.at("b"), true);  // [2,3,5]
        return ad_mean(t, ad_mul(t, c, c));
    };
    Rng coord_rng(8);
    auto rep = grad_check<double>(build, params, 1e-5, 1e-6, coord_rng);
    CHECK(rep.pass);
}

TEST_CASE("l1 loss value and subgradient at 0") {
    Tape<float> tape;
    Var<float> p = tape.param("p", Tensor::from_list({4}, {1, 2, 3, 4}));
    Var<float> y = tape.leaf(Tensor::from_list({4}, {1, 1, 5, 4}));
    Var<float> loss = ad_l1_loss(tape, p, y);
    CHECK(tape.val(loss)[0] == doctest::Approx(0.75f));
    auto grads = tape.backward(loss);
    CHECK(grads.at("p").bit_equal(Tensor::from_list({4}, {0.0f, 0.25f, -0.25f, 0.0f})));
}

// Random computation graphs, depth <= 6: backward(a*L1 + b*L2) must equal
// a*backward(L1) + b*backward(L2).
TEST_CASE("linearity of gradients on random graphs") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        Rng rng(100 + seed);
        Tape<double> tape;
        Var<double> x = tape.param("x", random_uniform<double>({3, 3}, rng));
        Var<double> y = tape.param("y", random_uniform<double>({3, 3}, rng));

        auto random_chain = [&](Var<double> start) {
            Var<double> cur = start;
            const int depth = static_cast<int>(rng.uniform_int(1, 6));
            for (int d = 0; d < depth; ++d) {
                switch (rng.uniform_int(0, 4)) {
                    case 0: cur = ad_add(tape, cur, y); break;
                    case 1: cur = ad_mul(tape, cur, x); break;
                    case 2: cur = ad_relu(tape, cur); break;
                    case 3: cur = ad_sigmoid(tape, cur); break;
                    default: cur = ad_matmul(tape, cur, y); break;
                }
            }
            return ad_sum(tape, cur);
        };

        Var<double> l1 = random_chain(x);
        Var<double> l2 = random_chain(y);
        const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
        Var<double> combo = ad_add(tape, ad_scale(tape, l1, alpha), ad_scale(tape, l2, beta));

        auto g1 = tape.backward(l1);
        auto g2 = tape.backward(l2);
        auto gc = tape.backward(combo);
        for (const char* name : {"x", "y"}) {
            const TensorD& a = g1.at(name);
            const TensorD& b = g2.at(name);
            const TensorD& c = gc.at(name);
            for (std::size_t i = 0; i < c.numel(); ++i)
                CHECK(c[i] == doctest::Approx(alpha * a[i] + beta * b[i]).epsilon(1e-10));
        }
    }
}

TEST_CASE("backward is pure: two runs give identical gradients") {
    Rng rng(9);
    Tape<float> tape;
    Var<float> x = tape.param("x", random_uniform<float>({4, 4}, rng));
    Var<float> y = tape.param("y", random_uniform<float>({4, 4}, rng));
    Var<float> loss = ad_sum(tape, ad_sigmoid(tape, ad_matmul(tape, x, y)));
    auto g1 = tape.backward(loss);
    auto g2 = tape.backward(loss);
    CHECK(g1.at("x").bit_equal(g2.at("x")));
    CHECK(g1.at("y").bit_equal(g2.at("y")));
}
