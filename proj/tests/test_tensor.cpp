#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "ribsr/tensor.hpp"
#include "ribsr/tensor_io.hpp"

using namespace ribsr;

namespace {

// Independent triple-loop product, deliberately not sharing code with
// ribsr::matmul.
template <typename T>
TensorT<T> matmul_oracle(const TensorT<T>& a, const TensorT<T>& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out = TensorT<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a.at2(i, kk) * b.at2(kk, j);
            out.at2(i, j) = acc;
        }
    return out;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("matmul identity") {
    Tensor id = Tensor::from_list({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from_list({2, 2}, {3, 4, 5, 6});
    CHECK(matmul(id, b).bit_equal(b));
}

TEST_CASE("matmul hand arithmetic") {
    Tensor a = Tensor::from_list({1, 2}, {1, 2});
    Tensor b = Tensor::from_list({2, 1}, {3, 4});
    Tensor c = matmul(a, b);
    CHECK(c.dims() == Dims{1, 1});
    CHECK(c[0] == doctest::Approx(11.0f));
}

TEST_CASE("matmul vs triple-loop oracle") {
    Rng rng(42);
    Tensor a = random_uniform<float>({7, 5}, rng);
    Tensor b = random_uniform<float>({5, 3}, rng);
    CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) <= 1e-6f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected DimError");
    } catch (const DimError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("matmul batched with broadcast-from-1") {
    Rng rng(7);
    Tensor a = random_uniform<float>({3, 4, 5}, rng);
    Tensor w = random_uniform<float>({5, 2}, rng);
    Tensor c = matmul(a, w);
    CHECK(c.dims() == Dims{3, 4, 2});
    for (std::size_t h = 0; h < 3; ++h) {
        Tensor ah = Tensor::zeros({4, 5});
        for (std::size_t i = 0; i < 20; ++i) ah[i] = a[h * 20 + i];
        Tensor ch = matmul_oracle(ah, w);
        for (std::size_t i = 0; i < 8; ++i) CHECK(c[h * 8 + i] == doctest::Approx(ch[i]));
    }

    // Explicit leading-1 batch broadcast.
    Tensor b1 = random_uniform<float>({1, 5, 2}, rng);
    Tensor c1 = matmul(a, b1);
    CHECK(c1.dims() == Dims{3, 4, 2});
}

TEST_CASE("matmul trans_b matches explicit transpose") {
    Rng rng(3);
    Tensor a = random_uniform<float>({2, 6, 4}, rng);
    Tensor b = random_uniform<float>({2, 5, 4}, rng);
    Tensor via_flag = matmul(a, b, true);
    Tensor via_t = matmul(a, transpose_last2(b));
    CHECK(via_flag.bit_equal(via_t));
}

template <typename T>
static void associativity_case(double tol) {
    Rng rng(11);
    TensorT<T> a = random_uniform<T>({4, 6}, rng);
    TensorT<T> b = random_uniform<T>({6, 5}, rng);
    TensorT<T> c = random_uniform<T>({5, 3}, rng);
    TensorT<T> l = matmul(matmul(a, b), c);
    TensorT<T> r = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < l.numel(); ++i) {
        double denom = std::max(1.0, std::abs(static_cast<double>(l[i])));
        CHECK(std::abs(static_cast<double>(l[i] - r[i])) / denom <= tol);
    }
}

TEST_CASE("matmul associativity within dtype tolerance") {
    associativity_case<float>(1e-4);
    associativity_case<double>(1e-10);
}

TEST_CASE("softmax uniform row") {
    Tensor s = Tensor::from_list({1, 4}, {0, 0, 0, 0});
    Tensor p = softmax_rows(s);
    for (std::size_t i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(0.25f));
}

TEST_CASE("softmax stability under large logits") {
    Tensor s = Tensor::from_list({1, 2}, {1000, 1000});
    Tensor p = softmax_rows(s);
    CHECK(p[0] == doctest::Approx(0.5f));
    CHECK(p[1] == doctest::Approx(0.5f));
}

TEST_CASE("softmax -inf mask sentinel") {
    const float ninf = -std::numeric_limits<float>::infinity();
    Tensor s = Tensor::from_list({1, 3}, {0, ninf, 0});
    Tensor p = softmax_rows(s);
    CHECK(p[0] == doctest::Approx(0.5f));
    CHECK(p[1] == 0.0f);
    CHECK(p[2] == doctest::Approx(0.5f));
}

TEST_CASE("softmax all -inf row maps to zeros") {
    const float ninf = -std::numeric_limits<float>::infinity();
    Tensor s = Tensor::from_list({2, 2}, {ninf, ninf, 1, 2});
    Tensor p = softmax_rows(s);
    CHECK(p[0] == 0.0f);
    CHECK(p[1] == 0.0f);
    CHECK(p[2] + p[3] == doctest::Approx(1.0f));
}

TEST_CASE("softmax rejects NaN") {
    Tensor s = Tensor::from_list({1, 2}, {std::numeric_limits<float>::quiet_NaN(), 0.0f});
    CHECK_THROWS_AS(softmax_rows(s), NumericError);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(5);
    Tensor s = random_uniform<float>({9, 13}, rng, -4.0f, 4.0f);
    Tensor p = softmax_rows(s);
    for (std::size_t r = 0; r < 9; ++r) {
        float acc = 0;
        for (std::size_t j = 0; j < 13; ++j) acc += p[r * 13 + j];
        CHECK(std::abs(acc - 1.0f) <= 1e-6f);
    }
}

TEST_CASE("softmax permutation equivariance") {
    Rng rng(17);
    Tensor s = random_uniform<float>({1, 8}, rng, -3.0f, 3.0f);
    std::vector<std::size_t> perm{3, 1, 7, 0, 5, 2, 6, 4};
    Tensor sp = Tensor::zeros({1, 8});
    for (std::size_t j = 0; j < 8; ++j) sp[j] = s[perm[j]];
    Tensor p = softmax_rows(s);
    Tensor pp = softmax_rows(sp);
    // Permuting the row permutes the denominator's accumulation order, so
    // equality holds to rounding, not bitwise.
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(pp[j] - p[perm[j]]) <= 2e-7f);
}

TEST_CASE("elementwise ops match scalar-loop oracle exactly") {
    Rng rng(23);
    Tensor a = random_uniform<float>({6, 7}, rng, -2.0f, 2.0f);
    Tensor b = random_uniform<float>({6, 7}, rng, -2.0f, 2.0f);
    Tensor s = add(a, b), m = mul(a, b), r = relu(a), g = sigmoid(a);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(s[i] == a[i] + b[i]);
        CHECK(m[i] == a[i] * b[i]);
        CHECK(r[i] == (a[i] > 0.0f ? a[i] : 0.0f));
        float e = a[i] >= 0.0f ? 1.0f / (1.0f + std::exp(-a[i]))
                               : std::exp(a[i]) / (1.0f + std::exp(a[i]));
        CHECK(g[i] == e);
    }
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::zeros({}), DimError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0f, 2.0f}), DimError);
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), DimError);
}

TEST_CASE("tensor file: header arithmetic for [2,3] f32") {
    Tensor t = Tensor::from_list({2, 3}, {0, 1, 2, 3, 4, 5});
    auto bytes = encode_tensor(t);
    // 4 magic + 1 version + 1 dtype + 4 rank + 2*8 dims + 6*4 payload = 50.
    CHECK(bytes.size() == 50);
    std::string path = temp_path("ribsr_t23.ribt");
    save_tensor(path, t);
    CHECK(std::filesystem::file_size(path) == 50);
    CHECK(load_tensor<float>(path).bit_equal(t));
    std::remove(path.c_str());
}

TEST_CASE("tensor file: zero-filled [1] round trip") {
    Tensor t = Tensor::zeros({1});
    std::string path = temp_path("ribsr_zero.ribt");
    save_tensor(path, t);
    CHECK(load_tensor<float>(path).bit_equal(t));
    std::remove(path.c_str());
}

TEST_CASE("tensor file: random round trips are bit-identical (both dtypes)") {
    Rng rng(99);
    Tensor t = random_uniform<float>({3, 4, 5}, rng, -10.0f, 10.0f);
    TensorD td = random_uniform<double>({2, 9}, rng, -10.0, 10.0);
    std::string p1 = temp_path("ribsr_rt_f32.ribt");
    std::string p2 = temp_path("ribsr_rt_f64.ribt");
    save_tensor(p1, t);
    save_tensor(p2, td);
    CHECK(load_tensor<float>(p1).bit_equal(t));
    CHECK(load_tensor<double>(p2).bit_equal(td));
    // dtype mismatch is a format error
    CHECK_THROWS_AS(load_tensor<double>(p1), FormatError);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("tensor file: bad magic / bad version / truncation") {
    Tensor t = Tensor::from_list({2}, {1.0f, 2.0f});
    auto bytes = encode_tensor(t);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    bad_magic[1] = 'X';
    bad_magic[2] = 'X';
    bad_magic[3] = 'X';
    CHECK_THROWS_AS(decode_tensor<float>(bad_magic), FormatError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(decode_tensor<float>(bad_version), FormatError);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_tensor<float>(truncated), LengthError);

    auto tiny = std::vector<std::uint8_t>{'R', 'I', 'B'};
    CHECK_THROWS_AS(decode_tensor<float>(tiny), LengthError);
}
