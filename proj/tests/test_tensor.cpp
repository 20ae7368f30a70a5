#include <catch2/catch_amalgamated.hpp>

#include "sfc/container.hpp"
#include "sfc/rng.hpp"
#include "sfc/tensor.hpp"

using namespace sfc;

TEST_CASE("tensor basics") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(0) == 2);
    CHECK(t.at2(1, 2) == 6.0);
    CHECK(Tensor::scalar(4.5).item() == 4.5);
    CHECK(Tensor::full({4}, 2.0).data()[3] == 2.0);
    CHECK(t.all_finite());
    Tensor bad({1}, {std::numeric_limits<double>::quiet_NaN()});
    CHECK(!bad.all_finite());
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), Error);
}

TEST_CASE("deterministic matmul kernels") {
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor c = Tensor::zeros({2, 2});
    matmul_acc(a.data(), b.data(), c.mut(), 2, 3, 2);
    CHECK(c.at2(0, 0) == 58.0);
    CHECK(c.at2(1, 1) == 154.0);

    // matmul_nt: A [2,3] x B^T where B is [2,3]
    Tensor bt({2, 3}, {7, 9, 11, 8, 10, 12});
    Tensor c2 = Tensor::zeros({2, 2});
    matmul_nt_acc(a.data(), bt.data(), c2.mut(), 2, 3, 2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(c2.data()[i] == c.data()[i]);

    // matmul_tn: A^T x B with A stored as [3,2]
    Tensor at({3, 2}, {1, 4, 2, 5, 3, 6});
    Tensor c3 = Tensor::zeros({2, 2});
    matmul_tn_acc(at.data(), b.data(), c3.mut(), 2, 3, 2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(c3.data()[i] == c.data()[i]);

    // accumulate flag adds on top
    matmul_acc(a.data(), b.data(), c.mut(), 2, 3, 2, true);
    CHECK(c.at2(0, 0) == 116.0);
}

TEST_CASE("container round trip is bit-exact") {
    Rng rng(3);
    TensorMap m;
    m["alpha"] = rng.gaussian_tensor({5, 7}, 1.0);
    m["beta"] = rng.gaussian_tensor({3}, 2.0);
    m["gamma.w"] = Tensor({2, 2}, {1e-300, -0.0, 3.5, 1e300});
    const std::string bytes = serialize_container(m);
    CHECK(bytes.substr(0, 8) == "SFCT0001");
    TensorMap back = deserialize_container(bytes);
    REQUIRE(back.size() == m.size());
    for (const auto& [name, t] : m) {
        REQUIRE(back.count(name) == 1);
        const Tensor& b = back.at(name);
        REQUIRE(b.shape() == t.shape());
        auto x = t.data(), y = b.data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            uint64_t ux, uy;
            std::memcpy(&ux, &x[i], 8);
            std::memcpy(&uy, &y[i], 8);
            CHECK(ux == uy);
        }
    }
    // serialization is deterministic
    CHECK(serialize_container(back) == bytes);
}

TEST_CASE("container f32 width round trip") {
    TensorMap m;
    m["x"] = Tensor({3}, {1.5, -2.25, 0.125}).with_dtype(DType::f32);
    TensorMap back = deserialize_container(serialize_container(m));
    CHECK(back.at("x").dtype() == DType::f32);
    CHECK(back.at("x").data()[1] == -2.25);
}

TEST_CASE("container rejects corrupt input") {
    CHECK_THROWS_AS(deserialize_container("BOGUS123xxxxxxxxxxxx"), Error);
    TensorMap m;
    m["x"] = Tensor({2}, {1, 2});
    std::string bytes = serialize_container(m);
    bytes.resize(bytes.size() - 4);
    CHECK_THROWS_AS(deserialize_container(bytes), Error);
}

TEST_CASE("rng determinism") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    Rng c(42);
    std::vector<double> w = {0.2, 0.5, 0.3};
    std::size_t counts[3] = {0, 0, 0};
    for (int i = 0; i < 3000; ++i) counts[c.choice(w)]++;
    CHECK(counts[1] > counts[0]);
    CHECK(counts[1] > counts[2]);
}
