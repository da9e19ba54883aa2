#include <doctest.h>

#include "dml/metric_head.hpp"
#include "helpers.hpp"

using dml::PrototypeSet;
using dml::Tensor;
using oracle::Vec;
using testing::random_vec;
using testing::tensor_from;
using testing::to_vec;

TEST_CASE("prototype construction") {
  const PrototypeSet p(3, 3.0);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 3; ++c) CHECK(p.component(t, c) == (t == c ? 3.0 : 0.0));
  const PrototypeSet q(2, 1.0);
  CHECK(q.row(0) == std::vector<float>{1, 0});
  CHECK(q.row(1) == std::vector<float>{0, 1});
  CHECK_THROWS(PrototypeSet(1, 3.0));
  CHECK_THROWS(PrototypeSet(3, 0.0));
}

TEST_CASE("pairwise base prototype distances are 2T^2") {
  for (double T : {1.0, 2.0, 3.0, 4.5}) {
    const PrototypeSet p(5, T);
    for (std::size_t a = 0; a < 5; ++a)
      for (std::size_t b = 0; b < 5; ++b) {
        if (a == b) continue;
        double d = 0;
        for (std::size_t c = 0; c < 5; ++c) d += std::pow(p.component(a, c) - p.component(b, c), 2);
        CHECK(d == 2 * T * T);
      }
  }
}

TEST_CASE("distance examples") {
  const PrototypeSet p(2, 1.0);
  const Tensor d = dml::squared_distances(Tensor({2, 1, 1}, {1.0f, 0.0f}), p);
  CHECK(to_vec(d.data()) == Vec{0, 2});
  const PrototypeSet p3(3, 3.0);
  const Tensor c = dml::squared_distances(Tensor({3, 1, 1}, {1.0f, 1.0f, 1.0f}), p3);
  CHECK(to_vec(c.data()) == Vec{6, 6, 6});

  const Tensor prob = dml::class_probabilities(Tensor({2, 1, 1}, {1.0f, 0.0f}), p);
  CHECK(prob.data()[0] == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(prob.data()[1] == doctest::Approx(0.1192).epsilon(1e-3));
  const Tensor uni = dml::class_probabilities(Tensor({3, 1, 1}, {1.0f, 1.0f, 1.0f}), p3);
  for (float v : uni.data()) CHECK(v == doctest::Approx(1.0 / 3.0));

  CHECK(dml::closeset_map(Tensor({3, 1, 1}, {0.0f, 0.0f, 3.0f}), p3).values[0] == 2);
  CHECK(dml::closeset_map(Tensor({3, 1, 1}, {1.0f, 1.0f, 1.0f}), p3).values[0] == 0);
}

TEST_CASE("closeset map is the argmin of squared distances; probabilities sum to one") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 g = oracle::rng(seed);
    const std::size_t N = 2 + oracle::below(g, 5), H = 1 + oracle::below(g, 4), W = 1 + oracle::below(g, 4);
    const double T = 1 + oracle::below(g, 6);
    const Vec f = random_vec(g, N * H * W, -2 * T, 3 * T);
    const PrototypeSet protos(N, T);
    const Tensor ft = tensor_from(f, {N, H, W});
    const auto map = dml::closeset_map(ft, protos);
    const auto d = oracle::sq_dist(f, N, H * W, N, T);
    const Tensor prob = dml::class_probabilities(ft, protos);
    for (std::size_t p = 0; p < H * W; ++p) {
      std::size_t best = 0;
      for (std::size_t t = 1; t < N; ++t)
        if (d[t][p] < d[best][p]) best = t;
      CHECK(map.values[p] == best);
      double s = 0;
      for (std::size_t t = 0; t < N; ++t) s += prob.data()[t * H * W + p];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("probabilities are shift invariant") {
  // Adding delta to every channel changes each squared distance by the same
  // constant 2 delta sum(F) + N delta^2 - 2 T delta.
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 g = oracle::rng(seed + 77);
    const std::size_t N = 2 + oracle::below(g, 4);
    const Vec f = random_vec(g, N, -1, 2);
    const double delta = double(float(oracle::uniform(g, -1, 1)));
    Vec shifted = f;
    for (auto& v : shifted) v = double(float(v + delta));
    const PrototypeSet protos(N, 3.0);
    const Tensor a = dml::class_probabilities(tensor_from(f, {N, 1, 1}), protos);
    const Tensor b = dml::class_probabilities(tensor_from(shifted, {N, 1, 1}), protos);
    for (std::size_t t = 0; t < N; ++t) CHECK(std::abs(a.data()[t] - b.data()[t]) < 1e-6);
  }
}

TEST_CASE("far features keep finite probabilities") {
  const PrototypeSet protos(3, 3.0);
  const Tensor prob = dml::class_probabilities(Tensor({3, 1, 1}, {200.0f, -150.0f, 80.0f}), protos);
  double s = 0;
  for (float v : prob.data()) {
    CHECK(std::isfinite(v));
    s += v;
  }
  CHECK(s == doctest::Approx(1.0));
}

TEST_CASE("novel prototypes extend distances but not the close-set map") {
  PrototypeSet protos(2, 1.0);
  CHECK(protos.add_novel({0.5f, 0.5f}) == 2);
  CHECK(protos.size() == 3);
  const Tensor f({2, 1, 1}, {0.5f, 0.5f});
  const Tensor d = dml::squared_distances(f, protos);
  CHECK(d.shape() == dml::Shape{3, 1, 1});
  CHECK(d.data()[2] == 0.0f);
  CHECK(dml::closeset_map(f, protos).values[0] == 0);
  CHECK_THROWS(protos.add_novel({1.0f}));
}

TEST_CASE("feature dimension mismatch is an error") {
  const PrototypeSet protos(3, 3.0);
  CHECK_THROWS(dml::squared_distances(Tensor::zeros({2, 2, 2}), protos));
}
