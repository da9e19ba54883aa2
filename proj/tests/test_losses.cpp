#include <doctest.h>

#include <numeric>

#include "dml/losses.hpp"
#include "dml/metric_head.hpp"
#include "helpers.hpp"

using dml::PrototypeSet;
using dml::Shape;
using dml::Tensor;
using oracle::Vec;
using testing::random_vec;
using testing::tensor_from;
using testing::to_vec;

namespace {

struct Instance {
  std::size_t N, H, W;
  double T;
  Vec f;
  std::vector<int> y;  // -1 = ignored
  std::vector<std::uint8_t> labels;
};

Instance random_instance(std::uint64_t seed) {
  std::mt19937_64 g = oracle::rng(seed);
  Instance in;
  const std::size_t ns[] = {2, 3, 5};
  in.N = ns[oracle::below(g, 3)];
  in.H = 1 + oracle::below(g, 4);
  in.W = 1 + oracle::below(g, 4);
  in.T = double(1 + oracle::below(g, 4));
  in.f = random_vec(g, in.N * in.H * in.W, -in.T, 2 * in.T);
  for (std::size_t p = 0; p < in.H * in.W; ++p) {
    const bool ignore = oracle::below(g, 6) == 0;
    const auto c = oracle::below(g, in.N);
    in.y.push_back(ignore ? -1 : int(c));
    in.labels.push_back(ignore ? 255 : std::uint8_t(c));
  }
  return in;
}

Vec analytic_grad(const Instance& in, int which, float lambda_vl = 0.01f) {
  const PrototypeSet protos(in.N, in.T);
  Tensor f = tensor_from(in.f, {in.N, in.H, in.W}, true);
  Tensor loss = which == 0   ? dml::dce_loss(f, in.labels, protos)
                : which == 1 ? dml::variance_loss(f, in.labels, protos)
                             : dml::hybrid_loss(f, in.labels, protos, {lambda_vl});
  loss.backward();
  return to_vec(f.grad());
}

}  // namespace

TEST_CASE("loss gradients match 64-bit finite differences") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Instance in = random_instance(seed);
    CAPTURE(seed);
    const std::size_t P = in.H * in.W;
    auto dce = [&](const Vec& x) { return oracle::dce(x, in.N, P, in.y, in.T); };
    auto vl = [&](const Vec& x) { return oracle::vl(x, in.N, P, in.y, in.T); };
    auto hyb = [&](const Vec& x) { return dce(x) + 0.01 * vl(x); };
    if (std::all_of(in.y.begin(), in.y.end(), [](int v) { return v < 0; })) continue;
    CHECK(oracle::rel_error(analytic_grad(in, 0), oracle::central_diff(dce, in.f)) < 1e-3);
    CHECK(oracle::rel_error(analytic_grad(in, 1), oracle::central_diff(vl, in.f)) < 1e-3);
    CHECK(oracle::rel_error(analytic_grad(in, 2), oracle::central_diff(hyb, in.f)) < 1e-3);
  }
}

TEST_CASE("loss values match the oracle") {
  for (std::uint64_t seed = 200; seed < 250; ++seed) {
    const Instance in = random_instance(seed);
    const PrototypeSet protos(in.N, in.T);
    const Tensor f = tensor_from(in.f, {in.N, in.H, in.W});
    const std::size_t P = in.H * in.W;
    CHECK(dml::dce_loss(f, in.labels, protos).item() ==
          doctest::Approx(oracle::dce(in.f, in.N, P, in.y, in.T)).epsilon(1e-5));
    CHECK(dml::variance_loss(f, in.labels, protos).item() ==
          doctest::Approx(oracle::vl(in.f, in.N, P, in.y, in.T)).epsilon(1e-5));
  }
}

TEST_CASE("loss examples") {
  const PrototypeSet p2(2, 1.0);
  const std::vector<std::uint8_t> y0 = {0};
  const Tensor at_proto({2, 1, 1}, {1.0f, 0.0f});
  CHECK(dml::dce_loss(at_proto, y0, p2).item() == doctest::Approx(0.1269).epsilon(1e-3));
  CHECK(dml::variance_loss(at_proto, y0, p2).item() == 0.0f);
  CHECK(dml::variance_loss(Tensor({2, 1, 1}, {0.0f, 0.0f}), y0, p2).item() == doctest::Approx(1.0));
  CHECK(dml::hybrid_loss(at_proto, y0, p2, {0.01f}).item() ==
        doctest::Approx(dml::dce_loss(at_proto, y0, p2).item()));

  // Equidistant feature: loss = log N.
  const PrototypeSet p3(3, 3.0);
  const Tensor centre({3, 1, 1}, {1.0f, 1.0f, 1.0f});
  CHECK(dml::dce_loss(centre, std::vector<std::uint8_t>{1}, p3).item() == doctest::Approx(std::log(3.0)));

  // lambda_vl = 0 is exactly DCE.
  for (std::uint64_t seed = 300; seed < 310; ++seed) {
    const Instance in = random_instance(seed);
    const PrototypeSet protos(in.N, in.T);
    const Tensor f = tensor_from(in.f, {in.N, in.H, in.W});
    CHECK(dml::hybrid_loss(f, in.labels, protos, {0.0f}).item() == dml::dce_loss(f, in.labels, protos).item());
  }
}

TEST_CASE("fully ignored batch gives exact zero and zero gradient") {
  const PrototypeSet protos(3, 3.0);
  Tensor f({3, 2, 2}, std::vector<float>(12, 0.7f), true);
  const std::vector<std::uint8_t> labels(4, 255);
  Tensor loss = dml::hybrid_loss(f, labels, protos);
  CHECK(loss.item() == 0.0f);
  loss.backward();
  for (float g : f.grad()) CHECK(g == 0.0f);
}

TEST_CASE("variance loss gradient is 2(F - m_Y)/count") {
  for (std::uint64_t seed = 400; seed < 420; ++seed) {
    const Instance in = random_instance(seed);
    const std::size_t P = in.H * in.W;
    const auto count = std::count_if(in.y.begin(), in.y.end(), [](int v) { return v >= 0; });
    if (count == 0) continue;
    const Vec g = analytic_grad(in, 1);
    for (std::size_t c = 0; c < in.N; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const double expected =
            in.y[p] < 0 ? 0.0 : 2.0 * (in.f[c * P + p] - oracle::proto(std::size_t(in.y[p]), c, in.T)) / double(count);
        CHECK(g[c * P + p] == doctest::Approx(expected).epsilon(1e-5));
      }
  }
}

TEST_CASE("DCE descent direction attracts to the own prototype and repels the others") {
  // -grad = 2 (m_Y - sum_t p_t m_t) does not depend on where F sits, so the
  // sign of <-grad, m_Y - F> is only guaranteed inside the prototype hull.
  // Against every other prototype the separation grows for any F.
  for (std::uint64_t seed = 500; seed < 600; ++seed) {
    std::mt19937_64 g = oracle::rng(seed);
    const std::size_t N = 2 + oracle::below(g, 5);
    const double T = 1 + oracle::below(g, 5);
    const auto y = oracle::below(g, N);
    CAPTURE(seed);

    const Vec f = random_vec(g, N, -T, 2 * T);
    Instance in{N, 1, 1, T, f, {int(y)}, {std::uint8_t(y)}};
    const Vec grad = analytic_grad(in, 0);
    for (std::size_t t = 0; t < N; ++t) {
      if (t == y) continue;
      double inner = 0.0;
      for (std::size_t c = 0; c < N; ++c) inner += -grad[c] * (oracle::proto(y, c, T) - oracle::proto(t, c, T));
      CHECK(inner > 0.0);
    }

    // F = sum_t w_t m_t with simplex weights and w_Y bounded away from 1.
    Vec w = random_vec(g, N, 0.05, 1.0);
    double sw = 0.0;
    for (double v : w) sw += v;
    Vec hull(N);
    for (std::size_t c = 0; c < N; ++c) hull[c] = double(float(T * w[c] / sw));
    Instance h{N, 1, 1, T, hull, {int(y)}, {std::uint8_t(y)}};
    const Vec hg = analytic_grad(h, 0);
    double inner = 0.0;
    for (std::size_t c = 0; c < N; ++c) inner += -hg[c] * (oracle::proto(y, c, T) - hull[c]);
    CHECK(inner > 0.0);
  }
}

TEST_CASE("losses are equivariant under class permutation") {
  for (std::uint64_t seed = 600; seed < 620; ++seed) {
    const Instance in = random_instance(seed);
    std::mt19937_64 g = oracle::rng(seed);
    std::vector<std::size_t> perm(in.N);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g);
    // Relabel class c as perm[c]; the feature channel c moves to perm[c] too.
    const std::size_t P = in.H * in.W;
    Instance q = in;
    for (std::size_t c = 0; c < in.N; ++c)
      for (std::size_t p = 0; p < P; ++p) q.f[perm[c] * P + p] = in.f[c * P + p];
    for (std::size_t p = 0; p < P; ++p)
      if (in.y[p] >= 0) {
        q.y[p] = int(perm[std::size_t(in.y[p])]);
        q.labels[p] = std::uint8_t(q.y[p]);
      }
    const PrototypeSet protos(in.N, in.T);
    const float a = dml::hybrid_loss(tensor_from(in.f, {in.N, in.H, in.W}), in.labels, protos).item();
    const float b = dml::hybrid_loss(tensor_from(q.f, {in.N, in.H, in.W}), q.labels, protos).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-5));
  }
}

TEST_CASE("label outside the class range is rejected") {
  const PrototypeSet protos(2, 1.0);
  CHECK_THROWS(dml::dce_loss(Tensor::zeros({2, 1, 1}), std::vector<std::uint8_t>{2}, protos));
}
