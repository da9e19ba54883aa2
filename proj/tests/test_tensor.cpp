#include <doctest.h>

#include "dml/optim.hpp"
#include "dml/tensor.hpp"
#include "helpers.hpp"

using dml::Shape;
using dml::Tensor;
using oracle::Vec;
using testing::random_vec;
using testing::tensor_from;
using testing::to_vec;
namespace ops = dml::ops;

namespace {

// --- double-precision reference ops ----------------------------------------

Vec ref_conv(const Vec& x, std::size_t C, std::size_t H, std::size_t W, const Vec& w, std::size_t O, std::size_t k,
             const Vec& b) {
  const long pad = long(k / 2);
  Vec out(O * H * W, 0.0);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double acc = b.empty() ? 0.0 : b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < k; ++u)
            for (std::size_t v = 0; v < k; ++v) {
              const long ii = long(i) + long(u) - pad, jj = long(j) + long(v) - pad;
              if (ii < 0 || jj < 0 || ii >= long(H) || jj >= long(W)) continue;
              acc += w[((o * C + c) * k + u) * k + v] * x[(c * H + std::size_t(ii)) * W + std::size_t(jj)];
            }
        out[(o * H + i) * W + j] = acc;
      }
  return out;
}

Vec ref_softmax(const Vec& x, std::size_t C, std::size_t P, bool log) {
  Vec out(x.size());
  for (std::size_t p = 0; p < P; ++p) {
    double m = -1e300;
    for (std::size_t c = 0; c < C; ++c) m = std::max(m, x[c * P + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(x[c * P + p] - m);
    for (std::size_t c = 0; c < C; ++c) {
      const double lp = x[c * P + p] - m - std::log(z);
      out[c * P + p] = log ? lp : std::exp(lp);
    }
  }
  return out;
}

Vec ref_matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
  Vec out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t) out[i * n + j] += a[i * k + t] * b[t * n + j];
  return out;
}

Vec ref_sqdist(const Vec& f, std::size_t D, std::size_t P, const Vec& m, std::size_t K) {
  Vec out(K * P, 0.0);
  for (std::size_t t = 0; t < K; ++t)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t c = 0; c < D; ++c) {
        const double d = f[c * P + p] - m[t * D + c];
        out[t * P + p] += d * d;
      }
  return out;
}

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Compares d/d(inputs[which]) of sum(weights * op(inputs)) between the
// library's tape and finite differences of the reference.
void check_gradient(const std::vector<Vec>& inputs, const std::vector<Shape>& shapes, std::size_t which,
                    const std::function<Vec(const std::vector<Vec>&)>& ref,
                    const std::function<Tensor(const std::vector<Tensor>&)>& lib, const Vec& weights) {
  std::vector<Tensor> ts;
  for (std::size_t i = 0; i < inputs.size(); ++i) ts.push_back(tensor_from(inputs[i], shapes[i], i == which));
  const Tensor out = lib(ts);
  REQUIRE(out.numel() == weights.size());
  ops::sum(ops::mul(out, tensor_from(weights, out.shape()))).backward();
  const Vec analytic = to_vec(ts[which].grad());

  const Vec numeric = oracle::central_diff(
      [&](const Vec& x) {
        auto in = inputs;
        in[which] = x;
        return dot(weights, ref(in));
      },
      inputs[which]);
  CHECK(oracle::rel_error(analytic, numeric) < 1e-3);
}

}  // namespace

TEST_CASE("relu and elementwise examples") {
  const Tensor r = ops::relu(Tensor({3}, {-1.0f, 0.0f, 2.0f}));
  CHECK(to_vec(r.data()) == Vec{0, 0, 2});

  Tensor x({4}, {1, 2, 3, 4}, true);
  ops::sum(x).backward();
  CHECK(to_vec(x.grad()) == Vec{1, 1, 1, 1});

  Tensor y({1}, {3.0f}, true);
  ops::sum(ops::mul(y, y)).backward();
  CHECK(y.grad()[0] == 6.0f);
}

TEST_CASE("conv2d fixed cases") {
  Tensor zeros = Tensor::zeros({2, 5, 5});
  std::mt19937_64 g = oracle::rng(3);
  const Vec w = random_vec(g, 3 * 2 * 9, -1, 1);
  const Tensor out = ops::conv2d(zeros, tensor_from(w, {3, 2, 3, 3}), Tensor());
  for (float v : out.data()) CHECK(v == 0.0f);

  const Vec x = random_vec(g, 2 * 4 * 3, -2, 2);
  const Tensor id = ops::conv2d(tensor_from(x, {2, 4, 3}), Tensor({2, 2, 1, 1}, {1, 0, 0, 1}), Tensor());
  CHECK(to_vec(id.data()) == x);
  CHECK(id.shape() == Shape{2, 4, 3});
}

TEST_CASE("conv2d matches the reference and keeps spatial size") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 g = oracle::rng(100 + seed);
    const std::size_t C = 1 + oracle::below(g, 3), O = 1 + oracle::below(g, 3), H = 2 + oracle::below(g, 4),
                      W = 2 + oracle::below(g, 4), k = oracle::below(g, 2) ? 3 : 1;
    const Vec x = random_vec(g, C * H * W, -1, 1), w = random_vec(g, O * C * k * k, -1, 1),
              b = random_vec(g, O, -1, 1);
    const Tensor out = ops::conv2d(tensor_from(x, {C, H, W}), tensor_from(w, {O, C, k, k}), tensor_from(b, {O}));
    CHECK(out.shape() == Shape{O, H, W});
    const Vec ref = ref_conv(x, C, H, W, w, O, k, b);
    CHECK(oracle::rel_error(to_vec(out.data()), ref) < 1e-6);
  }
}

TEST_CASE("gradient of sum(conv) is the transposed conv matrix applied to ones") {
  std::mt19937_64 g = oracle::rng(7);
  const std::size_t C = 2, O = 3, H = 4, W = 4, k = 3;
  const Vec w = random_vec(g, O * C * k * k, -1, 1);
  // Explicit matrix columns from basis inputs.
  const std::size_t n_in = C * H * W;
  Vec expected(n_in, 0.0);
  for (std::size_t i = 0; i < n_in; ++i) {
    Vec e(n_in, 0.0);
    e[i] = 1.0;
    const Vec col = ref_conv(e, C, H, W, w, O, k, {});
    for (double v : col) expected[i] += v;
  }
  Tensor x = Tensor::zeros({C, H, W}, true);
  ops::sum(ops::conv2d(x, tensor_from(w, {O, C, k, k}), Tensor())).backward();
  CHECK(oracle::rel_error(to_vec(x.grad()), expected) < 1e-6);
}

TEST_CASE("finite-difference gradients of every differentiable op") {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::mt19937_64 g = oracle::rng(1000 + trial);
    CAPTURE(trial);

    {  // conv2d w.r.t. input, weight and bias
      const std::size_t C = 1 + oracle::below(g, 2), O = 1 + oracle::below(g, 2), H = 2 + oracle::below(g, 3),
                        W = 2 + oracle::below(g, 3), k = 3;
      const std::vector<Vec> in = {random_vec(g, C * H * W, -1, 1), random_vec(g, O * C * k * k, -1, 1),
                                   random_vec(g, O, -1, 1)};
      const std::vector<Shape> shapes = {{C, H, W}, {O, C, k, k}, {O}};
      const Vec wts = random_vec(g, O * H * W, -1, 1);
      auto ref = [&](const std::vector<Vec>& v) { return ref_conv(v[0], C, H, W, v[1], O, k, v[2]); };
      auto lib = [](const std::vector<Tensor>& t) { return ops::conv2d(t[0], t[1], t[2]); };
      for (std::size_t which = 0; which < 3; ++which) check_gradient(in, shapes, which, ref, lib, wts);
    }
    {  // relu, inputs kept away from the kink
      const std::size_t n = 1 + oracle::below(g, 64);
      Vec x = random_vec(g, n, 0.05, 2);
      for (auto& v : x) v = oracle::below(g, 2) ? v : -v;
      const Vec wts = random_vec(g, n, -1, 1);
      check_gradient({x}, {{n}}, 0,
                     [](const std::vector<Vec>& v) {
                       Vec o = v[0];
                       for (auto& e : o) e = std::max(e, 0.0);
                       return o;
                     },
                     [](const std::vector<Tensor>& t) { return ops::relu(t[0]); }, wts);
    }
    {  // softmax and log-softmax over channels
      const std::size_t C = 2 + oracle::below(g, 4), H = 1 + oracle::below(g, 3), W = 1 + oracle::below(g, 3);
      const Vec x = random_vec(g, C * H * W, -3, 3);
      const Vec wts = random_vec(g, C * H * W, -1, 1);
      for (bool log : {false, true}) {
        check_gradient({x}, {{C, H, W}}, 0,
                       [&](const std::vector<Vec>& v) { return ref_softmax(v[0], C, H * W, log); },
                       [log](const std::vector<Tensor>& t) {
                         return log ? ops::log_softmax_channels(t[0]) : ops::softmax_channels(t[0]);
                       },
                       wts);
      }
    }
    {  // matmul
      const std::size_t m = 1 + oracle::below(g, 4), k = 1 + oracle::below(g, 4), n = 1 + oracle::below(g, 4);
      const std::vector<Vec> in = {random_vec(g, m * k, -1, 1), random_vec(g, k * n, -1, 1)};
      const Vec wts = random_vec(g, m * n, -1, 1);
      auto ref = [&](const std::vector<Vec>& v) { return ref_matmul(v[0], v[1], m, k, n); };
      auto lib = [](const std::vector<Tensor>& t) { return ops::matmul(t[0], t[1]); };
      check_gradient(in, {{m, k}, {k, n}}, 0, ref, lib, wts);
      check_gradient(in, {{m, k}, {k, n}}, 1, ref, lib, wts);
    }
    {  // squared distances w.r.t. features and prototypes
      const std::size_t D = 2 + oracle::below(g, 4), K = 1 + oracle::below(g, 4), H = 1 + oracle::below(g, 3),
                        W = 1 + oracle::below(g, 3);
      const std::vector<Vec> in = {random_vec(g, D * H * W, -2, 2), random_vec(g, K * D, -2, 2)};
      const Vec wts = random_vec(g, K * H * W, -1, 1);
      auto ref = [&](const std::vector<Vec>& v) { return ref_sqdist(v[0], D, H * W, v[1], K); };
      auto lib = [](const std::vector<Tensor>& t) { return ops::squared_distances(t[0], t[1]); };
      check_gradient(in, {{D, H, W}, {K, D}}, 0, ref, lib, wts);
      check_gradient(in, {{D, H, W}, {K, D}}, 1, ref, lib, wts);
    }
    {  // gather with some ignored pixels
      const std::size_t K = 2 + oracle::below(g, 3), P = 1 + oracle::below(g, 12);
      const Vec x = random_vec(g, K * P, -2, 2);
      std::vector<std::uint8_t> labels(P);
      for (auto& l : labels) l = oracle::below(g, 4) == 0 ? 255 : std::uint8_t(oracle::below(g, K));
      const Vec wts = random_vec(g, P, -1, 1);
      check_gradient({x}, {{K, 1, P}}, 0,
                     [&](const std::vector<Vec>& v) {
                       Vec o(P, 0.0);
                       for (std::size_t p = 0; p < P; ++p)
                         if (labels[p] != 255) o[p] = v[0][labels[p] * P + p];
                       return o;
                     },
                     [&](const std::vector<Tensor>& t) { return ops::gather_channels(t[0], labels, 255); }, wts);
    }
    {  // add, sub, mul, scale, mean
      const std::size_t n = 1 + oracle::below(g, 64);
      const std::vector<Vec> in = {random_vec(g, n, -2, 2), random_vec(g, n, -2, 2)};
      const Vec wts = random_vec(g, n, -1, 1);
      auto ref = [](const std::vector<Vec>& v) {
        Vec o(v[0].size());
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = (v[0][i] + v[1][i]) * v[0][i] - 0.5 * v[1][i];
        return o;
      };
      auto lib = [](const std::vector<Tensor>& t) {
        return ops::sub(ops::mul(ops::add(t[0], t[1]), t[0]), ops::scale(t[1], 0.5f));
      };
      check_gradient(in, {{n}, {n}}, 0, ref, lib, wts);
      check_gradient(in, {{n}, {n}}, 1, ref, lib, wts);

      Tensor x = tensor_from(in[0], {n}, true);
      ops::mean(x).backward();
      for (float v : x.grad()) CHECK(v == doctest::Approx(1.0 / double(n)).epsilon(1e-6));
    }
  }
}

TEST_CASE("forward results are deterministic") {
  std::mt19937_64 g = oracle::rng(11);
  const Vec x = random_vec(g, 3 * 8 * 8, 0, 1), w = random_vec(g, 4 * 3 * 9, -1, 1);
  const Tensor a = ops::relu(ops::conv2d(tensor_from(x, {3, 8, 8}), tensor_from(w, {4, 3, 3, 3}), Tensor()));
  const Tensor b = ops::relu(ops::conv2d(tensor_from(x, {3, 8, 8}), tensor_from(w, {4, 3, 3, 3}), Tensor()));
  CHECK(to_vec(a.data()) == to_vec(b.data()));
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), dml::ShapeError);
  CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), dml::ShapeError);
  CHECK_THROWS(ops::conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor()));
}

TEST_CASE("no-grad guard records nothing") {
  Tensor x({2}, {1, 2}, true);
  Tensor y;
  {
    dml::NoGradGuard guard;
    y = ops::mul(x, x);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(dml::grad_enabled());
}

TEST_CASE("sgd examples") {
  {
    Tensor p({1}, {1.0f}, true);
    dml::Sgd opt({p}, {0.1f, 0.0f, 0.0f});
    ops::sum(ops::scale(p, 2.0f)).backward();
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(0.8).epsilon(1e-7));
  }
  {
    Tensor p({1}, {1.0f}, true);
    dml::Sgd opt({p}, {0.1f, 0.0f, 0.0f});
    ops::sum(ops::scale(p, 0.0f)).backward();
    opt.step();
    CHECK(p.data()[0] == 1.0f);
  }
  {
    Tensor p({1}, {0.0f}, true);
    dml::Sgd opt({p}, {1.0f, 0.9f, 0.0f});
    ops::sum(p).backward();
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(-1.0));
    opt.step();  // gradient left in place: still 1
    CHECK(p.data()[0] == doctest::Approx(-2.9));
  }
}
