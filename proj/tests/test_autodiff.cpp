#include <cmath>
#include <functional>

#include "doctest.h"
#include "metashift/autodiff.hpp"
#include "metashift/ops.hpp"
#include "mlp_oracle.hpp"
#include "test_support.hpp"

using namespace metashift;
using metashift::testing::MlpOracle;
using metashift::testing::random_away_from_zero;
using metashift::testing::random_tensor;

namespace {

constexpr double kEps = 1e-4;
constexpr double kPrimitiveTol = 1e-4;

// Contract the output with fixed random weights so every output element
// contributes a distinct gradient.
using UnaryOp = std::function<Tensor(std::span<const Tensor>)>;

double check_against_oracle(const UnaryOp& op, std::vector<Tensor> inputs, Rng& rng) {
  Tensor probe_out = [&] {
    NoGradGuard g;
    return op(inputs);
  }();
  Tensor weights = random_tensor(rng, probe_out.shape());
  auto loss_of = [&](std::span<const Tensor> xs) { return ops::sum(ops::mul(op(xs), weights)); };

  std::vector<Tensor> leaves;
  for (auto& t : inputs) leaves.push_back(t.as_leaf());
  auto analytic = grad(loss_of(leaves), leaves);
  auto numeric = finite_difference_gradient([&](std::span<const Tensor> xs) { return loss_of(xs).item(); }, inputs,
                                            kEps);
  return max_relative_error(analytic, numeric, 1e-4);
}

}  // namespace

TEST_CASE("matmul with identity returns the left operand") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  CHECK(ops::matmul(a, eye).to_vector() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("uniform logits give ln(way) cross-entropy") {
  Tensor logits = Tensor::full({1, 5}, 0.7);
  for (int label = 0; label < 5; ++label) {
    CHECK(ops::softmax_cross_entropy(logits, {label}).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
  CHECK(std::log(5.0) == doctest::Approx(1.6094).epsilon(1e-4));
}

TEST_CASE("3x3 ones correlated with 3x3 ones is 9") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = ops::conv2d(x, k, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0);
}

TEST_CASE("shape mismatch names the primitive and dimensions") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    ops::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({3, 1, 3, 3}), 0), ShapeError);
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("backward on hand-checkable losses") {
  SUBCASE("linear") {
    Tensor w = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    auto g = grad(ops::sum(ops::scale(w, 2.0)), std::vector<Tensor>{w});
    CHECK(g[0].to_vector() == std::vector<double>{2, 2, 2});
  }
  SUBCASE("quadratic") {
    Tensor w = Tensor::from({3}, {1, -2, 3}, true);
    auto g = grad(ops::sum(ops::mul(w, w)), std::vector<Tensor>{w});
    CHECK(g[0].to_vector() == std::vector<double>{2, -4, 6});
  }
  SUBCASE("disconnected leaf gets zeros") {
    Tensor w = Tensor::from({2}, {1, 2}, true);
    Tensor p = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    auto g = grad(ops::sum(w), std::vector<Tensor>{w, p});
    CHECK(g[1].shape() == Shape{2, 2});
    CHECK(g[1].to_vector() == std::vector<double>(4, 0.0));
  }
  SUBCASE("non-scalar loss is rejected") {
    Tensor w = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(grad(ops::scale(w, 2.0), std::vector<Tensor>{w}), AutodiffError);
  }
}

TEST_CASE("finite difference oracle") {
  Tensor w = Tensor::scalar(3.0);
  auto g = finite_difference_gradient([](std::span<const Tensor> p) { return p[0].item() * p[0].item(); },
                                      std::vector<Tensor>{w}, 1e-4);
  CHECK(std::abs(g[0].item() - 6.0) < 1e-6);

  Tensor v = Tensor::from({3}, {1, 2, 3});
  auto zero = finite_difference_gradient([](std::span<const Tensor>) { return 4.2; }, std::vector<Tensor>{v}, 1e-4);
  CHECK(zero[0].to_vector() == std::vector<double>(3, 0.0));
  CHECK_THROWS(finite_difference_gradient([](std::span<const Tensor>) { return 0.0; }, std::vector<Tensor>{v}, 0.0));
}

TEST_CASE("every primitive agrees with central differences on random inputs") {
  Rng rng(20240601);
  constexpr int kTrials = 100;
  double worst = 0.0;
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::add(xs[0], xs[1]); },
                                                 {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::sub(xs[0], xs[1]); },
                                                 {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::mul(xs[0], xs[1]); },
                                                 {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::scale(xs[0], -1.7); },
                                                 {random_tensor(rng, {m, n})}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::matmul(xs[0], xs[1]); },
                                                 {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}, rng));
    worst = std::max(worst, check_against_oracle(
                                [m, n](auto xs) { return ops::broadcast_axis(xs[0], Shape{m, n, 2}, 1); },
                                {random_tensor(rng, {n})}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::leaky_relu(xs[0], 0.1); },
                                                 {random_away_from_zero(rng, {m, n}, 0.05)}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::relu(xs[0]); },
                                                 {random_away_from_zero(rng, {m, n}, 0.05)}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::softmax(xs[0]); },
                                                 {random_tensor(rng, {m, n + 1})}, rng));
    std::vector<int> labels(m);
    for (auto& l : labels) l = static_cast<int>(rng.below(n + 1));
    worst = std::max(worst, check_against_oracle(
                                [labels](auto xs) { return ops::softmax_cross_entropy(xs[0], labels); },
                                {random_tensor(rng, {m, n + 1})}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::linear(xs[0], xs[1], xs[2]); },
                                                 {random_tensor(rng, {m, k}), random_tensor(rng, {n, k}),
                                                  random_tensor(rng, {n})},
                                                 rng));
    const std::size_t c = 1 + rng.below(2), hw = 3 + rng.below(3), f = 1 + rng.below(2);
    const std::size_t pad = rng.below(2);
    worst = std::max(worst, check_against_oracle([pad](auto xs) { return ops::conv2d(xs[0], xs[1], pad); },
                                                 {random_tensor(rng, {1, c, hw, hw}), random_tensor(rng, {f, c, 3, 3})},
                                                 rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::add_channel_bias(xs[0], xs[1]); },
                                                 {random_tensor(rng, {2, c, 2, 2}), random_tensor(rng, {c})}, rng));
    // Distinct well-separated values keep the argmax stable under probing.
    std::vector<double> pool_in(2 * c * 4 * 4);
    for (std::size_t i = 0; i < pool_in.size(); ++i) pool_in[i] = 0.01 * double(i);
    rng.shuffle(pool_in);
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::max_pool2x2(xs[0]); },
                                                 {Tensor::from({2, c, 4, 4}, pool_in)}, rng));
    worst = std::max(worst, check_against_oracle([](auto xs) { return ops::global_mean_pool(xs[0]); },
                                                 {random_tensor(rng, {2, c, hw, hw})}, rng));
  }
  MESSAGE("worst primitive relative error: " << worst);
  CHECK(worst < kPrimitiveTol);
}

TEST_CASE("second derivatives of composite expressions") {
  // d/dx of d/dx [sum(x^3)] = 6x, through a recorded first gradient.
  Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  auto first = grad(ops::sum(ops::mul(ops::mul(x, x), x)), std::vector<Tensor>{x}, true);
  auto second = grad(ops::sum(first[0]), std::vector<Tensor>{x});
  CHECK(second[0][0] == doctest::Approx(6.0));
  CHECK(second[0][1] == doctest::Approx(-12.0));
  CHECK(second[0][2] == doctest::Approx(3.0));
}

TEST_CASE("double backward of every primitive matches differences of the first gradient") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 2 + rng.below(3), n = 2 + rng.below(3);
    std::vector<int> labels(m);
    for (auto& l : labels) l = static_cast<int>(rng.below(n));
    Tensor w = random_tensor(rng, {n, n});
    Tensor pool_mix = random_tensor(rng, {1, 1, 2, 2});
    std::vector<double> img(16);
    for (std::size_t i = 0; i < 16; ++i) img[i] = 0.05 * double(i);
    rng.shuffle(img);
    Tensor image = Tensor::from({1, 1, 4, 4}, img);
    Tensor kernel = random_tensor(rng, {1, 1, 3, 3});
    // f(x) = xent(leaky(x W) ...) + conv/pool terms; g(x) = sum(grad f * v).
    auto f = [&](const Tensor& x, const Tensor& k) {
      Tensor h = ops::leaky_relu(ops::matmul(x, w), 0.1);
      Tensor s = ops::softmax(h);
      Tensor conv = ops::max_pool2x2(ops::conv2d(image, k, 1));
      return ops::add(ops::add(ops::softmax_cross_entropy(ops::mul(h, s), labels), ops::sum(ops::mul(conv, pool_mix))),
                      ops::sum(ops::global_mean_pool(ops::mul(ops::conv2d(image, k, 0), ops::conv2d(image, k, 0)))));
    };
    Tensor x0 = random_away_from_zero(rng, {m, n}, 0.1);
    Tensor v = random_tensor(rng, {m, n});
    Tensor kv = random_tensor(rng, {1, 1, 3, 3});
    auto g_of = [&](std::span<const Tensor> p) {
      Tensor x = p[0].as_leaf();
      Tensor k = p[1].as_leaf();
      auto g = grad(f(x, k), std::vector<Tensor>{x, k}, true);
      return ops::add(ops::sum(ops::mul(g[0], v)), ops::sum(ops::mul(g[1], kv)));
    };
    std::vector<Tensor> point{x0, kernel};
    Tensor xl = x0.as_leaf();
    Tensor kl = kernel.as_leaf();
    auto g = grad(f(xl, kl), std::vector<Tensor>{xl, kl}, true);
    Tensor gv = ops::add(ops::sum(ops::mul(g[0], v)), ops::sum(ops::mul(g[1], kv)));
    auto analytic = grad(gv, std::vector<Tensor>{xl, kl});
    auto numeric = finite_difference_gradient([&](std::span<const Tensor> p) { return g_of(p).item(); }, point, 1e-5);
    CHECK(max_relative_error(analytic, numeric, 1e-4) < 1e-4);
  }
}

TEST_CASE("unrolled quadratic toy") {
  // inner: 0.5 (theta - phi)^2 from theta0 = 0; outer: 0.5 (theta' - 1)^2.
  const double beta = 0.1;
  auto run = [&](double phi_value, bool first_order) {
    Tensor phi = Tensor::scalar(phi_value, true);
    LossBuilder inner = [&](std::span<const Tensor> th) {
      Tensor d = ops::sub(th[0], phi);
      return ops::scale(ops::mul(d, d), 0.5);
    };
    LossBuilder outer = [](std::span<const Tensor> th) {
      Tensor d = ops::add_scalar(th[0], -1.0);
      return ops::scale(ops::mul(d, d), 0.5);
    };
    UnrollOptions opts{.steps = 1, .inner_lr = beta, .first_order = first_order};
    return grad_through_unrolled_steps(inner, outer, std::vector<Tensor>{phi}, std::vector<Tensor>{Tensor::scalar(0.0)},
                                       opts);
  };
  for (double phi : {-2.0, 0.3, 4.0}) {
    auto full = run(phi, false);
    // d/dphi 0.5 (0.1 phi - 1)^2 = 0.1 (0.1 phi - 1)
    const double expected = 0.1 * (0.1 * phi - 1.0);
    CHECK(std::abs(full.outer_grads[0].item() - expected) < 1e-10);
    auto numeric = finite_difference_gradient(
        [](std::span<const Tensor> p) {
          const double adapted = 0.1 * p[0].item();
          return 0.5 * (adapted - 1.0) * (adapted - 1.0);
        },
        std::vector<Tensor>{Tensor::scalar(phi)}, 1e-4);
    CHECK(std::abs(numeric[0].item() - expected) < 1e-9);
    CHECK(full.adapted[0].item() == doctest::Approx(beta * phi));
    auto truncated = run(phi, true);
    CHECK(truncated.outer_grads[0].item() == 0.0);
  }
}

TEST_CASE("unrolled steps reject a non-positive count and non-finite losses") {
  Tensor phi = Tensor::scalar(1.0, true);
  LossBuilder inner = [&](std::span<const Tensor> th) { return ops::mul(th[0], phi); };
  UnrollOptions opts{.steps = 0};
  CHECK_THROWS_AS(grad_through_unrolled_steps(inner, inner, std::vector<Tensor>{phi},
                                              std::vector<Tensor>{Tensor::scalar(0.0)}, opts),
                  std::invalid_argument);
  LossBuilder explode = [](std::span<const Tensor> th) { return ops::scale(ops::mul(th[0], th[0]), 1e308); };
  UnrollOptions two{.steps = 3, .inner_lr = 1.0};
  try {
    unroll_inner_steps(explode, std::vector<Tensor>{Tensor::scalar(10.0)}, two);
    FAIL("expected AutodiffError");
  } catch (const AutodiffError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

namespace {

struct OpsMlp {
  MlpOracle& o;
  Tensor w1, b1, w2, b2;

  explicit OpsMlp(MlpOracle& oracle)
      : o(oracle),
        w1(Tensor::from({o.hidden, o.in}, o.w1)),
        b1(Tensor::from({o.hidden}, o.b1)),
        w2(Tensor::from({o.feat, o.hidden}, o.w2)),
        b2(Tensor::from({o.feat}, o.b2)) {}

  Tensor features(const std::vector<double>& x, std::span<const Tensor> ss) const {
    Tensor in = Tensor::from({x.size() / o.in, o.in}, x);
    Tensor sw1 = ops::mul(w1, ops::broadcast_axis(ss[0], w1.shape(), 0));
    Tensor h = ops::leaky_relu(ops::linear(in, sw1, ops::add(b1, ss[1])), o.slope);
    Tensor sw2 = ops::mul(w2, ops::broadcast_axis(ss[2], w2.shape(), 0));
    return ops::leaky_relu(ops::linear(h, sw2, ops::add(b2, ss[3])), o.slope);
  }
};

}  // namespace

TEST_CASE("second-order meta-gradient through a 2-layer perceptron matches the oracle") {
  for (int steps : {1, 2, 3}) {
    Rng rng(1000 + steps);
    MlpOracle oracle = MlpOracle::random(rng, 6, 8, 5, 5, 1, 3);
    oracle.steps = steps;
    oracle.beta = 0.5;
    OpsMlp net(oracle);
    std::vector<Tensor> outer{
        Tensor::from({oracle.hidden}, oracle.s1, true), Tensor::from({oracle.hidden}, oracle.t1, true),
        Tensor::from({oracle.feat}, oracle.s2, true),   Tensor::from({oracle.feat}, oracle.t2, true),
        Tensor::from({oracle.way, oracle.feat}, oracle.wc, true), Tensor::from({oracle.way}, oracle.bc, true)};
    std::span<const Tensor> ss(outer.data(), 4);
    Tensor f_train = net.features(oracle.x_train, ss);
    Tensor f_test = net.features(oracle.x_test, ss);
    LossBuilder inner = [&](std::span<const Tensor> th) {
      return ops::softmax_cross_entropy(ops::linear(f_train, th[0], th[1]), oracle.y_train);
    };
    LossBuilder meta = [&](std::span<const Tensor> th) {
      return ops::softmax_cross_entropy(ops::linear(f_test, th[0], th[1]), oracle.y_test);
    };
    for (bool first_order : {false, true}) {
      UnrollOptions opts{.steps = steps, .inner_lr = oracle.beta, .first_order = first_order};
      auto result = grad_through_unrolled_steps(inner, meta, outer, std::vector<Tensor>{outer[4], outer[5]}, opts);
      CHECK(result.meta_loss == doctest::Approx(oracle.meta_loss()).epsilon(1e-12));
      auto expected = first_order ? oracle.truncated_gradient(1e-5) : oracle.full_gradient(1e-5);
      std::vector<Tensor> expected_t;
      for (std::size_t i = 0; i < expected.size(); ++i) expected_t.push_back(Tensor::from(outer[i].shape(), expected[i]));
      const double err = max_relative_error(result.outer_grads, expected_t, 1e-4);
      INFO("steps=" << steps << " first_order=" << first_order << " err=" << err);
      CHECK(err < 1e-3);
    }
  }
}

TEST_CASE("identical inputs give bit-identical losses and gradients") {
  auto once = [] {
    Rng rng(5);
    Tensor x = random_tensor(rng, {4, 3});
    Tensor w = random_tensor(rng, {2, 3}, 1.0, true);
    Tensor b = random_tensor(rng, {2}, 1.0, true);
    Tensor loss = ops::softmax_cross_entropy(ops::linear(x, w, b), {0, 1, 1, 0});
    auto g = grad(loss, std::vector<Tensor>{w, b});
    return std::make_tuple(loss.item(), g[0].to_vector(), g[1].to_vector());
  };
  CHECK(once() == once());
}

TEST_CASE("topological order places inputs before their consumers") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor b = ops::scale(a, 2.0);
  Tensor c = ops::mul(b, a);
  Tensor d = ops::sum(ops::add(c, b));
  auto order = topological_order(d);
  auto pos = [&](const Tensor& t) { return std::find(order.begin(), order.end(), t.node()) - order.begin(); };
  CHECK(pos(a) < pos(b));
  CHECK(pos(b) < pos(c));
  CHECK(pos(c) < pos(d));
  CHECK(order.back() == d.node());
}
