#include <doctest.h>

#include <cmath>

#include "mpae/tensor.hpp"
#include "oracles.hpp"

using namespace mpae;
using tensor::Act;
using tensor::LossKind;
using tensor::PadMode;
using T32 = tensor::Tensor<float>;
using T64 = tensor::Tensor<double>;

namespace {

T64 random_leaf(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T64::from(std::move(shape), std::move(v), true);
}

// Values bounded away from zero so kinked activations see no FD crossover.
T64 random_leaf_offzero(std::vector<int> shape, Rng& rng) {
  auto t = random_leaf(shape, rng);
  for (auto& x : t.values())
    if (std::abs(x) < 0.05) x = x < 0 ? x - 0.1 : x + 0.1;
  return t;
}

}  // namespace

TEST_CASE("conv3d forward matches the direct reference") {
  Rng rng(301);
  for (int trial = 0; trial < 16; ++trial) {
    const int N = 1 + static_cast<int>(rng.bounded(2));
    const int Cin = 1 + static_cast<int>(rng.bounded(3));
    const int Cout = 1 + static_cast<int>(rng.bounded(3));
    const int k = rng.bounded(2) == 0 ? 1 : 3;
    const int D = k + static_cast<int>(rng.bounded(4));
    const int stride = 1 + static_cast<int>(rng.bounded(2));
    const int padding = static_cast<int>(rng.bounded(2));
    const bool circular = rng.bounded(2) == 1;
    if (D + 2 * padding < k) continue;

    oracles::NaiveConvInput in;
    in.x_shape = {N, Cin, D, D, D};
    in.w_shape = {Cout, Cin, k, k, k};
    in.stride = stride;
    in.padding = padding;
    in.circular = circular;
    in.x.resize(static_cast<std::size_t>(N) * Cin * D * D * D);
    in.w.resize(static_cast<std::size_t>(Cout) * Cin * k * k * k);
    in.b.resize(Cout);
    for (auto& v : in.x) v = rng.uniform(-1, 1);
    for (auto& v : in.w) v = rng.uniform(-1, 1);
    for (auto& v : in.b) v = rng.uniform(-1, 1);

    std::vector<int> ref_shape;
    auto ref = oracles::naive_conv3d(in, ref_shape);

    auto xf = T32::from(in.x_shape, std::vector<float>(in.x.begin(), in.x.end()));
    auto wf = T32::from(in.w_shape, std::vector<float>(in.w.begin(), in.w.end()));
    auto bf = T32::from({Cout}, std::vector<float>(in.b.begin(), in.b.end()));
    auto y = tensor::conv3d(xf, wf, bf, stride, padding,
                            circular ? PadMode::Circular : PadMode::Zero);

    REQUIRE(y.shape() == ref_shape);
    double scale = 1.0;
    for (double v : ref) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(std::abs(static_cast<double>(y.values()[i]) - ref[i]) <= 1e-6 * scale);
  }
}

TEST_CASE("conv3d rejects malformed inputs") {
  auto x = T32::zeros({1, 2, 4, 4, 4});
  auto w = T32::zeros({3, 2, 3, 3, 3});
  auto b = T32::zeros({3});
  CHECK_NOTHROW(tensor::conv3d(x, w, b, 1, 1));
  CHECK_THROWS_AS(tensor::conv3d(x, T32::zeros({3, 1, 3, 3, 3}), b), DimensionError);
  CHECK_THROWS_AS(tensor::conv3d(x, T32::zeros({3, 2, 2, 2, 2}), b), DimensionError);
  CHECK_THROWS_AS(tensor::conv3d(x, w, T32::zeros({2})), DimensionError);
  CHECK_THROWS_AS(tensor::conv3d(x, w, b, 0), ConfigError);
  CHECK_THROWS_AS(tensor::conv3d(x, w, b, 1, -1), ConfigError);
  CHECK_THROWS_AS(tensor::conv3d(T32::zeros({2, 4, 4, 4}), w, b), DimensionError);
}

TEST_CASE("conv3d gradients pass finite differences") {
  Rng rng(302);
  for (int trial = 0; trial < 6; ++trial) {
    const int stride = 1 + trial % 2;
    const auto pad_mode = trial % 3 == 0 ? PadMode::Circular : PadMode::Zero;
    auto x = random_leaf({2, 2, 4, 4, 4}, rng);
    auto w = random_leaf({3, 2, 3, 3, 3}, rng);
    auto b = random_leaf({3}, rng);
    auto fn = [&] { return tensor::sum(tensor::conv3d(x, w, b, stride, 1, pad_mode)); };
    CHECK(oracles::fd_max_rel_error(fn, {x, w, b}) < 1e-4);
  }
}

TEST_CASE("weight_standardize normalizes each output channel over its fan-in") {
  Rng rng(303);
  auto w = random_leaf({4, 3, 3, 3, 3}, rng);
  auto ws = tensor::weight_standardize(w, 1e-10);
  const std::int64_t fan = 3 * 27;
  for (int o = 0; o < 4; ++o) {
    double mean = 0, var = 0;
    auto vals = ws.values().subspan(static_cast<std::size_t>(o) * fan, fan);
    for (double v : vals) mean += v;
    mean /= static_cast<double>(fan);
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(fan);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("gradients") {
    auto g = random_leaf({4, 3, 3, 3, 3}, rng);
    auto fn = [&] { return tensor::sum(tensor::mul(tensor::weight_standardize(w, 1e-5), g)); };
    CHECK(oracles::fd_max_rel_error(fn, {w}) < 1e-4);
  }
}

TEST_CASE("group_norm normalizes per sample and group") {
  Rng rng(304);
  auto x = random_leaf({2, 4, 3, 3, 3}, rng, -2.0, 2.0);
  auto gamma = T64::full({4}, 1.0);
  auto beta = T64::zeros({4});
  auto y = tensor::group_norm(x, 2, gamma, beta, 1e-12);
  const std::int64_t slice = 2 * 27;  // channels-per-group x spatial
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < 2; ++g) {
      auto vals = y.values().subspan(static_cast<std::size_t>((n * 2 + g)) * slice, slice);
      double mean = 0, var = 0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(slice);
      for (double v : vals) var += (v - mean) * (v - mean);
      var /= static_cast<double>(slice);
      CHECK(std::abs(mean) < 1e-10);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
    }

  SUBCASE("affine parameters scale and shift") {
    auto g2 = T64::from({4}, {2.0, 2.0, 2.0, 2.0});
    auto b2 = T64::from({4}, {1.0, 1.0, 1.0, 1.0});
    auto y2 = tensor::group_norm(x, 2, g2, b2, 1e-12);
    for (std::size_t i = 0; i < y2.values().size(); ++i)
      CHECK(y2.values()[i] == doctest::Approx(2.0 * y.values()[i] + 1.0).epsilon(1e-9));
  }
  SUBCASE("channel count must divide") {
    CHECK_THROWS_AS(tensor::group_norm(x, 3, gamma, beta, 1e-5), ConfigError);
  }
  SUBCASE("gradients") {
    auto gamma_l = random_leaf({4}, rng, 0.5, 1.5);
    auto beta_l = random_leaf({4}, rng);
    auto target = random_leaf({2, 4, 3, 3, 3}, rng);
    auto fn = [&] {
      return tensor::loss(tensor::group_norm(x, 2, gamma_l, beta_l, 1e-5), target, LossKind::MSE);
    };
    CHECK(oracles::fd_max_rel_error(fn, {x, gamma_l, beta_l}) < 1e-4);
  }
}

TEST_CASE("activations compute their defining formulas and gradients") {
  Rng rng(305);
  auto x = random_leaf_offzero({1, 1, 2, 2, 2}, rng);
  SUBCASE("values") {
    auto silu = tensor::activation(x, Act::SiLU);
    auto relu = tensor::activation(x, Act::ReLU);
    auto th = tensor::activation(x, Act::Tanh);
    for (std::size_t i = 0; i < x.values().size(); ++i) {
      double v = x.values()[i];
      CHECK(silu.values()[i] == doctest::Approx(v / (1.0 + std::exp(-v))).epsilon(1e-12));
      CHECK(relu.values()[i] == (v > 0 ? v : 0.0));
      CHECK(th.values()[i] == doctest::Approx(std::tanh(v)).epsilon(1e-12));
    }
  }
  SUBCASE("gradients") {
    for (auto kind : {Act::SiLU, Act::ReLU, Act::Tanh}) {
      for (int trial = 0; trial < 4; ++trial) {
        auto leaf = random_leaf_offzero({2, 3, 3, 3, 3}, rng);
        auto fn = [&] { return tensor::sum(tensor::activation(leaf, kind)); };
        CHECK(oracles::fd_max_rel_error(fn, {leaf}) < 1e-4);
      }
    }
  }
}

TEST_CASE("losses reduce to the elementwise mean") {
  auto p = T64::from({1, 1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  auto t = T64::from({1, 1, 1, 1, 4}, {2.0, 2.0, 1.0, 0.0});
  CHECK(tensor::loss(p, t, LossKind::L1).item() == doctest::Approx((1 + 0 + 2 + 4) / 4.0));
  CHECK(tensor::loss(p, t, LossKind::MSE).item() == doctest::Approx((1 + 0 + 4 + 16) / 4.0));

  SUBCASE("gradients") {
    Rng rng(306);
    for (auto kind : {LossKind::L1, LossKind::MSE}) {
      auto pred = random_leaf_offzero({2, 1, 3, 3, 3}, rng);
      auto target = T64::zeros({2, 1, 3, 3, 3});
      auto fn = [&] { return tensor::loss(pred, target, kind); };
      CHECK(oracles::fd_max_rel_error(fn, {pred}) < 1e-4);
    }
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(tensor::loss(p, T64::zeros({1, 1, 1, 1, 3}), LossKind::L1), DimensionError);
  }
}

TEST_CASE("add, mul and sum") {
  auto a = T64::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto b = T64::from({2, 2}, {10.0, 20.0, 30.0, 40.0});
  auto s = tensor::add(a, b);
  auto m = tensor::mul(a, b);
  CHECK(s.values()[3] == 44.0);
  CHECK(m.values()[2] == 90.0);
  CHECK(tensor::sum(a).item() == 10.0);
  CHECK_THROWS_AS(tensor::add(a, T64::zeros({2, 3})), DimensionError);

  SUBCASE("gradients including reuse of one operand") {
    Rng rng(307);
    auto x = random_leaf({2, 3}, rng);
    auto y = random_leaf({2, 3}, rng);
    auto fn = [&] { return tensor::sum(tensor::mul(tensor::add(x, y), x)); };
    CHECK(oracles::fd_max_rel_error(fn, {x, y}) < 1e-4);
  }
}

TEST_CASE("upsample_nearest2x replicates voxels") {
  auto x = T64::from({1, 1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  auto y = tensor::upsample_nearest2x(x);
  CHECK(y.shape() == std::vector<int>{1, 1, 2, 4, 4});
  // Row 0 of the upsampled field: 1 1 2 2.
  CHECK(y.values()[0] == 1.0);
  CHECK(y.values()[1] == 1.0);
  CHECK(y.values()[2] == 2.0);
  CHECK(y.values()[3] == 2.0);
  double total = 0;
  for (double v : y.values()) total += v;
  CHECK(total == 8.0 * (1 + 2 + 3 + 4));

  SUBCASE("gradients") {
    Rng rng(308);
    auto leaf = random_leaf({1, 2, 2, 2, 2}, rng);
    auto g = random_leaf({1, 2, 4, 4, 4}, rng);
    auto fn = [&] { return tensor::sum(tensor::mul(tensor::upsample_nearest2x(leaf), g)); };
    CHECK(oracles::fd_max_rel_error(fn, {leaf}) < 1e-4);
  }
}

TEST_CASE("residual block composite passes finite differences") {
  Rng rng(309);
  auto x = random_leaf({2, 3, 4, 4, 4}, rng);
  auto w1 = random_leaf({3, 3, 3, 3, 3}, rng, -0.3, 0.3);
  auto b1 = random_leaf({3}, rng, -0.1, 0.1);
  auto g1 = random_leaf({3}, rng, 0.8, 1.2);
  auto be1 = random_leaf({3}, rng, -0.1, 0.1);
  auto w2 = random_leaf({3, 3, 3, 3, 3}, rng, -0.3, 0.3);
  auto b2 = random_leaf({3}, rng, -0.1, 0.1);
  auto g2 = random_leaf({3}, rng, 0.8, 1.2);
  auto be2 = random_leaf({3}, rng, -0.1, 0.1);
  auto wskip = random_leaf({3, 3, 1, 1, 1}, rng, -0.3, 0.3);
  auto bskip = random_leaf({3}, rng, -0.1, 0.1);
  auto target = random_leaf({2, 3, 4, 4, 4}, rng);

  auto fn = [&] {
    auto h = tensor::conv3d(x, tensor::weight_standardize(w1, 1e-5), b1, 1, 1);
    h = tensor::activation(tensor::group_norm(h, 3, g1, be1, 1e-5), Act::SiLU);
    h = tensor::conv3d(h, tensor::weight_standardize(w2, 1e-5), b2, 1, 1);
    h = tensor::activation(tensor::group_norm(h, 3, g2, be2, 1e-5), Act::SiLU);
    auto skip = tensor::conv3d(x, wskip, bskip, 1, 0);
    return tensor::loss(tensor::add(h, skip), target, LossKind::L1);
  };
  CHECK(oracles::fd_max_rel_error(fn, {x, w1, b1, g1, be1, w2, b2, g2, be2, wskip, bskip}) < 1e-4);
}

TEST_CASE("backward touches every node exactly once and accumulates on leaves") {
  auto x = T64::from({2}, {1.0, 2.0}, true);
  auto y = tensor::sum(tensor::mul(x, x));
  y.backward();
  CHECK(y.backward_visits() == 1);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));

  // A second independent graph over the same leaf accumulates.
  auto y2 = tensor::sum(x);
  y2.backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);

  SUBCASE("backward requires a scalar root") {
    CHECK_THROWS_AS(tensor::mul(x, x).backward(), UsageError);
  }
}

TEST_CASE("adam follows the reference recurrence") {
  Rng rng(310);
  for (double wd : {0.0, 0.01}) {
    tensor::AdamConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = wd;
    tensor::Adam<double> opt(cfg);
    oracles::AdamRef ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, {}, {}, 0};

    std::vector<double> w0 = {0.5, -0.3, 1.2, 0.0};
    std::vector<tensor::Parameter<double>> params;
    params.push_back({"w", T64::from({4}, std::vector<double>(w0), true)});
    std::vector<double> w_ref = w0;

    for (int step = 0; step < 7; ++step) {
      std::vector<double> g(4);
      for (auto& v : g) v = rng.uniform(-1, 1);
      tensor::zero_grads(params);
      // Drive the gradient through a graph: sum(mul(w, g)) has dL/dw = g.
      auto gt = T64::from({4}, std::vector<double>(g));
      tensor::sum(tensor::mul(params[0].tensor, gt)).backward();
      opt.step(params);
      ref.step(w_ref, g);
      for (int i = 0; i < 4; ++i)
        CHECK(params[0].tensor.values()[i] == doctest::Approx(w_ref[i]).epsilon(1e-12));
    }
    CHECK(opt.steps() == 7);
  }

  SUBCASE("first step magnitude is about lr") {
    tensor::AdamConfig cfg;
    cfg.lr = 1e-3;
    tensor::Adam<double> opt(cfg);
    std::vector<tensor::Parameter<double>> params;
    params.push_back({"w", T64::from({1}, {1.0}, true)});
    auto g = T64::from({1}, {0.37});
    tensor::sum(tensor::mul(params[0].tensor, g)).backward();
    opt.step(params);
    CHECK(std::abs(1.0 - params[0].tensor.values()[0]) ==
          doctest::Approx(cfg.lr).epsilon(1e-4));
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    tensor::AdamConfig cfg;
    tensor::Adam<double> opt(cfg);
    std::vector<tensor::Parameter<double>> params;
    params.push_back({"w", T64::from({2}, {1.0, -2.0}, true)});
    tensor::zero_grads(params);
    auto zero = T64::zeros({2});
    tensor::sum(tensor::mul(params[0].tensor, zero)).backward();
    opt.step(params);
    CHECK(params[0].tensor.values()[0] == 1.0);
    CHECK(params[0].tensor.values()[1] == -2.0);
  }
  SUBCASE("missing gradient is an error") {
    tensor::AdamConfig cfg;
    tensor::Adam<double> opt(cfg);
    std::vector<tensor::Parameter<double>> params;
    params.push_back({"w", T64::from({1}, {1.0}, true)});
    CHECK_THROWS_AS(opt.step(params), UsageError);
  }
}

TEST_CASE("enum string round trips") {
  for (auto a : {Act::SiLU, Act::ReLU, Act::Tanh})
    CHECK(tensor::act_from_string(tensor::to_string(a)) == a);
  for (auto k : {LossKind::L1, LossKind::MSE})
    CHECK(tensor::loss_from_string(tensor::to_string(k)) == k);
  for (auto m : {PadMode::Zero, PadMode::Circular})
    CHECK(tensor::pad_mode_from_string(tensor::to_string(m)) == m);
  CHECK_THROWS_AS(tensor::act_from_string("gelu"), ConfigError);
}
