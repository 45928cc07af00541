#include <doctest.h>

#include "refseg/autodiff.hpp"
#include "refseg/error.hpp"
#include "refseg/params.hpp"
#include "support.hpp"

using namespace refseg;
namespace ad = refseg::ad;

namespace {

// sum(weights * op(inputs)) as a scalar, so every output element matters.
testing::LossFn op_loss(std::function<ad::Var(Binder&)> op, std::vector<double> weights) {
  return [op, weights](const ParamSet& p, ParamSet* g) {
    ad::Tape tape;
    Binder bind(tape, p, g);
    ad::Var y = op(bind);
    const auto n = static_cast<int>(y.value().numel());
    ad::Var w = tape.constant(ad::Tensor({1, n}, std::vector<double>(weights.begin(), weights.begin() + n)));
    ad::Var s = ad::matmul(w, ad::reshape(y, {n, 1}));
    if (g) tape.backward(s);
    return s.value().data[0];
  };
}

void check_op(const ParamSet& p, std::function<ad::Var(Binder&)> op, std::uint64_t seed) {
  Rng rng(seed);
  auto weights = testing::random_vector(4096, -1.0, 1.0, rng);
  auto r = testing::gradcheck(p, op_loss(op, weights), 40, seed);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-6);
}

}  // namespace

TEST_CASE("convolution gradients") {
  Rng rng(1);
  ParamSet p;
  p.add("x", {3, 7, 6}) = testing::random_tensor({3, 7, 6}, 1.0, rng);
  p.add("w", {4, 3, 3, 3}) = testing::random_tensor({4, 3, 3, 3}, 0.5, rng);
  p.add("b", {4}) = testing::random_tensor({4}, 0.5, rng);
  for (int stride : {1, 2})
    check_op(p, [stride](Binder& b) { return ad::conv2d(b("x"), b("w"), b("b"), stride, 1); }, 10 + stride);
}

TEST_CASE("convolution matches a direct sum") {
  Rng rng(2);
  ad::Tensor x = testing::random_tensor({2, 5, 5}, 1.0, rng), w = testing::random_tensor({3, 2, 3, 3}, 1.0, rng),
             b = testing::random_tensor({3}, 1.0, rng);
  ad::Tape tape;
  auto y = ad::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), 1, 1).value();
  for (int o = 0; o < 3; ++o)
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c) {
        double s = b.data[o];
        for (int i = 0; i < 2; ++i)
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
              const int rr = r + dr, cc = c + dc;
              if (rr < 0 || rr >= 5 || cc < 0 || cc >= 5) continue;
              s += x.data[(i * 5 + rr) * 5 + cc] * w.data[((o * 2 + i) * 3 + dr + 1) * 3 + dc + 1];
            }
        CHECK(y.data[(o * 5 + r) * 5 + c] == doctest::Approx(s).epsilon(1e-12));
      }
}

TEST_CASE("elementwise, shape and pooling gradients") {
  Rng rng(3);
  ParamSet p;
  p.add("a", {4, 3, 5}) = testing::random_tensor({4, 3, 5}, 1.0, rng);
  p.add("b", {4, 3, 5}) = testing::random_tensor({4, 3, 5}, 1.0, rng);
  p.add("v", {4}) = testing::random_tensor({4}, 1.0, rng);
  check_op(p, [](Binder& b) { return ad::relu(ad::add(b("a"), b("b"))); }, 1);
  check_op(p, [](Binder& b) { return ad::scale(b("a"), -1.7); }, 2);
  check_op(p, [](Binder& b) { return ad::add_channel_vector(b("a"), b("v")); }, 3);
  check_op(p, [](Binder& b) { return ad::scale_channels(b("a"), {2.0, 0.0, 2.0, 0.5}); }, 4);
  check_op(p, [](Binder& b) { return ad::concat({b("a"), b("b")}); }, 5);
  check_op(p, [](Binder& b) { return ad::slice(b("a"), 1, 3); }, 6);
  check_op(p, [](Binder& b) { return ad::global_avg_pool(b("a")); }, 7);
  check_op(p, [](Binder& b) { return ad::resize_bilinear(b("a"), 7, 9); }, 8);
  check_op(p, [](Binder& b) { return ad::resize_bilinear(b("a"), 2, 2); }, 9);
}

TEST_CASE("matrix and attention gradients") {
  Rng rng(4);
  ParamSet p;
  p.add("a", {3, 5}) = testing::random_tensor({3, 5}, 1.0, rng);
  p.add("b", {5, 4}) = testing::random_tensor({5, 4}, 1.0, rng);
  check_op(p, [](Binder& b) { return ad::matmul(b("a"), b("b")); }, 1);
  check_op(p, [](Binder& b) { return ad::transpose(b("a")); }, 2);
  check_op(p, [](Binder& b) { return ad::softmax_rows(ad::scale(b("a"), 3.0)); }, 3);
}

TEST_CASE("a parameter used twice collects both gradient paths") {
  ParamSet p;
  p.add("x", {1}, 3.0);
  ParamSet g = p.zeros_like();
  ad::Tape tape;
  Binder bind(tape, p, &g);
  auto y = ad::matmul(ad::reshape(bind("x"), {1, 1}), ad::reshape(bind("x"), {1, 1}));
  tape.backward(y);
  CHECK(g.at("x").data[0] == doctest::Approx(6.0));
}

TEST_CASE("softmax rows sum to one and bilinear identity resize is exact") {
  Rng rng(5);
  ad::Tape tape;
  auto s = ad::softmax_rows(tape.constant(testing::random_tensor({4, 6}, 5.0, rng))).value();
  for (int r = 0; r < 4; ++r) {
    double t = 0.0;
    for (int c = 0; c < 6; ++c) t += s.data[r * 6 + c];
    CHECK(t == doctest::Approx(1.0).epsilon(1e-14));
  }
  ad::Tensor x = testing::random_tensor({2, 5, 5}, 1.0, rng);
  CHECK(ad::resize_bilinear(x, 5, 5) == x);
}

TEST_CASE("optimizers and parameter serialization") {
  Rng rng(6);
  ParamSet p;
  p.add("w", {3, 2}) = testing::random_tensor({3, 2}, 1.0, rng);
  p.add("b", {2}) = testing::random_tensor({2}, 1.0, rng);
  ParamSet g = p.zeros_like();
  for (auto& [n, t] : g.tensors())
    for (double& v : t.data) v = rng.normal();

  ParamSet s = p;
  sgd_step(s, g, 0.1);
  for (std::size_t i = 0; i < 6; ++i) CHECK(s.at("w").data[i] == p.at("w").data[i] - 0.1 * g.at("w").data[i]);

  // First Adam step moves every coordinate by lr * sign(g) (up to eps).
  ParamSet a = p;
  AdamState st;
  adam_step(a, g, st, 0.01);
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(a.at("w").data[i] - p.at("w").data[i] ==
          doctest::Approx(-0.01 * (g.at("w").data[i] > 0 ? 1.0 : -1.0)).epsilon(1e-6));

  ParamSet back = params_from_json(nlohmann::json::parse(params_to_json(p).dump()));
  CHECK(back == p);
  ParamSet other;
  other.add("w", {2, 3});
  CHECK_THROWS_AS(check_layout(p, other, "test"), Error);
}
