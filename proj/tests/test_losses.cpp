#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "refseg/error.hpp"
#include "refseg/losses.hpp"
#include "support.hpp"

using namespace refseg;
namespace ad = refseg::ad;

namespace {

struct UnlabeledCase {
  std::vector<ad::Tensor> sf, si;
  std::vector<LabelMask> teacher, assistant;
  std::vector<std::vector<std::uint8_t>> confident;

  std::vector<const ad::Tensor*> ptr(const std::vector<ad::Tensor>& v) const {
    std::vector<const ad::Tensor*> out;
    for (const auto& t : v) out.push_back(&t);
    return out;
  }
  std::vector<UnlabeledTargets> targets() const {
    std::vector<UnlabeledTargets> out;
    for (std::size_t b = 0; b < sf.size(); ++b) out.push_back({&teacher[b], &assistant[b], &confident[b]});
    return out;
  }
};

UnlabeledCase random_unlabeled(Rng& rng, int batch, int classes, int h, int w, double conf_p) {
  UnlabeledCase c;
  for (int b = 0; b < batch; ++b) {
    c.sf.push_back(testing::random_tensor({classes + 1, h, w}, 2.0, rng));
    c.si.push_back(testing::random_tensor({classes + 1, h, w}, 2.0, rng));
    c.teacher.push_back(testing::random_mask(h, w, classes, 0.6, rng));
    c.assistant.push_back(testing::random_mask(h, w, classes, 0.6, rng));
    std::vector<std::uint8_t> m(static_cast<std::size_t>(h) * w);
    for (auto& v : m) v = rng.bernoulli(conf_p);
    c.confident.push_back(m);
  }
  return c;
}

}  // namespace

TEST_CASE("mask_loss") {
  const MaskLossWeights ones{1.0, 1.0, 1e-6};
  SUBCASE("confident correct logits give ~0") {
    Rng rng(1);
    LabelMask t = testing::random_blobs(8, 8, 1, rng);
    t.labels[0] = 1;
    auto m = t.binary(1);
    std::vector<double> z(m.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = m[i] > 0 ? 40.0 : -40.0;
    CHECK(mask_loss(z, m, ones) < 1e-6);
  }
  SUBCASE("empty target and confident background: Dice term is 1") {
    std::vector<double> z(64, -40.0), m(64, 0.0);
    CHECK(mask_loss(z, m, {1.0, 0.0, 1e-6}) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("matches the scalar oracle") {
    Rng rng(2);
    for (int t = 0; t < 60; ++t) {
      auto z = testing::random_vector(64, -4.0, 4.0, rng);
      auto m = testing::random_mask(8, 8, 1, 0.4, rng).binary(1);
      const double wd = rng.uniform(0, 2), wb = rng.uniform(0, 2);
      CHECK(std::abs(mask_loss(z, m, {wd, wb, 1e-6}) - oracle::mask_loss(z, m, wd, wb, 1e-6)) < 1e-9);
    }
  }
  SUBCASE("non-finite logits are rejected") {
    std::vector<double> z(64, 0.0), m(64, 0.0);
    z[5] = std::nan("");
    CHECK_THROWS_AS(mask_loss(z, m, ones), Error);
  }
}

TEST_CASE("text_loss") {
  CHECK(text_loss(std::vector<double>{0.3, 0.3, 0.3, 0.3}, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(text_loss(std::vector<double>{0.0, 40.0, 0.0}, 1) < 1e-6);
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    auto z = testing::random_vector(4, -5.0, 5.0, rng);
    const int k = rng.uniform_int(0, 3);
    CHECK(std::abs(text_loss(z, k) - oracle::softmax_ce(z, k)) < 1e-9);
  }
}

TEST_CASE("supervised_loss") {
  SUBCASE("perfect predictions") {
    Rng rng(4);
    LabelMask y = testing::random_mask(6, 6, 2, 0.5, rng);
    y.labels[0] = 1;
    y.labels[1] = 2;
    ad::Tensor z({3, 6, 6}, -40.0);
    for (std::size_t i = 0; i < y.size(); ++i) z.data[y.labels[i] * 36 + i] = 40.0;
    CHECK(supervised_loss({&z}, {&y}, {1.0, 1.0, 1e-6}) < 1e-6);
  }
  SUBCASE("uniform predictions without Dice give ln 3") {
    ad::Tensor z({3, 4, 4}, 0.7);
    LabelMask y(4, 4, 2, 1);
    CHECK(supervised_loss({&z}, {&y}, {1.0, 0.0, 1e-6}) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  }
  SUBCASE("matches the scalar oracle") {
    Rng rng(5);
    for (int t = 0; t < 60; ++t) {
      const int batch = rng.uniform_int(1, 3), classes = rng.uniform_int(1, 3);
      std::vector<ad::Tensor> z;
      std::vector<LabelMask> y;
      for (int b = 0; b < batch; ++b) {
        z.push_back(testing::random_tensor({classes + 1, 5, 4}, 2.0, rng));
        y.push_back(testing::random_mask(5, 4, classes, 0.5, rng));
      }
      std::vector<const ad::Tensor*> zp;
      std::vector<const LabelMask*> yp;
      for (int b = 0; b < batch; ++b) {
        zp.push_back(&z[b]);
        yp.push_back(&y[b]);
      }
      const double wc = rng.uniform(0, 2), wd = rng.uniform(0, 2);
      CHECK(std::abs(supervised_loss(zp, yp, {wc, wd, 1e-6}) - oracle::supervised_loss(z, y, wc, wd, 1e-6)) < 1e-9);
    }
  }
}

TEST_CASE("joint_unlabeled_loss") {
  Rng rng(6);
  SUBCASE("matches the per-pixel oracle") {
    for (int t = 0; t < 60; ++t) {
      auto c = random_unlabeled(rng, rng.uniform_int(1, 3), rng.uniform_int(1, 3), 5, 6, 0.6);
      const double at = t == 0 ? 0.5 : rng.uniform(), av = t == 0 ? 0.5 : rng.uniform();
      auto got = joint_unlabeled_loss(c.ptr(c.sf), c.ptr(c.si), c.targets(), at, av);
      CHECK(std::abs(got.total - oracle::joint_loss(c.sf, c.si, c.teacher, c.assistant, c.confident, at, av)) < 1e-9);
      CHECK(got.total == doctest::Approx(got.teacher + got.assistant).epsilon(1e-14));
    }
  }
  SUBCASE("alpha_v = 0 reduces to the teacher-only loss") {
    for (int t = 0; t < 50; ++t) {
      auto c = random_unlabeled(rng, 2, 2, 5, 5, 0.5);
      auto j = joint_unlabeled_loss(c.ptr(c.sf), c.ptr(c.si), c.targets(), 1.0, 0.0);
      const double u = unimatch_unlabeled_loss(c.ptr(c.sf), c.ptr(c.si), c.targets());
      CHECK(std::abs(j.total - u) < 1e-9);
      CHECK(std::abs(u - oracle::unimatch_loss(c.sf, c.si, c.teacher, c.confident)) < 1e-9);
    }
  }
  SUBCASE("alpha_t = 0 is pure assistant supervision") {
    auto c = random_unlabeled(rng, 2, 2, 5, 5, 0.5);
    auto j = joint_unlabeled_loss(c.ptr(c.sf), c.ptr(c.si), c.targets(), 0.0, 1.0);
    CHECK(std::abs(j.total - oracle::unimatch_loss(c.sf, c.si, c.assistant, c.confident)) < 1e-9);
  }
  SUBCASE("no confident pixels gives zero") {
    auto c = random_unlabeled(rng, 2, 2, 4, 4, 0.0);
    CHECK(joint_unlabeled_loss(c.ptr(c.sf), c.ptr(c.si), c.targets(), 0.5, 0.5).total == 0.0);
  }
  SUBCASE("assistant labels are required when alpha_v is non-zero") {
    auto c = random_unlabeled(rng, 1, 2, 4, 4, 1.0);
    auto t = c.targets();
    t[0].assistant_labels = nullptr;
    CHECK_THROWS_AS(joint_unlabeled_loss(c.ptr(c.sf), c.ptr(c.si), t, 0.5, 0.5), Error);
    CHECK_NOTHROW(joint_unlabeled_loss(c.ptr(c.sf), c.ptr(c.si), t, 1.0, 0.0));
  }
}

TEST_CASE("loss gradients through the tape") {
  Rng rng(7);
  auto c = random_unlabeled(rng, 2, 2, 4, 5, 0.6);
  ParamSet p;
  p.add("sf0", {3, 4, 5}) = c.sf[0];
  p.add("sf1", {3, 4, 5}) = c.sf[1];
  p.add("si0", {3, 4, 5}) = c.si[0];
  p.add("si1", {3, 4, 5}) = c.si[1];
  p.add("m", {1, 4, 5}) = testing::random_tensor({1, 4, 5}, 2.0, rng);
  p.add("t", {4, 1}) = testing::random_tensor({4, 1}, 2.0, rng);
  const auto target = testing::random_mask(4, 5, 1, 0.4, rng).binary(1);
  const LabelMask y = testing::random_mask(4, 5, 2, 0.5, rng);

  auto loss = [&](const ParamSet& q, ParamSet* g) {
    ad::Tape tape;
    Binder b(tape, q, g);
    auto targets = c.targets();
    auto l = ad::add(joint_unlabeled_loss({b("sf0"), b("sf1")}, {b("si0"), b("si1")}, targets, 0.3, 0.7),
                     ad::add(mask_loss(b("m"), target, {0.5, 0.5, 1e-6}), text_loss(b("t"), 2)));
    l = ad::add(l, supervised_loss({b("sf0")}, {y}, {1.0, 1.0, 1e-6}));
    if (g) tape.backward(l);
    return l.value().data[0];
  };
  auto r = testing::gradcheck(p, loss, 60, 3);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("softmax_classes sums to one per pixel") {
  Rng rng(8);
  auto z = testing::random_tensor({4, 3, 3}, 3.0, rng);
  auto p = softmax_classes(z);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += p.at(k, r, c);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
}
