#include <cmath>
#include <vector>

#include "doctest.h"
#include "mapchange/losses.hpp"
#include "mapchange/net.hpp"
#include "mapchange/rng.hpp"
#include "mapchange/tape.hpp"

using namespace mapchange;

namespace {

Tensor random_logits(std::vector<std::size_t> shape, uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

Tensor labels_from(std::vector<std::size_t> shape, int k, uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(rng.below(k));
  return t;
}

double scalar_of(Tape& t, Var v) { return t.value(v)[0]; }

}  // namespace

TEST_CASE("uniform logits give cross entropy ln K") {
  for (int k : {2, 5, 9}) {
    CAPTURE(k);
    Tape t;
    Var logits = t.leaf(Tensor::zeros({2, static_cast<std::size_t>(k), 4, 4}), false);
    Tensor labels = labels_from({2, 4, 4}, k, 21);
    double ce = scalar_of(t, cross_entropy_map(t, logits, labels));
    CHECK(ce == doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-12));
  }
}

TEST_CASE("constant nonzero logits still give ln K") {
  // Softmax is shift invariant, so any constant plane is the uniform case.
  Tape t;
  Var logits = t.leaf(Tensor::full({1, 5, 2, 2}, 3.7), false);
  Tensor labels = labels_from({1, 2, 2}, 5, 22);
  CHECK(scalar_of(t, cross_entropy_map(t, logits, labels)) ==
        doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("perfect one-hot prediction drives cross entropy to zero") {
  const std::size_t k = 4, h = 3, w = 3;
  Tensor labels = labels_from({1, h, w}, static_cast<int>(k), 23);
  Tensor logits({1, k, h, w});
  for (std::size_t p = 0; p < h * w; ++p) {
    std::size_t cls = static_cast<std::size_t>(labels[p]);
    logits[cls * h * w + p] = 80.0;  // overwhelming margin
  }
  Tape t;
  double ce = scalar_of(t, cross_entropy_map(t, t.leaf(logits, false), labels));
  CHECK(ce >= 0.0);
  CHECK(ce <= 1e-3);
}

TEST_CASE("cross entropy ignore_id drops pixels from the mean") {
  const std::size_t k = 3;
  Tensor labels({1, 1, 2}, {0.0, 2.0});
  Tensor logits({1, k, 1, 2});
  logits[0 * 2 + 0] = 50.0;  // pixel 0 predicts class 0 perfectly
  // pixel 1 left uniform
  Tape t;
  Var lv = t.leaf(logits, false);
  double all = scalar_of(t, cross_entropy_map(t, lv, labels));
  double masked = scalar_of(t, cross_entropy_map(t, lv, labels, 2));
  CHECK(masked <= 1e-6);                     // only the perfect pixel remains
  CHECK(all == doctest::Approx((masked + std::log(3.0)) / 2.0).epsilon(1e-9));

  // Every pixel ignored: defined as zero.
  Tensor only2({1, 1, 2}, {2.0, 2.0});
  CHECK(scalar_of(t, cross_entropy_map(t, lv, only2, 2)) == 0.0);
}

TEST_CASE("zero logits give bce ln 2") {
  Tape t;
  Var logits = t.leaf(Tensor::zeros({2, 1, 3, 3}), false);
  Tensor target = labels_from({2, 1, 3, 3}, 2, 24);
  CHECK(scalar_of(t, bce_loss(t, logits, target)) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("bce in logit space survives extreme logits") {
  Tape t;
  Tensor logits({1, 1, 1, 2}, {500.0, -500.0});
  Tensor target({1, 1, 1, 2}, {1.0, 0.0});
  double v = scalar_of(t, bce_loss(t, t.leaf(logits, false), target));
  CHECK(std::isfinite(v));
  CHECK(v <= 1e-12);  // confident and correct

  Tensor wrong({1, 1, 1, 2}, {0.0, 1.0});
  double bad = scalar_of(t, bce_loss(t, t.leaf(logits, false), wrong));
  CHECK(std::isfinite(bad));
  CHECK(bad == doctest::Approx(500.0).epsilon(1e-9));  // -log sigmoid(-500)
}

TEST_CASE("dice loss endpoints") {
  const double smooth = 1.0;
  const std::size_t n = 18;
  Tensor ones({1, 1, 3, 6});
  ones.fill(1.0);

  Tape t;
  // Strongly correct prediction: p ~ 1 where target 1.
  double d_good =
      scalar_of(t, dice_loss(t, t.leaf(Tensor::full({1, 1, 3, 6}, 60.0), false), ones, smooth));
  // dice = 1 - (2n + s) / (2n + s) = 0
  CHECK(d_good == doctest::Approx(0.0).epsilon(1e-9));

  // Strongly wrong prediction against an empty target.
  Tensor empty({1, 1, 3, 6});
  double d_bad =
      scalar_of(t, dice_loss(t, t.leaf(Tensor::full({1, 1, 3, 6}, 60.0), false), empty, smooth));
  CHECK(d_bad == doctest::Approx(1.0 - smooth / (n + smooth)).epsilon(1e-9));

  // Both empty: smooth keeps it finite and zero.
  double d_empty =
      scalar_of(t, dice_loss(t, t.leaf(Tensor::full({1, 1, 3, 6}, -60.0), false), empty, smooth));
  CHECK(d_empty == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("perfect predictions drive the total loss to ~0") {
  const std::size_t k = 4, h = 4, w = 4;
  Tensor labels1 = labels_from({1, h, w}, static_cast<int>(k), 25);
  Tensor labels2 = labels_from({1, h, w}, static_cast<int>(k), 26);
  Tensor change({1, h, w});
  for (std::size_t p = 0; p < h * w; ++p) change[p] = labels1[p] == labels2[p] ? 0.0 : 1.0;

  auto perfect_logits = [&](const Tensor& lab) {
    Tensor lg({1, k, h, w});
    for (std::size_t p = 0; p < h * w; ++p)
      lg[static_cast<std::size_t>(lab[p]) * h * w + p] = 200.0;
    return lg;
  };
  Tensor chg_logits({1, 1, h, w});
  for (std::size_t p = 0; p < h * w; ++p) chg_logits[p] = change[p] > 0.5 ? 200.0 : -200.0;

  Tape t;
  TripletOutputVars out;
  out.s1_logits = t.leaf(perfect_logits(labels1), false);
  out.s2_logits = t.leaf(perfect_logits(labels2), false);
  out.change_logits = t.leaf(chg_logits, false);
  LossVars lv = combined_loss(t, out, labels1, labels2, change);
  LossBreakdown br = read_breakdown(t, lv);
  CHECK(br.finite());
  CHECK(br.total >= 0.0);
  CHECK(br.total <= 1e-3);
}

TEST_CASE("loss terms add up exactly") {
  const std::size_t k = 5, h = 6, w = 6;
  Tape t;
  TripletOutputVars out;
  out.s1_logits = t.leaf(random_logits({2, k, h, w}, 31), false);
  out.s2_logits = t.leaf(random_logits({2, k, h, w}, 32), false);
  out.change_logits = t.leaf(random_logits({2, 1, h, w}, 33), false);
  Tensor labels1 = labels_from({2, h, w}, static_cast<int>(k), 34);
  Tensor labels2 = labels_from({2, h, w}, static_cast<int>(k), 35);
  Tensor change = labels_from({2, h, w}, 2, 36);

  LossVars lv = combined_loss(t, out, labels1, labels2, change);
  LossBreakdown br = read_breakdown(t, lv);
  CHECK(std::fabs(br.l_bcd - (br.l_dice + br.l_bce)) <= 1e-12);
  CHECK(std::fabs(br.total - (br.l_cls1 + br.l_cls2 + br.l_bcd)) <= 1e-12);
  CHECK(br.finite());
  CHECK(br.l_cls1 > 0.0);
  CHECK(br.l_dice > 0.0);
}

TEST_CASE("combined loss is differentiable end to end") {
  const std::size_t k = 3, h = 4, w = 4;
  Tape t;
  TripletOutputVars out;
  out.s1_logits = t.leaf(random_logits({1, k, h, w}, 41), true);
  out.s2_logits = t.leaf(random_logits({1, k, h, w}, 42), true);
  out.change_logits = t.leaf(random_logits({1, 1, h, w}, 43), true);
  Tensor labels1 = labels_from({1, h, w}, static_cast<int>(k), 44);
  Tensor labels2 = labels_from({1, h, w}, static_cast<int>(k), 45);
  Tensor change = labels_from({1, h, w}, 2, 46);

  LossVars lv = combined_loss(t, out, labels1, labels2, change);
  t.backward(lv.total);
  const Tensor& g = t.grad(out.s1_logits);
  double norm = 0;
  for (std::size_t i = 0; i < g.size(); ++i) norm += g[i] * g[i];
  CHECK(norm > 0.0);
  CHECK(g.all_finite());
}

TEST_CASE("out-of-range labels are rejected") {
  Tape t;
  Var logits = t.leaf(Tensor::zeros({1, 3, 2, 2}), false);
  Tensor labels({1, 2, 2}, {0.0, 1.0, 2.0, 3.0});  // 3 is out of range for K=3
  CHECK_THROWS(cross_entropy_map(t, logits, labels));
}
