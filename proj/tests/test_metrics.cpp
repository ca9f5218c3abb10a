#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "mapchange/errors.hpp"
#include "mapchange/metrics.hpp"
#include "mapchange/rng.hpp"

using namespace mapchange;

namespace {

// Naive reference implementations, written straight from the formulas.
struct Reference {
  double oa, iou, f1, kappa, sek;
  bool sek_degenerate;
};

double ref_kappa(const std::vector<std::vector<uint64_t>>& m) {
  const std::size_t s = m.size();
  double n = 0, diag = 0;
  std::vector<double> row(s, 0), col(s, 0);
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < s; ++c) {
      n += static_cast<double>(m[r][c]);
      row[r] += static_cast<double>(m[r][c]);
      col[c] += static_cast<double>(m[r][c]);
      if (r == c) diag += static_cast<double>(m[r][c]);
    }
  double po = diag / n, pe = 0;
  for (std::size_t i = 0; i < s; ++i) pe += (row[i] / n) * (col[i] / n);
  return pe == 1.0 ? 0.0 : (po - pe) / (1.0 - pe);
}

Reference ref_all(const std::vector<std::vector<uint64_t>>& m) {
  const std::size_t s = m.size();
  Reference out{};
  double n = 0, diag = 0;
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < s; ++c) {
      double v = static_cast<double>(m[r][c]);
      n += v;
      if (r == c) diag += v;
      if (r != 0 && c != 0) tp += v;
      if (r == 0 && c != 0) fp += v;
      if (r != 0 && c == 0) fn += v;
    }
  out.oa = diag / n;
  out.iou = tp + fp + fn == 0 ? 1.0 : tp / (tp + fp + fn);
  out.f1 = tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
  out.kappa = ref_kappa(m);

  auto q = m;
  q[0][0] = 0;
  uint64_t mass = 0;
  for (const auto& row : q)
    for (uint64_t v : row) mass += v;
  if (mass == 0) {
    out.sek_degenerate = true;
    out.sek = 0.0;
  } else {
    out.sek = std::exp(out.iou - 1.0) * ref_kappa(q);
  }
  return out;
}

ConfusionMatrix to_cm(const std::vector<std::vector<uint64_t>>& m) {
  ConfusionMatrix cm(static_cast<int>(m.size()));
  for (std::size_t r = 0; r < m.size(); ++r)
    for (std::size_t c = 0; c < m.size(); ++c)
      if (m[r][c]) cm.add(static_cast<int>(r), static_cast<int>(c), m[r][c]);
  return cm;
}

}  // namespace

TEST_CASE("hand-checked binary matrix") {
  ConfusionMatrix cm(2);
  cm.add(0, 0, 50);
  cm.add(0, 1, 10);
  cm.add(1, 0, 5);
  cm.add(1, 1, 35);
  MetricReport r = compute_report(cm);
  CHECK(r.oa == doctest::Approx(0.85).epsilon(1e-12));
  CHECK(r.kappa == doctest::Approx(0.34 / 0.49).epsilon(1e-12));
  CHECK(r.kappa == doctest::Approx(0.6939).epsilon(1e-4));
  CHECK(r.iou_change == doctest::Approx(0.70).epsilon(1e-12));
  CHECK(r.f1_change == doctest::Approx(70.0 / 85.0).epsilon(1e-12));
  CHECK(r.f1_change == doctest::Approx(0.8235).epsilon(1e-4));
}

TEST_CASE("metrics match naive formulas on 1000 random matrices") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t s = 2 + rng.below(12);
    std::vector<std::vector<uint64_t>> m(s, std::vector<uint64_t>(s, 0));
    // Mix dense small counts with sparse large ones; allow empty rows.
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < s; ++c) {
        switch (rng.below(4)) {
          case 0: m[r][c] = rng.below(7); break;
          case 1: m[r][c] = rng.below(1000); break;
          case 2: m[r][c] = rng.below(2) ? rng.below(1000000) : 0; break;
          default: break;  // zero
        }
      }
    uint64_t total = 0;
    for (const auto& row : m)
      for (uint64_t v : row) total += v;
    if (total == 0) m[rng.below(s)][rng.below(s)] = 1 + rng.below(9);

    CAPTURE(trial);
    CAPTURE(s);
    Reference ref = ref_all(m);
    MetricReport got = compute_report(to_cm(m));
    CHECK(got.oa == doctest::Approx(ref.oa).epsilon(1e-12));
    CHECK(got.iou_change == doctest::Approx(ref.iou).epsilon(1e-12));
    CHECK(got.f1_change == doctest::Approx(ref.f1).epsilon(1e-12));
    CHECK(got.kappa == doctest::Approx(ref.kappa).epsilon(1e-12));
    CHECK(got.sek == doctest::Approx(ref.sek).epsilon(1e-12));
    CHECK(got.sek_degenerate == ref.sek_degenerate);

    // F1 and IoU are tied by an exact identity.
    CHECK(got.f1_change ==
          doctest::Approx(2.0 * got.iou_change / (1.0 + got.iou_change)).epsilon(1e-12));
  }
}

TEST_CASE("metric edge cases") {
  SUBCASE("perfect prediction") {
    ConfusionMatrix cm(3);
    cm.add(0, 0, 10);
    cm.add(1, 1, 20);
    cm.add(2, 2, 30);
    MetricReport r = compute_report(cm);
    CHECK(r.oa == 1.0);
    CHECK(r.kappa == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.iou_change == 1.0);
    CHECK(r.f1_change == 1.0);
  }
  SUBCASE("single-cell mass has zero kappa, not NaN") {
    ConfusionMatrix cm(3);
    cm.add(1, 1, 42);
    MetricReport r = compute_report(cm);
    CHECK(r.kappa == 0.0);  // pe == 1
    CHECK(std::isfinite(r.sek));
  }
  SUBCASE("all mass on (0,0) is the degenerate sek case") {
    ConfusionMatrix cm(5);
    cm.add(0, 0, 1000);
    MetricReport r = compute_report(cm);
    CHECK(r.sek_degenerate);
    CHECK(r.sek == 0.0);
    CHECK(r.oa == 1.0);
    CHECK(r.iou_change == 1.0);  // no change anywhere, none predicted
  }
  SUBCASE("empty matrix is rejected") {
    ConfusionMatrix cm(3);
    CHECK_THROWS_AS(compute_report(cm), ConfigError);
  }
}

TEST_CASE("confusion matrix plumbing") {
  ConfusionMatrix cm(2);
  cm.add(0, 1, 3);
  cm.add(0, 1);
  CHECK(cm.at(0, 1) == 4);
  CHECK(cm.total() == 4);
  CHECK_THROWS_AS(cm.add(2, 0), ConfigError);
  CHECK_THROWS_AS(cm.at(0, -1), ConfigError);

  ConfusionMatrix other(2);
  other.add(1, 1, 5);
  cm += other;
  CHECK(cm.at(1, 1) == 5);
  CHECK(cm.total() == 9);
  ConfusionMatrix wrong(3);
  CHECK_THROWS_AS(cm += wrong, ConfigError);
}

TEST_CASE("transition scheme is a bijection over ordered pairs") {
  for (int k : {2, 3, 5, 8}) {
    CAPTURE(k);
    TransitionScheme scheme(k);
    CHECK(scheme.size() == 1 + k * (k - 1));
    std::set<int> seen{0};
    for (int f = 0; f < k; ++f)
      for (int t = 0; t < k; ++t) {
        int cat = scheme.encode(f, t);
        if (f == t) {
          CHECK(cat == 0);
          continue;
        }
        CHECK(cat >= 1);
        CHECK(cat < scheme.size());
        CHECK(seen.insert(cat).second);
        auto [df, dt] = scheme.decode(cat);
        CHECK(df == f);
        CHECK(dt == t);
      }
    CHECK(static_cast<int>(seen.size()) == scheme.size());
    CHECK(scheme.decode(0) == std::pair<int, int>{-1, -1});
  }
  CHECK_THROWS_AS(TransitionScheme(1), ConfigError);
  TransitionScheme s(3);
  CHECK_THROWS_AS(s.encode(3, 0), ConfigError);
  CHECK_THROWS_AS(s.decode(s.size()), ConfigError);
}

TEST_CASE("transitions_from_maps hand case") {
  TransitionScheme scheme(3);
  // Pixels: (gt 0->0, pred no change)   -> truth 0, pred 0
  //         (gt 0->1, pred 0->1 change) -> correct transition
  //         (gt 1->2, pred change but 2->2: from==to counts as no-change)
  //         (gt 2->2, pred 0->1 change) -> false alarm
  std::vector<uint8_t> gt1{0, 0, 1, 2}, gt2{0, 1, 2, 2};
  std::vector<uint8_t> p1{0, 0, 2, 0}, p2{0, 1, 2, 1};
  std::vector<uint8_t> chg{0, 1, 1, 1};
  ConfusionMatrix cm = transitions_from_maps(gt1, gt2, p1, p2, chg, scheme);

  CHECK(cm.total() == 4);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(scheme.encode(0, 1), scheme.encode(0, 1)) == 1);
  CHECK(cm.at(scheme.encode(1, 2), 0) == 1);  // missed: predicted pair collapsed
  CHECK(cm.at(0, scheme.encode(0, 1)) == 1);

  std::vector<uint8_t> short_chg{0, 1};
  CHECK_THROWS_AS(transitions_from_maps(gt1, gt2, p1, p2, short_chg, scheme), ConfigError);
}

TEST_CASE("report formatting") {
  ConfusionMatrix cm(2);
  cm.add(0, 0, 50);
  cm.add(0, 1, 10);
  cm.add(1, 0, 5);
  cm.add(1, 1, 35);
  MetricReport r = compute_report(cm);
  std::pair<std::string, MetricReport> row{"test", r};
  std::string table = format_report_table({&row, 1});
  CHECK(table.find("Kappa(%)") != std::string::npos);
  CHECK(table.find("69.39") != std::string::npos);
  CHECK(table.find("85.00") != std::string::npos);
  std::string keys = format_report_keys(r);
  CHECK(keys.find("kappa=0.693878") != std::string::npos);
  CHECK(keys.find("oa=0.850000") != std::string::npos);
  CHECK(keys.find("sek_degenerate=0") != std::string::npos);
}
