#include <cstdint>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "mapchange/errors.hpp"
#include "mapchange/net.hpp"
#include "mapchange/rng.hpp"
#include "mapchange/scene.hpp"

using namespace mapchange;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.num_classes = 4;
  cfg.base_channels = 8;
  cfg.encoder_stages = 3;
  cfg.seed = 77;
  return cfg;
}

Tensor random_image(std::vector<std::size_t> shape, uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
  return t;
}

Tensor random_onehot(std::size_t n, std::size_t k, std::size_t h, std::size_t w, uint64_t seed) {
  Rng rng(seed);
  Tensor t({n, k, h, w});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t cls = rng.below(k);
        t[((ni * k + cls) * h + y) * w + x] = 1.0;
      }
  return t;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

std::vector<std::string> param_names(const ParameterStore& ps) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < ps.count(); ++i) names.push_back(ps.at(i).name);
  return names;
}

}  // namespace

TEST_CASE("triplet forward produces the documented shapes") {
  ModelConfig cfg = small_config();
  TripletNetwork net(cfg);
  const std::size_t n = 2, h = 16, w = 16, k = cfg.num_classes;

  Tensor i1 = random_image({n, 3, h, w}, 1);
  Tensor i2 = random_image({n, 3, h, w}, 2);
  Tensor mp = random_onehot(n, k, h, w, 3);

  auto out = net.infer(i1, i2, mp);
  CHECK(out.s1_logits.shape() == std::vector<std::size_t>{n, k, h, w});
  CHECK(out.s2_logits.shape() == std::vector<std::size_t>{n, k, h, w});
  CHECK(out.change_logits.shape() == std::vector<std::size_t>{n, 1, h, w});
  CHECK(out.s1_logits.all_finite());
  CHECK(out.s2_logits.all_finite());
  CHECK(out.change_logits.all_finite());
}

TEST_CASE("encoder trace shapes follow the stage plan") {
  ModelConfig cfg = small_config();
  TripletNetwork net(cfg);
  const std::size_t h = 16, w = 16;
  Tape tape;
  Binder b(tape, false);
  Var img = tape.leaf(random_image({1, 3, h, w}, 4), false);
  EncoderTrace tr = net.encode_image(b, img);
  REQUIRE(tr.skips.size() == 2);
  // stage widths 8, 16, 32; resolutions 16, 8, 4
  CHECK(tape.value(tr.skips[0]).shape() == std::vector<std::size_t>{1, 8, 16, 16});
  CHECK(tape.value(tr.skips[1]).shape() == std::vector<std::size_t>{1, 16, 8, 8});
  CHECK(tape.value(tr.features).shape() == std::vector<std::size_t>{1, 32, 4, 4});
}

TEST_CASE("same seed gives identical parameters, different seed diverges") {
  ModelConfig cfg = small_config();
  TripletNetwork a(cfg), b(cfg);
  auto na = param_names(a.params());
  REQUIRE(na == param_names(b.params()));
  for (const auto& name : na)
    CHECK(bit_identical(a.params().get(name).value, b.params().get(name).value));

  cfg.seed = 78;
  TripletNetwork c(cfg);
  bool all_same = true;
  for (const auto& name : na)
    all_same = all_same && bit_identical(a.params().get(name).value, c.params().get(name).value);
  CHECK_FALSE(all_same);
}

TEST_CASE("swapping the epochs flips symmetric outputs bit-identically") {
  // Add and AbsDiff temporal differences are symmetric in their arguments, so
  // swapping (t1, t2) must swap the semantic heads and leave change identical.
  for (DiffOp op : {DiffOp::Add, DiffOp::AbsDiff}) {
    CAPTURE(to_string(op));
    ModelConfig cfg = small_config();
    cfg.diff_op = op;
    TripletNetwork net(cfg);
    const std::size_t n = 1, h = 8, w = 8;
    Tensor i1 = random_image({n, 3, h, w}, 5);
    Tensor i2 = random_image({n, 3, h, w}, 6);
    Tensor mp = random_onehot(n, cfg.num_classes, h, w, 7);

    auto fwd = net.infer(i1, i2, mp);
    auto rev = net.infer(i2, i1, mp);
    CHECK(bit_identical(fwd.s1_logits, rev.s2_logits));
    CHECK(bit_identical(fwd.s2_logits, rev.s1_logits));
    CHECK(bit_identical(fwd.change_logits, rev.change_logits));
  }
}

TEST_CASE("Sub difference is exactly antisymmetric") {
  ModelConfig cfg = small_config();
  cfg.diff_op = DiffOp::Sub;
  TripletNetwork net(cfg);
  const std::size_t h = 8, w = 8;
  Tensor i1 = random_image({1, 3, h, w}, 8);
  Tensor i2 = random_image({1, 3, h, w}, 9);

  auto diff_of = [&](const Tensor& a, const Tensor& b) {
    Tape tape;
    Binder bind(tape, false);
    Var e1 = net.encode_image(bind, tape.leaf(a, false)).features;
    Var e2 = net.encode_image(bind, tape.leaf(b, false)).features;
    return tape.value(net.temporal_diff(bind, e1, e2));
  };
  Tensor d12 = diff_of(i1, i2);
  Tensor d21 = diff_of(i2, i1);
  REQUIRE(d12.same_shape(d21));
  for (std::size_t i = 0; i < d12.size(); ++i) CHECK(d12[i] == -d21[i]);
}

TEST_CASE("fusion variants change the parameter set as designed") {
  ModelConfig cfg = small_config();
  cfg.fusion_op = FusionOp::Cat;
  TripletNetwork cat(cfg);
  cfg.fusion_op = FusionOp::Add;
  TripletNetwork add(cfg);
  cfg.fusion_op = FusionOp::TstAdd;
  TripletNetwork tst_add(cfg);

  auto has_name = [](TripletNetwork& net, const std::string& needle) {
    for (const auto& n : param_names(net.params()))
      if (n.find(needle) != std::string::npos) return true;
    return false;
  };
  // Add and TST-Add project the map feature before fusing; Cat concatenates
  // instead, so its first change-decoder conv is twice as wide.
  CHECK_FALSE(has_name(cat, "fuse.proj"));
  CHECK(has_name(add, "fuse.proj"));
  CHECK(has_name(tst_add, "fuse.proj"));
  CHECK(has_name(tst_add, "fuse.tst2"));
  CHECK_FALSE(has_name(add, "fuse.tst2"));
  auto pre_elems = [](TripletNetwork& net) {
    for (std::size_t i = 0; i < net.params().count(); ++i)
      if (net.params().at(i).name == "dchg.pre.w") return net.params().at(i).value.size();
    return std::size_t{0};
  };
  CHECK(pre_elems(cat) == 2 * pre_elems(add));

  // All three still produce valid outputs.
  const std::size_t n = 1, h = 8, w = 8;
  Tensor i1 = random_image({n, 3, h, w}, 10);
  Tensor i2 = random_image({n, 3, h, w}, 11);
  Tensor mp = random_onehot(n, cfg.num_classes, h, w, 12);
  for (TripletNetwork* net : {&cat, &add, &tst_add}) {
    auto out = net->infer(i1, i2, mp);
    CHECK(out.change_logits.all_finite());
  }
}

TEST_CASE("map input must be one-hot shaped [N,K,H,W]") {
  ModelConfig cfg = small_config();
  TripletNetwork net(cfg);
  Tensor i1 = random_image({1, 3, 8, 8}, 13);
  Tensor i2 = random_image({1, 3, 8, 8}, 14);
  Tensor wrong_k = random_onehot(1, cfg.num_classes + 1, 8, 8, 15);
  CHECK_THROWS_AS(net.infer(i1, i2, wrong_k), ConfigError);
  Tensor wrong_rank({static_cast<std::size_t>(cfg.num_classes), 8, 8});
  CHECK_THROWS_AS(net.infer(i1, i2, wrong_rank), ConfigError);
}

TEST_CASE("pcc baseline shares initial encoder weights with the triplet net") {
  ModelConfig cfg = small_config();
  TripletNetwork trip(cfg);
  SingleTemporalNetwork single(cfg);
  for (const auto& name : param_names(single.params())) {
    INFO(name);
    CHECK(bit_identical(single.params().get(name).value, trip.params().get(name).value));
  }

  Tensor img = random_image({2, 3, 16, 16}, 16);
  Tensor logits = single.infer(img);
  CHECK(logits.shape() == std::vector<std::size_t>{2, 4, 16, 16});
  CHECK(logits.all_finite());
}

TEST_CASE("model config validation") {
  ModelConfig cfg = small_config();
  cfg.num_classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.encoder_stages = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.tst_heads = 3;  // must divide the token dimension
  cfg.tst_dim = 32;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("diff/fusion op parsing round trips") {
  for (DiffOp op : {DiffOp::Sub, DiffOp::Add, DiffOp::AbsDiff, DiffOp::Concat})
    CHECK(parse_diff_op(to_string(op)) == op);
  for (FusionOp op : {FusionOp::Cat, FusionOp::Add, FusionOp::TstAdd})
    CHECK(parse_fusion_op(to_string(op)) == op);
  CHECK_THROWS_AS(parse_diff_op("nope"), ConfigError);
  CHECK_THROWS_AS(parse_fusion_op(""), ConfigError);
}
