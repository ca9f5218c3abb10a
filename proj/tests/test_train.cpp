#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "mapchange/checkpoint.hpp"
#include "mapchange/config.hpp"
#include "mapchange/dataset.hpp"
#include "mapchange/driver.hpp"
#include "mapchange/errors.hpp"
#include "mapchange/optim.hpp"
#include "mapchange/rng.hpp"
#include "mapchange/train.hpp"

using namespace mapchange;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) {
    path = fs::temp_directory_path() /
           (std::string("mc_train_") + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

RunConfig tiny_run_config(int total_iters, int interval) {
  RunConfig cfg;
  cfg.seed = 404;
  cfg.gen.num_classes = 4;
  cfg.gen.tile = 16;
  cfg.gen.n_train = 8;
  cfg.gen.n_val = 1;
  cfg.gen.n_test = 3;
  cfg.model.base_channels = 8;
  cfg.optim.batch_size = 4;
  cfg.optim.total_iters = total_iters;
  cfg.optim.checkpoint_interval = interval;
  cfg.finalize();
  return cfg;
}

bool same_file_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  REQUIRE(fa.good());
  REQUIRE(fb.good());
  std::vector<char> ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::vector<char> bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return ba == bb;
}

}  // namespace

TEST_CASE("poly schedule endpoints and monotonicity") {
  OptimConfig cfg;  // base_lr 0.03, total 1500, power 0.9
  CHECK(poly_lr(0, cfg) == 0.03);
  CHECK(poly_lr(cfg.total_iters, cfg) == 0.0);
  double prev = poly_lr(0, cfg);
  for (int i = 1; i <= cfg.total_iters; ++i) {
    double lr = poly_lr(i, cfg);
    CHECK(lr < prev);
    CHECK(lr >= 0.0);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(-1, cfg), ConfigError);
  CHECK_THROWS_AS(poly_lr(cfg.total_iters + 1, cfg), ConfigError);

  // Half-way value follows the closed form.
  OptimConfig c2;
  c2.total_iters = 100;
  CHECK(poly_lr(50, c2) == doctest::Approx(0.03 * std::pow(0.5, 0.9)).epsilon(1e-15));
}

TEST_CASE("sgd_step matches the scalar recurrence") {
  // Independent scalar oracle: g' = g + wd*w; v = m*v + g'; w = w - lr*v.
  OptimConfig cfg;
  cfg.momentum = 0.9;
  cfg.weight_decay = 1e-4;

  Rng rng(31);
  const std::size_t n = 17;
  Parameter p;
  p.name = "w";
  p.value = Tensor({n});
  p.velocity = Tensor({n});
  std::vector<double> w(n), v(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = rng.normal();
    p.value[i] = w[i];
  }

  for (int step = 0; step < 25; ++step) {
    Tensor grad({n});
    for (std::size_t i = 0; i < n; ++i) grad[i] = rng.normal();
    double lr = 0.05 / (1 + step);

    sgd_step(p, grad, lr, cfg);
    for (std::size_t i = 0; i < n; ++i) {
      double g = grad[i] + cfg.weight_decay * w[i];
      v[i] = cfg.momentum * v[i] + g;
      w[i] -= lr * v[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::fabs(p.value[i] - w[i]) <= 1e-12 * std::max(1.0, std::fabs(w[i])));
      CHECK(std::fabs(p.velocity[i] - v[i]) <= 1e-12 * std::max(1.0, std::fabs(v[i])));
    }
  }
}

TEST_CASE("sgd_step rejects mismatched gradient shapes") {
  OptimConfig cfg;
  Parameter p;
  p.name = "w";
  p.value = Tensor({3});
  p.velocity = Tensor({3});
  CHECK_THROWS_AS(sgd_step(p, Tensor({4}), 0.01, cfg), ConfigError);
}

TEST_CASE("epoch_permutation is a stateless shuffle") {
  auto perm = epoch_permutation(100, 7, 3);
  REQUIRE(perm.size() == 100);
  std::set<std::size_t> seen(perm.begin(), perm.end());
  CHECK(seen.size() == 100);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 99);

  // Pure function of (n, seed, epoch) — recomputable without history.
  CHECK(epoch_permutation(100, 7, 3) == perm);
  CHECK(epoch_permutation(100, 7, 4) != perm);
  CHECK(epoch_permutation(100, 8, 3) != perm);

  // Epoch 0 is shuffled too, not identity.
  auto first = epoch_permutation(100, 7, 0);
  std::vector<std::size_t> identity(100);
  for (std::size_t i = 0; i < 100; ++i) identity[i] = i;
  CHECK(first != identity);
}

TEST_CASE("env_thread_count parses MAPCHANGE_THREADS") {
  unsetenv("MAPCHANGE_THREADS");
  CHECK(env_thread_count() == 1);
  setenv("MAPCHANGE_THREADS", "", 1);
  CHECK(env_thread_count() == 1);
  setenv("MAPCHANGE_THREADS", "4", 1);
  CHECK(env_thread_count() == 4);
  setenv("MAPCHANGE_THREADS", "0", 1);
  CHECK_THROWS_AS(env_thread_count(), ConfigError);
  setenv("MAPCHANGE_THREADS", "many", 1);
  CHECK_THROWS_AS(env_thread_count(), ConfigError);
  setenv("MAPCHANGE_THREADS", "300", 1);
  CHECK_THROWS_AS(env_thread_count(), ConfigError);
  unsetenv("MAPCHANGE_THREADS");
}

TEST_CASE("checkpoint save/load round trip preserves every tensor bit") {
  TempDir tmp("ckpt");
  ModelConfig mc;
  mc.num_classes = 4;
  mc.base_channels = 8;
  mc.seed = 2024;
  TripletNetwork net(mc);

  // Perturb values and velocities so the round trip is not on init data.
  Rng rng(77);
  for (std::size_t i = 0; i < net.params().count(); ++i) {
    Parameter& p = net.params().at(i);
    for (std::size_t j = 0; j < p.value.size(); ++j) p.value[j] += 0.01 * rng.normal();
    p.velocity = Tensor(p.value.shape());
    for (std::size_t j = 0; j < p.velocity.size(); ++j) p.velocity[j] = rng.normal();
  }

  CheckpointMeta meta;
  meta.mode = "mapchange";
  meta.iteration = 123;
  meta.model = mc;
  meta.optim.seed = 55;
  meta.last_loss.total = 1.5;
  save_checkpoint(tmp.sub("ck"), meta, net.params());

  TripletNetwork other(mc);
  CheckpointMeta back = load_checkpoint(tmp.sub("ck"), other.params());
  CHECK(back.mode == "mapchange");
  CHECK(back.iteration == 123);
  CHECK(back.model.num_classes == 4);
  CHECK(back.optim.seed == 55);
  CHECK(back.last_loss.total == 1.5);

  for (std::size_t i = 0; i < net.params().count(); ++i) {
    const Parameter& a = net.params().at(i);
    const Parameter& b = other.params().at(i);
    REQUIRE(a.name == b.name);
    REQUIRE(a.value.same_shape(b.value));
    CHECK(std::memcmp(a.value.ptr(), b.value.ptr(), a.value.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(a.velocity.ptr(), b.velocity.ptr(),
                      a.velocity.size() * sizeof(double)) == 0);
  }

  CHECK_NOTHROW(read_checkpoint_meta(tmp.sub("ck")));
  CHECK_THROWS_AS(read_checkpoint_meta(tmp.sub("missing")), DataError);

  // A store with a different architecture must refuse the payload.
  ModelConfig wider = mc;
  wider.base_channels = 16;
  TripletNetwork wrong(wider);
  CHECK_THROWS_AS(load_checkpoint(tmp.sub("ck"), wrong.params()), DataError);
}

TEST_CASE("training end to end: loss drops, resume continues exactly") {
  TempDir tmp("e2e");
  RunConfig cfg = tiny_run_config(10, 5);
  generate_dataset(cfg.gen, tmp.sub("data"), 1);

  // Uninterrupted run: 10 iterations, checkpoints at 5 and 10.
  TrainRunSummary full = run_training(cfg, tmp.sub("data"), tmp.sub("full"), "mapchange", "");
  CHECK(full.iterations == 10);
  CHECK(std::isfinite(full.last_loss.total));
  REQUIRE(fs::exists(tmp.sub("full") + "/ckpt-000005"));
  REQUIRE(fs::exists(tmp.sub("full") + "/ckpt-000010"));

  // The loss heads downward over the run.
  std::ifstream log(tmp.sub("full") + "/train.log");
  std::string line, first_line, last_line;
  while (std::getline(log, line))
    if (line.rfind("iter=", 0) == 0) {
      if (first_line.empty()) first_line = line;
      last_line = line;
    }
  auto total_of = [](const std::string& l) {
    auto pos = l.rfind("total=");
    REQUIRE(pos != std::string::npos);
    return std::stod(l.substr(pos + 6));
  };
  CHECK(total_of(last_line) < total_of(first_line));

  // Resume from the midpoint: must land on bit-identical parameters.
  TrainRunSummary resumed = run_training(cfg, tmp.sub("data"), tmp.sub("resumed"), "mapchange",
                                         tmp.sub("full") + "/ckpt-000005");
  CHECK(resumed.iterations == 10);
  fs::path full_ck = fs::path(tmp.sub("full")) / "ckpt-000010";
  fs::path res_ck = fs::path(tmp.sub("resumed")) / "ckpt-000010";
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(full_ck))
    if (e.is_regular_file()) {
      fs::path rel = fs::relative(e.path(), full_ck);
      CAPTURE(rel.string());
      CHECK(same_file_bytes(e.path(), res_ck / rel));
      ++files;
    }
  CHECK(files >= 3);  // manifest plus per-parameter value and velocity tensors

  // Mode and settings guards on resume.
  CHECK_THROWS_AS(
      run_training(cfg, tmp.sub("data"), tmp.sub("x"), "pcc", tmp.sub("full") + "/ckpt-000005"),
      ConfigError);
  RunConfig other = tiny_run_config(10, 5);
  other.optim.base_lr = 0.01;
  CHECK_THROWS_AS(run_training(other, tmp.sub("data"), tmp.sub("y"), "mapchange",
                               tmp.sub("full") + "/ckpt-000005"),
                  ConfigError);
}

TEST_CASE("evaluation is thread-count invariant") {
  TempDir tmp("eval");
  RunConfig cfg = tiny_run_config(4, 4);
  generate_dataset(cfg.gen, tmp.sub("data"), 1);
  run_training(cfg, tmp.sub("data"), tmp.sub("run"), "mapchange", "");

  MetricReport one = run_evaluation(tmp.sub("run") + "/ckpt-000004", tmp.sub("data"), "test",
                                    "", 1);
  MetricReport two = run_evaluation(tmp.sub("run") + "/ckpt-000004", tmp.sub("data"), "test",
                                    "", 3);
  CHECK(one.oa == two.oa);
  CHECK(one.kappa == two.kappa);
  CHECK(one.sek == two.sek);
  CHECK(one.iou_change == two.iou_change);
  CHECK(one.f1_change == two.f1_change);

  // Evaluating a mapchange checkpoint in pcc mode is refused.
  CHECK_THROWS_AS(
      run_evaluation(tmp.sub("run") + "/ckpt-000004", tmp.sub("data"), "test", "pcc", 1),
      ConfigError);
}

TEST_CASE("pcc training path produces evaluable checkpoints") {
  TempDir tmp("pcc");
  RunConfig cfg = tiny_run_config(4, 4);
  generate_dataset(cfg.gen, tmp.sub("data"), 1);
  TrainRunSummary s = run_training(cfg, tmp.sub("data"), tmp.sub("run"), "pcc", "");
  CHECK(s.iterations == 4);
  MetricReport rep = run_evaluation(s.checkpoint, tmp.sub("data"), "test", "", 1);
  CHECK(std::isfinite(rep.kappa));
  CHECK(rep.oa >= 0.0);
  CHECK(rep.oa <= 1.0);
}
