#include "mapchange/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <ostream>
#include <thread>

#include "mapchange/errors.hpp"
#include "mapchange/losses.hpp"
#include "mapchange/rng.hpp"

namespace mapchange {

namespace {

std::string fmt_g(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

std::string ckpt_name(const std::string& dir, int iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt-%06d", iteration);
  return dir + "/" + buf;
}

void log_step(std::ostream& log, int iter, double lr, const LossBreakdown& b) {
  log << "iter=" << iter << " lr=" << fmt_g(lr) << " l_cls1=" << fmt_g(b.l_cls1)
      << " l_cls2=" << fmt_g(b.l_cls2) << " l_dice=" << fmt_g(b.l_dice)
      << " l_bce=" << fmt_g(b.l_bce) << " total=" << fmt_g(b.total) << "\n";
}

std::string breakdown_str(const LossBreakdown& b) {
  return "l_cls1=" + fmt_g(b.l_cls1) + " l_cls2=" + fmt_g(b.l_cls2) +
         " l_dice=" + fmt_g(b.l_dice) + " l_bce=" + fmt_g(b.l_bce) + " total=" + fmt_g(b.total);
}

Tensor with_batch_dim(const Tensor& t) {
  std::vector<std::size_t> shape{1};
  shape.insert(shape.end(), t.shape().begin(), t.shape().end());
  return Tensor(std::move(shape), std::vector<double>(t.data().begin(), t.data().end()));
}

void apply_gradients(Tape& tape, Binder& binder, double lr, const OptimConfig& cfg) {
  for (auto& [param, var] : binder.bound()) sgd_step(*param, tape.grad(var), lr, cfg);
}

// One gradient step; returns the loss breakdown. The two training modes
// share everything except this closure's body.
template <class StepFn>
TrainResult run_loop(const OptimConfig& cfg, std::size_t n_items, const std::string& mode,
                     const ModelConfig& model_cfg, ParameterStore& params,
                     const std::string& checkpoint_dir, std::ostream& log, int start_iter,
                     StepFn&& step) {
  cfg.validate();
  if (n_items == 0) throw DataError("training split is empty");
  std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  std::size_t batches_per_epoch = n_items / batch;
  if (batches_per_epoch == 0)
    throw ConfigError("batch size " + std::to_string(cfg.batch_size) + " exceeds split size " +
                      std::to_string(n_items));
  if (start_iter < 0 || start_iter > cfg.total_iters)
    throw ConfigError("start iteration " + std::to_string(start_iter) + " outside [0, " +
                      std::to_string(cfg.total_iters) + "]");

  TrainResult res;
  res.iterations = start_iter;
  for (int iter = start_iter; iter < cfg.total_iters; ++iter) {
    std::size_t u = static_cast<std::size_t>(iter);
    int epoch = static_cast<int>(u / batches_per_epoch);
    std::size_t slot = u % batches_per_epoch;
    std::vector<std::size_t> perm = epoch_permutation(n_items, cfg.seed, epoch);
    std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(slot * batch),
                                 perm.begin() + static_cast<std::ptrdiff_t>((slot + 1) * batch));

    double lr = poly_lr(iter, cfg);
    LossBreakdown b = step(idx, lr);
    if (!b.finite())
      throw NumericError("non-finite loss at iteration " + std::to_string(iter) + ": " +
                         breakdown_str(b));
    log_step(log, iter, lr, b);
    res.last_loss = b;
    res.iterations = iter + 1;

    int done = iter + 1;
    if (done % cfg.checkpoint_interval == 0 || done == cfg.total_iters) {
      CheckpointMeta meta;
      meta.mode = mode;
      meta.iteration = done;
      meta.model = model_cfg;
      meta.optim = cfg;
      meta.last_loss = b;
      res.last_checkpoint = ckpt_name(checkpoint_dir, done);
      save_checkpoint(res.last_checkpoint, meta, params);
    }
  }
  return res;
}

void check_dataset_model(const Dataset& data, const ModelConfig& model) {
  if (data.num_classes() != model.num_classes)
    throw ConfigError("dataset has " + std::to_string(data.num_classes()) + " classes, model has " +
                      std::to_string(model.num_classes));
}

std::vector<uint8_t> argmax_classes(const Tensor& logits) {
  // [1,K,H,W] -> per-pixel argmax ids
  std::size_t k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<uint8_t> out(hw);
  const double* p = logits.ptr();
  for (std::size_t i = 0; i < hw; ++i) {
    int best = 0;
    double best_v = p[i];
    for (std::size_t c = 1; c < k; ++c) {
      double v = p[c * hw + i];
      if (v > best_v) {
        best_v = v;
        best = static_cast<int>(c);
      }
    }
    out[i] = static_cast<uint8_t>(best);
  }
  return out;
}

// Fans sample indices [0, n) out over `threads` workers, each filling its
// own confusion matrix; partials merge in worker order.
template <class PerSample>
ConfusionMatrix accumulate_samples(std::size_t n, int size, int threads, PerSample&& per_sample) {
  ConfusionMatrix total(size);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) per_sample(i, total);
    return total;
  }
  std::size_t t_count = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<ConfusionMatrix> partial(t_count, ConfusionMatrix(size));
  std::vector<std::thread> workers;
  std::exception_ptr first_error;
  std::mutex err_mu;
  for (std::size_t t = 0; t < t_count; ++t) {
    workers.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += t_count) per_sample(i, partial[t]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  if (first_error) std::rethrow_exception(first_error);
  for (const auto& p : partial) total += p;
  return total;
}

}  // namespace

int env_thread_count() {
  const char* s = std::getenv("MAPCHANGE_THREADS");
  if (!s || !*s) return 1;
  int v = 0;
  auto [p, ec] = std::from_chars(s, s + std::char_traits<char>::length(s), v);
  if (ec != std::errc{} || *p != '\0' || v < 1 || v > 256)
    throw ConfigError(std::string("MAPCHANGE_THREADS must be an integer in [1,256], got '") + s +
                      "'");
  return v;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, uint64_t seed, int epoch) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(derive_seed(seed, static_cast<uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

TrainResult train_mapchange(TripletNetwork& net, const Dataset& train, const OptimConfig& cfg,
                            const std::string& checkpoint_dir, std::ostream& log,
                            int start_iter) {
  check_dataset_model(train, net.config());
  return run_loop(
      cfg, train.size(), "mapchange", net.config(), net.params(), checkpoint_dir, log, start_iter,
      [&](const std::vector<std::size_t>& idx, double lr) {
        Dataset::Batch batch = train.make_batch(idx);
        Tape tape;
        Binder binder(tape, true);
        Var i1 = tape.leaf(batch.image1);
        Var i2 = tape.leaf(batch.image2);
        Var m = tape.leaf(batch.map_onehot);
        TripletOutputVars out = net.forward_triplet(binder, i1, i2, m);
        LossVars lv = combined_loss(tape, out, batch.labels1, batch.labels2, batch.change);
        LossBreakdown b = read_breakdown(tape, lv);
        if (!b.finite()) return b;  // reported by the loop; skip the update
        tape.backward(lv.total);
        apply_gradients(tape, binder, lr, cfg);
        return b;
      });
}

TrainResult train_pcc(SingleTemporalNetwork& net, const Dataset& train, const OptimConfig& cfg,
                      const std::string& checkpoint_dir, std::ostream& log, int start_iter) {
  check_dataset_model(train, net.config());
  std::size_t n = train.size();
  // Pooled items: j < n is (image1, labels1) of sample j, j >= n is
  // (image2, labels2) of sample j - n.
  return run_loop(
      cfg, 2 * n, "pcc", net.config(), net.params(), checkpoint_dir, log, start_iter,
      [&](const std::vector<std::size_t>& idx, double lr) {
        std::size_t b_n = idx.size();
        const Sample& probe = train.at(0);
        std::size_t h = probe.image1.dim(1), w = probe.image1.dim(2);
        Tensor images({b_n, 3, h, w});
        Tensor labels({b_n, h, w});
        for (std::size_t b = 0; b < b_n; ++b) {
          std::size_t j = idx[b];
          const Sample& s = train.at(j < n ? j : j - n);
          const Tensor& img = j < n ? s.image1 : s.image2;
          const Tensor& lab = j < n ? s.labels1 : s.labels2;
          std::copy(img.data().begin(), img.data().end(), images.ptr() + b * 3 * h * w);
          std::copy(lab.data().begin(), lab.data().end(), labels.ptr() + b * h * w);
        }
        Tape tape;
        Binder binder(tape, true);
        Var logits = net.forward(binder, tape.leaf(images));
        Var loss = cross_entropy_map(tape, logits, labels);
        LossBreakdown bd;
        bd.l_cls1 = tape.value(loss)[0];
        bd.total = bd.l_cls1;
        if (!bd.finite()) return bd;
        tape.backward(loss);
        apply_gradients(tape, binder, lr, cfg);
        return bd;
      });
}

Prediction infer_mapchange(const TripletNetwork& net, const Tensor& image1, const Tensor& image2,
                           const Tensor& map_onehot, const SemanticMap& map_ids,
                           double threshold) {
  TripletNetwork::TripletValues vals =
      net.infer(with_batch_dim(image1), with_batch_dim(image2), with_batch_dim(map_onehot));
  std::size_t h = vals.change_logits.dim(2), w = vals.change_logits.dim(3);
  if (map_ids.width != static_cast<int>(w) || map_ids.height != static_cast<int>(h))
    throw DataError("historical map extent does not match the image extent");
  TransitionScheme scheme(net.config().num_classes);

  Prediction out;
  out.height = static_cast<int>(h);
  out.width = static_cast<int>(w);
  out.pred_t2 = argmax_classes(vals.s2_logits);
  out.prob = Tensor({h, w});
  out.change.resize(h * w);
  out.transition.resize(h * w);
  const double* logit = vals.change_logits.ptr();
  for (std::size_t i = 0; i < h * w; ++i) {
    double x = logit[i];
    double p = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out.prob[i] = p;
    bool changed = p > threshold;
    out.change[i] = changed ? 1 : 0;
    out.transition[i] =
        changed ? static_cast<uint8_t>(scheme.encode(map_ids.ids[i], out.pred_t2[i])) : 0;
  }
  return out;
}

MetricReport evaluate_mapchange(const TripletNetwork& net, const Dataset& data, double threshold,
                                int threads) {
  check_dataset_model(data, net.config());
  TransitionScheme scheme(net.config().num_classes);
  ConfusionMatrix cm = accumulate_samples(
      data.size(), scheme.size(), threads, [&](std::size_t i, ConfusionMatrix& acc) {
        const Sample& s = data.at(i);
        Prediction pred =
            infer_mapchange(net, s.image1, s.image2, s.map_onehot, s.map_ids, threshold);
        acc += transitions_from_maps(s.gt1_ids.ids, s.gt2_ids.ids, s.map_ids.ids, pred.pred_t2,
                                     pred.change, scheme);
      });
  return compute_report(cm);
}

MetricReport evaluate_pcc(const SingleTemporalNetwork& net, const Dataset& data, int threads) {
  check_dataset_model(data, net.config());
  TransitionScheme scheme(net.config().num_classes);
  ConfusionMatrix cm = accumulate_samples(
      data.size(), scheme.size(), threads, [&](std::size_t i, ConfusionMatrix& acc) {
        const Sample& s = data.at(i);
        std::vector<uint8_t> p1 = argmax_classes(net.infer(with_batch_dim(s.image1)));
        std::vector<uint8_t> p2 = argmax_classes(net.infer(with_batch_dim(s.image2)));
        std::vector<uint8_t> changed(p1.size());
        for (std::size_t px = 0; px < p1.size(); ++px) changed[px] = p1[px] != p2[px] ? 1 : 0;
        acc += transitions_from_maps(s.gt1_ids.ids, s.gt2_ids.ids, p1, p2, changed, scheme);
      });
  return compute_report(cm);
}

std::vector<AblationRow> ablate_fusion(const RunConfig& cfg, const Dataset& train,
                                       const Dataset& test, const std::string& work_dir,
                                       std::ostream& log) {
  const std::pair<FusionOp, std::string> variants[] = {
      {FusionOp::TstAdd, "TST-Add"}, {FusionOp::Add, "Add"}, {FusionOp::Cat, "Cat"}};
  std::vector<AblationRow> rows;
  for (const auto& [op, label] : variants) {
    ModelConfig mc = cfg.model;
    mc.fusion_op = op;
    TripletNetwork net(mc);
    log << "# fusion variant " << label << "\n";
    train_mapchange(net, train, cfg.optim, work_dir + "/" + to_string(op), log);
    rows.push_back(
        {label, evaluate_mapchange(net, test, cfg.optim.change_threshold, env_thread_count())});
  }
  return rows;
}

}  // namespace mapchange
