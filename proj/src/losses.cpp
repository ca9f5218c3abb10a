#include "mapchange/losses.hpp"

#include <cmath>

#include "mapchange/errors.hpp"

namespace mapchange {

namespace {

void check_mask_shape(const char* op, const Tensor& logits, const Tensor& target) {
  if (logits.rank() != 4 || logits.dim(1) != 1)
    throw ConfigError(std::string(op) + ": logits must be [N,1,H,W], got " + logits.shape_str());
  bool ok = (target.rank() == 3 && target.dim(0) == logits.dim(0) &&
             target.dim(1) == logits.dim(2) && target.dim(2) == logits.dim(3)) ||
            target.same_shape(logits);
  if (!ok)
    throw ConfigError(std::string(op) + ": target " + target.shape_str() +
                      " does not match logits " + logits.shape_str());
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i] != 0.0 && target[i] != 1.0)
      throw ConfigError(std::string(op) + ": target must be binary, found " +
                        std::to_string(target[i]));
}

double sigmoid_stable(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

bool LossBreakdown::finite() const {
  return std::isfinite(l_cls1) && std::isfinite(l_cls2) && std::isfinite(l_dice) &&
         std::isfinite(l_bce) && std::isfinite(l_bcd) && std::isfinite(total);
}

Var cross_entropy_map(Tape& t, Var logits, const Tensor& labels, std::optional<int> ignore_id) {
  const Tensor& lv = t.value(logits);
  if (lv.rank() != 4) throw ConfigError("cross_entropy_map: logits must be [N,K,H,W]");
  std::size_t n = lv.dim(0), k = lv.dim(1), h = lv.dim(2), w = lv.dim(3);
  if (labels.rank() != 3 || labels.dim(0) != n || labels.dim(1) != h || labels.dim(2) != w)
    throw ConfigError("cross_entropy_map: labels " + labels.shape_str() +
                      " do not match logits " + lv.shape_str());
  std::size_t hw = h * w;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t ni = 0; ni < n; ++ni) {
    const double* lp = lv.ptr() + ni * k * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      double lab = labels[ni * hw + p];
      if (ignore_id && lab == static_cast<double>(*ignore_id)) continue;
      long id = static_cast<long>(lab);
      if (lab != static_cast<double>(id) || id < 0 || id >= static_cast<long>(k))
        throw ConfigError("cross_entropy_map: label " + std::to_string(lab) +
                          " outside [0," + std::to_string(k) + ")");
      double mx = lp[p];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, lp[c * hw + p]);
      double lse = 0.0;
      for (std::size_t c = 0; c < k; ++c) lse += std::exp(lp[c * hw + p] - mx);
      sum += mx + std::log(lse) - lp[static_cast<std::size_t>(id) * hw + p];
      ++used;
    }
  }
  double loss = used == 0 ? 0.0 : sum / static_cast<double>(used);

  Var ins[] = {logits};
  return t.record(
      Tensor::scalar(loss), ins,
      [lid = logits.id, labels, ignore_id, n, k, hw, used](Tape& tp, int out_id) {
        if (!tp.wants_grad(lid) || used == 0) return;
        double gy = tp.grad_of(out_id)[0] / static_cast<double>(used);
        const Tensor& lv = tp.value_of(lid);
        Tensor& gx = tp.grad_buffer(lid);
        for (std::size_t ni = 0; ni < n; ++ni) {
          const double* lp = lv.ptr() + ni * k * hw;
          double* gp = gx.ptr() + ni * k * hw;
          for (std::size_t p = 0; p < hw; ++p) {
            double lab = labels[ni * hw + p];
            if (ignore_id && lab == static_cast<double>(*ignore_id)) continue;
            std::size_t id = static_cast<std::size_t>(lab);
            double mx = lp[p];
            for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, lp[c * hw + p]);
            double lse = 0.0;
            for (std::size_t c = 0; c < k; ++c) lse += std::exp(lp[c * hw + p] - mx);
            for (std::size_t c = 0; c < k; ++c) {
              double soft = std::exp(lp[c * hw + p] - mx) / lse;
              gp[c * hw + p] += gy * (soft - (c == id ? 1.0 : 0.0));
            }
          }
        }
      });
}

Var dice_loss(Tape& t, Var change_logits, const Tensor& target, double smooth) {
  const Tensor& lv = t.value(change_logits);
  check_mask_shape("dice_loss", lv, target);
  if (smooth < 0.0) throw ConfigError("dice_loss: smooth must be >= 0");
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    double p = sigmoid_stable(lv[i]);
    inter += p * target[i];
    psum += p;
    tsum += target[i];
  }
  double denom = psum + tsum + smooth;
  double loss = 1.0 - (2.0 * inter + smooth) / denom;

  Var ins[] = {change_logits};
  return t.record(Tensor::scalar(loss), ins,
                  [lid = change_logits.id, target, smooth, inter, denom](Tape& tp, int out_id) {
                    if (!tp.wants_grad(lid)) return;
                    double gy = tp.grad_of(out_id)[0];
                    const Tensor& lv = tp.value_of(lid);
                    Tensor& gx = tp.grad_buffer(lid);
                    double num = 2.0 * inter + smooth;
                    for (std::size_t i = 0; i < lv.size(); ++i) {
                      double p = sigmoid_stable(lv[i]);
                      // d loss / d p_i for loss = 1 - num/denom, both sums containing p_i
                      double dp = -(2.0 * target[i] * denom - num) / (denom * denom);
                      gx[i] += gy * dp * p * (1.0 - p);
                    }
                  });
}

Var bce_loss(Tape& t, Var change_logits, const Tensor& target) {
  const Tensor& lv = t.value(change_logits);
  check_mask_shape("bce_loss", lv, target);
  double sum = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    double x = lv[i];
    // max(x,0) - x*t + log(1+exp(-|x|))
    sum += std::max(x, 0.0) - x * target[i] + std::log1p(std::exp(-std::fabs(x)));
  }
  double count = static_cast<double>(lv.size());
  Var ins[] = {change_logits};
  return t.record(Tensor::scalar(sum / count), ins,
                  [lid = change_logits.id, target, count](Tape& tp, int out_id) {
                    if (!tp.wants_grad(lid)) return;
                    double gy = tp.grad_of(out_id)[0] / count;
                    const Tensor& lv = tp.value_of(lid);
                    Tensor& gx = tp.grad_buffer(lid);
                    for (std::size_t i = 0; i < lv.size(); ++i)
                      gx[i] += gy * (sigmoid_stable(lv[i]) - target[i]);
                  });
}

LossVars combined_loss(Tape& t, const TripletOutputVars& out, const Tensor& labels_t1,
                       const Tensor& labels_t2, const Tensor& change_mask) {
  LossVars v;
  v.l_cls1 = cross_entropy_map(t, out.s1_logits, labels_t1);
  v.l_cls2 = cross_entropy_map(t, out.s2_logits, labels_t2);
  v.l_dice = dice_loss(t, out.change_logits, change_mask);
  v.l_bce = bce_loss(t, out.change_logits, change_mask);
  v.l_bcd = t.add(v.l_dice, v.l_bce);
  v.total = t.add(t.add(v.l_cls1, v.l_cls2), v.l_bcd);
  return v;
}

LossBreakdown read_breakdown(const Tape& t, const LossVars& v) {
  LossBreakdown b;
  b.l_cls1 = t.value(v.l_cls1)[0];
  b.l_cls2 = t.value(v.l_cls2)[0];
  b.l_dice = t.value(v.l_dice)[0];
  b.l_bce = t.value(v.l_bce)[0];
  b.l_bcd = t.value(v.l_bcd)[0];
  b.total = t.value(v.total)[0];
  return b;
}

}  // namespace mapchange
