#include "mapchange/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mapchange/errors.hpp"

namespace mapchange {

TransitionScheme::TransitionScheme(int num_classes) : k_(num_classes) {
  if (num_classes < 2) throw ConfigError("TransitionScheme: need at least 2 classes");
}

int TransitionScheme::encode(int from, int to) const {
  if (from < 0 || from >= k_ || to < 0 || to >= k_)
    throw ConfigError("TransitionScheme: class id outside [0," + std::to_string(k_) + ")");
  if (from == to) return 0;
  return 1 + from * (k_ - 1) + (to < from ? to : to - 1);
}

std::pair<int, int> TransitionScheme::decode(int category) const {
  if (category < 0 || category >= size())
    throw ConfigError("TransitionScheme: category " + std::to_string(category) +
                      " outside [0," + std::to_string(size()) + ")");
  if (category == 0) return {-1, -1};
  int idx = category - 1;
  int from = idx / (k_ - 1);
  int rem = idx % (k_ - 1);
  int to = rem < from ? rem : rem + 1;
  return {from, to};
}

ConfusionMatrix::ConfusionMatrix(int size) : size_(size) {
  if (size < 1) throw ConfigError("ConfusionMatrix: size must be positive");
  counts_.assign(static_cast<std::size_t>(size) * static_cast<std::size_t>(size), 0);
}

uint64_t ConfusionMatrix::at(int row, int col) const {
  if (row < 0 || row >= size_ || col < 0 || col >= size_)
    throw ConfigError("ConfusionMatrix: index out of range");
  return counts_[static_cast<std::size_t>(row) * static_cast<std::size_t>(size_) +
                 static_cast<std::size_t>(col)];
}

void ConfusionMatrix::add(int row, int col, uint64_t count) {
  if (row < 0 || row >= size_ || col < 0 || col >= size_)
    throw ConfigError("ConfusionMatrix: index out of range");
  counts_[static_cast<std::size_t>(row) * static_cast<std::size_t>(size_) +
          static_cast<std::size_t>(col)] += count;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.size_ != size_) throw ConfigError("ConfusionMatrix: size mismatch in merge");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

uint64_t ConfusionMatrix::total() const {
  uint64_t t = 0;
  for (uint64_t c : counts_) t += c;
  return t;
}

double oa(const ConfusionMatrix& cm) {
  uint64_t total = cm.total();
  if (total == 0) throw ConfigError("oa: empty confusion matrix");
  uint64_t diag = 0;
  for (int i = 0; i < cm.size(); ++i) diag += cm.at(i, i);
  return static_cast<double>(diag) / static_cast<double>(total);
}

BinaryScores binary_iou_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ConfigError("binary_iou_f1: empty confusion matrix");
  // change class = any category != 0
  uint64_t tp = 0, fp = 0, fn = 0;
  for (int r = 0; r < cm.size(); ++r)
    for (int c = 0; c < cm.size(); ++c) {
      uint64_t v = cm.at(r, c);
      if (r != 0 && c != 0) tp += v;
      if (r == 0 && c != 0) fp += v;
      if (r != 0 && c == 0) fn += v;
    }
  uint64_t denom = tp + fp + fn;
  if (denom == 0) return {1.0, 1.0};  // no change anywhere, none predicted
  BinaryScores s;
  s.iou = static_cast<double>(tp) / static_cast<double>(denom);
  s.f1 = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
  return s;
}

double kappa(const ConfusionMatrix& cm) {
  uint64_t total = cm.total();
  if (total == 0) throw ConfigError("kappa: empty confusion matrix");
  double n = static_cast<double>(total);
  double diag = 0.0, pe = 0.0;
  for (int i = 0; i < cm.size(); ++i) {
    diag += static_cast<double>(cm.at(i, i));
    uint64_t row = 0, col = 0;
    for (int j = 0; j < cm.size(); ++j) {
      row += cm.at(i, j);
      col += cm.at(j, i);
    }
    pe += static_cast<double>(row) / n * (static_cast<double>(col) / n);
  }
  double po = diag / n;
  if (pe == 1.0) return 0.0;
  return (po - pe) / (1.0 - pe);
}

SekResult sek(const ConfusionMatrix& cm) {
  ConfusionMatrix q(cm.size());
  for (int r = 0; r < cm.size(); ++r)
    for (int c = 0; c < cm.size(); ++c)
      if (!(r == 0 && c == 0)) q.add(r, c, cm.at(r, c));
  SekResult out;
  if (q.total() == 0) {
    out.degenerate = true;
    return out;
  }
  double khat = kappa(q);
  double iou = binary_iou_f1(cm).iou;
  out.value = std::exp(iou - 1.0) * khat;
  return out;
}

MetricReport compute_report(const ConfusionMatrix& cm) {
  MetricReport r;
  r.oa = oa(cm);
  BinaryScores b = binary_iou_f1(cm);
  r.iou_change = b.iou;
  r.f1_change = b.f1;
  r.kappa = kappa(cm);
  SekResult s = sek(cm);
  r.sek = s.value;
  r.sek_degenerate = s.degenerate;
  return r;
}

std::string format_report_table(std::span<const std::pair<std::string, MetricReport>> rows) {
  std::size_t label_w = 6;
  for (const auto& [label, _] : rows) label_w = std::max(label_w, label.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  Kappa(%%)  Sek(%%)  IoU(%%)  F1(%%)  OA(%%)\n",
                static_cast<int>(label_w), "method");
  out += buf;
  for (const auto& [label, r] : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s  %8.2f  %6.2f  %6.2f  %5.2f  %5.2f\n",
                  static_cast<int>(label_w), label.c_str(), 100.0 * r.kappa, 100.0 * r.sek,
                  100.0 * r.iou_change, 100.0 * r.f1_change, 100.0 * r.oa);
    out += buf;
  }
  return out;
}

std::string format_report_keys(const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "kappa=%.6f\nsek=%.6f\niou_change=%.6f\nf1_change=%.6f\noa=%.6f\n"
                "sek_degenerate=%d\n",
                r.kappa, r.sek, r.iou_change, r.f1_change, r.oa, r.sek_degenerate ? 1 : 0);
  return buf;
}

ConfusionMatrix transitions_from_maps(std::span<const uint8_t> gt_t1,
                                      std::span<const uint8_t> gt_t2,
                                      std::span<const uint8_t> pred_t1,
                                      std::span<const uint8_t> pred_t2,
                                      std::span<const uint8_t> change_pred,
                                      const TransitionScheme& scheme) {
  std::size_t n = gt_t1.size();
  if (gt_t2.size() != n || pred_t1.size() != n || pred_t2.size() != n ||
      change_pred.size() != n)
    throw ConfigError("transitions_from_maps: input lengths disagree");
  ConfusionMatrix cm(scheme.size());
  for (std::size_t i = 0; i < n; ++i) {
    int truth = scheme.encode(gt_t1[i], gt_t2[i]);
    int pred = change_pred[i] == 0 ? 0 : scheme.encode(pred_t1[i], pred_t2[i]);
    cm.add(truth, pred);
  }
  return cm;
}

}  // namespace mapchange
