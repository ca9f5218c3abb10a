#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mapchange {

// Transition label space for semantic change evaluation: category 0 is
// "no-change", categories 1..K(K-1) are the ordered (from, to) class pairs
// with from != to.
class TransitionScheme {
 public:
  explicit TransitionScheme(int num_classes);

  int num_classes() const { return k_; }
  int size() const { return 1 + k_ * (k_ - 1); }

  int encode(int from, int to) const;          // from == to -> 0
  std::pair<int, int> decode(int category) const;  // category 0 -> {-1, -1}

 private:
  int k_;
};

// Counts over (ground truth, prediction) category pairs; rows = truth.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int size);

  int size() const { return size_; }
  uint64_t at(int row, int col) const;
  void add(int row, int col, uint64_t count = 1);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  uint64_t total() const;

 private:
  int size_;
  std::vector<uint64_t> counts_;
};

double oa(const ConfusionMatrix& cm);

struct BinaryScores {
  double iou = 0, f1 = 0;
};
// Collapse to no-change (index 0) vs any-change and score the change class.
BinaryScores binary_iou_f1(const ConfusionMatrix& cm);

double kappa(const ConfusionMatrix& cm);

struct SekResult {
  double value = 0;
  bool degenerate = false;  // no off-(0,0) mass; value forced to 0
};
SekResult sek(const ConfusionMatrix& cm);

struct MetricReport {
  double oa = 0, iou_change = 0, f1_change = 0, kappa = 0, sek = 0;
  bool sek_degenerate = false;
};
MetricReport compute_report(const ConfusionMatrix& cm);

// Text table in the column order "Kappa(%) Sek(%) IoU(%) F1(%) OA(%)",
// percentages with two decimals; one row per (label, report) pair.
std::string format_report_table(std::span<const std::pair<std::string, MetricReport>> rows);
// Machine-readable key=value block.
std::string format_report_keys(const MetricReport& r);

// Builds the transition confusion matrix for one sample. In MapChange mode
// pred_t1 is the historical map itself. A pixel predicted "changed" whose
// predicted pair has from == to counts as predicted no-change.
ConfusionMatrix transitions_from_maps(std::span<const uint8_t> gt_t1,
                                      std::span<const uint8_t> gt_t2,
                                      std::span<const uint8_t> pred_t1,
                                      std::span<const uint8_t> pred_t2,
                                      std::span<const uint8_t> change_pred,
                                      const TransitionScheme& scheme);

}  // namespace mapchange
