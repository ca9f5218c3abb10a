#pragma once

#include <optional>

#include "mapchange/net.hpp"
#include "mapchange/tape.hpp"

namespace mapchange {

// Terms of the training objective: total = l_cls1 + l_cls2 + l_bcd,
// l_bcd = l_dice + l_bce.
struct LossVars {
  Var l_cls1, l_cls2, l_dice, l_bce, l_bcd, total;
};

struct LossBreakdown {
  double l_cls1 = 0, l_cls2 = 0, l_dice = 0, l_bce = 0, l_bcd = 0, total = 0;
  bool finite() const;
};

// Mean over non-ignored pixels of -log softmax(logits)[label]. labels holds
// integer class ids as doubles, shape [N,H,W]. All pixels ignored -> 0.
Var cross_entropy_map(Tape& t, Var logits, const Tensor& labels,
                      std::optional<int> ignore_id = std::nullopt);

// 1 - (2*sum(p*t)+smooth)/(sum(p)+sum(t)+smooth), p = sigmoid(logits),
// pooled over the whole batch.
Var dice_loss(Tape& t, Var change_logits, const Tensor& target, double smooth = 1.0);

// Mean binary cross-entropy, computed in logit space.
Var bce_loss(Tape& t, Var change_logits, const Tensor& target);

LossVars combined_loss(Tape& t, const TripletOutputVars& out, const Tensor& labels_t1,
                       const Tensor& labels_t2, const Tensor& change_mask);

LossBreakdown read_breakdown(const Tape& t, const LossVars& v);

}  // namespace mapchange
