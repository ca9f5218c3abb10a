#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mapchange/tensor.hpp"

namespace mapchange {

// Handle to a tensor recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode differentiation tape. Operations compute eagerly and record
// a backward rule; backward() sweeps the nodes once in reverse creation
// order, which is a topological order by construction.
//
// A tape is single-threaded. Independent tapes are safe to use from
// different threads.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int out_id)>;

  Var leaf(Tensor value, bool requires_grad = false);

  // Records a custom node. `backward` reads grad_of(out_id) and accumulates
  // into grad_buffer(input). Used by ops defined outside this class.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() target w.r.t. v; zeros if v was not
  // reached (allocated on demand so untouched nodes stay cheap).
  const Tensor& grad(Var v);

  // dLoss/d(everything reachable). Rejects non-scalar losses. Clears the
  // gradients of any previous backward() call first.
  void backward(Var loss);

  // --- primitives ---
  Var conv2d(Var input, Var weight, Var bias, int stride, int pad);
  Var group_norm(Var input, int groups, Var gamma, Var beta, double eps);
  Var layer_norm_rows(Var input, Var gamma, Var beta, double eps);
  Var relu(Var x);
  Var sigmoid(Var x);
  Var abs_val(Var x);
  Var softmax_channel(Var x);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scalar_mul(Var x, double s);
  Var channel_concat(std::span<const Var> parts);
  Var upsample_nearest_x2(Var x);
  Var matmul(Var a, Var b);
  Var add_row_bias(Var x, Var bias);
  Var attention(Var q, Var k, Var v);
  Var nchw_to_tokens(Var x);
  Var tokens_to_nchw(Var x, std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  Var split_heads(Var x, std::size_t batch, std::size_t heads);
  Var merge_heads(Var x);
  Var sum_all(Var x);

  // Backward-rule helpers (public so out-of-class ops can use them).
  Tensor& grad_buffer(Var v);
  Tensor& grad_buffer(int id);
  const Tensor& grad_of(int id) const;
  const Tensor& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool wants_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched by backward
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  bool any_requires(std::span<const Var> vars) const;

  std::vector<Node> nodes_;
};

}  // namespace mapchange
