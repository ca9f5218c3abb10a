#include "mapchange/tape.hpp"

#include <algorithm>
#include <cmath>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mapchange/errors.hpp"

namespace mapchange {

namespace {

// Keep multi-megabyte tensor blocks inside the arena instead of cycling them
// through mmap/munmap: without this every training step pays kernel page
// faults plus a second zeroing of freshly mapped pages.
struct HeapTuning {
  HeapTuning() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
  }
};
const HeapTuning heap_tuning;

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw ConfigError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                      b.shape_str());
}

void check_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                      t.shape_str());
}

}  // namespace

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw ConfigError("invalid tape handle");
  return nodes_[static_cast<std::size_t>(v.id)];
}

Tape::Node& Tape::node(Var v) {
  return const_cast<Node&>(static_cast<const Tape*>(this)->node(v));
}

bool Tape::any_requires(std::span<const Var> vars) const {
  return std::any_of(vars.begin(), vars.end(), [&](Var v) { return node(v).requires_grad; });
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool req = any_requires(inputs);
  nodes_.push_back(Node{std::move(value), Tensor{}, req, req ? std::move(backward) : nullptr});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
  node(v);  // bounds check
  return grad_buffer(v.id);
}

const Tensor& Tape::grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

const Tensor& Tape::grad(Var v) {
  node(v);  // bounds check
  return grad_buffer(v.id);
}

void Tape::backward(Var loss) {
  const Node& ln = node(loss);
  if (nodes_.empty()) throw ConfigError("backward: empty tape");
  if (ln.value.size() != 1)
    throw ConfigError("backward: loss must be scalar, got " + ln.value.shape_str());
  for (Node& n : nodes_) n.grad = Tensor{};
  grad_buffer(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && !n.grad.empty()) n.backward(*this, id);
  }
}

// --- elementwise ---

Var Tape::relu(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    const Tensor& xv = t.value_of(xid);
    Tensor& gx = t.grad_buffer(xid);
    // branchless so the loop vectorizes
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += xv[i] > 0.0 ? gy[i] : 0.0;
  });
}

Var Tape::sigmoid(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    double v = xv[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    const Tensor& y = t.value_of(out_id);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * y[i] * (1.0 - y[i]);
  });
}

Var Tape::abs_val(Var x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::fabs(xv[i]);
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    const Tensor& xv = t.value_of(xid);
    Tensor& gx = t.grad_buffer(xid);
    // subgradient 0 at the kink
    for (std::size_t i = 0; i < gy.size(); ++i)
      gx[i] += xv[i] > 0.0 ? gy[i] : (xv[i] < 0.0 ? -gy[i] : 0.0);
  });
}

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_same_shape("add", av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  Var in[] = {a, b};
  return record(std::move(out), in, [aid = a.id, bid = b.id](Tape& t, int out_id) {
    const Tensor& gy = t.grad_of(out_id);
    for (int id : {aid, bid}) {
      if (!t.wants_grad(id)) continue;
      Tensor& g = t.grad_buffer(id);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_same_shape("sub", av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  Var in[] = {a, b};
  return record(std::move(out), in, [aid = a.id, bid = b.id](Tape& t, int out_id) {
    const Tensor& gy = t.grad_of(out_id);
    if (t.wants_grad(aid)) {
      Tensor& g = t.grad_buffer(aid);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
    if (t.wants_grad(bid)) {
      Tensor& g = t.grad_buffer(bid);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] -= gy[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_same_shape("mul", av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Var in[] = {a, b};
  return record(std::move(out), in, [aid = a.id, bid = b.id](Tape& t, int out_id) {
    const Tensor& gy = t.grad_of(out_id);
    if (t.wants_grad(aid)) {
      Tensor& g = t.grad_buffer(aid);
      const Tensor& bv = t.value_of(bid);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * bv[i];
    }
    if (t.wants_grad(bid)) {
      Tensor& g = t.grad_buffer(bid);
      const Tensor& av = t.value_of(aid);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * av[i];
    }
  });
}

Var Tape::scalar_mul(Var x, double s) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = s * xv[i];
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id, s](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
  });
}

Var Tape::sum_all(Var x) {
  const Tensor& xv = value(x);
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i];
  Var in[] = {x};
  return record(Tensor::scalar(s), in, [xid = x.id](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    double gy = t.grad_of(out_id)[0];
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy;
  });
}

// --- structural ---

Var Tape::channel_concat(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("channel_concat: no inputs");
  const Tensor& first = value(parts[0]);
  check_rank("channel_concat", first, 4);
  std::size_t n = first.dim(0), h = first.dim(2), w = first.dim(3), c_total = 0;
  for (Var p : parts) {
    const Tensor& t = value(p);
    check_rank("channel_concat", t, 4);
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w)
      throw ConfigError("channel_concat: shape mismatch " + first.shape_str() + " vs " +
                        t.shape_str());
    c_total += t.dim(1);
  }
  Tensor out({n, c_total, h, w});
  std::size_t hw = h * w;
  std::size_t c_off = 0;
  std::vector<int> ids;
  std::vector<std::size_t> channels;
  for (Var p : parts) {
    const Tensor& t = value(p);
    std::size_t ci = t.dim(1);
    for (std::size_t ni = 0; ni < n; ++ni) {
      const double* src = t.ptr() + ni * ci * hw;
      double* dst = out.ptr() + (ni * c_total + c_off) * hw;
      std::copy(src, src + ci * hw, dst);
    }
    ids.push_back(p.id);
    channels.push_back(ci);
    c_off += ci;
  }
  return record(std::move(out), parts,
                [ids, channels, n, hw, c_total](Tape& t, int out_id) {
                  const Tensor& gy = t.grad_of(out_id);
                  std::size_t c_off = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    std::size_t ci = channels[p];
                    if (t.wants_grad(ids[p])) {
                      Tensor& g = t.grad_buffer(ids[p]);
                      for (std::size_t ni = 0; ni < n; ++ni) {
                        const double* src = gy.ptr() + (ni * c_total + c_off) * hw;
                        double* dst = g.ptr() + ni * ci * hw;
                        for (std::size_t i = 0; i < ci * hw; ++i) dst[i] += src[i];
                      }
                    }
                    c_off += ci;
                  }
                });
}

Var Tape::upsample_nearest_x2(Var x) {
  const Tensor& xv = value(x);
  check_rank("upsample_nearest_x2", xv, 4);
  std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor out({n, c, 2 * h, 2 * w});
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const double* src = xv.ptr() + nc * h * w;
    double* dst = out.ptr() + nc * 4 * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double v = src[i * w + j];
        double* d = dst + 2 * i * 2 * w + 2 * j;
        d[0] = v;
        d[1] = v;
        d[2 * w] = v;
        d[2 * w + 1] = v;
      }
  }
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id, n, c, h, w](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t nc = 0; nc < n * c; ++nc) {
      const double* src = gy.ptr() + nc * 4 * h * w;
      double* dst = gx.ptr() + nc * h * w;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double* s = src + 2 * i * 2 * w + 2 * j;
          dst[i * w + j] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
        }
    }
  });
}

Var Tape::nchw_to_tokens(Var x) {
  const Tensor& xv = value(x);
  check_rank("nchw_to_tokens", xv, 4);
  std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  std::size_t hw = h * w;
  Tensor out({n * hw, c});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* src = xv.ptr() + (ni * c + ci) * hw;
      double* dst = out.ptr() + ni * hw * c + ci;
      for (std::size_t p = 0; p < hw; ++p) dst[p * c] = src[p];
    }
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id, n, c, hw](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double* src = gy.ptr() + ni * hw * c + ci;
        double* dst = gx.ptr() + (ni * c + ci) * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] += src[p * c];
      }
  });
}

Var Tape::tokens_to_nchw(Var x, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  const Tensor& xv = value(x);
  check_rank("tokens_to_nchw", xv, 2);
  if (xv.dim(0) != n * h * w || xv.dim(1) != c)
    throw ConfigError("tokens_to_nchw: " + xv.shape_str() + " does not match target " +
                      shape_to_string(std::vector<std::size_t>{n, c, h, w}));
  std::size_t hw = h * w;
  Tensor out({n, c, h, w});
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* src = xv.ptr() + ni * hw * c + ci;
      double* dst = out.ptr() + (ni * c + ci) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p * c];
    }
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id, n, c, hw](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double* src = gy.ptr() + (ni * c + ci) * hw;
        double* dst = gx.ptr() + ni * hw * c + ci;
        for (std::size_t p = 0; p < hw; ++p) dst[p * c] += src[p];
      }
  });
}

Var Tape::split_heads(Var x, std::size_t batch, std::size_t heads) {
  const Tensor& xv = value(x);
  check_rank("split_heads", xv, 2);
  std::size_t rows = xv.dim(0), c = xv.dim(1);
  if (batch == 0 || rows % batch != 0)
    throw ConfigError("split_heads: rows " + std::to_string(rows) + " not divisible by batch " +
                      std::to_string(batch));
  if (heads == 0 || c % heads != 0)
    throw ConfigError("split_heads: channels " + std::to_string(c) +
                      " not divisible by heads " + std::to_string(heads));
  std::size_t tokens = rows / batch, d = c / heads;
  Tensor out({batch, heads, tokens, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t tk = 0; tk < tokens; ++tk) {
        const double* src = xv.ptr() + (b * tokens + tk) * c + hd * d;
        double* dst = out.ptr() + ((b * heads + hd) * tokens + tk) * d;
        std::copy(src, src + d, dst);
      }
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id, batch, heads, tokens, d, c](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t tk = 0; tk < tokens; ++tk) {
          const double* src = gy.ptr() + ((b * heads + hd) * tokens + tk) * d;
          double* dst = gx.ptr() + (b * tokens + tk) * c + hd * d;
          for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
        }
  });
}

Var Tape::merge_heads(Var x) {
  const Tensor& xv = value(x);
  check_rank("merge_heads", xv, 4);
  std::size_t batch = xv.dim(0), heads = xv.dim(1), tokens = xv.dim(2), d = xv.dim(3);
  std::size_t c = heads * d;
  Tensor out({batch * tokens, c});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t tk = 0; tk < tokens; ++tk) {
        const double* src = xv.ptr() + ((b * heads + hd) * tokens + tk) * d;
        double* dst = out.ptr() + (b * tokens + tk) * c + hd * d;
        std::copy(src, src + d, dst);
      }
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id, batch, heads, tokens, d, c](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t tk = 0; tk < tokens; ++tk) {
          const double* src = gy.ptr() + (b * tokens + tk) * c + hd * d;
          double* dst = gx.ptr() + ((b * heads + hd) * tokens + tk) * d;
          for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
        }
  });
}

Var Tape::softmax_channel(Var x) {
  const Tensor& xv = value(x);
  check_rank("softmax_channel", xv, 4);
  std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  std::size_t hw = h * w;
  Tensor out(xv.shape());
  for (std::size_t ni = 0; ni < n; ++ni) {
    const double* src = xv.ptr() + ni * c * hw;
    double* dst = out.ptr() + ni * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = src[p];
      for (std::size_t ci = 1; ci < c; ++ci) mx = std::max(mx, src[ci * hw + p]);
      double sum = 0.0;
      for (std::size_t ci = 0; ci < c; ++ci) {
        double e = std::exp(src[ci * hw + p] - mx);
        dst[ci * hw + p] = e;
        sum += e;
      }
      for (std::size_t ci = 0; ci < c; ++ci) dst[ci * hw + p] /= sum;
    }
  }
  Var in[] = {x};
  return record(std::move(out), in, [xid = x.id, n, c, hw](Tape& t, int out_id) {
    if (!t.wants_grad(xid)) return;
    const Tensor& gy = t.grad_of(out_id);
    const Tensor& y = t.value_of(out_id);
    Tensor& gx = t.grad_buffer(xid);
    for (std::size_t ni = 0; ni < n; ++ni) {
      const double* yp = y.ptr() + ni * c * hw;
      const double* gp = gy.ptr() + ni * c * hw;
      double* xp = gx.ptr() + ni * c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci) dot += gp[ci * hw + p] * yp[ci * hw + p];
        for (std::size_t ci = 0; ci < c; ++ci)
          xp[ci * hw + p] += yp[ci * hw + p] * (gp[ci * hw + p] - dot);
      }
    }
  });
}

}  // namespace mapchange
