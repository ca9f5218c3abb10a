#include "mapchange/net.hpp"

#include <algorithm>
#include <cmath>

#include "mapchange/errors.hpp"

namespace mapchange {

namespace {

constexpr double kNormEps = 1e-5;

// Largest group count <= 8 that divides the channel count, so group norm is
// valid for any width.
int norm_groups(int c) {
  int g = std::min(8, c);
  while (c % g != 0) --g;
  return g;
}

std::string stage_prefix(const std::string& enc, int stage) {
  return enc + ".s" + std::to_string(stage);
}

}  // namespace

DiffOp parse_diff_op(const std::string& s) {
  if (s == "sub") return DiffOp::Sub;
  if (s == "add") return DiffOp::Add;
  if (s == "absdiff") return DiffOp::AbsDiff;
  if (s == "concat") return DiffOp::Concat;
  throw ConfigError("unknown diff_op '" + s + "' (expected sub|add|absdiff|concat)");
}

FusionOp parse_fusion_op(const std::string& s) {
  if (s == "cat") return FusionOp::Cat;
  if (s == "add") return FusionOp::Add;
  if (s == "tstadd") return FusionOp::TstAdd;
  throw ConfigError("unknown fusion_op '" + s + "' (expected cat|add|tstadd)");
}

std::string to_string(DiffOp op) {
  switch (op) {
    case DiffOp::Sub: return "sub";
    case DiffOp::Add: return "add";
    case DiffOp::AbsDiff: return "absdiff";
    case DiffOp::Concat: return "concat";
  }
  throw ConfigError("bad diff_op value");
}

std::string to_string(FusionOp op) {
  switch (op) {
    case FusionOp::Cat: return "cat";
    case FusionOp::Add: return "add";
    case FusionOp::TstAdd: return "tstadd";
  }
  throw ConfigError("bad fusion_op value");
}

void ModelConfig::validate() const {
  if (num_classes < 2 || num_classes > 16)
    throw ConfigError("num_classes must be in [2,16] (transition ids must fit one byte), got " +
                      std::to_string(num_classes));
  if (base_channels < 1) throw ConfigError("base_channels must be positive");
  if (encoder_stages < 1 || encoder_stages > 6)
    throw ConfigError("encoder_stages must be in [1,6], got " + std::to_string(encoder_stages));
  if (tst_heads < 1) throw ConfigError("tst_heads must be positive");
  if (tst_dim < 0) throw ConfigError("tst_dim must be >= 0 (0 = encoder channels)");
  if (resolved_tst_dim() % tst_heads != 0)
    throw ConfigError("tst_dim " + std::to_string(resolved_tst_dim()) +
                      " not divisible by tst_heads " + std::to_string(tst_heads));
}

Var Binder::operator()(Parameter& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Var v = tape_->leaf(p.value, train_);
  bound_.emplace(&p, v);
  return v;
}

// --- parameter registration -------------------------------------------------

namespace {

void add_conv(ParameterStore& ps, uint64_t seed, const std::string& name, int cout, int cin,
              int k, bool bias = true) {
  std::size_t co = static_cast<std::size_t>(cout), ci = static_cast<std::size_t>(cin),
              kk = static_cast<std::size_t>(k);
  ps.add(name + ".w", init_kaiming(name + ".w", seed, {co, ci, kk, kk}, ci * kk * kk));
  if (bias) ps.add(name + ".b", init_zeros({co}));
}

void add_norm(ParameterStore& ps, const std::string& name, int c) {
  std::size_t cc = static_cast<std::size_t>(c);
  ps.add(name + ".g", init_ones({cc}));
  ps.add(name + ".b", init_zeros({cc}));
}

void add_linear(ParameterStore& ps, uint64_t seed, const std::string& name, int din, int dout) {
  std::size_t di = static_cast<std::size_t>(din), dd = static_cast<std::size_t>(dout);
  ps.add(name + ".w", init_kaiming(name + ".w", seed, {di, dd}, di));
  ps.add(name + ".b", init_zeros({dd}));
}

void register_encoder(ParameterStore& ps, const ModelConfig& cfg, const std::string& enc,
                      int in_channels) {
  int prev = in_channels;
  for (int s = 0; s < cfg.encoder_stages; ++s) {
    int ch = cfg.base_channels << s;
    std::string p = stage_prefix(enc, s);
    add_conv(ps, cfg.seed, p + ".c1", ch, prev, 3);
    add_norm(ps, p + ".n1", ch);
    add_conv(ps, cfg.seed, p + ".c2", ch, ch, 3);
    add_norm(ps, p + ".n2", ch);
    prev = ch;
  }
}

void register_tst(ParameterStore& ps, const ModelConfig& cfg, const std::string& p) {
  int ce = cfg.encoder_channels();
  int d = cfg.resolved_tst_dim();
  add_conv(ps, cfg.seed, p + ".in", d, ce, 1);
  add_norm(ps, p + ".ln1", d);
  add_linear(ps, cfg.seed, p + ".q", d, d);
  add_linear(ps, cfg.seed, p + ".k", d, d);
  add_linear(ps, cfg.seed, p + ".v", d, d);
  add_linear(ps, cfg.seed, p + ".proj", d, d);
  add_norm(ps, p + ".ln2", d);
  add_linear(ps, cfg.seed, p + ".mlp1", d, 2 * d);
  add_linear(ps, cfg.seed, p + ".mlp2", 2 * d, d);
  add_conv(ps, cfg.seed, p + ".out", ce, d, 1);
}

// skip_mult: how many encoder-width channel sets arrive at each skip level
// (1 for the semantic decoder, 2 for the change decoder's bitemporal skips).
void register_decoder(ParameterStore& ps, const ModelConfig& cfg, const std::string& dec,
                      int skip_mult, int out_channels) {
  for (int i = cfg.encoder_stages - 2; i >= 0; --i) {
    int ch = cfg.base_channels << i;
    int above = cfg.base_channels << (i + 1);
    int in = above + skip_mult * ch;
    std::string p = dec + ".u" + std::to_string(i);
    add_conv(ps, cfg.seed, p + ".c1", ch, in, 3);
    add_norm(ps, p + ".n1", ch);
    add_conv(ps, cfg.seed, p + ".c2", ch, ch, 3);
    add_norm(ps, p + ".n2", ch);
  }
  int head_in = cfg.encoder_stages == 1 ? cfg.encoder_channels() : cfg.base_channels;
  add_conv(ps, cfg.seed, dec + ".head", out_channels, head_in, 1);
}

// --- forward helpers ---------------------------------------------------------

Var conv(Binder& b, ParameterStore& ps, const std::string& name, Var x, int stride, int pad) {
  Var w = b(ps.get(name + ".w"));
  Var bias = ps.has(name + ".b") ? b(ps.get(name + ".b")) : Var{};
  return b.tape().conv2d(x, w, bias, stride, pad);
}

Var norm_relu(Binder& b, ParameterStore& ps, const std::string& name, Var x) {
  Tape& t = b.tape();
  int c = static_cast<int>(t.value(x).dim(1));
  Var g = b(ps.get(name + ".g"));
  Var be = b(ps.get(name + ".b"));
  return t.relu(t.group_norm(x, norm_groups(c), g, be, kNormEps));
}

EncoderTrace run_encoder(Binder& b, ParameterStore& ps, const ModelConfig& cfg,
                         const std::string& enc, Var x) {
  const Tensor& xv = b.tape().value(x);
  if (xv.rank() != 4) throw ConfigError("encoder input must be 4-d, got " + xv.shape_str());
  int dsf = cfg.downsample();
  if (xv.dim(2) % static_cast<std::size_t>(dsf) != 0 ||
      xv.dim(3) % static_cast<std::size_t>(dsf) != 0)
    throw ConfigError("encoder input " + xv.shape_str() + " not divisible by downsample factor " +
                      std::to_string(dsf));
  EncoderTrace tr;
  for (int s = 0; s < cfg.encoder_stages; ++s) {
    std::string p = stage_prefix(enc, s);
    x = conv(b, ps, p + ".c1", x, s == 0 ? 1 : 2, 1);
    x = norm_relu(b, ps, p + ".n1", x);
    x = conv(b, ps, p + ".c2", x, 1, 1);
    x = norm_relu(b, ps, p + ".n2", x);
    if (s < cfg.encoder_stages - 1) tr.skips.push_back(x);
  }
  tr.features = x;
  return tr;
}

Var run_tst(Binder& b, ParameterStore& ps, const ModelConfig& cfg, const std::string& p, Var x) {
  Tape& t = b.tape();
  const Tensor& xv = t.value(x);
  std::size_t n = xv.dim(0), h = xv.dim(2), w = xv.dim(3);
  std::size_t d = static_cast<std::size_t>(cfg.resolved_tst_dim());

  Var tok = t.nchw_to_tokens(conv(b, ps, p + ".in", x, 1, 0));
  Var l1 = t.layer_norm_rows(tok, b(ps.get(p + ".ln1.g")), b(ps.get(p + ".ln1.b")), kNormEps);
  auto linear = [&](const std::string& name, Var in) {
    return t.add_row_bias(t.matmul(in, b(ps.get(name + ".w"))), b(ps.get(name + ".b")));
  };
  std::size_t heads = static_cast<std::size_t>(cfg.tst_heads);
  Var att = t.attention(t.split_heads(linear(p + ".q", l1), n, heads),
                        t.split_heads(linear(p + ".k", l1), n, heads),
                        t.split_heads(linear(p + ".v", l1), n, heads));
  Var r1 = t.add(tok, linear(p + ".proj", t.merge_heads(att)));
  Var l2 = t.layer_norm_rows(r1, b(ps.get(p + ".ln2.g")), b(ps.get(p + ".ln2.b")), kNormEps);
  Var r2 = t.add(r1, linear(p + ".mlp2", t.relu(linear(p + ".mlp1", l2))));
  return conv(b, ps, p + ".out", t.tokens_to_nchw(r2, n, d, h, w), 1, 0);
}

Var run_decoder(Binder& b, ParameterStore& ps, const ModelConfig& cfg, const std::string& dec,
                Var x, const std::vector<Var>& skips) {
  Tape& t = b.tape();
  if (skips.size() + 1 != static_cast<std::size_t>(cfg.encoder_stages))
    throw ConfigError("decoder expects " + std::to_string(cfg.encoder_stages - 1) + " skips, got " +
                      std::to_string(skips.size()));
  for (int i = cfg.encoder_stages - 2; i >= 0; --i) {
    Var up = t.upsample_nearest_x2(x);
    Var parts[] = {up, skips[static_cast<std::size_t>(i)]};
    x = t.channel_concat(parts);
    std::string p = dec + ".u" + std::to_string(i);
    x = conv(b, ps, p + ".c1", x, 1, 1);
    x = norm_relu(b, ps, p + ".n1", x);
    x = conv(b, ps, p + ".c2", x, 1, 1);
    x = norm_relu(b, ps, p + ".n2", x);
  }
  return conv(b, ps, dec + ".head", x, 1, 0);
}

void check_one_hot(const Tensor& m) {
  if (m.rank() != 4) throw ConfigError("map input must be 4-d one-hot, got " + m.shape_str());
  std::size_t n = m.dim(0), k = m.dim(1), hw = m.dim(2) * m.dim(3);
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t p = 0; p < hw; ++p) {
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        double v = m[(ni * k + c) * hw + p];
        if (v != 0.0 && v != 1.0)
          throw ConfigError("map input is not one-hot: value " + std::to_string(v));
        sum += v;
      }
      if (sum != 1.0)
        throw ConfigError("map input is not one-hot: channel sum " + std::to_string(sum) +
                          " at pixel " + std::to_string(p));
    }
}

}  // namespace

// --- TripletNetwork ----------------------------------------------------------

TripletNetwork::TripletNetwork(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  register_encoder(params_, cfg_, "f", 3);
  register_encoder(params_, cfg_, "g", cfg_.num_classes);
  if (cfg_.diff_op == DiffOp::Concat) {
    int ce = cfg_.encoder_channels();
    add_conv(params_, cfg_.seed, "diff.proj", ce, 2 * ce, 1);
  }
  register_tst(params_, cfg_, "tst");
  if (cfg_.fusion_op == FusionOp::Add || cfg_.fusion_op == FusionOp::TstAdd) {
    int ce = cfg_.encoder_channels();
    add_conv(params_, cfg_.seed, "fuse.proj", ce, ce, 1, /*bias=*/false);
  }
  if (cfg_.fusion_op == FusionOp::TstAdd) register_tst(params_, cfg_, "fuse.tst2");
  register_decoder(params_, cfg_, "dsem", 1, cfg_.num_classes);
  int fused = cfg_.fusion_op == FusionOp::Cat ? 2 * cfg_.encoder_channels()
                                              : cfg_.encoder_channels();
  add_conv(params_, cfg_.seed, "dchg.pre", cfg_.encoder_channels(), fused, 1);
  register_decoder(params_, cfg_, "dchg", 2, 1);
}

EncoderTrace TripletNetwork::encode_image(Binder& b, Var image) const {
  const Tensor& v = b.tape().value(image);
  if (v.rank() != 4 || v.dim(1) != 3)
    throw ConfigError("image input must be [N,3,H,W], got " + v.shape_str());
  return run_encoder(b, params_, cfg_, "f", image);
}

EncoderTrace TripletNetwork::encode_map(Binder& b, Var map_onehot) const {
  const Tensor& v = b.tape().value(map_onehot);
  check_one_hot(v);
  if (v.dim(1) != static_cast<std::size_t>(cfg_.num_classes))
    throw ConfigError("map input has " + std::to_string(v.dim(1)) + " channels, expected " +
                      std::to_string(cfg_.num_classes));
  return run_encoder(b, params_, cfg_, "g", map_onehot);
}

Var TripletNetwork::temporal_diff(Binder& b, Var e1, Var e2) const {
  Tape& t = b.tape();
  switch (cfg_.diff_op) {
    case DiffOp::Sub: return t.sub(e1, e2);
    case DiffOp::Add: return t.add(e1, e2);
    case DiffOp::AbsDiff: return t.abs_val(t.sub(e1, e2));
    case DiffOp::Concat: {
      Var parts[] = {e1, e2};
      return conv(b, params_, "diff.proj", t.channel_concat(parts), 1, 0);
    }
  }
  throw ConfigError("bad diff_op value");
}

Var TripletNetwork::tst(Binder& b, Var c_diff) const {
  return run_tst(b, params_, cfg_, "tst", c_diff);
}

Var TripletNetwork::fuse(Binder& b, Var c_tst, Var e_map) const {
  Tape& t = b.tape();
  const Tensor& a = t.value(c_tst);
  const Tensor& m = t.value(e_map);
  if (a.dim(2) != m.dim(2) || a.dim(3) != m.dim(3))
    throw ConfigError("fuse: spatial mismatch " + a.shape_str() + " vs " + m.shape_str());
  switch (cfg_.fusion_op) {
    case FusionOp::Cat: {
      Var parts[] = {c_tst, e_map};
      return t.channel_concat(parts);
    }
    case FusionOp::Add: return t.add(c_tst, conv(b, params_, "fuse.proj", e_map, 1, 0));
    case FusionOp::TstAdd: {
      Var sum = t.add(c_tst, conv(b, params_, "fuse.proj", e_map, 1, 0));
      return run_tst(b, params_, cfg_, "fuse.tst2", sum);
    }
  }
  throw ConfigError("bad fusion_op value");
}

TripletOutputVars TripletNetwork::forward_triplet(Binder& b, Var image1, Var image2,
                                                  Var map_onehot) const {
  Tape& t = b.tape();
  const Tensor& v1 = t.value(image1);
  const Tensor& v2 = t.value(image2);
  const Tensor& vm = t.value(map_onehot);
  if (!v1.same_shape(v2) || v1.dim(2) != vm.dim(2) || v1.dim(3) != vm.dim(3))
    throw ConfigError("triplet inputs disagree: " + v1.shape_str() + ", " + v2.shape_str() +
                      ", " + vm.shape_str());

  EncoderTrace tr1 = encode_image(b, image1);
  EncoderTrace tr2 = encode_image(b, image2);
  EncoderTrace trm = encode_map(b, map_onehot);

  Var c_diff = temporal_diff(b, tr1.features, tr2.features);
  Var c_tst = tst(b, c_diff);
  Var c_fused = fuse(b, c_tst, trm.features);

  TripletOutputVars out;
  out.s1_logits = run_decoder(b, params_, cfg_, "dsem", tr1.features, tr1.skips);
  out.s2_logits = run_decoder(b, params_, cfg_, "dsem", tr2.features, tr2.skips);

  // The change decoder sees both temporal branches at every skip level,
  // combined symmetrically (sum and absolute difference) so an epoch swap
  // cannot move bits through the skip path.
  std::vector<Var> sym;
  for (std::size_t i = 0; i < tr1.skips.size(); ++i) {
    Var parts[] = {t.add(tr1.skips[i], tr2.skips[i]),
                   t.abs_val(t.sub(tr1.skips[i], tr2.skips[i]))};
    sym.push_back(t.channel_concat(parts));
  }
  Var pre = conv(b, params_, "dchg.pre", c_fused, 1, 0);
  out.change_logits = run_decoder(b, params_, cfg_, "dchg", pre, sym);
  return out;
}

TripletNetwork::TripletValues TripletNetwork::infer(const Tensor& image1, const Tensor& image2,
                                                    const Tensor& map_onehot) const {
  Tape tape;
  Binder b(tape, false);
  Var i1 = tape.leaf(image1);
  Var i2 = tape.leaf(image2);
  Var m = tape.leaf(map_onehot);
  TripletOutputVars out = forward_triplet(b, i1, i2, m);
  return {tape.value(out.s1_logits), tape.value(out.s2_logits), tape.value(out.change_logits)};
}

// --- SingleTemporalNetwork ---------------------------------------------------

SingleTemporalNetwork::SingleTemporalNetwork(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  register_encoder(params_, cfg_, "f", 3);
  register_decoder(params_, cfg_, "dsem", 1, cfg_.num_classes);
}

Var SingleTemporalNetwork::forward(Binder& b, Var image) const {
  const Tensor& v = b.tape().value(image);
  if (v.rank() != 4 || v.dim(1) != 3)
    throw ConfigError("image input must be [N,3,H,W], got " + v.shape_str());
  EncoderTrace tr = run_encoder(b, params_, cfg_, "f", image);
  return run_decoder(b, params_, cfg_, "dsem", tr.features, tr.skips);
}

Tensor SingleTemporalNetwork::infer(const Tensor& image) const {
  Tape tape;
  Binder b(tape, false);
  Var out = forward(b, tape.leaf(image));
  return tape.value(out);
}

}  // namespace mapchange
