#pragma once

// The encoder-decoder network: frame embedding with a learned mask vector,
// multi-head scaled-dot-product attention, Gelu feed-forward blocks,
// post-layer-norm residuals, masked decoder self-attention and an output
// projection back to box coordinates.
//
// Two forward paths share the same kernels: a plain one for inference and a
// Graph-based one for training, so activations match bit for bit.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vgt/autodiff.hpp"
#include "vgt/data.hpp"
#include "vgt/mat.hpp"
#include "vgt/rng.hpp"

namespace vgt {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_enc = 2;
  int n_dec = 2;
  int d_ff = 0;  // 0 means 2 * d_model
  int maxS = 10;
  int hist_len = 20;
  int pred_len = 10;
  double dropout = 0.0;            // kept at 0; field exists for completeness
  bool paper_cross_wiring = false; // K,Q from memory and V from the decoder
                                   // stream; only valid for equal lengths

  int token_dim() const { return 4 * maxS; }
  int d_k() const { return d_model / n_heads; }
  int d_ff_eff() const { return d_ff > 0 ? d_ff : 2 * d_model; }

  void validate() const {
    if (d_model < 2 || d_model % 2 != 0) throw std::invalid_argument("ModelConfig: d_model must be even");
    if (n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    if (n_enc < 1 || n_dec < 1) throw std::invalid_argument("ModelConfig: need at least one layer per stack");
    if (d_ff < 0) throw std::invalid_argument("ModelConfig: d_ff must be positive (or 0 for the default)");
    if (maxS < 1 || hist_len < 2 || pred_len < 1)
      throw std::invalid_argument("ModelConfig: maxS/hist_len/pred_len out of range");
  }

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig paper_scale() {
    ModelConfig c;
    c.d_model = 1024;
    c.n_heads = 8;
    c.n_enc = 6;
    c.n_dec = 6;
    c.d_ff = 2048;
    c.maxS = 10;
    c.hist_len = 20;
    c.pred_len = 10;
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct AttnParams {
  Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct LayerNormParams {
  Mat<T> gamma, beta;
};

template <typename T>
struct FfnParams {
  Mat<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderLayerParams {
  AttnParams<T> self_attn;
  LayerNormParams<T> ln1;
  FfnParams<T> ffn;
  LayerNormParams<T> ln2;
};

template <typename T>
struct DecoderLayerParams {
  AttnParams<T> self_attn;
  LayerNormParams<T> ln1;
  AttnParams<T> cross_attn;
  LayerNormParams<T> ln2;
  FfnParams<T> ffn;
  LayerNormParams<T> ln3;
};

// Every learnable weight, in the fixed inventory order used by checkpoints
// and gradient buffers.
template <typename T>
struct Parameters {
  Mat<T> w_embed, b_embed;
  Mat<T> mask_vec;
  std::vector<EncoderLayerParams<T>> enc;
  std::vector<DecoderLayerParams<T>> dec;
  Mat<T> w_out, b_out;

  template <typename F>
  static void visit_attn(AttnParams<T>& a, F&& f) {
    f(a.wq); f(a.bq); f(a.wk); f(a.bk); f(a.wv); f(a.bv); f(a.wo); f(a.bo);
  }

  // Applies f to every tensor in inventory order.
  template <typename F>
  void for_each(F&& f) {
    f(w_embed); f(b_embed); f(mask_vec);
    for (auto& l : enc) {
      visit_attn(l.self_attn, f);
      f(l.ln1.gamma); f(l.ln1.beta);
      f(l.ffn.w1); f(l.ffn.b1); f(l.ffn.w2); f(l.ffn.b2);
      f(l.ln2.gamma); f(l.ln2.beta);
    }
    for (auto& l : dec) {
      visit_attn(l.self_attn, f);
      f(l.ln1.gamma); f(l.ln1.beta);
      visit_attn(l.cross_attn, f);
      f(l.ln2.gamma); f(l.ln2.beta);
      f(l.ffn.w1); f(l.ffn.b1); f(l.ffn.w2); f(l.ffn.b2);
      f(l.ln3.gamma); f(l.ln3.beta);
    }
    f(w_out); f(b_out);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<Parameters*>(this)->for_each([&](Mat<T>& m) { f(static_cast<const Mat<T>&>(m)); });
  }

  std::size_t tensor_count() const {
    std::size_t n = 0;
    for_each([&](const Mat<T>&) { ++n; });
    return n;
  }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for_each([&](const Mat<T>& m) { n += static_cast<std::int64_t>(m.size()); });
    return n;
  }

  static Parameters shaped(const ModelConfig& cfg) {
    cfg.validate();
    Parameters p;
    const int d = cfg.d_model, f = cfg.d_ff_eff(), td = cfg.token_dim();
    auto attn = [&] {
      AttnParams<T> a;
      a.wq = Mat<T>(d, d); a.bq = Mat<T>(1, d);
      a.wk = Mat<T>(d, d); a.bk = Mat<T>(1, d);
      a.wv = Mat<T>(d, d); a.bv = Mat<T>(1, d);
      a.wo = Mat<T>(d, d); a.bo = Mat<T>(1, d);
      return a;
    };
    auto ln = [&] { return LayerNormParams<T>{Mat<T>(1, d), Mat<T>(1, d)}; };
    auto ffn = [&] { return FfnParams<T>{Mat<T>(d, f), Mat<T>(1, f), Mat<T>(f, d), Mat<T>(1, d)}; };
    p.w_embed = Mat<T>(td, d);
    p.b_embed = Mat<T>(1, d);
    p.mask_vec = Mat<T>(1, d);
    p.enc.resize(cfg.n_enc);
    for (auto& l : p.enc) l = {attn(), ln(), ffn(), ln()};
    p.dec.resize(cfg.n_dec);
    for (auto& l : p.dec) l = {attn(), ln(), attn(), ln(), ffn(), ln()};
    p.w_out = Mat<T>(d, td);
    p.b_out = Mat<T>(1, td);
    return p;
  }

  // Xavier-normal weights, zero biases, unit layer-norm scales. Draws happen
  // in inventory order from one stream, so init is reproducible.
  static Parameters init(const ModelConfig& cfg, std::mt19937_64& rng) {
    Parameters p = shaped(cfg);
    p.for_each([&](Mat<T>& m) {
      const bool is_bias = m.rows == 1;
      if (is_bias) return;  // biases, gammas and betas handled below
      const double std = std::sqrt(2.0 / (m.rows + m.cols));
      for (auto& v : m.a) v = static_cast<T>(gaussian(rng) * std);
    });
    auto unit = [](LayerNormParams<T>& l) {
      std::fill(l.gamma.a.begin(), l.gamma.a.end(), T(1));
      std::fill(l.beta.a.begin(), l.beta.a.end(), T(0));
    };
    for (auto& l : p.enc) { unit(l.ln1); unit(l.ln2); }
    for (auto& l : p.dec) { unit(l.ln1); unit(l.ln2); unit(l.ln3); }
    for (auto& v : p.mask_vec.a) v = static_cast<T>(gaussian(rng) * 0.02);
    return p;
  }

  static Parameters zeros(const ModelConfig& cfg) { return shaped(cfg); }
};

// Exact scalar count of the inventory above. Sinusoidal positions are
// parameter-free and contribute nothing.
inline std::int64_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.d_model, f = cfg.d_ff_eff(), td = cfg.token_dim();
  const std::int64_t attn = 4 * (d * d + d);
  const std::int64_t ln = 2 * d;
  const std::int64_t ffn = d * f + f + f * d + d;
  const std::int64_t enc_layer = attn + 2 * ln + ffn;
  const std::int64_t dec_layer = 2 * attn + 3 * ln + ffn;
  return (td * d + d) + d + cfg.n_enc * enc_layer + cfg.n_dec * dec_layer + (d * td + td);
}

// ---------------------------------------------------------------------------
// Plain forward path.

template <typename T>
Mat<T> linear(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b) {
  Mat<T> out = matmul(x, w);
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) += b(0, j);
  return out;
}

// Softmax(Q K^T / sqrt(d_k)) V with optional boolean mask; disallowed
// entries get exactly zero weight and each row sums to one.
template <typename T>
struct AttentionResult {
  Mat<T> out;
  Mat<T> weights;
};

template <typename T>
AttentionResult<T> attention_with_weights(const Mat<T>& Q, const Mat<T>& K, const Mat<T>& V,
                                          const BoolMask* mask = nullptr) {
  check_shape<T>(Q.cols == K.cols, "attention: Q/K feature dims differ");
  check_shape<T>(K.rows == V.rows, "attention: K/V lengths differ");
  Mat<T> scores = matmul_nt(Q, K);
  const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(Q.cols));
  for (auto& v : scores.a) v *= inv_sqrt_dk;
  softmax_rows_masked(scores, mask);
  AttentionResult<T> r;
  r.out = matmul(scores, V);
  r.weights = std::move(scores);
  return r;
}

template <typename T>
Mat<T> attention(const Mat<T>& Q, const Mat<T>& K, const Mat<T>& V, const BoolMask* mask = nullptr) {
  return attention_with_weights(Q, K, V, mask).out;
}

// h parallel attentions on d_k = d_model/h column slices of the projected
// inputs, concatenated and fused by wo.
template <typename T>
Mat<T> multi_head(const Mat<T>& x_q, const Mat<T>& x_kv, const AttnParams<T>& p, int n_heads,
                  const BoolMask* mask = nullptr) {
  check_shape<T>(x_q.cols == p.wq.rows, "multi_head: input dim");
  check_shape<T>(p.wq.cols % n_heads == 0, "multi_head: head split");
  const Mat<T> Q = linear(x_q, p.wq, p.bq);
  const Mat<T> K = linear(x_kv, p.wk, p.bk);
  const Mat<T> V = linear(x_kv, p.wv, p.bv);
  const int dk = Q.cols / n_heads;
  Mat<T> concat(Q.rows, Q.cols);
  for (int h = 0; h < n_heads; ++h) {
    Mat<T> qh(Q.rows, dk), kh(K.rows, dk), vh(V.rows, dk);
    for (int i = 0; i < Q.rows; ++i)
      for (int j = 0; j < dk; ++j) qh(i, j) = Q(i, h * dk + j);
    for (int i = 0; i < K.rows; ++i)
      for (int j = 0; j < dk; ++j) {
        kh(i, j) = K(i, h * dk + j);
        vh(i, j) = V(i, h * dk + j);
      }
    Mat<T> ho = attention(qh, kh, vh, mask);
    for (int i = 0; i < ho.rows; ++i)
      for (int j = 0; j < dk; ++j) concat(i, h * dk + j) = ho(i, j);
  }
  return linear(concat, p.wo, p.bo);
}

// Sinusoidal position encoding indexed by frame mark.
template <typename T>
Mat<T> positional_encoding(const std::vector<int>& marks, int d_model) {
  Mat<T> pe(static_cast<int>(marks.size()), d_model);
  for (std::size_t r = 0; r < marks.size(); ++r) {
    const double pos = static_cast<double>(marks[r]);
    for (int i = 0; i < d_model / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / d_model);
      pe(static_cast<int>(r), 2 * i) = static_cast<T>(std::sin(pos * freq));
      pe(static_cast<int>(r), 2 * i + 1) = static_cast<T>(std::cos(pos * freq));
    }
  }
  return pe;
}

// One frame flattened to 4*maxS values in fixed slot order.
template <typename T>
Mat<T> flatten_frames(std::span<const Frame> frames, int maxS) {
  Mat<T> x(static_cast<int>(frames.size()), 4 * maxS);
  for (std::size_t r = 0; r < frames.size(); ++r) {
    const Frame& f = frames[r];
    if (static_cast<int>(f.slots.size()) != maxS)
      throw std::invalid_argument("flatten_frames: frame has " + std::to_string(f.slots.size()) +
                                  " slots, expected " + std::to_string(maxS));
    for (int s = 0; s < maxS; ++s) {
      x(static_cast<int>(r), 4 * s + 0) = static_cast<T>(f.slots[s].x);
      x(static_cast<int>(r), 4 * s + 1) = static_cast<T>(f.slots[s].y);
      x(static_cast<int>(r), 4 * s + 2) = static_cast<T>(f.slots[s].w);
      x(static_cast<int>(r), 4 * s + 3) = static_cast<T>(f.slots[s].h);
    }
  }
  return x;
}

template <typename T>
Frame token_to_frame(const Mat<T>& out, int row, int maxS, int mark) {
  Frame f(maxS);
  f.mark = mark;
  for (int s = 0; s < maxS; ++s) {
    f.slots[s].x = static_cast<double>(out(row, 4 * s + 0));
    f.slots[s].y = static_cast<double>(out(row, 4 * s + 1));
    f.slots[s].w = static_cast<double>(out(row, 4 * s + 2));
    f.slots[s].h = static_cast<double>(out(row, 4 * s + 3));
  }
  return f;
}

inline std::vector<int> frame_marks(std::span<const Frame> frames) {
  std::vector<int> m(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) m[i] = frames[i].mark;
  return m;
}

inline std::vector<std::uint8_t> frame_mask_flags(std::span<const Frame> frames) {
  std::vector<std::uint8_t> f(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) f[i] = frames[i].masked ? 1 : 0;
  return f;
}

// token = linear(flattened slots) + sinusoidal(mark); a masked frame takes
// the learned mask vector instead of its (ignored) content projection.
template <typename T>
Mat<T> embed_frames(std::span<const Frame> frames, const Parameters<T>& p, const ModelConfig& cfg) {
  Mat<T> content = linear(flatten_frames<T>(frames, cfg.maxS), p.w_embed, p.b_embed);
  for (std::size_t r = 0; r < frames.size(); ++r)
    if (frames[r].masked)
      for (int j = 0; j < cfg.d_model; ++j) content(static_cast<int>(r), j) = p.mask_vec(0, j);
  const Mat<T> pe = positional_encoding<T>(frame_marks(frames), cfg.d_model);
  add_inplace(content, pe);
  return content;
}

template <typename T>
Mat<T> layer_norm_plain(const Mat<T>& x, const LayerNormParams<T>& ln) {
  Mat<T> out;
  layernorm_forward(x, ln.gamma, ln.beta, T(1e-5), out);
  return out;
}

template <typename T>
Mat<T> ffn_plain(const Mat<T>& x, const FfnParams<T>& f) {
  Mat<T> h = linear(x, f.w1, f.b1);
  for (auto& v : h.a) v = gelu_scalar(v);
  return linear(h, f.w2, f.b2);
}

// n_enc layers of {self-attention -> add&norm -> FFN(Gelu) -> add&norm}.
template <typename T>
Mat<T> encode(const Mat<T>& tokens, const Parameters<T>& p, const ModelConfig& cfg) {
  Mat<T> x = tokens;
  for (const auto& l : p.enc) {
    Mat<T> att = multi_head(x, x, l.self_attn, cfg.n_heads);
    add_inplace(att, x);
    x = layer_norm_plain(att, l.ln1);
    Mat<T> ff = ffn_plain(x, l.ffn);
    add_inplace(ff, x);
    x = layer_norm_plain(ff, l.ln2);
  }
  return x;
}

namespace detail {

// Literal cross wiring from the figure: memory supplies K and Q, the
// decoder stream supplies V. Dimensionally valid only for equal lengths.
template <typename T>
Mat<T> cross_paper_wiring(const Mat<T>& x, const Mat<T>& memory, const AttnParams<T>& p, int n_heads) {
  const Mat<T> Q = linear(memory, p.wq, p.bq);
  const Mat<T> K = linear(memory, p.wk, p.bk);
  const Mat<T> V = linear(x, p.wv, p.bv);
  const int dk = Q.cols / n_heads;
  Mat<T> concat(Q.rows, Q.cols);
  for (int h = 0; h < n_heads; ++h) {
    Mat<T> qh(Q.rows, dk), kh(K.rows, dk), vh(V.rows, dk);
    for (int i = 0; i < Q.rows; ++i)
      for (int j = 0; j < dk; ++j) {
        qh(i, j) = Q(i, h * dk + j);
        kh(i, j) = K(i, h * dk + j);
        vh(i, j) = V(i, h * dk + j);
      }
    Mat<T> ho = attention(qh, kh, vh);
    for (int i = 0; i < ho.rows; ++i)
      for (int j = 0; j < dk; ++j) concat(i, h * dk + j) = ho(i, j);
  }
  return linear(concat, p.wo, p.bo);
}

template <typename T>
Mat<T> decode_stack(const Mat<T>& prompt_tokens, const Mat<T>& memory, const Parameters<T>& p,
                    const ModelConfig& cfg) {
  if (cfg.paper_cross_wiring && memory.rows != prompt_tokens.rows)
    throw std::invalid_argument("decode: paper cross wiring needs equal encoder/decoder lengths");
  const BoolMask causal = BoolMask::causal(prompt_tokens.rows);
  Mat<T> x = prompt_tokens;
  for (const auto& l : p.dec) {
    Mat<T> att = multi_head(x, x, l.self_attn, cfg.n_heads, &causal);
    add_inplace(att, x);
    x = layer_norm_plain(att, l.ln1);

    Mat<T> cross = cfg.paper_cross_wiring ? cross_paper_wiring(x, memory, l.cross_attn, cfg.n_heads)
                                          : multi_head(x, memory, l.cross_attn, cfg.n_heads);
    add_inplace(cross, x);
    x = layer_norm_plain(cross, l.ln2);

    Mat<T> ff = ffn_plain(x, l.ffn);
    add_inplace(ff, x);
    x = layer_norm_plain(ff, l.ln3);
  }
  return x;
}

}  // namespace detail

// n_dec layers of {causally masked self-attention -> add&norm ->
// cross-attention with the encoder memory -> add&norm -> FFN -> add&norm}.
template <typename T>
Mat<T> decode(const Mat<T>& prompt_tokens, const Mat<T>& memory, const Parameters<T>& p,
              const ModelConfig& cfg) {
  if (prompt_tokens.rows < 1) throw std::invalid_argument("decode: empty prompt");
  if (prompt_tokens.rows > cfg.pred_len)
    throw std::invalid_argument("decode: prompt longer than pred_len");
  return detail::decode_stack(prompt_tokens, memory, p, cfg);
}

// Teacher-forced pass: decoder prompt is the last history frame followed by
// the ground-truth future frames 1..pred_len-1; outputs are the pred_len
// predicted frames as token_dim rows.
template <typename T>
Mat<T> forward_teacher(std::span<const Frame> history, std::span<const Frame> future,
                       const Parameters<T>& p, const ModelConfig& cfg) {
  if (static_cast<int>(history.size()) != cfg.hist_len)
    throw std::invalid_argument("forward_teacher: history length must equal hist_len");
  if (static_cast<int>(future.size()) != cfg.pred_len)
    throw std::invalid_argument("forward_teacher: future length must equal pred_len");
  const Mat<T> memory = encode(embed_frames(history, p, cfg), p, cfg);
  std::vector<Frame> prompt;
  prompt.reserve(cfg.pred_len);
  prompt.push_back(history.back());
  for (int k = 0; k + 1 < cfg.pred_len; ++k) prompt.push_back(future[k]);
  const Mat<T> dec = decode(embed_frames<T>({prompt.data(), prompt.size()}, p, cfg), memory, p, cfg);
  return linear(dec, p.w_out, p.b_out);
}

// Autoregressive pass: the prompt grows one predicted frame at a time
// starting from the last history frame.
template <typename T>
Mat<T> forward_autoreg(std::span<const Frame> history, const Parameters<T>& p, const ModelConfig& cfg) {
  if (static_cast<int>(history.size()) != cfg.hist_len)
    throw std::invalid_argument("forward_autoreg: history length must equal hist_len");
  const Mat<T> memory = encode(embed_frames(history, p, cfg), p, cfg);
  const int base_mark = history.back().mark;
  std::vector<Frame> prompt;
  prompt.reserve(cfg.pred_len);
  prompt.push_back(history.back());
  Mat<T> out(cfg.pred_len, cfg.token_dim());
  for (int k = 0; k < cfg.pred_len; ++k) {
    const Mat<T> dec = decode(embed_frames<T>({prompt.data(), prompt.size()}, p, cfg), memory, p, cfg);
    const Mat<T> proj = linear(dec, p.w_out, p.b_out);
    const int last = proj.rows - 1;
    for (int j = 0; j < cfg.token_dim(); ++j) out(k, j) = proj(last, j);
    if (k + 1 < cfg.pred_len) prompt.push_back(token_to_frame(out, k, cfg.maxS, base_mark + k + 1));
  }
  return out;
}

// Gap compensation pass: the encoder sees the full sequence with the gap
// frames masked; the decoder prompt is one mask embedding per gap position.
template <typename T>
Mat<T> reconstruct_gap(std::span<const Frame> sequence_masked, int gap_start, int gap_len,
                       const Parameters<T>& p, const ModelConfig& cfg) {
  if (gap_len < 1 || gap_start < 1 ||
      gap_start + gap_len > static_cast<int>(sequence_masked.size()) - 1)
    throw std::invalid_argument("reconstruct_gap: gap must be interior");
  const Mat<T> memory = encode(embed_frames(sequence_masked, p, cfg), p, cfg);
  std::vector<Frame> prompt(static_cast<std::size_t>(gap_len), Frame(cfg.maxS));
  for (int k = 0; k < gap_len; ++k) {
    prompt[k].mark = sequence_masked[gap_start + k].mark;
    prompt[k].masked = true;
  }
  // No pred_len cap here; a gap may be longer than one prediction horizon.
  const Mat<T> dec =
      detail::decode_stack(embed_frames<T>({prompt.data(), prompt.size()}, p, cfg), memory, p, cfg);
  return linear(dec, p.w_out, p.b_out);
}

// ---------------------------------------------------------------------------
// Tape (training) path. Node-id mirrors of the parameter inventory.

struct AttnNodeIds {
  int wq, bq, wk, bk, wv, bv, wo, bo;
};
struct LnNodeIds {
  int gamma, beta;
};
struct EncNodeIds {
  AttnNodeIds self_attn;
  LnNodeIds ln1;
  int w1, b1, w2, b2;
  LnNodeIds ln2;
};
struct DecNodeIds {
  AttnNodeIds self_attn;
  LnNodeIds ln1;
  AttnNodeIds cross_attn;
  LnNodeIds ln2;
  int w1, b1, w2, b2;
  LnNodeIds ln3;
};

struct ParamNodeIds {
  int w_embed, b_embed, mask_vec;
  std::vector<EncNodeIds> enc;
  std::vector<DecNodeIds> dec;
  int w_out, b_out;
  std::vector<int> flat;  // inventory order, for gradient extraction
};

template <typename T>
ParamNodeIds load_params(Graph<T>& g, const Parameters<T>& p) {
  ParamNodeIds ids;
  auto add = [&](const Mat<T>& m) {
    const int id = g.leaf(m, true);
    ids.flat.push_back(id);
    return id;
  };
  auto add_attn = [&](const AttnParams<T>& a) {
    AttnNodeIds n;
    n.wq = add(a.wq); n.bq = add(a.bq);
    n.wk = add(a.wk); n.bk = add(a.bk);
    n.wv = add(a.wv); n.bv = add(a.bv);
    n.wo = add(a.wo); n.bo = add(a.bo);
    return n;
  };
  ids.w_embed = add(p.w_embed);
  ids.b_embed = add(p.b_embed);
  ids.mask_vec = add(p.mask_vec);
  for (const auto& l : p.enc) {
    EncNodeIds e;
    e.self_attn = add_attn(l.self_attn);
    e.ln1 = {add(l.ln1.gamma), add(l.ln1.beta)};
    e.w1 = add(l.ffn.w1); e.b1 = add(l.ffn.b1);
    e.w2 = add(l.ffn.w2); e.b2 = add(l.ffn.b2);
    e.ln2 = {add(l.ln2.gamma), add(l.ln2.beta)};
    ids.enc.push_back(e);
  }
  for (const auto& l : p.dec) {
    DecNodeIds d;
    d.self_attn = add_attn(l.self_attn);
    d.ln1 = {add(l.ln1.gamma), add(l.ln1.beta)};
    d.cross_attn = add_attn(l.cross_attn);
    d.ln2 = {add(l.ln2.gamma), add(l.ln2.beta)};
    d.w1 = add(l.ffn.w1); d.b1 = add(l.ffn.b1);
    d.w2 = add(l.ffn.w2); d.b2 = add(l.ffn.b2);
    d.ln3 = {add(l.ln3.gamma), add(l.ln3.beta)};
    ids.dec.push_back(d);
  }
  ids.w_out = add(p.w_out);
  ids.b_out = add(p.b_out);
  return ids;
}

// Accumulates tape gradients into a Parameters-shaped buffer.
template <typename T>
void extract_grads(Graph<T>& g, const ParamNodeIds& ids, Parameters<T>& grads) {
  std::size_t k = 0;
  grads.for_each([&](Mat<T>& m) {
    const Mat<T>& src = g.grad_of(ids.flat[k++]);
    add_inplace(m, src);
  });
}

template <typename T>
int tape_linear(Graph<T>& g, int x, int w, int b) {
  return g.add_rowvec(g.matmul(x, w), b);
}

template <typename T>
int tape_multi_head(Graph<T>& g, int x_q, int x_kv, const AttnNodeIds& p, int n_heads,
                    const BoolMask* mask) {
  const int Q = tape_linear(g, x_q, p.wq, p.bq);
  const int K = tape_linear(g, x_kv, p.wk, p.bk);
  const int V = tape_linear(g, x_kv, p.wv, p.bv);
  const int dk = g.val(Q).cols / n_heads;
  std::vector<int> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    const int qh = g.slice_cols(Q, h * dk, dk);
    const int kh = g.slice_cols(K, h * dk, dk);
    const int vh = g.slice_cols(V, h * dk, dk);
    const int scores = g.scale(g.matmul_nt_op(qh, kh), T(1) / std::sqrt(static_cast<T>(dk)));
    const int att = g.softmax_rows(scores, mask);
    heads.push_back(g.matmul(att, vh));
  }
  return tape_linear(g, g.concat_cols(heads), p.wo, p.bo);
}

template <typename T>
int tape_embed_frames(Graph<T>& g, std::span<const Frame> frames, const ParamNodeIds& p,
                      const ModelConfig& cfg) {
  const int flat = g.constant(flatten_frames<T>(frames, cfg.maxS));
  const int lin = tape_linear(g, flat, p.w_embed, p.b_embed);
  const int blended = g.blend_rows(lin, p.mask_vec, frame_mask_flags(frames));
  const int pe = g.constant(positional_encoding<T>(frame_marks(frames), cfg.d_model));
  return g.add(blended, pe);
}

template <typename T>
int tape_ffn(Graph<T>& g, int x, int w1, int b1, int w2, int b2) {
  return tape_linear(g, g.gelu(tape_linear(g, x, w1, b1)), w2, b2);
}

template <typename T>
int tape_encode(Graph<T>& g, int tokens, const ParamNodeIds& p, const ModelConfig& cfg) {
  int x = tokens;
  for (const auto& l : p.enc) {
    x = g.layer_norm(g.add(x, tape_multi_head(g, x, x, l.self_attn, cfg.n_heads, nullptr)), l.ln1.gamma,
                     l.ln1.beta);
    x = g.layer_norm(g.add(x, tape_ffn(g, x, l.w1, l.b1, l.w2, l.b2)), l.ln2.gamma, l.ln2.beta);
  }
  return x;
}

template <typename T>
int tape_decode(Graph<T>& g, int prompt, int memory, const ParamNodeIds& p, const ModelConfig& cfg,
                const BoolMask* causal) {
  int x = prompt;
  for (const auto& l : p.dec) {
    x = g.layer_norm(g.add(x, tape_multi_head(g, x, x, l.self_attn, cfg.n_heads, causal)), l.ln1.gamma,
                     l.ln1.beta);
    x = g.layer_norm(g.add(x, tape_multi_head(g, x, memory, l.cross_attn, cfg.n_heads, nullptr)),
                     l.ln2.gamma, l.ln2.beta);
    x = g.layer_norm(g.add(x, tape_ffn(g, x, l.w1, l.b1, l.w2, l.b2)), l.ln3.gamma, l.ln3.beta);
  }
  return x;
}

// One training example on the tape. `noised` is the corrupted sample,
// `clean` the original; the loss is MSE over the pred_len clean future
// frames, plus (optionally) an auxiliary reconstruction of the masked
// history frames through the output projection.
struct TeacherLossNodes {
  int loss = -1;
  int prediction = -1;
  int memory = -1;
};

template <typename T>
TeacherLossNodes tape_teacher_loss(Graph<T>& g, const ParamNodeIds& pn, const Sample& noised,
                                   const Sample& clean, const ModelConfig& cfg, const BoolMask* causal,
                                   bool aux_denoise_loss) {
  const std::span<const Frame> hist{noised.frames.data(), static_cast<std::size_t>(cfg.hist_len)};
  const std::span<const Frame> future{clean.frames.data() + cfg.hist_len,
                                      static_cast<std::size_t>(cfg.pred_len)};
  TeacherLossNodes out;
  out.memory = tape_encode(g, tape_embed_frames(g, hist, pn, cfg), pn, cfg);

  std::vector<Frame> prompt;
  prompt.reserve(cfg.pred_len);
  prompt.push_back(noised.frames[cfg.hist_len - 1]);
  for (int k = 0; k + 1 < cfg.pred_len; ++k) prompt.push_back(future[k]);
  const int dec = tape_decode(g, tape_embed_frames<T>(g, {prompt.data(), prompt.size()}, pn, cfg),
                              out.memory, pn, cfg, causal);
  out.prediction = tape_linear(g, dec, pn.w_out, pn.b_out);
  out.loss = g.mse(out.prediction, flatten_frames<T>(future, cfg.maxS));

  if (aux_denoise_loss) {
    const auto flags = frame_mask_flags(hist);
    bool any = false;
    for (auto f : flags) any = any || f;
    if (any) {
      const std::span<const Frame> clean_hist{clean.frames.data(), static_cast<std::size_t>(cfg.hist_len)};
      const int recon = tape_linear(g, out.memory, pn.w_out, pn.b_out);
      const int aux = g.mse(recon, flatten_frames<T>(clean_hist, cfg.maxS), flags);
      out.loss = g.add_scaled(out.loss, aux, T(1), T(1));
    }
  }
  return out;
}

// Compensation example on the tape: reconstruct a contiguous interior gap.
template <typename T>
int tape_compensation_loss(Graph<T>& g, const ParamNodeIds& pn, const Sample& clean, int gap_start,
                           int gap_len, const ModelConfig& cfg, const BoolMask* causal_gap) {
  const int n = static_cast<int>(clean.frames.size());
  if (gap_len < 1 || gap_start < 1 || gap_start + gap_len > n - 1)
    throw std::invalid_argument("compensation: gap must be interior");
  std::vector<Frame> masked = clean.frames;
  for (int k = gap_start; k < gap_start + gap_len; ++k) masked[k].masked = true;
  const int memory =
      tape_encode(g, tape_embed_frames<T>(g, {masked.data(), masked.size()}, pn, cfg), pn, cfg);

  std::vector<Frame> prompt(static_cast<std::size_t>(gap_len), Frame(cfg.maxS));
  for (int k = 0; k < gap_len; ++k) {
    prompt[k].mark = clean.frames[gap_start + k].mark;
    prompt[k].masked = true;
  }
  const int dec = tape_decode(g, tape_embed_frames<T>(g, {prompt.data(), prompt.size()}, pn, cfg), memory,
                              pn, cfg, causal_gap);
  const int recon = tape_linear(g, dec, pn.w_out, pn.b_out);
  const std::span<const Frame> gap_frames{clean.frames.data() + gap_start,
                                          static_cast<std::size_t>(gap_len)};
  return g.mse(recon, flatten_frames<T>(gap_frames, cfg.maxS));
}

}  // namespace vgt
