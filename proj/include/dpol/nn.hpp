#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpol/tape.hpp"

namespace dpol {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr int kMlpRatio = 4;

template <class S>
struct ParamStore {
  struct Entry {
    std::string name;
    Mat<S> value;
    Mat<S> grad;
    Mat<S> m, v;  // AdamW moments, allocated by the optimizer
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, int> index;

  int add(std::string name, Mat<S> value) {
    if (index.count(name)) throw std::logic_error("duplicate parameter: " + name);
    index.emplace(name, int(entries.size()));
    Entry e;
    e.name = std::move(name);
    e.value = std::move(value);
    e.grad = Mat<S>::Zero(e.value.rows(), e.value.cols());
    entries.push_back(std::move(e));
    return int(entries.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::logic_error("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return index.count(name) > 0; }
  Mat<S>& value(const std::string& name) { return entries[find(name)].value; }
  const Mat<S>& value(const std::string& name) const { return entries[find(name)].value; }

  size_t count() const {
    size_t n = 0;
    for (const auto& e : entries) n += size_t(e.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& e : entries) e.grad.setZero();
  }
};

// One forward evaluation: a tape plus the parameter leaves it touched.
template <class S>
struct NetCtx {
  using Var = typename Tape<S>::Var;

  Tape<S> tape;
  ParamStore<S>* store = nullptr;
  bool with_grad = true;
  bool train = false;
  Rng* rng = nullptr;

  Var P(const std::string& name) {
    int i = store->find(name);
    auto it = pvar_.find(i);
    if (it != pvar_.end()) return Var{it->second};
    Var v = tape.leaf(store->entries[i].value, with_grad);
    pvar_.emplace(i, v.id);
    touched_.push_back({i, v});
    return v;
  }

  Var C(Mat<S> m) { return tape.leaf(std::move(m), false); }

  // store.grad += scale * tape gradient, in parameter-registration order.
  void accumulate_grads(S scale) {
    std::sort(touched_.begin(), touched_.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [i, v] : touched_) store->entries[i].grad += scale * tape.grad(v);
  }

 private:
  std::unordered_map<int, int> pvar_;
  std::vector<std::pair<int, Var>> touched_;
};

// ---- initialization ----

template <class S>
Mat<S> xavier_uniform(int rows, int cols, Rng& rng) {
  double limit = std::sqrt(6.0 / double(rows + cols));
  return rand_uniform<S>(rows, cols, -limit, limit, rng);
}

template <class S>
void register_linear(ParamStore<S>& ps, const std::string& name, int in, int out,
                     Rng& rng, bool zero_init = false) {
  ps.add(name + ".w",
         zero_init ? Mat<S>::Zero(in, out).eval() : xavier_uniform<S>(in, out, rng));
  ps.add(name + ".b", Mat<S>::Zero(1, out));
}

template <class S>
typename Tape<S>::Var linear(NetCtx<S>& c, typename Tape<S>::Var x,
                             const std::string& name) {
  return c.tape.add_rowvec(c.tape.matmul(x, c.P(name + ".w")), c.P(name + ".b"));
}

template <class S>
void register_mlp(ParamStore<S>& ps, const std::string& name, int d, Rng& rng) {
  register_linear(ps, name + ".fc1", d, kMlpRatio * d, rng);
  register_linear(ps, name + ".fc2", kMlpRatio * d, d, rng);
}

template <class S>
typename Tape<S>::Var mlp(NetCtx<S>& c, typename Tape<S>::Var x,
                          const std::string& name) {
  return linear(c, c.tape.gelu(linear(c, x, name + ".fc1")), name + ".fc2");
}

template <class S>
void register_attention(ParamStore<S>& ps, const std::string& name, int d, Rng& rng) {
  register_linear(ps, name + ".q", d, d, rng);
  register_linear(ps, name + ".k", d, d, rng);
  register_linear(ps, name + ".v", d, d, rng);
  register_linear(ps, name + ".o", d, d, rng);
}

// Multi-head scaled dot-product attention; queries from q_in, keys/values from
// kv_in. mask, if given, is an additive (Tq x Tkv) matrix.
template <class S>
typename Tape<S>::Var attention(NetCtx<S>& c, typename Tape<S>::Var q_in,
                                typename Tape<S>::Var kv_in, const std::string& name,
                                int heads, const Mat<S>* mask = nullptr) {
  auto& t = c.tape;
  const int d = int(t.val(q_in).cols());
  if (d % heads != 0) throw std::logic_error("attention: width not divisible by heads");
  const int dh = d / heads;
  auto q = linear(c, q_in, name + ".q");
  auto k = linear(c, kv_in, name + ".k");
  auto v = linear(c, kv_in, name + ".v");
  std::vector<typename Tape<S>::Var> outs;
  outs.reserve(heads);
  const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
  for (int h = 0; h < heads; ++h) {
    auto qh = t.slice_cols(q, h * dh, dh);
    auto kh = t.slice_cols(k, h * dh, dh);
    auto vh = t.slice_cols(v, h * dh, dh);
    auto scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt);
    auto attn = t.softmax_rows(scores, mask);
    outs.push_back(t.matmul(attn, vh));
  }
  return linear(c, t.concat_cols(outs), name + ".o");
}

template <class S>
Mat<S> causal_mask(int n) {
  Mat<S> m = Mat<S>::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m(i, j) = S(-1e9);
  return m;
}

// ---- timestep embedding ----

// Half sines, half cosines over frequencies 10000^(-2i/d).
template <class S>
Mat<S> sinusoid_features(double k, int d) {
  if (d % 2 != 0) throw std::invalid_argument("sinusoid_features: d must be even");
  Mat<S> f(1, d);
  const int half = d / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -2.0 * i / double(d));
    f(0, i) = S(std::sin(k * freq));
    f(0, half + i) = S(std::cos(k * freq));
  }
  return f;
}

template <class S>
void register_timestep_mlp(ParamStore<S>& ps, const std::string& name, int d, Rng& rng) {
  register_linear(ps, name + ".fc1", d, d, rng);
  register_linear(ps, name + ".fc2", d, d, rng);
}

template <class S>
typename Tape<S>::Var timestep_embedding(NetCtx<S>& c, int k, int d,
                                         const std::string& name) {
  auto feats = c.C(sinusoid_features<S>(double(k), d));
  return linear(c, c.tape.gelu(linear(c, feats, name + ".fc1")), name + ".fc2");
}

// ---- FiLM ----

// Per-channel affine h * (1 + gamma) + beta; h is (pixels x channels).
template <class S>
typename Tape<S>::Var film(NetCtx<S>& c, typename Tape<S>::Var h,
                           typename Tape<S>::Var gamma, typename Tape<S>::Var beta) {
  auto& t = c.tape;
  if (t.val(h).cols() != t.val(gamma).cols() || t.val(h).cols() != t.val(beta).cols())
    throw std::invalid_argument("film: channel mismatch");
  auto ones = c.C(Mat<S>::Ones(1, t.val(h).cols()));
  return t.add_rowvec(t.mul_rowvec(h, t.add(ones, gamma)), beta);
}

// ---- adaLN modulation ----

template <class S>
struct Modulation {
  typename Tape<S>::Var shift1, scale1, gate1, shift2, scale2, gate2;
};

template <class S>
void register_modulation(ParamStore<S>& ps, const std::string& name, int d, Rng& rng,
                         bool zero_init) {
  register_linear(ps, name, d, 6 * d, rng, zero_init);
}

// Single dense layer mapping the conditioning vector to the six modulation
// vectors (pre-attention shift/scale/gate, pre-MLP shift/scale/gate).
template <class S>
Modulation<S> compute_modulation(NetCtx<S>& c, typename Tape<S>::Var cond,
                                 const std::string& name) {
  auto& t = c.tape;
  const int d = int(t.val(cond).cols());
  auto all = linear(c, cond, name);
  return {t.slice_cols(all, 0, d),     t.slice_cols(all, d, d),
          t.slice_cols(all, 2 * d, d), t.slice_cols(all, 3 * d, d),
          t.slice_cols(all, 4 * d, d), t.slice_cols(all, 5 * d, d)};
}

// x * (1 + scale) + shift, broadcast over tokens.
template <class S>
typename Tape<S>::Var modulate(NetCtx<S>& c, typename Tape<S>::Var x,
                               typename Tape<S>::Var shift, typename Tape<S>::Var scale) {
  auto& t = c.tape;
  auto ones = c.C(Mat<S>::Ones(1, t.val(x).cols()));
  return t.add_rowvec(t.mul_rowvec(x, t.add(ones, scale)), shift);
}

// ---- blocks ----

template <class S>
void register_dit_block(ParamStore<S>& ps, const std::string& name, int d, Rng& rng,
                        bool zero_init_mod) {
  register_modulation(ps, name + ".mod", d, rng, zero_init_mod);
  register_attention(ps, name + ".attn", d, rng);
  register_mlp(ps, name + ".mlp", d, rng);
}

// adaLN block: LN -> modulate -> self-attention -> gated residual,
// LN -> modulate -> MLP -> gated residual. Bidirectional self-attention.
template <class S>
typename Tape<S>::Var dit_block(NetCtx<S>& c, typename Tape<S>::Var x,
                                typename Tape<S>::Var cond, const std::string& name,
                                int heads) {
  auto& t = c.tape;
  auto m = compute_modulation(c, cond, name + ".mod");
  auto h = modulate(c, t.layernorm_rows(x, S(kLayerNormEps)), m.shift1, m.scale1);
  x = t.add(x, t.mul_rowvec(attention(c, h, h, name + ".attn", heads), m.gate1));
  auto h2 = modulate(c, t.layernorm_rows(x, S(kLayerNormEps)), m.shift2, m.scale2);
  x = t.add(x, t.mul_rowvec(mlp(c, h2, name + ".mlp"), m.gate2));
  return x;
}

template <class S>
void register_encoder_block(ParamStore<S>& ps, const std::string& name, int d, Rng& rng) {
  register_attention(ps, name + ".attn", d, rng);
  register_mlp(ps, name + ".mlp", d, rng);
}

// Plain pre-LN transformer block with ungated residuals.
template <class S>
typename Tape<S>::Var encoder_block(NetCtx<S>& c, typename Tape<S>::Var x,
                                    const std::string& name, int heads,
                                    const Mat<S>* mask = nullptr) {
  auto& t = c.tape;
  auto h = t.layernorm_rows(x, S(kLayerNormEps));
  x = t.add(x, attention(c, h, h, name + ".attn", heads, mask));
  x = t.add(x, mlp(c, t.layernorm_rows(x, S(kLayerNormEps)), name + ".mlp"));
  return x;
}

template <class S>
void register_cross_attn_block(ParamStore<S>& ps, const std::string& name, int d,
                               Rng& rng) {
  register_attention(ps, name + ".self", d, rng);
  register_attention(ps, name + ".cross", d, rng);
  register_mlp(ps, name + ".mlp", d, rng);
}

// Pre-LN self-attention, cross-attention into memory, MLP; ungated residuals.
template <class S>
typename Tape<S>::Var cross_attn_block(NetCtx<S>& c, typename Tape<S>::Var x,
                                       typename Tape<S>::Var memory,
                                       const std::string& name, int heads) {
  auto& t = c.tape;
  auto h = t.layernorm_rows(x, S(kLayerNormEps));
  x = t.add(x, attention(c, h, h, name + ".self", heads));
  auto hq = t.layernorm_rows(x, S(kLayerNormEps));
  auto hm = t.layernorm_rows(memory, S(kLayerNormEps));
  x = t.add(x, attention(c, hq, hm, name + ".cross", heads));
  x = t.add(x, mlp(c, t.layernorm_rows(x, S(kLayerNormEps)), name + ".mlp"));
  return x;
}

template <class S>
void register_in_context_block(ParamStore<S>& ps, const std::string& name, int d,
                               Rng& rng) {
  register_encoder_block(ps, name, d, rng);
}

// Causal self-attention block over a [memory ; x] concatenation; the caller
// reads out only the x positions afterwards.
template <class S>
typename Tape<S>::Var in_context_block(NetCtx<S>& c, typename Tape<S>::Var z,
                                       const std::string& name, int heads) {
  Mat<S> mask = causal_mask<S>(int(c.tape.val(z).rows()));
  return encoder_block(c, z, name, heads, &mask);
}

}  // namespace dpol
