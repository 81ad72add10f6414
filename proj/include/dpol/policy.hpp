#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dpol/nn.hpp"
#include "dpol/types.hpp"

namespace dpol {

enum class Variant { adaln_zero, adaln, cross_attn, in_context };
enum class TokenizerKind { residual, stem };
enum class HeadKind { diffusion, regression };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::adaln_zero: return "adaln_zero";
    case Variant::adaln: return "adaln";
    case Variant::cross_attn: return "cross_attn";
    case Variant::in_context: return "in_context";
  }
  return "?";
}
inline std::string to_string(TokenizerKind t) {
  return t == TokenizerKind::residual ? "residual" : "stem";
}
inline std::string to_string(HeadKind h) {
  return h == HeadKind::diffusion ? "diffusion" : "regression";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "adaln_zero") return Variant::adaln_zero;
  if (s == "adaln") return Variant::adaln;
  if (s == "cross_attn") return Variant::cross_attn;
  if (s == "in_context") return Variant::in_context;
  throw std::invalid_argument("unknown variant: " + s);
}
inline TokenizerKind tokenizer_from_string(const std::string& s) {
  if (s == "residual") return TokenizerKind::residual;
  if (s == "stem") return TokenizerKind::stem;
  throw std::invalid_argument("unknown tokenizer: " + s);
}
inline HeadKind head_from_string(const std::string& s) {
  if (s == "diffusion") return HeadKind::diffusion;
  if (s == "regression") return HeadKind::regression;
  throw std::invalid_argument("unknown head: " + s);
}

struct PolicyConfig {
  int layers = 2;
  int width = 64;
  int heads = 4;
  int horizon = 8;
  int action_dim = 2;
  int cameras = 2;
  int image_size = 32;
  int base_channels = 8;
  int proprio_dim = 2;
  int goal_vocab = 2;
  int goal_embed = 16;
  double p_drop = 0.2;
  int diffusion_steps = 100;
  Variant variant = Variant::adaln_zero;
  TokenizerKind tokenizer = TokenizerKind::residual;
  HeadKind head = HeadKind::diffusion;

  // Output side length of a stride-2, kernel-3, pad-1 convolution.
  static int halve(int n) { return (n - 1) / 2 + 1; }
  // Three stride-2 stages.
  int grid_size() const { return halve(halve(halve(image_size))); }
  int tokens_per_image() const { return grid_size() * grid_size(); }
  int obs_tokens() const { return cameras * tokens_per_image() + 1; }

  void validate() const {
    if (layers < 1) throw std::invalid_argument("config: layers must be >= 1");
    if (width < 2 || width % 2 != 0)
      throw std::invalid_argument("config: width must be even and >= 2");
    if (heads < 1 || width % heads != 0)
      throw std::invalid_argument("config: width must be divisible by heads");
    if (horizon < 1) throw std::invalid_argument("config: horizon must be >= 1");
    if (action_dim < 1) throw std::invalid_argument("config: action_dim must be >= 1");
    if (cameras < 1) throw std::invalid_argument("config: cameras must be >= 1");
    if (image_size < 4) throw std::invalid_argument("config: image_size must be >= 4");
    if (base_channels < 1) throw std::invalid_argument("config: base_channels must be >= 1");
    if (proprio_dim < 1) throw std::invalid_argument("config: proprio_dim must be >= 1");
    if (goal_vocab < 1) throw std::invalid_argument("config: goal_vocab must be >= 1");
    if (goal_embed < 1) throw std::invalid_argument("config: goal_embed must be >= 1");
    if (p_drop < 0.0 || p_drop > 1.0)
      throw std::invalid_argument("config: p_drop must be in [0,1]");
    if (diffusion_steps < 2)
      throw std::invalid_argument("config: diffusion_steps must be >= 2");
  }
};

// ---- convolution on im2col patches ----

template <class S>
void register_conv(ParamStore<S>& ps, const std::string& name, int in_ch, int out_ch,
                   int k, Rng& rng) {
  ps.add(name + ".w", xavier_uniform<S>(in_ch * k * k, out_ch, rng));
  ps.add(name + ".b", Mat<S>::Zero(1, out_ch));
}

template <class S>
typename Tape<S>::Var conv(NetCtx<S>& c, typename Tape<S>::Var x, const std::string& name,
                           typename Tape<S>::ConvGeom geo) {
  auto cols = c.tape.im2col(x, geo);
  return c.tape.add_rowvec(c.tape.matmul(cols, c.P(name + ".w")), c.P(name + ".b"));
}

// ---- the eps_theta network ----

template <class S>
struct PolicyNet {
  using Var = typename Tape<S>::Var;
  using Geom = typename Tape<S>::ConvGeom;

  PolicyConfig cfg;
  ParamStore<S> params;
  NormStats stats;

  static PolicyNet init(const PolicyConfig& cfg, uint64_t seed) {
    cfg.validate();
    PolicyNet net;
    net.cfg = cfg;
    Rng rng(seed);
    auto& ps = net.params;
    const int d = cfg.width;
    const int c1 = cfg.base_channels, c2 = 2 * c1, c3 = 4 * c1;
    const bool zero = cfg.variant == Variant::adaln_zero;

    for (int i = 0; i < cfg.cameras; ++i) {
      const std::string cam = "cam" + std::to_string(i);
      if (cfg.tokenizer == TokenizerKind::residual) {
        register_conv(ps, cam + ".stem", 3, c1, 3, rng);
        register_linear(ps, cam + ".film0", cfg.goal_embed, 2 * c1, rng);
        register_conv(ps, cam + ".s1.conv1", c1, c2, 3, rng);
        register_conv(ps, cam + ".s1.conv2", c2, c2, 3, rng);
        register_conv(ps, cam + ".s1.skip", c1, c2, 1, rng);
        register_linear(ps, cam + ".film1", cfg.goal_embed, 2 * c2, rng);
        register_conv(ps, cam + ".s2.conv1", c2, c3, 3, rng);
        register_conv(ps, cam + ".s2.conv2", c3, c3, 3, rng);
        register_conv(ps, cam + ".s2.skip", c2, c3, 1, rng);
        register_linear(ps, cam + ".film2", cfg.goal_embed, 2 * c3, rng);
      } else {
        register_conv(ps, cam + ".t1", 3, c1, 3, rng);
        register_linear(ps, cam + ".film0", cfg.goal_embed, 2 * c1, rng);
        register_conv(ps, cam + ".t2", c1, c2, 3, rng);
        register_linear(ps, cam + ".film1", cfg.goal_embed, 2 * c2, rng);
        register_conv(ps, cam + ".t3", c2, c3, 3, rng);
        register_linear(ps, cam + ".film2", cfg.goal_embed, 2 * c3, rng);
      }
      register_linear(ps, cam + ".proj", c3, d, rng);
    }
    ps.add("goal.embed", xavier_uniform<S>(cfg.goal_vocab, cfg.goal_embed, rng));
    register_linear(ps, "proprio.proj", cfg.proprio_dim, d, rng);
    ps.add("pos.obs", Mat<S>(S(0.02) * randn<S>(cfg.obs_tokens(), d, rng)));
    for (int l = 0; l < cfg.layers; ++l)
      register_encoder_block(ps, "enc" + std::to_string(l), d, rng);

    if (cfg.head == HeadKind::diffusion) {
      register_timestep_mlp(ps, "time", d, rng);
      register_linear(ps, "act_in", cfg.action_dim, d, rng);
      ps.add("pos.act", Mat<S>(S(0.02) * randn<S>(cfg.horizon, d, rng)));
      for (int l = 0; l < cfg.layers; ++l) {
        const std::string dec = "dec" + std::to_string(l);
        switch (cfg.variant) {
          case Variant::adaln_zero:
          case Variant::adaln:
            register_dit_block(ps, dec, d, rng, zero);
            break;
          case Variant::cross_attn:
            register_cross_attn_block(ps, dec, d, rng);
            break;
          case Variant::in_context:
            register_in_context_block(ps, dec, d, rng);
            break;
        }
      }
      if (cfg.variant == Variant::in_context)
        ps.add("pos.mem", Mat<S>(S(0.02) * randn<S>(1, d, rng)));
      if (cfg.variant == Variant::adaln_zero || cfg.variant == Variant::adaln) {
        register_linear(ps, "head.mod", d, 2 * d, rng, zero);
        register_linear(ps, "head.out", d, cfg.action_dim, rng, zero);
      } else {
        register_linear(ps, "head.out", d, cfg.action_dim, rng);
      }
    } else {
      register_linear(ps, "reg.fc1", d, kMlpRatio * d, rng);
      register_linear(ps, "reg.fc2", kMlpRatio * d, cfg.horizon * cfg.action_dim, rng);
    }
    return net;
  }

  NetCtx<S> make_ctx(bool with_grad, bool train = false, Rng* rng = nullptr) {
    NetCtx<S> c;
    c.store = &params;
    c.with_grad = with_grad;
    c.train = train;
    c.rng = rng;
    return c;
  }

  // Per-camera CNN with goal FiLM, proprio token with per-dimension dropout,
  // learned positional encodings. `cams`, if given, restricts which cameras
  // contribute tokens (the masking hook used by the camera-separation check).
  Var tokenize(NetCtx<S>& c, const Observation& obs, int goal_id,
               const std::vector<int>* cams = nullptr) {
    check_observation(obs, goal_id);
    auto& t = c.tape;
    const int d = cfg.width;
    const int c1 = cfg.base_channels, c2 = 2 * c1, c3 = 4 * c1;
    const int n = cfg.image_size;

    auto ge = t.slice_rows(c.P("goal.embed"), goal_id, 1);
    auto apply_film = [&](Var h, const std::string& name, int ch) {
      auto gb = linear(c, ge, name);
      return film(c, h, t.slice_cols(gb, 0, ch), t.slice_cols(gb, ch, ch));
    };

    std::vector<int> all;
    if (!cams) {
      all.resize(cfg.cameras);
      for (int i = 0; i < cfg.cameras; ++i) all[i] = i;
    }
    const std::vector<int>& use = cams ? *cams : all;

    std::vector<Var> parts;
    for (int i : use) {
      if (i < 0 || i >= cfg.cameras)
        throw std::invalid_argument("tokenize: camera index out of range");
      const std::string cam = "cam" + std::to_string(i);
      Var h = c.C(obs.images[size_t(i)].template cast<S>());
      const int n1 = PolicyConfig::halve(n), n2 = PolicyConfig::halve(n1);
      if (cfg.tokenizer == TokenizerKind::residual) {
        h = t.gelu(conv(c, h, cam + ".stem", Geom{n, n, 3, 3, 2, 1}));
        h = apply_film(h, cam + ".film0", c1);
        h = residual_stage(c, h, cam + ".s1", n1, c1, c2);
        h = apply_film(h, cam + ".film1", c2);
        h = residual_stage(c, h, cam + ".s2", n2, c2, c3);
        h = apply_film(h, cam + ".film2", c3);
      } else {
        h = t.gelu(conv(c, h, cam + ".t1", Geom{n, n, 3, 3, 2, 1}));
        h = apply_film(h, cam + ".film0", c1);
        h = t.gelu(conv(c, h, cam + ".t2", Geom{n1, n1, c1, 3, 2, 1}));
        h = apply_film(h, cam + ".film1", c2);
        h = t.gelu(conv(c, h, cam + ".t3", Geom{n2, n2, c2, 3, 2, 1}));
        h = apply_film(h, cam + ".film2", c3);
      }
      parts.push_back(linear(c, h, cam + ".proj"));
    }

    VecD pn = stats.normalize_proprio(obs.proprio);
    Mat<S> pm(1, cfg.proprio_dim);
    for (int j = 0; j < cfg.proprio_dim; ++j) pm(0, j) = S(pn(j));
    Var p = c.C(std::move(pm));
    if (c.train && cfg.p_drop > 0.0) {
      if (!c.rng) throw std::invalid_argument("tokenize: train_mode requires an rng");
      std::bernoulli_distribution drop(cfg.p_drop);
      Mat<S> keep(1, cfg.proprio_dim);
      for (int j = 0; j < cfg.proprio_dim; ++j) keep(0, j) = drop(*c.rng) ? S(0) : S(1);
      p = t.mul_const(p, std::move(keep));
    }
    parts.push_back(linear(c, p, "proprio.proj"));

    Var tokens = t.concat_rows(parts);
    Var pos;
    if (use.size() == size_t(cfg.cameras)) {
      pos = c.P("pos.obs");
    } else {
      std::vector<Var> slices;
      const int tpi = cfg.tokens_per_image();
      for (int i : use) slices.push_back(t.slice_rows(c.P("pos.obs"), i * tpi, tpi));
      slices.push_back(t.slice_rows(c.P("pos.obs"), cfg.cameras * tpi, 1));
      pos = t.concat_rows(slices);
    }
    return t.add(tokens, pos);
  }

  // L pre-LN self-attention layers; the output of layer l is recorded. The
  // optional additive mask is a grouping hook and defaults to none.
  std::vector<Var> encode(NetCtx<S>& c, Var tokens, const Mat<S>* mask = nullptr) {
    std::vector<Var> e;
    e.reserve(cfg.layers);
    Var x = tokens;
    for (int l = 0; l < cfg.layers; ++l) {
      x = encoder_block(c, x, "enc" + std::to_string(l), cfg.heads, mask);
      e.push_back(x);
    }
    return e;
  }

  // Decoder over noised action-chunk tokens; layer i is conditioned on
  // tokenmean(e_i) + timestep embedding.
  Var decode_eps(NetCtx<S>& c, const std::vector<Var>& e, const Mat<S>& x_k, int k) {
    if (cfg.head != HeadKind::diffusion)
      throw std::logic_error("decode_eps: regression-head policy");
    if (k < 0 || k >= cfg.diffusion_steps)
      throw std::invalid_argument("decode_eps: step index out of range");
    if (x_k.rows() != cfg.horizon || x_k.cols() != cfg.action_dim)
      throw std::invalid_argument("decode_eps: action chunk shape mismatch");
    if (!x_k.allFinite()) throw std::invalid_argument("decode_eps: non-finite input");
    auto& t = c.tape;
    const int d = cfg.width;

    Var temb = timestep_embedding(c, k, d, "time");
    Var x = t.add(linear(c, c.C(Mat<S>(x_k)), "act_in"), c.P("pos.act"));
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string dec = "dec" + std::to_string(l);
      switch (cfg.variant) {
        case Variant::adaln_zero:
        case Variant::adaln: {
          Var cond = t.add(t.mean_rows(e[size_t(l)]), temb);
          x = dit_block(c, x, cond, dec, cfg.heads);
          break;
        }
        case Variant::cross_attn: {
          Var mem = t.concat_rows({temb, e[size_t(l)]});
          x = cross_attn_block(c, x, mem, dec, cfg.heads);
          break;
        }
        case Variant::in_context: {
          Var mem = t.add_rowvec(t.concat_rows({temb, e[size_t(l)]}), c.P("pos.mem"));
          const Eigen::Index m = t.val(mem).rows();
          Var z = t.concat_rows({mem, x});
          z = in_context_block(c, z, dec, cfg.heads);
          x = t.slice_rows(z, m, cfg.horizon);
          break;
        }
      }
    }
    if (cfg.variant == Variant::adaln_zero || cfg.variant == Variant::adaln) {
      Var cond = t.add(t.mean_rows(e.back()), temb);
      Var mm = linear(c, cond, "head.mod");
      Var h = modulate(c, t.layernorm_rows(x, S(kLayerNormEps)), t.slice_cols(mm, 0, d),
                       t.slice_cols(mm, d, d));
      return linear(c, h, "head.out");
    }
    return linear(c, t.layernorm_rows(x, S(kLayerNormEps)), "head.out");
  }

  // Regression baseline: pooled top-layer embedding -> MLP -> flat H*A chunk.
  Var regress(NetCtx<S>& c, const std::vector<Var>& e) {
    if (cfg.head != HeadKind::regression)
      throw std::logic_error("regress: diffusion-head policy");
    auto& t = c.tape;
    Var h = t.gelu(linear(c, t.mean_rows(e.back()), "reg.fc1"));
    return linear(c, h, "reg.fc2");
  }

  Var build_eps(NetCtx<S>& c, const Mat<S>& x_k, int k, const Observation& obs,
                int goal_id, const std::vector<int>* cams = nullptr) {
    auto e = encode(c, tokenize(c, obs, goal_id, cams));
    return decode_eps(c, e, x_k, k);
  }

  Mat<S> predict_epsilon(const Mat<S>& x_k, int k, const Observation& obs, int goal_id,
                         bool train = false, Rng* rng = nullptr) {
    NetCtx<S> c = make_ctx(false, train, rng);
    return c.tape.val(build_eps(c, x_k, k, obs, goal_id));
  }

  Mat<S> predict_chunk_regression(const Observation& obs, int goal_id) {
    NetCtx<S> c = make_ctx(false);
    Var flat = regress(c, encode(c, tokenize(c, obs, goal_id)));
    const Mat<S>& v = c.tape.val(flat);
    Mat<S> chunk(cfg.horizon, cfg.action_dim);
    for (int r = 0; r < cfg.horizon; ++r)
      for (int j = 0; j < cfg.action_dim; ++j) chunk(r, j) = v(0, r * cfg.action_dim + j);
    return chunk;
  }

  // Observation tokens do not depend on x_k, so samplers reuse one encoder
  // evaluation across all denoising steps.
  struct Encoded {
    std::unique_ptr<NetCtx<S>> ctx;
    std::vector<Var> e;
  };

  Encoded encode_observation(const Observation& obs, int goal_id) {
    Encoded enc;
    enc.ctx = std::make_unique<NetCtx<S>>(make_ctx(false));
    enc.e = encode(*enc.ctx, tokenize(*enc.ctx, obs, goal_id));
    return enc;
  }

  Mat<S> predict_epsilon_cached(Encoded& enc, const Mat<S>& x_k, int k) {
    return enc.ctx->tape.val(decode_eps(*enc.ctx, enc.e, x_k, k));
  }

 private:
  Var residual_stage(NetCtx<S>& c, Var h, const std::string& name, int in_size,
                     int in_ch, int out_ch) {
    auto& t = c.tape;
    const int half = PolicyConfig::halve(in_size);
    Geom g1{in_size, in_size, in_ch, 3, 2, 1};
    Geom g2{half, half, out_ch, 3, 1, 1};
    Geom gs{in_size, in_size, in_ch, 1, 2, 0};
    Var y = conv(c, t.gelu(conv(c, h, name + ".conv1", g1)), name + ".conv2", g2);
    Var skip = conv(c, h, name + ".skip", gs);
    return t.gelu(t.add(skip, y));
  }

  void check_observation(const Observation& obs, int goal_id) const {
    if (int(obs.images.size()) != cfg.cameras)
      throw std::invalid_argument("tokenize: camera count mismatch");
    const Eigen::Index px = Eigen::Index(cfg.image_size) * cfg.image_size;
    for (const auto& img : obs.images)
      if (img.rows() != px || img.cols() != 3)
        throw std::invalid_argument("tokenize: image shape mismatch");
    if (obs.proprio.size() != cfg.proprio_dim)
      throw std::invalid_argument("tokenize: proprio dimension mismatch");
    if (!obs.proprio.allFinite())
      throw std::invalid_argument("tokenize: non-finite proprio");
    if (goal_id < 0 || goal_id >= cfg.goal_vocab)
      throw std::invalid_argument("tokenize: goal id out of range");
  }
};

}  // namespace dpol
