#include <doctest.h>

#include "dpol/nn.hpp"

using namespace dpol;
using TapeD = Tape<double>;
using VarD = TapeD::Var;

namespace {

// Independent multi-head attention computed with plain loops.
MatD attention_oracle(const MatD& q_in, const MatD& kv_in, const ParamStore<double>& ps,
                      const std::string& name, int heads, const MatD* mask) {
  auto lin = [&](const MatD& x, const std::string& n) {
    MatD y = x * ps.value(n + ".w");
    y.rowwise() += ps.value(n + ".b").row(0);
    return y;
  };
  MatD q = lin(q_in, name + ".q"), k = lin(kv_in, name + ".k"), v = lin(kv_in, name + ".v");
  const int d = int(q.cols()), dh = d / heads;
  MatD concat(q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < q.rows(); ++i) {
      std::vector<double> s(k.rows());
      double mx = -1e300;
      for (int j = 0; j < k.rows(); ++j) {
        double dot = 0;
        for (int c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        s[j] = dot / std::sqrt(double(dh)) + (mask ? (*mask)(i, j) : 0.0);
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double& e : s) {
        e = std::exp(e - mx);
        z += e;
      }
      for (int c = 0; c < dh; ++c) {
        double acc = 0;
        for (int j = 0; j < k.rows(); ++j) acc += s[j] / z * v(j, h * dh + c);
        concat(i, h * dh + c) = acc;
      }
    }
  }
  return lin(concat, name + ".o");
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("sinusoid features at k=0") {
  MatD f = sinusoid_features<double>(0.0, 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(f(0, i) == 0.0);
    CHECK(f(0, 4 + i) == 1.0);
  }
  CHECK_THROWS_AS(sinusoid_features<double>(0.0, 7), std::invalid_argument);
}

TEST_CASE("sinusoid features match frozen table at k=50, d=8") {
  MatD f = sinusoid_features<double>(50.0, 8);
  const double want[8] = {-0.26237485370392877, -0.9589242746631385,
                          0.479425538604203,    0.04997916927067833,
                          0.9649660284921133,   0.28366218546322625,
                          0.8775825618903728,   0.9987502603949663};
  for (int i = 0; i < 8; ++i) CHECK(f(0, i) == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("timestep embeddings distinct over [0, K)") {
  std::vector<MatD> feats;
  for (int k = 0; k < 100; ++k) feats.push_back(sinusoid_features<double>(k, 16));
  for (int a = 0; a < 100; ++a)
    for (int b = a + 1; b < 100; ++b)
      CHECK((feats[a] - feats[b]).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("timestep embedding is a deterministic function of k") {
  ParamStore<double> ps;
  Rng rng(1);
  register_timestep_mlp(ps, "time", 16, rng);
  auto run = [&](int k) {
    NetCtx<double> c;
    c.store = &ps;
    return MatD(c.tape.val(timestep_embedding(c, k, 16, "time")));
  };
  CHECK((run(3).array() == run(3).array()).all());
  CHECK((run(3) - run(4)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("film identity, scaling, and hand-computed case") {
  NetCtx<double> c;
  Rng rng(2);
  MatD h = randn<double>(4, 3, rng);  // 2x2 spatial, 3 channels
  auto hv = c.C(h);
  auto zero = c.C(MatD::Zero(1, 3));
  CHECK((c.tape.val(film(c, hv, zero, zero)) - h).cwiseAbs().maxCoeff() == 0.0);

  auto ones = c.C(MatD::Ones(1, 3));
  CHECK((c.tape.val(film(c, hv, ones, zero)) - 2.0 * h).cwiseAbs().maxCoeff() < 1e-15);

  MatD gamma(1, 3), beta(1, 3);
  gamma << 0.5, -1.0, 0.0;
  beta << 1.0, 0.0, 2.0;
  MatD got = c.tape.val(film(c, hv, c.C(gamma), c.C(beta)));
  for (int p = 0; p < 4; ++p)
    for (int ch = 0; ch < 3; ++ch)
      CHECK(got(p, ch) ==
            doctest::Approx(h(p, ch) * (1.0 + gamma(0, ch)) + beta(0, ch)).epsilon(1e-14));

  auto bad = c.C(MatD::Zero(1, 2));
  CHECK_THROWS_AS(film(c, hv, bad, bad), std::invalid_argument);
}

TEST_CASE("modulation zero-init and linearity contracts") {
  const int d = 6;
  ParamStore<double> ps;
  Rng rng(3);
  register_modulation(ps, "mod", d, rng, /*zero_init=*/true);
  NetCtx<double> c;
  c.store = &ps;
  auto cond = c.C(randn<double>(1, d, rng));
  auto m = compute_modulation(c, cond, "mod");
  CHECK(c.tape.val(m.gate1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(c.tape.val(m.gate2).cwiseAbs().maxCoeff() == 0.0);

  ParamStore<double> ps2;
  register_modulation(ps2, "mod", d, rng, false);
  NetCtx<double> c2;
  c2.store = &ps2;
  auto m2 = compute_modulation(c2, c2.C(MatD::Zero(1, d)), "mod");
  CHECK(c2.tape.val(m2.shift1).cwiseAbs().maxCoeff() == 0.0);  // zero bias, zero cond
  CHECK(c2.tape.val(m2.gate2).cwiseAbs().maxCoeff() == 0.0);

  // independent matrix-vector product
  MatD cv = randn<double>(1, d, rng);
  NetCtx<double> c3;
  c3.store = &ps2;
  auto m3 = compute_modulation(c3, c3.C(cv), "mod");
  MatD all = cv * ps2.value("mod.w");
  CHECK((c3.tape.val(m3.scale2) - all.middleCols(4 * d, d)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("dit_block is bitwise identity at zero init") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(4);
  register_dit_block(ps, "blk", d, rng, /*zero_init_mod=*/true);
  NetCtx<double> c;
  c.store = &ps;
  MatD x = randn<double>(5, d, rng);
  auto out = dit_block(c, c.C(x), c.C(randn<double>(1, d, rng)), "blk", heads);
  CHECK((c.tape.val(out).array() == x.array()).all());
}

TEST_CASE("dit_block with unit gates reduces to a plain pre-LN block") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(5);
  register_dit_block(ps, "blk", d, rng, true);
  register_encoder_block(ps, "ref", d, rng);
  // share attention and MLP weights
  for (const char* part : {".q.w", ".q.b", ".k.w", ".k.b", ".v.w", ".v.b", ".o.w", ".o.b"})
    ps.value(std::string("blk.attn") + part) = ps.value(std::string("ref.attn") + part);
  for (const char* part : {".fc1.w", ".fc1.b", ".fc2.w", ".fc2.b"})
    ps.value(std::string("blk.mlp") + part) = ps.value(std::string("ref.mlp") + part);
  // bias picks gate1 = gate2 = 1, shifts/scales = 0
  MatD& b = ps.value("blk.mod.b");
  b.setZero();
  b.middleCols(2 * d, d).setOnes();
  b.middleCols(5 * d, d).setOnes();

  MatD x = randn<double>(4, d, rng);
  NetCtx<double> c1;
  c1.store = &ps;
  auto y1 = dit_block(c1, c1.C(x), c1.C(randn<double>(1, d, rng)), "blk", heads);
  NetCtx<double> c2;
  c2.store = &ps;
  auto y2 = encoder_block(c2, c2.C(x), "ref", heads);
  CHECK((c1.tape.val(y1) - c2.tape.val(y2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dit_block permutation equivariance") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(6);
  register_dit_block(ps, "blk", d, rng, false);
  MatD x = randn<double>(5, d, rng);
  MatD cond = randn<double>(1, d, rng);
  std::vector<int> perm{3, 0, 4, 1, 2};
  MatD xp(5, d);
  for (int i = 0; i < 5; ++i) xp.row(i) = x.row(perm[i]);

  NetCtx<double> c1;
  c1.store = &ps;
  MatD y = c1.tape.val(dit_block(c1, c1.C(x), c1.C(cond), "blk", heads));
  NetCtx<double> c2;
  c2.store = &ps;
  MatD yp = c2.tape.val(dit_block(c2, c2.C(xp), c2.C(cond), "blk", heads));
  for (int i = 0; i < 5; ++i)
    CHECK((yp.row(i) - y.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gate deviation is first-order linear near zero") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(7);
  register_dit_block(ps, "blk", d, rng, true);
  MatD x = randn<double>(4, d, rng);
  MatD cond = randn<double>(1, d, rng);
  auto dev_at = [&](double g) {
    MatD& b = ps.value("blk.mod.b");
    b.setZero();
    b.middleCols(2 * d, d).setConstant(g);
    b.middleCols(5 * d, d).setConstant(g);
    NetCtx<double> c;
    c.store = &ps;
    return (c.tape.val(dit_block(c, c.C(x), c.C(cond), "blk", heads)) - x)
        .cwiseAbs()
        .maxCoeff();
  };
  double d1 = dev_at(1e-4), d2 = dev_at(2e-4);
  CHECK(d2 / d1 == doctest::Approx(2.0).epsilon(0.01));
}

TEST_CASE("attention matches loop oracle") {
  const int d = 8;
  ParamStore<double> ps;
  Rng rng(8);
  register_attention(ps, "attn", d, rng);
  MatD q_in = randn<double>(3, d, rng), kv_in = randn<double>(5, d, rng);
  for (int heads : {1, 2}) {
    NetCtx<double> c;
    c.store = &ps;
    MatD got = c.tape.val(attention(c, c.C(q_in), c.C(kv_in), "attn", heads));
    MatD want = attention_oracle(q_in, kv_in, ps, "attn", heads, nullptr);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("cross_attn_block with zeroed output projections is identity") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(9);
  register_cross_attn_block(ps, "blk", d, rng);
  ps.value("blk.self.o.w").setZero();
  ps.value("blk.cross.o.w").setZero();
  ps.value("blk.mlp.fc2.w").setZero();
  NetCtx<double> c;
  c.store = &ps;
  MatD x = randn<double>(4, d, rng);
  MatD mem = MatD::Zero(1, d);
  auto out = cross_attn_block(c, c.C(x), c.C(mem), "blk", heads);
  CHECK((c.tape.val(out) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("cross attention over identical memory rows returns their value") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(10);
  register_attention(ps, "attn", d, rng);
  MatD row = randn<double>(1, d, rng);
  MatD mem(6, d);
  for (int i = 0; i < 6; ++i) mem.row(i) = row;  // convex weights must sum to 1
  MatD q_in = randn<double>(1, d, rng);
  NetCtx<double> c;
  c.store = &ps;
  MatD got = c.tape.val(attention(c, c.C(q_in), c.C(mem), "attn", heads));
  MatD v = row * ps.value("attn.v.w");
  v.rowwise() += ps.value("attn.v.b").row(0);
  MatD want = v * ps.value("attn.o.w");
  want.rowwise() += ps.value("attn.o.b").row(0);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("in_context_block causality") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(11);
  register_in_context_block(ps, "blk", d, rng);
  MatD z = randn<double>(6, d, rng);
  NetCtx<double> c1;
  c1.store = &ps;
  MatD y = c1.tape.val(in_context_block(c1, c1.C(z), "blk", heads));
  MatD z2 = z;
  z2.row(5).setConstant(3.0);  // perturb the last position only
  NetCtx<double> c2;
  c2.store = &ps;
  MatD y2 = c2.tape.val(in_context_block(c2, c2.C(z2), "blk", heads));
  CHECK((y2.topRows(5) - y.topRows(5)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((y2.row(5) - y.row(5)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("in_context_block matches masked attention oracle") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(12);
  register_in_context_block(ps, "blk", d, rng);
  MatD z = randn<double>(4, d, rng);
  NetCtx<double> c;
  c.store = &ps;
  MatD got = c.tape.val(in_context_block(c, c.C(z), "blk", heads));

  // reference: pre-LN block with causal mask computed by hand
  auto ln = [](const MatD& x) {
    MatD y = x;
    for (int i = 0; i < x.rows(); ++i) {
      double mu = x.row(i).mean();
      double var = (x.row(i).array() - mu).square().mean();
      y.row(i) = (x.row(i).array() - mu) / std::sqrt(var + kLayerNormEps);
    }
    return y;
  };
  MatD mask = causal_mask<double>(4);
  MatD h = ln(z);
  MatD x1 = z + attention_oracle(h, h, ps, "blk.attn", heads, &mask);
  MatD h2 = ln(x1);
  MatD fc1 = h2 * ps.value("blk.mlp.fc1.w");
  fc1.rowwise() += ps.value("blk.mlp.fc1.b").row(0);
  MatD act = fc1.unaryExpr([](double u) {
    return 0.5 * u * (1.0 + std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u)));
  });
  MatD fc2 = act * ps.value("blk.mlp.fc2.w");
  fc2.rowwise() += ps.value("blk.mlp.fc2.b").row(0);
  MatD want = x1 + fc2;
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("blocks stay finite for inputs up to magnitude 10") {
  const int d = 8, heads = 2;
  ParamStore<double> ps;
  Rng rng(13);
  register_dit_block(ps, "dit", d, rng, false);
  register_cross_attn_block(ps, "cross", d, rng);
  register_in_context_block(ps, "ic", d, rng);
  MatD x = 10.0 * MatD::Ones(4, d);
  x.row(1).setConstant(-10.0);
  MatD mem = 10.0 * randn<double>(3, d, rng).cwiseMin(1.0).cwiseMax(-1.0);
  NetCtx<double> c;
  c.store = &ps;
  CHECK(c.tape.val(dit_block(c, c.C(x), c.C(mem.row(0)), "dit", heads)).allFinite());
  CHECK(c.tape.val(cross_attn_block(c, c.C(x), c.C(mem), "cross", heads)).allFinite());
  CHECK(c.tape.val(in_context_block(c, c.C(x), "ic", heads)).allFinite());
}

}  // TEST_SUITE
