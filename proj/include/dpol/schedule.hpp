#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "dpol/tensor.hpp"

namespace dpol {

// Precomputed DDPM coefficients. All schedule math is double precision;
// immutable after construction.
struct NoiseSchedule {
  int steps = 0;  // K
  VecD betas;
  VecD alphas;
  VecD alpha_bars;
  // Per-step reverse-process coefficients. alpha_coeff[k] = 1/sqrt(alphas[k]),
  // gamma_coeff[k] = betas[k]/sqrt(1 - alpha_bars[k]), sigma_coeff[k] is the
  // posterior standard deviation.
  VecD alpha_coeff;
  VecD gamma_coeff;
  VecD sigma_coeff;

  double alpha_bar_prev(int k) const { return k >= 1 ? alpha_bars(k - 1) : 1.0; }
};

// Cosine schedule; betas clipped to <= 0.999.
NoiseSchedule make_cosine_schedule(int K, double s = 0.008);

// Evenly spaced decreasing index subsequence of length `steps`, from K-1 to 0
// with both endpoints included.
std::vector<int> ddim_indices(int K, int steps);

struct SampleOptions {
  bool clip_x0 = true;  // clip the predicted clean chunk to [lo, hi]
  double clip_lo = -1.0;
  double clip_hi = 1.0;
};

template <class S>
struct DiffusionState {
  Mat<S> x;
  int k = 0;
};

template <class S>
Mat<S> forward_noise(const Mat<S>& a0, int k, const Mat<S>& eps,
                     const NoiseSchedule& sched) {
  if (k < 0 || k >= sched.steps) throw std::invalid_argument("forward_noise: bad step");
  if (a0.rows() != eps.rows() || a0.cols() != eps.cols())
    throw std::invalid_argument("forward_noise: shape mismatch");
  const S sa = S(std::sqrt(sched.alpha_bars(k)));
  const S sb = S(std::sqrt(1.0 - sched.alpha_bars(k)));
  return sa * a0 + sb * eps;
}

template <class S>
Mat<S> predict_x0(const Mat<S>& x, int k, const Mat<S>& eps_hat,
                  const NoiseSchedule& sched, const SampleOptions& opt = {}) {
  const S sa = S(std::sqrt(sched.alpha_bars(k)));
  const S sb = S(std::sqrt(1.0 - sched.alpha_bars(k)));
  Mat<S> x0 = (x - sb * eps_hat) / sa;
  if (opt.clip_x0)
    x0 = x0.cwiseMax(S(opt.clip_lo)).cwiseMin(S(opt.clip_hi));
  return x0;
}

// One ancestral DDPM step k -> k-1. Written in the predicted-x0 form, which is
// algebraically the textbook alpha*(x - gamma*eps) posterior mean when sigma is
// the posterior std, and degenerates to the deterministic DDIM update when the
// schedule's sigma_coeff is forced to zero.
template <class S>
DiffusionState<S> ddpm_step(const DiffusionState<S>& state, const Mat<S>& eps_hat,
                            const NoiseSchedule& sched, const Mat<S>& noise) {
  if (state.k < 1) throw std::invalid_argument("ddpm_step: k must be >= 1");
  const int k = state.k;
  const double ab = sched.alpha_bars(k);
  const double ab_prev = sched.alpha_bar_prev(k);
  const double sigma = sched.sigma_coeff(k);
  const S sa = S(std::sqrt(ab));
  const S sb = S(std::sqrt(1.0 - ab));
  Mat<S> x0 = (state.x - sb * eps_hat) / sa;
  const S dir = S(std::sqrt(std::max(1.0 - ab_prev - sigma * sigma, 0.0)));
  Mat<S> x_prev = S(std::sqrt(ab_prev)) * x0 + dir * eps_hat + S(sigma) * noise;
  return {std::move(x_prev), k - 1};
}

// Deterministic (eta = 0) DDIM update k -> k_prev.
template <class S>
DiffusionState<S> ddim_step(const DiffusionState<S>& state, const Mat<S>& eps_hat,
                            int k_prev, const NoiseSchedule& sched,
                            const SampleOptions& opt = {}) {
  if (k_prev < 0 || k_prev >= state.k)
    throw std::invalid_argument("ddim_step: need 0 <= k_prev < k");
  Mat<S> x0 = predict_x0(state.x, state.k, eps_hat, sched, opt);
  const S sa = S(std::sqrt(sched.alpha_bars(k_prev)));
  const S sb = S(std::sqrt(1.0 - sched.alpha_bars(k_prev)));
  return {sa * x0 + sb * eps_hat, k_prev};
}

// Full DDIM chain: Gaussian initial draw from `seed`, then `steps` evenly
// spaced indices down to 0. eps_fn(x, k) is the noise prediction.
template <class S>
Mat<S> ddim_sample(const std::function<Mat<S>(const Mat<S>&, int)>& eps_fn,
                   const NoiseSchedule& sched, int steps, uint64_t seed,
                   Eigen::Index rows, Eigen::Index cols,
                   const SampleOptions& opt = {}) {
  std::vector<int> idx = ddim_indices(sched.steps, steps);
  Rng rng(seed);
  DiffusionState<S> st{randn<S>(rows, cols, rng), idx[0]};
  for (size_t j = 1; j < idx.size(); ++j)
    st = ddim_step<S>(st, eps_fn(st.x, st.k), idx[j], sched, opt);
  return st.x;
}

}  // namespace dpol
