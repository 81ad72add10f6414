#include "dpol/schedule.hpp"

#include <cmath>

namespace dpol {

namespace {
double cosine_alpha_bar(double u, double s) {
  double c = std::cos(((u + s) / (1.0 + s)) * M_PI / 2.0);
  return c * c;
}
}  // namespace

NoiseSchedule make_cosine_schedule(int K, double s) {
  if (K < 2) throw std::invalid_argument("make_cosine_schedule: K must be >= 2");
  if (!(s > 0.0)) throw std::invalid_argument("make_cosine_schedule: s must be > 0");

  NoiseSchedule sc;
  sc.steps = K;
  sc.betas.resize(K);
  sc.alphas.resize(K);
  sc.alpha_bars.resize(K);
  sc.alpha_coeff.resize(K);
  sc.gamma_coeff.resize(K);
  sc.sigma_coeff.resize(K);

  const double f0 = cosine_alpha_bar(0.0, s);
  double prod = 1.0;
  for (int k = 0; k < K; ++k) {
    double ratio = cosine_alpha_bar(double(k + 1) / K, s) / cosine_alpha_bar(double(k) / K, s);
    double beta = std::min(1.0 - ratio, 0.999);
    sc.betas(k) = beta;
    sc.alphas(k) = 1.0 - beta;
    prod *= sc.alphas(k);
    sc.alpha_bars(k) = prod;
    (void)f0;
  }
  for (int k = 0; k < K; ++k) {
    const double ab = sc.alpha_bars(k);
    const double ab_prev = sc.alpha_bar_prev(k);
    sc.alpha_coeff(k) = 1.0 / std::sqrt(sc.alphas(k));
    sc.gamma_coeff(k) = sc.betas(k) / std::sqrt(1.0 - ab);
    sc.sigma_coeff(k) =
        k == 0 ? 0.0 : std::sqrt((1.0 - ab_prev) / (1.0 - ab) * sc.betas(k));
  }
  return sc;
}

std::vector<int> ddim_indices(int K, int steps) {
  if (steps < 1) throw std::invalid_argument("ddim_indices: steps must be >= 1");
  if (steps > K) throw std::invalid_argument("ddim_indices: steps must be <= K");
  std::vector<int> idx;
  idx.reserve(steps + 1);
  const int denom = std::max(steps - 1, 1);
  for (int j = 0; j < steps; ++j) {
    int k = int(std::lround(double(K - 1) * (1.0 - double(j) / denom)));
    if (idx.empty() || k != idx.back()) idx.push_back(k);
  }
  if (idx.back() != 0) idx.push_back(0);
  return idx;
}

}  // namespace dpol
