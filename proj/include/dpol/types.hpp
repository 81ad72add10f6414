#pragma once

#include <stdexcept>
#include <vector>

#include "dpol/tensor.hpp"

namespace dpol {

// Multi-camera observation. Each image is (height*width) rows by channel
// columns, pixel values in [0,1]; proprio is stored unnormalized.
struct Observation {
  std::vector<MatF> images;
  VecD proprio;
};

struct GoalSpec {
  int goal_id = 0;
};

// Per-dimension min/max used to map proprio and actions into [-1, 1].
struct NormStats {
  VecD proprio_min, proprio_max;
  VecD action_min, action_max;

  bool valid() const { return proprio_min.size() > 0 && action_min.size() > 0; }

  static double to_unit(double v, double lo, double hi) {
    if (hi - lo < 1e-9) return 0.0;
    return 2.0 * (v - lo) / (hi - lo) - 1.0;
  }
  static double from_unit(double u, double lo, double hi) {
    if (hi - lo < 1e-9) return 0.5 * (lo + hi);
    return lo + (u + 1.0) * 0.5 * (hi - lo);
  }

  VecD normalize_proprio(const VecD& p) const {
    if (!valid()) return p;
    VecD out(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i)
      out(i) = to_unit(p(i), proprio_min(i), proprio_max(i));
    return out;
  }
  MatD normalize_actions(const MatD& a) const {
    if (!valid()) return a;
    MatD out(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        out(i, j) = to_unit(a(i, j), action_min(j), action_max(j));
    return out;
  }
  MatD denormalize_actions(const MatD& a) const {
    if (!valid()) return a;
    MatD out(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        out(i, j) = from_unit(a(i, j), action_min(j), action_max(j));
    return out;
  }
};

}  // namespace dpol
