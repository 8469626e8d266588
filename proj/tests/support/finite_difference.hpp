#pragma once

// Central finite differences; independent of the autodiff tape.

#include <cmath>
#include <functional>

#include "cnx/matrix.hpp"

namespace cnx::testing {

inline constexpr double kFdStep = 1e-5;

/// d f / d m_i for every entry of m, perturbing m in place and restoring it.
inline Matrix central_difference(Matrix& m, const std::function<double()>& f, double h = kFdStep) {
  Matrix g(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double saved = m[i];
    m[i] = saved + h;
    const double up = f();
    m[i] = saved - h;
    const double down = f();
    m[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Relative error < rel or absolute error < abs, entrywise.
inline bool gradients_agree(double analytic, double numeric, double rel = 1e-4, double abs_tol = 1e-8) {
  const double diff = std::abs(analytic - numeric);
  if (diff < abs_tol) return true;
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return diff / scale < rel;
}

}  // namespace cnx::testing
