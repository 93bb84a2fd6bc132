#pragma once

// Box-constrained Nelder–Mead. Candidate vertices are projected onto the
// box, which keeps every evaluated point feasible.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "earnlab/core.hpp"

namespace earnlab {

struct NelderMeadOptions {
  int max_evaluations = 500;
  double f_tolerance = 1e-10;
  double x_tolerance = 1e-6;
  int restarts = 1;
};

struct NelderMeadResult {
  std::vector<double> x;
  double f = 0.0;
  int evaluations = 0;
  bool converged = false;
};

template <class F>
NelderMeadResult nelder_mead(F&& f, std::vector<double> x0, std::vector<double> step,
                             const std::vector<double>& lo, const std::vector<double>& hi,
                             const NelderMeadOptions& opt = {}) {
  const std::size_t n = x0.size();
  require(step.size() == n && lo.size() == n && hi.size() == n, ErrorKind::Parameter,
          "nelder_mead dimension mismatch");
  for (std::size_t j = 0; j < n; ++j) {
    require(lo[j] <= hi[j], ErrorKind::Parameter, "nelder_mead bounds must be well-ordered");
  }
  auto project = [&](std::vector<double>& x) {
    for (std::size_t j = 0; j < n; ++j) x[j] = std::clamp(x[j], lo[j], hi[j]);
  };

  NelderMeadResult result;
  project(x0);
  result.x = x0;
  result.f = f(x0);
  result.evaluations = 1;

  for (int round = 0; round <= opt.restarts; ++round) {
    std::vector<std::vector<double>> simplex(n + 1, result.x);
    std::vector<double> fv(n + 1, result.f);
    for (std::size_t j = 0; j < n; ++j) {
      auto& v = simplex[j + 1];
      v[j] += step[j];
      if (v[j] > hi[j]) v[j] = result.x[j] - step[j];
      project(v);
      fv[j + 1] = f(v);
      ++result.evaluations;
    }
    std::vector<std::size_t> order(n + 1);
    bool converged = false;
    while (result.evaluations < opt.max_evaluations) {
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
      const std::size_t best = order.front();
      const std::size_t worst = order.back();
      const std::size_t second = order[n - 1];

      double xspread = 0.0;
      for (std::size_t v = 0; v <= n; ++v) {
        for (std::size_t j = 0; j < n; ++j) {
          xspread = std::max(xspread, std::abs(simplex[v][j] - simplex[best][j]));
        }
      }
      if (std::abs(fv[worst] - fv[best]) <= opt.f_tolerance * (1.0 + std::abs(fv[best])) &&
          xspread <= opt.x_tolerance) {
        converged = true;
        break;
      }

      std::vector<double> centroid(n, 0.0);
      for (std::size_t v = 0; v <= n; ++v) {
        if (v == worst) continue;
        for (std::size_t j = 0; j < n; ++j) centroid[j] += simplex[v][j] / static_cast<double>(n);
      }
      auto along = [&](double t) {
        std::vector<double> p(n);
        for (std::size_t j = 0; j < n; ++j) p[j] = centroid[j] + t * (simplex[worst][j] - centroid[j]);
        project(p);
        return p;
      };

      auto xr = along(-1.0);
      const double fr = f(xr);
      ++result.evaluations;
      if (fr < fv[best]) {
        auto xe = along(-2.0);
        const double fe = f(xe);
        ++result.evaluations;
        if (fe < fr) {
          simplex[worst] = std::move(xe);
          fv[worst] = fe;
        } else {
          simplex[worst] = std::move(xr);
          fv[worst] = fr;
        }
        continue;
      }
      if (fr < fv[second]) {
        simplex[worst] = std::move(xr);
        fv[worst] = fr;
        continue;
      }
      const bool outside = fr < fv[worst];
      auto xc = along(outside ? -0.5 : 0.5);
      const double fc = f(xc);
      ++result.evaluations;
      if (fc < (outside ? fr : fv[worst])) {
        simplex[worst] = std::move(xc);
        fv[worst] = fc;
        continue;
      }
      // Shrink toward the best vertex.
      for (std::size_t v = 0; v <= n; ++v) {
        if (v == best) continue;
        for (std::size_t j = 0; j < n; ++j) {
          simplex[v][j] = simplex[best][j] + 0.5 * (simplex[v][j] - simplex[best][j]);
        }
        project(simplex[v]);
        fv[v] = f(simplex[v]);
        ++result.evaluations;
      }
    }
    const auto best = static_cast<std::size_t>(std::min_element(fv.begin(), fv.end()) - fv.begin());
    if (fv[best] <= result.f) {
      result.f = fv[best];
      result.x = simplex[best];
    }
    result.converged = converged;
    if (!converged) break;
    // Restart with a smaller simplex around the incumbent.
    for (auto& s : step) s *= 0.5;
  }
  return result;
}

}  // namespace earnlab
