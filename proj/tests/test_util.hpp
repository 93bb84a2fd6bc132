#pragma once

#include <cmath>
#include <vector>

#include "earnlab/earnlab.hpp"

namespace earnlab::fixtures {

inline PopulationSpec small_population(int n, int birth_first = 1960, int birth_last = 1969) {
  PopulationSpec pop;
  pop.n_individuals = n;
  pop.birth_first = birth_first;
  pop.birth_last = birth_last;
  pop.window_first = 1985;
  pop.window_last = 2020;
  return pop;
}

// Panel with one categorical and one continuous feature, some masked.
inline Panel featured_panel(int n, std::uint64_t seed, double missing = 0.1, double drift = 0.0) {
  auto pop = small_population(n);
  pop.schema.continuous = {{"hours", 0.0, 1.0, 0.8}};
  pop.schema.categorical = {{"occupation", 4, 0.85}};
  pop.schema.missing_rate = missing;
  if (drift != 0.0) pop.coupling = {{"occupation", -1, -1, drift, 3}};
  GkosParams g = GkosParams::reference();
  g.log_level = 12.0;
  return attach_features(simulate_gkos_panel(g, pop, seed), pop, seed + 1);
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double var_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace earnlab::fixtures
