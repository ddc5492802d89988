#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace mxeb::stats {

// Upper 0.001 quantile of chi-squared with k degrees of freedom
// (Wilson-Hilferty approximation).
inline double chi2_critical_001(std::size_t k) {
  const double z = 3.090232306167813;
  const double dk = static_cast<double>(k);
  const double a = 2.0 / (9.0 * dk);
  return dk * std::pow(1.0 - a + z * std::sqrt(a), 3);
}

struct Chi2Result {
  double statistic = 0.0;
  std::size_t dof = 0;
  bool pass = false;
};

// Goodness of fit of integer counts against probabilities. Cells with
// expected count below 5 are pooled into one bin.
inline Chi2Result chi2_test(std::span<const std::size_t> counts, std::span<const double> probs,
                            std::size_t total) {
  Chi2Result r;
  double pooled_obs = 0.0;
  double pooled_exp = 0.0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = probs[i] * static_cast<double>(total);
    if (e < 5.0) {
      pooled_obs += static_cast<double>(counts[i]);
      pooled_exp += e;
      continue;
    }
    const double d = static_cast<double>(counts[i]) - e;
    r.statistic += d * d / e;
    ++cells;
  }
  if (pooled_exp >= 1.0) {
    const double d = pooled_obs - pooled_exp;
    r.statistic += d * d / pooled_exp;
    ++cells;
  } else if (pooled_obs > 5.0) {
    r.statistic = INFINITY;  // mass where the model puts essentially none
  }
  r.dof = cells > 1 ? cells - 1 : 1;
  r.pass = r.statistic < chi2_critical_001(r.dof);
  return r;
}

}  // namespace mxeb::stats
