#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "retgrade/nn.hpp"
#include "retgrade/random.hpp"

namespace gradcheck {

// |analytic - numeric| / max(1e-8, |numeric|)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(numeric));
}

template <typename F> double central_difference(double &x, double eps, F &&loss) {
  const double keep = x;
  x = keep + eps;
  const double lp = loss();
  x = keep - eps;
  const double lm = loss();
  x = keep;
  return (lp - lm) / (2 * eps);
}

struct Coord {
  std::size_t param;
  std::size_t element;
};

struct Report {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;
  std::vector<std::size_t> per_param_checked;

  double pass_fraction() const { return checked ? static_cast<double>(passed) / static_cast<double>(checked) : 0.0; }
};

/// `per_param` coordinates from every parameter, chosen uniformly at random
/// (all of them when the parameter is smaller).
inline std::vector<Coord> sample_coords(const retgrade::ParamStore<double> &store, std::size_t per_param,
                                        retgrade::Rng &rng) {
  std::vector<Coord> out;
  for (std::size_t p = 0; p < store.size(); ++p) {
    const std::size_t n = store[p].value.size();
    if (n <= per_param) {
      for (std::size_t j = 0; j < n; ++j)
        out.push_back({p, j});
    } else {
      for (std::size_t k = 0; k < per_param; ++k)
        out.push_back({p, static_cast<std::size_t>(rng.below(n))});
    }
  }
  return out;
}

/// Compares analytic gradients against central differences of `loss` at the
/// given coordinates.
template <typename F>
Report check(retgrade::ParamStore<double> &store, const retgrade::GradBuffer<double> &analytic,
             const std::vector<Coord> &coords, double eps, double tol, F &&loss) {
  Report r;
  r.per_param_checked.assign(store.size(), 0);
  for (const auto &c : coords) {
    const double numeric = central_difference(store[c.param].value[c.element], eps, loss);
    const double err = relative_error(analytic[c.param][c.element], numeric);
    ++r.checked;
    ++r.per_param_checked[c.param];
    if (err < tol)
      ++r.passed;
    r.worst = std::max(r.worst, err);
  }
  return r;
}

} // namespace gradcheck
