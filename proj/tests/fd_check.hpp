#pragma once

// Central finite-difference gradient check shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "molem/autograd.hpp"

namespace molem::testing {

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t coords = 0;
};

// Relative error with a floor of 1e-3 on the denominator: central
// differences carry round-off of about 1e-11 * |loss|, so derivatives far
// below the loss scale are judged on an absolute scale instead.
inline double fd_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

// `loss` builds a scalar on the given tape from the parameters.
inline FdReport fd_check(const std::vector<Parameter*>& params, const std::function<Var(Tape&)>& loss,
                         double h = 1e-5) {
  for (Parameter* p : params) p->clear_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto eval = [&]() {
    Tape tape(false);
    return loss(tape).scalar();
  };
  FdReport r;
  for (Parameter* p : params) {
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      const double x0 = p->value.data[j];
      p->value.data[j] = x0 + h;
      const double up = eval();
      p->value.data[j] = x0 - h;
      const double dn = eval();
      p->value.data[j] = x0;
      const double numeric = (up - dn) / (2.0 * h);
      const double analytic = p->has_grad() ? p->grad.data[j] : 0.0;
      r.max_rel_err = std::max(r.max_rel_err, fd_rel_err(analytic, numeric));
      ++r.coords;
    }
  }
  return r;
}

}  // namespace molem::testing
