#pragma once

// Central-difference gradient checking against the tape.
//
// The loss builder is re-run from scratch for every probe, so it must be a
// pure function of the parameter tensors it captures.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "lakd/tensor.hpp"

namespace fd {

struct Result {
  bool ok = true;
  std::string detail;
};

// loss_fn builds and returns a scalar loss from the captured params.
inline Result check_gradients(const std::function<lakd::Tensor()>& loss_fn,
                              const std::vector<lakd::Tensor>& params, double eps = 1e-5,
                              double tol = 1e-4) {
  using namespace lakd;
  // analytic pass
  std::vector<std::vector<double>> analytic;
  {
    TapeScope scope;
    Tensor loss = loss_fn();
    backward(loss);
    for (const auto& p : params) {
      const std::vector<double>* g = p.grad();
      analytic.push_back(g ? *g : std::vector<double>(p.numel(), 0.0));
    }
  }
  for (Tensor p : params) p.zero_grad();  // handles share storage; clears leftover grads
  // numeric probes
  auto eval = [&]() {
    NoGradGuard ng;
    return loss_fn().item();
  };
  Result res;
  int reported = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto& vals = p.values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double orig = vals[i];
      vals[i] = orig + eps;
      double fp = eval();
      vals[i] = orig - eps;
      double fm = eval();
      vals[i] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[pi][i];
      double err = std::fabs(a - numeric);
      double scale = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      if (err > tol * scale) {
        res.ok = false;
        if (reported < 5) {
          std::ostringstream os;
          os << "param " << pi << " elem " << i << ": analytic " << a << " vs numeric " << numeric
             << " (err " << err << ")\n";
          res.detail += os.str();
          ++reported;
        }
      }
    }
  }
  return res;
}

}  // namespace fd
