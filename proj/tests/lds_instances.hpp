#pragma once

// Random LDS problems and a finite-difference check of sbtt_backward.

#include <algorithm>

#include "gradcheck.hpp"
#include "sbtt/lds.hpp"
#include "sbtt/rng.hpp"

namespace sbtt::oracle {

struct LdsInstance {
  LdsParams p;
  LdsSequence s;
};

inline LdsInstance random_lds_instance(Rng& rng, int D, int N, int T, double drop) {
  LdsInstance in;
  in.p.A = Eigen::MatrixXd(D, D);
  in.p.H = Eigen::MatrixXd(N, D);
  for (Eigen::Index i = 0; i < in.p.A.size(); ++i) in.p.A.data()[i] = rng.normal(0.0, 0.9 / std::sqrt(D));
  for (Eigen::Index i = 0; i < in.p.H.size(); ++i) in.p.H.data()[i] = rng.normal();
  in.s.x0 = Eigen::VectorXd(D);
  for (Eigen::Index i = 0; i < D; ++i) in.s.x0(i) = rng.normal();
  in.s.y = Eigen::MatrixXd(T, N);
  in.s.mask = BoolMatrix(T, N);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < N; ++i) {
      in.s.mask(t, i) = !rng.bernoulli(drop);
      in.s.y(t, i) = in.s.mask(t, i) ? rng.normal() : 0.0;
    }
  return in;
}

// Largest relative error over dA and dH against central differences.
inline double lds_fd_error(LdsInstance in) {
  const auto g = sbtt_backward(in.p, in.s);
  auto loss = [&] { return lds_loss(in.p, in.s); };
  const Eigen::MatrixXd fa = numeric_gradient(in.p.A, loss);
  const Eigen::MatrixXd fh = numeric_gradient(in.p.H, loss);
  return std::max(relative_error(g.dA, fa), relative_error(g.dH, fh));
}

}  // namespace sbtt::oracle
