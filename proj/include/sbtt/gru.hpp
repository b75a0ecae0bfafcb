#pragma once

// Two-gate recurrent cell (reset r, update u) with an explicit backward pass.
//
//   r  = sigmoid(Wx_r x + Wh_r h + b_r)
//   u  = sigmoid(Wx_u x + Wh_u h + b_u)
//   c  = tanh(Wx_c x + Wh_c (r * h) + b_c)
//   h' = u * h + (1 - u) * c
//
// Sequences are stored time-major: column t*B + b holds trial b at step t.
// Gate rows are stacked [r; u; c] in Wx, Wh and b.

#include <cmath>

#include <Eigen/Dense>

#include "sbtt/rng.hpp"

namespace sbtt {

struct GruWeights {
  Eigen::MatrixXd Wx;  // [3H, I]; I may be 0 for input-free cells
  Eigen::MatrixXd Wh;  // [3H, H]
  Eigen::VectorXd b;   // [3H]

  Eigen::Index hidden() const { return Wh.cols(); }
  Eigen::Index inputs() const { return Wx.cols(); }

  static GruWeights zeros(Eigen::Index inputs, Eigen::Index hidden) {
    return {Eigen::MatrixXd::Zero(3 * hidden, inputs), Eigen::MatrixXd::Zero(3 * hidden, hidden),
            Eigen::VectorXd::Zero(3 * hidden)};
  }

  // Scaled-normal init; update-gate bias starts at +1 so the cell initially
  // carries its state forward.
  static GruWeights random(Eigen::Index inputs, Eigen::Index hidden, Rng& rng) {
    GruWeights w = zeros(inputs, hidden);
    const double sx = inputs > 0 ? 1.0 / std::sqrt(static_cast<double>(inputs)) : 0.0;
    const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (Eigen::Index i = 0; i < w.Wx.size(); ++i) w.Wx.data()[i] = sx * rng.normal();
    for (Eigen::Index i = 0; i < w.Wh.size(); ++i) w.Wh.data()[i] = sh * rng.normal();
    w.b.segment(hidden, hidden).setOnes();
    return w;
  }
};

struct GruSequenceCache {
  Eigen::Index steps = 0;
  Eigen::Index batch = 0;
  bool reverse = false;
  Eigen::MatrixXd h_prev;  // [H, T*B] state entering each step
  Eigen::MatrixXd r, u, c; // [H, T*B]
  Eigen::MatrixXd out;     // [H, T*B] state leaving each step
};

inline Eigen::MatrixXd sigmoid_m(const Eigen::MatrixXd& a) {
  return (1.0 / (1.0 + (-a.array()).exp())).matrix();
}

// Runs the cell over T steps. x_proj holds Wx*x + b for every column, or is
// empty for input-free cells (bias is then added here). When reverse is set,
// step k consumes time index T-1-k; caches are indexed by time, not by step.
inline GruSequenceCache gru_forward(const GruWeights& w, const Eigen::MatrixXd& x_proj,
                                    const Eigen::MatrixXd& h0, Eigen::Index T, bool reverse) {
  const Eigen::Index H = w.hidden();
  const Eigen::Index B = h0.cols();
  GruSequenceCache cache;
  cache.steps = T;
  cache.batch = B;
  cache.reverse = reverse;
  cache.h_prev.resize(H, T * B);
  cache.r.resize(H, T * B);
  cache.u.resize(H, T * B);
  cache.c.resize(H, T * B);
  cache.out.resize(H, T * B);
  Eigen::MatrixXd h = h0;
  Eigen::MatrixXd a_ru(2 * H, B);
  Eigen::MatrixXd a_c(H, B);
  for (Eigen::Index k = 0; k < T; ++k) {
    const Eigen::Index t = reverse ? T - 1 - k : k;
    const Eigen::Index col = t * B;
    a_ru.noalias() = w.Wh.topRows(2 * H) * h;
    if (x_proj.size())
      a_ru += x_proj.block(0, col, 2 * H, B);
    else
      a_ru.colwise() += w.b.head(2 * H);
    auto r = cache.r.middleCols(col, B);
    auto u = cache.u.middleCols(col, B);
    r = sigmoid_m(a_ru.topRows(H));
    u = sigmoid_m(a_ru.bottomRows(H));
    const Eigen::MatrixXd rh = r.cwiseProduct(h);
    a_c.noalias() = w.Wh.bottomRows(H) * rh;
    if (x_proj.size())
      a_c += x_proj.block(2 * H, col, H, B);
    else
      a_c.colwise() += w.b.tail(H);
    auto c = cache.c.middleCols(col, B);
    c = a_c.array().tanh().matrix();
    cache.h_prev.middleCols(col, B) = h;
    h = (u.array() * h.array() + (1.0 - u.array()) * c.array()).matrix();
    cache.out.middleCols(col, B) = h;
  }
  return cache;
}

inline Eigen::MatrixXd gru_input_projection(const GruWeights& w, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd p = w.Wx * x;
  p.colwise() += w.b;
  return p;
}

inline Eigen::MatrixXd gru_final_state(const GruSequenceCache& c) {
  const Eigen::Index t = c.reverse ? 0 : c.steps - 1;
  return c.out.middleCols(t * c.batch, c.batch);
}

// Reverse pass. d_out: dLoss/d(out) per column (may be empty), d_final: extra
// gradient on the final state. Accumulates into grads; returns dLoss/dh0 and,
// when d_x_proj is non-null, fills dLoss/d(x_proj) ([3H, T*B]). For
// input-free cells the bias gradient is accumulated here; otherwise the
// caller derives Wx and b gradients from d_x_proj.
inline Eigen::MatrixXd gru_backward(const GruWeights& w, const GruSequenceCache& cache,
                                    const Eigen::MatrixXd& d_out, const Eigen::MatrixXd& d_final,
                                    GruWeights& grads, Eigen::MatrixXd* d_x_proj) {
  const Eigen::Index H = w.hidden();
  const Eigen::Index B = cache.batch;
  const Eigen::Index T = cache.steps;
  Eigen::MatrixXd da(3 * H, T * B);
  Eigen::MatrixXd rh_all(H, T * B);
  Eigen::MatrixXd dh = d_final;
  for (Eigen::Index k = T - 1; k >= 0; --k) {
    const Eigen::Index t = cache.reverse ? T - 1 - k : k;
    const Eigen::Index col = t * B;
    if (d_out.size()) dh += d_out.middleCols(col, B);
    const auto r = cache.r.middleCols(col, B).array();
    const auto u = cache.u.middleCols(col, B).array();
    const auto c = cache.c.middleCols(col, B).array();
    const auto hp = cache.h_prev.middleCols(col, B).array();
    const Eigen::ArrayXXd dha = dh.array();
    const Eigen::ArrayXXd dac = dha * (1.0 - u) * (1.0 - c * c);
    const Eigen::ArrayXXd dau = dha * (hp - c) * u * (1.0 - u);
    const Eigen::MatrixXd drh = w.Wh.bottomRows(H).transpose() * dac.matrix();
    const Eigen::ArrayXXd dar = drh.array() * hp * r * (1.0 - r);
    da.block(0, col, H, B) = dar.matrix();
    da.block(H, col, H, B) = dau.matrix();
    da.block(2 * H, col, H, B) = dac.matrix();
    rh_all.middleCols(col, B) = (r * hp).matrix();
    Eigen::MatrixXd next = (dha * u + drh.array() * r).matrix();
    next.noalias() += w.Wh.topRows(2 * H).transpose() * da.block(0, col, 2 * H, B);
    dh = std::move(next);
  }
  grads.Wh.topRows(2 * H).noalias() += da.topRows(2 * H) * cache.h_prev.transpose();
  grads.Wh.bottomRows(H).noalias() += da.bottomRows(H) * rh_all.transpose();
  if (d_x_proj)
    *d_x_proj = std::move(da);
  else
    grads.b += da.rowwise().sum();
  return dh;
}

}  // namespace sbtt
