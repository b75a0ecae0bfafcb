#pragma once

// Linear dynamical system x_{t+1} = A x_t + w_t, y_t = H x_t + z_t, and its
// selective-BPTT gradients: output-gradient entries at unobserved (t, i) are
// zeroed before being propagated back through time.

#include <cmath>
#include <complex>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "sbtt/rng.hpp"
#include "sbtt/tensor.hpp"

namespace sbtt {

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

struct LdsParams {
  Eigen::MatrixXd A;  // [D, D]
  Eigen::MatrixXd H;  // [N, D]

  Eigen::Index latent_dim() const { return A.rows(); }
  Eigen::Index obs_dim() const { return H.rows(); }
};

struct LdsNoiseConfig {
  double process_sd = 0.0;
  double observation_sd = 0.0;
};

struct LdsGradients {
  Eigen::MatrixXd dA;
  Eigen::MatrixXd dH;
};

// One trial: known initial state, observations [T, N] and mask [T, N].
struct LdsSequence {
  Eigen::VectorXd x0;
  Eigen::MatrixXd y;
  BoolMatrix mask;
};

struct LdsRollout {
  Eigen::MatrixXd states;   // [T, D]
  Eigen::MatrixXd outputs;  // [T, N]
};

inline double spectral_radius(const Eigen::MatrixXd& A) {
  if (A.size() == 0) return 0.0;
  return Eigen::EigenSolver<Eigen::MatrixXd>(A, false).eigenvalues().cwiseAbs().maxCoeff();
}

// Eigenvalues sorted by (real, imag).
inline std::vector<std::complex<double>> sorted_eigenvalues(const Eigen::MatrixXd& A) {
  const Eigen::VectorXcd ev = Eigen::EigenSolver<Eigen::MatrixXd>(A, false).eigenvalues();
  std::vector<std::complex<double>> out(ev.data(), ev.data() + ev.size());
  std::sort(out.begin(), out.end(), [](auto a, auto b) {
    return a.real() != b.real() ? a.real() < b.real() : a.imag() < b.imag();
  });
  return out;
}

inline void check_shapes(const LdsParams& p) {
  if (p.A.rows() != p.A.cols()) throw Error("A must be square");
  if (p.H.cols() != p.A.rows()) throw Error("H columns must equal latent dimension");
}

inline LdsRollout lds_simulate(const LdsParams& p, const LdsNoiseConfig& noise,
                               const Eigen::VectorXd& x0, int T, Rng& rng,
                               bool require_stable = false) {
  check_shapes(p);
  if (T < 1) throw Error("T must be at least 1");
  if (x0.size() != p.latent_dim()) throw Error("x0 has wrong dimension");
  if (!x0.allFinite()) throw Error("x0 must be finite");
  if (noise.process_sd < 0 || noise.observation_sd < 0) throw Error("noise sd must be >= 0");
  if (require_stable && spectral_radius(p.A) > 1.0 + 1e-9)
    throw Error("spectral radius of A exceeds 1");
  const auto D = p.latent_dim();
  const auto N = p.obs_dim();
  LdsRollout r{Eigen::MatrixXd(T, D), Eigen::MatrixXd(T, N)};
  Eigen::VectorXd x = x0;
  for (int t = 0; t < T; ++t) {
    r.states.row(t) = x.transpose();
    Eigen::VectorXd y = p.H * x;
    if (noise.observation_sd > 0)
      for (Eigen::Index i = 0; i < N; ++i) y(i) += noise.observation_sd * rng.normal();
    r.outputs.row(t) = y.transpose();
    Eigen::VectorXd next = p.A * x;
    if (noise.process_sd > 0)
      for (Eigen::Index i = 0; i < D; ++i) next(i) += noise.process_sd * rng.normal();
    x = next;
  }
  return r;
}

inline LdsRollout lds_forward(const LdsParams& p, const Eigen::VectorXd& x0, int T) {
  check_shapes(p);
  if (T < 1) throw Error("T must be at least 1");
  LdsRollout r{Eigen::MatrixXd(T, p.latent_dim()), Eigen::MatrixXd(T, p.obs_dim())};
  Eigen::VectorXd x = x0;
  for (int t = 0; t < T; ++t) {
    r.states.row(t) = x.transpose();
    r.outputs.row(t) = (p.H * x).transpose();
    x = p.A * x;
  }
  return r;
}

// (1/T) * sum over observed (t, i) of 0.5 (o - y)^2. Normalized by T, not by
// the number of observed entries.
inline double masked_sse_loss(const Eigen::MatrixXd& outputs, const Eigen::MatrixXd& y,
                              const BoolMatrix& mask) {
  if (outputs.rows() != y.rows() || outputs.cols() != y.cols() || mask.rows() != y.rows() ||
      mask.cols() != y.cols())
    throw Error("masked_sse_loss shape mismatch");
  double s = 0.0;
  for (Eigen::Index t = 0; t < y.rows(); ++t)
    for (Eigen::Index i = 0; i < y.cols(); ++i)
      if (mask(t, i)) {
        const double r = outputs(t, i) - y(t, i);
        s += 0.5 * r * r;
      }
  return s / static_cast<double>(y.rows());
}

inline double lds_loss(const LdsParams& p, const LdsSequence& s) {
  const auto r = lds_forward(p, s.x0, static_cast<int>(s.y.rows()));
  return masked_sse_loss(r.outputs, s.y, s.mask);
}

struct LdsBackwardResult {
  double loss = 0.0;
  LdsGradients grads;
  Eigen::VectorXd dx0;
};

inline LdsBackwardResult sbtt_backward_full(const LdsParams& p, const LdsSequence& s) {
  check_shapes(p);
  const auto T = s.y.rows();
  if (T < 1) throw Error("empty sequence");
  if (s.y.cols() != p.obs_dim() || s.mask.rows() != T || s.mask.cols() != p.obs_dim() ||
      s.x0.size() != p.latent_dim())
    throw Error("sbtt_backward shape mismatch");
  const auto fw = lds_forward(p, s.x0, static_cast<int>(T));
  const double invT = 1.0 / static_cast<double>(T);

  // dL/do_t with unobserved entries zeroed
  Eigen::MatrixXd d_out = (fw.outputs - s.y) * invT;
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < d_out.cols(); ++i)
      if (!s.mask(t, i)) d_out(t, i) = 0.0;

  LdsBackwardResult res;
  res.loss = masked_sse_loss(fw.outputs, s.y, s.mask);
  res.grads.dA = Eigen::MatrixXd::Zero(p.A.rows(), p.A.cols());
  res.grads.dH = d_out.transpose() * fw.states;

  Eigen::VectorXd dx = p.H.transpose() * d_out.row(T - 1).transpose();
  for (Eigen::Index t = T - 1; t >= 1; --t) {
    res.grads.dA.noalias() += dx * fw.states.row(t - 1);
    dx = p.A.transpose() * dx + p.H.transpose() * d_out.row(t - 1).transpose();
  }
  res.dx0 = dx;
  return res;
}

inline LdsGradients sbtt_backward(const LdsParams& p, const LdsSequence& s) {
  return sbtt_backward_full(p, s).grads;
}

// Plain least-squares BPTT with no notion of missing data.
inline std::pair<double, LdsGradients> bptt_unmasked(const LdsParams& p, const Eigen::VectorXd& x0,
                                                     const Eigen::MatrixXd& y) {
  const auto T = y.rows();
  std::vector<Eigen::VectorXd> xs;
  xs.reserve(static_cast<std::size_t>(T));
  xs.push_back(x0);
  for (Eigen::Index t = 1; t < T; ++t) xs.push_back(p.A * xs.back());
  double loss = 0.0;
  std::vector<Eigen::VectorXd> g(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) {
    const Eigen::VectorXd r = p.H * xs[static_cast<std::size_t>(t)] - y.row(t).transpose();
    loss += 0.5 * r.squaredNorm();
    g[static_cast<std::size_t>(t)] = r / static_cast<double>(T);
  }
  loss /= static_cast<double>(T);
  LdsGradients grads{Eigen::MatrixXd::Zero(p.A.rows(), p.A.cols()),
                     Eigen::MatrixXd::Zero(p.H.rows(), p.H.cols())};
  Eigen::VectorXd dx = Eigen::VectorXd::Zero(p.latent_dim());
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    const auto ut = static_cast<std::size_t>(t);
    dx = (t == T - 1 ? Eigen::VectorXd(p.H.transpose() * g[ut])
                     : Eigen::VectorXd(p.A.transpose() * dx + p.H.transpose() * g[ut]));
    grads.dH += g[ut] * xs[ut].transpose();
    if (t >= 1) grads.dA += dx * xs[ut - 1].transpose();
  }
  return {loss, grads};
}

// Mean squared error over observed entries of a deterministic rollout.
inline double predictive_mse(const LdsParams& p, const std::vector<LdsSequence>& data) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& seq : data) {
    const auto r = lds_forward(p, seq.x0, static_cast<int>(seq.y.rows()));
    for (Eigen::Index t = 0; t < seq.y.rows(); ++t)
      for (Eigen::Index i = 0; i < seq.y.cols(); ++i)
        if (seq.mask(t, i)) {
          const double d = r.outputs(t, i) - seq.y(t, i);
          s += d * d;
          ++n;
        }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

// Trial i of a batch, paired with its initial state.
inline LdsSequence lds_sequence_from_batch(const TimeSeriesBatch& b, std::size_t trial,
                                           const Eigen::VectorXd& x0) {
  const auto T = static_cast<Eigen::Index>(b.time());
  const auto N = static_cast<Eigen::Index>(b.channels());
  LdsSequence s{x0, Eigen::MatrixXd(T, N), BoolMatrix(T, N)};
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto ut = static_cast<std::size_t>(t);
      const auto ui = static_cast<std::size_t>(i);
      s.mask(t, i) = b.mask(trial, ut, ui) != 0;
      s.y(t, i) = s.mask(t, i) ? b.values(trial, ut, ui) : 0.0;
    }
  return s;
}

enum class LdsOptimizer { gd, adam };

inline LdsOptimizer parse_lds_optimizer(const std::string& s) {
  if (s == "gd") return LdsOptimizer::gd;
  if (s == "adam") return LdsOptimizer::adam;
  throw Error("unknown lds optimizer '" + s + "'");
}

inline std::string to_string(LdsOptimizer o) { return o == LdsOptimizer::gd ? "gd" : "adam"; }

struct LdsTrainOptions {
  bool estimate_x0 = false;  // extension: learn x0 per trial jointly
  double x0_lr = 0.0;        // 0 -> same as lr
  LdsOptimizer optimizer = LdsOptimizer::gd;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adam only
};

struct LdsTrainResult {
  LdsParams params;
  std::vector<double> loss_history;  // mean loss per epoch, before that epoch's update
  std::vector<Eigen::VectorXd> x0;   // final per-trial initial states
};

// Full-batch gradient descent (plain or adam-scaled); gradients are averaged
// over trials in index order so the result is reproducible.
inline LdsTrainResult train_lds(const std::vector<LdsSequence>& data, const LdsParams& init,
                                double lr, int epochs, const LdsTrainOptions& opt = {}) {
  if (!(lr > 0.0)) throw Error("learning rate must be positive");
  if (data.empty()) throw Error("empty dataset");
  check_shapes(init);
  LdsTrainResult res{init, {}, {}};
  std::vector<LdsSequence> work = data;
  const double n = static_cast<double>(data.size());
  const double x0_lr = opt.x0_lr > 0 ? opt.x0_lr : lr;
  Eigen::MatrixXd mA = Eigen::MatrixXd::Zero(init.A.rows(), init.A.cols()), vA = mA;
  Eigen::MatrixXd mH = Eigen::MatrixXd::Zero(init.H.rows(), init.H.cols()), vH = mH;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Eigen::MatrixXd dA = Eigen::MatrixXd::Zero(init.A.rows(), init.A.cols());
    Eigen::MatrixXd dH = Eigen::MatrixXd::Zero(init.H.rows(), init.H.cols());
    double loss = 0.0;
    for (auto& seq : work) {
      const auto b = sbtt_backward_full(res.params, seq);
      loss += b.loss;
      dA += b.grads.dA;
      dH += b.grads.dH;
      if (opt.estimate_x0) seq.x0 -= x0_lr * b.dx0;
    }
    loss /= n;
    if (!std::isfinite(loss)) throw Error("train_lds diverged at epoch " + std::to_string(epoch));
    res.loss_history.push_back(loss);
    dA /= n;
    dH /= n;
    if (opt.optimizer == LdsOptimizer::gd) {
      res.params.A -= lr * dA;
      res.params.H -= lr * dH;
      continue;
    }
    const double c1 = 1.0 - std::pow(opt.beta1, epoch + 1), c2 = 1.0 - std::pow(opt.beta2, epoch + 1);
    auto step = [&](Eigen::MatrixXd& w, const Eigen::MatrixXd& g, Eigen::MatrixXd& m, Eigen::MatrixXd& v) {
      m = opt.beta1 * m + (1.0 - opt.beta1) * g;
      v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
      w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.eps);
    };
    step(res.params.A, dA, mA, vA);
    step(res.params.H, dH, mH, vH);
  }
  for (const auto& s : work) res.x0.push_back(s.x0);
  return res;
}

}  // namespace sbtt
