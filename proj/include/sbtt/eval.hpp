#pragma once

// Evaluation: ridge mapping with nested cross-validation, R^2, Poisson GLM
// and pseudo-R^2, Welch magnitude-squared coherence, PSTH correlation,
// smoothing and linear resampling.

#include <algorithm>
#include <cmath>
#include <complex>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "sbtt/special.hpp"
#include "sbtt/tensor.hpp"

namespace sbtt {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// R^2

struct R2Result {
  std::vector<double> per_dim;
  double mean = kNaN;
  bool valid = false;  // false when some target dimension has zero variance
};

inline R2Result r2(const Eigen::MatrixXd& y_true, const Eigen::MatrixXd& y_pred) {
  if (y_true.rows() != y_pred.rows() || y_true.cols() != y_pred.cols())
    throw Error("r2: shape mismatch");
  if (y_true.rows() < 2) throw Error("r2: need at least two samples");
  R2Result res;
  res.valid = true;
  double sum = 0.0;
  for (Eigen::Index d = 0; d < y_true.cols(); ++d) {
    const double mean = y_true.col(d).mean();
    const double ss_tot = (y_true.col(d).array() - mean).square().sum();
    const double ss_res = (y_true.col(d) - y_pred.col(d)).squaredNorm();
    if (ss_tot == 0.0) {
      res.per_dim.push_back(kNaN);
      res.valid = false;
      continue;
    }
    res.per_dim.push_back(1.0 - ss_res / ss_tot);
    sum += res.per_dim.back();
  }
  res.mean = res.valid ? sum / static_cast<double>(y_true.cols()) : kNaN;
  return res;
}

// ---------------------------------------------------------------------------
// Ridge regression

struct RidgeModel {
  Eigen::MatrixXd weights;  // [features + 1, targets]; row 0 is the intercept
  double lambda = 0.0;

  Eigen::MatrixXd predict(const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd y = X * weights.bottomRows(weights.rows() - 1);
    y.rowwise() += weights.row(0);
    return y;
  }
};

// Sufficient statistics of a block of samples.
struct RidgeStats {
  double n = 0.0;
  Eigen::VectorXd sx, sy;
  Eigen::MatrixXd sxx, sxy;

  RidgeStats() = default;
  RidgeStats(Eigen::Index f, Eigen::Index d)
      : sx(Eigen::VectorXd::Zero(f)), sy(Eigen::VectorXd::Zero(d)),
        sxx(Eigen::MatrixXd::Zero(f, f)), sxy(Eigen::MatrixXd::Zero(f, d)) {}

  static RidgeStats of(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
    RidgeStats s(X.cols(), Y.cols());
    s.n = static_cast<double>(X.rows());
    s.sx = X.colwise().sum().transpose();
    s.sy = Y.colwise().sum().transpose();
    s.sxx.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
    s.sxx = s.sxx.selfadjointView<Eigen::Lower>();
    s.sxy.noalias() = X.transpose() * Y;
    return s;
  }

  RidgeStats& operator+=(const RidgeStats& o) {
    n += o.n;
    sx += o.sx;
    sy += o.sy;
    sxx += o.sxx;
    sxy += o.sxy;
    return *this;
  }
};

// Closed-form ridge with an unpenalized intercept. Returns nullopt when the
// system is singular (lambda == 0 on rank-deficient data).
inline std::optional<RidgeModel> ridge_solve(const RidgeStats& s, double lambda) {
  if (s.n < 1) return std::nullopt;
  const Eigen::VectorXd mx = s.sx / s.n;
  const Eigen::VectorXd my = s.sy / s.n;
  Eigen::MatrixXd cxx = s.sxx - s.n * mx * mx.transpose();
  const Eigen::MatrixXd cxy = s.sxy - s.n * mx * my.transpose();
  cxx.diagonal().array() += lambda;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(cxx);
  if (ldlt.info() != Eigen::Success) return std::nullopt;
  const Eigen::VectorXd dg = ldlt.vectorD();
  const double dmax = dg.cwiseAbs().maxCoeff();
  if (!(dg.minCoeff() > 1e-12 * std::max(dmax, 1e-300))) return std::nullopt;
  const Eigen::MatrixXd W = ldlt.solve(cxy);
  RidgeModel m;
  m.lambda = lambda;
  m.weights.resize(W.rows() + 1, W.cols());
  m.weights.row(0) = (my - W.transpose() * mx).transpose();
  m.weights.bottomRows(W.rows()) = W;
  return m;
}

inline std::optional<RidgeModel> ridge_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                           double lambda) {
  return ridge_solve(RidgeStats::of(X, Y), lambda);
}

inline std::vector<double> default_lambdas() {
  std::vector<double> l;
  for (int e = -4; e <= 4; ++e) l.push_back(std::pow(10.0, e));
  return l;
}

struct RidgeCvOptions {
  std::vector<double> lambdas = default_lambdas();
  int repeats = 5;      // interleaved outer splits (test = every repeats-th group)
  int inner_folds = 5;
  bool verbose = false;
};

struct RidgeCvResult {
  RidgeModel model;                   // fit of the first repeat
  double heldout_r2 = kNaN;           // mean over repeats of mean-over-dims R^2
  std::vector<double> heldout_r2_per_dim;
  double train_r2 = kNaN;
  std::vector<double> repeat_r2;
  std::vector<double> chosen_lambdas;
};

// Nested CV ridge. Samples belonging to the same group (e.g. a trial) are
// never split. Groups are ranked in order of first appearance; with
// rank k, the outer test set of repeat r is {k : k % repeats == r} and the
// inner fold of a training group is (k / repeats) % inner_folds.
inline RidgeCvResult ridge_cv(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                              const std::vector<int>& groups, const RidgeCvOptions& opt = {}) {
  if (X.rows() != Y.rows()) throw Error("ridge_cv: X and Y sample counts differ");
  if (opt.lambdas.empty()) throw Error("ridge_cv: empty lambda grid");
  const Eigen::Index n = X.rows();
  std::vector<int> g = groups;
  if (g.empty()) {
    g.resize(static_cast<std::size_t>(n));
    std::iota(g.begin(), g.end(), 0);
  }
  if (static_cast<Eigen::Index>(g.size()) != n) throw Error("ridge_cv: one group per sample");
  std::map<int, int> rank;
  for (int v : g)
    if (!rank.count(v)) rank.emplace(v, static_cast<int>(rank.size()));
  const int R = opt.repeats, K = opt.inner_folds;
  if (static_cast<int>(rank.size()) < R * 2) throw Error("ridge_cv: too few groups");
  // cell = outer * K + inner
  const int ncell = R * K;
  std::vector<std::vector<Eigen::Index>> cell_rows(static_cast<std::size_t>(ncell));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = rank[g[static_cast<std::size_t>(i)]];
    cell_rows[static_cast<std::size_t>((k % R) * K + (k / R) % K)].push_back(i);
  }
  auto rows_of = [&](const std::vector<Eigen::Index>& idx, const Eigen::MatrixXd& M) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), M.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = M.row(idx[i]);
    return out;
  };
  std::vector<RidgeStats> cell_stats;
  for (const auto& rows : cell_rows) cell_stats.push_back(RidgeStats::of(rows_of(rows, X), rows_of(rows, Y)));

  RidgeCvResult res;
  std::vector<double> per_dim(static_cast<std::size_t>(Y.cols()), 0.0);
  double sum = 0.0, train_sum = 0.0;
  for (int r = 0; r < R; ++r) {
    std::vector<Eigen::Index> test_rows, train_rows;
    RidgeStats train(X.cols(), Y.cols());
    for (int o = 0; o < R; ++o)
      for (int k = 0; k < K; ++k) {
        const auto c = static_cast<std::size_t>(o * K + k);
        auto& dst = o == r ? test_rows : train_rows;
        dst.insert(dst.end(), cell_rows[c].begin(), cell_rows[c].end());
        if (o != r) train += cell_stats[c];
      }
    // inner CV over lambda
    double best = -std::numeric_limits<double>::infinity();
    double best_lambda = opt.lambdas.front();
    for (double lambda : opt.lambdas) {
      double score = 0.0;
      int used = 0;
      bool ok = true;
      for (int k = 0; k < K && ok; ++k) {
        RidgeStats fit(X.cols(), Y.cols());
        std::vector<Eigen::Index> val_rows;
        for (int o = 0; o < R; ++o) {
          if (o == r) continue;
          const auto c = static_cast<std::size_t>(o * K + k);
          val_rows.insert(val_rows.end(), cell_rows[c].begin(), cell_rows[c].end());
        }
        if (val_rows.size() < 2) continue;
        fit = train;
        for (int o = 0; o < R; ++o) {
          if (o == r) continue;
          const auto& cs = cell_stats[static_cast<std::size_t>(o * K + k)];
          fit.n -= cs.n;
          fit.sx -= cs.sx;
          fit.sy -= cs.sy;
          fit.sxx -= cs.sxx;
          fit.sxy -= cs.sxy;
        }
        const auto m = ridge_solve(fit, lambda);
        if (!m) {
          ok = false;
          break;
        }
        const auto s = r2(rows_of(val_rows, Y), m->predict(rows_of(val_rows, X)));
        if (!std::isfinite(s.mean)) continue;
        score += s.mean;
        ++used;
      }
      if (!ok || used == 0) {
        if (opt.verbose) std::cerr << "ridge_cv: skipping singular lambda " << lambda << "\n";
        continue;
      }
      score /= used;
      if (score > best) {
        best = score;
        best_lambda = lambda;
      }
    }
    auto model = ridge_solve(train, best_lambda);
    if (!model) throw Error("ridge_cv: no usable lambda");
    const auto test = r2(rows_of(test_rows, Y), model->predict(rows_of(test_rows, X)));
    const auto tr = r2(rows_of(train_rows, Y), model->predict(rows_of(train_rows, X)));
    res.repeat_r2.push_back(test.mean);
    res.chosen_lambdas.push_back(best_lambda);
    sum += test.mean;
    train_sum += tr.mean;
    for (std::size_t d = 0; d < per_dim.size(); ++d) per_dim[d] += test.per_dim[d];
    if (r == 0) res.model = *model;
  }
  res.heldout_r2 = sum / R;
  res.train_r2 = train_sum / R;
  for (auto& v : per_dim) v /= R;
  res.heldout_r2_per_dim = per_dim;
  return res;
}

// Flatten [trials, T, C] to [trials*T, C] rows (trial-major) with group ids.
// A positive lag pairs features at t with targets at t + lag.
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> pair_samples(const Tensor3& features,
                                                                 const Tensor3& targets, int lag,
                                                                 std::vector<int>* groups) {
  if (features.dim(0) != targets.dim(0) || features.dim(1) != targets.dim(1))
    throw Error("features and targets must share trials and time");
  const std::size_t R = features.dim(0), T = features.dim(1);
  const std::size_t L = static_cast<std::size_t>(std::abs(lag));
  if (L >= T) throw Error("lag exceeds trial length");
  const std::size_t per = T - L;
  Eigen::MatrixXd X(static_cast<Eigen::Index>(R * per), static_cast<Eigen::Index>(features.dim(2)));
  Eigen::MatrixXd Y(static_cast<Eigen::Index>(R * per), static_cast<Eigen::Index>(targets.dim(2)));
  if (groups) groups->clear();
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t k = 0; k < per; ++k, ++row) {
      const std::size_t tf = lag >= 0 ? k : k + L;
      const std::size_t ty = lag >= 0 ? k + L : k;
      for (std::size_t c = 0; c < features.dim(2); ++c)
        X(row, static_cast<Eigen::Index>(c)) = features(i, tf, c);
      for (std::size_t c = 0; c < targets.dim(2); ++c)
        Y(row, static_cast<Eigen::Index>(c)) = targets(i, ty, c);
      if (groups) groups->push_back(static_cast<int>(i));
    }
  return {X, Y};
}

inline RidgeCvResult map_to_targets(const Tensor3& features, const Tensor3& targets, int lag = 0,
                                    const RidgeCvOptions& opt = {}) {
  std::vector<int> groups;
  const auto [X, Y] = pair_samples(features, targets, lag, &groups);
  return ridge_cv(X, Y, groups, opt);
}

// ---------------------------------------------------------------------------
// Poisson GLM

struct GlmFit {
  Eigen::VectorXd weights;  // [F + 1]; index 0 is the intercept
  bool converged = false;
  int iterations = 0;

  Eigen::VectorXd rates(const Eigen::MatrixXd& X) const {
    return ((X * weights.tail(weights.size() - 1)).array() + weights(0)).exp().matrix();
  }
};

// Penalized Poisson log-likelihood (exp link), all weights penalized.
inline double glm_objective(const Eigen::MatrixXd& Xa, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& w, double l2) {
  const Eigen::ArrayXd eta = (Xa * w).array();
  return (y.array() * eta - eta.exp()).sum() - 0.5 * l2 * w.squaredNorm();
}

// Newton-Raphson (IRLS) with step halving.
inline GlmFit poisson_glm_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& counts,
                              double l2 = 1e-4, int max_iter = 100, double tol = 1e-8) {
  if (X.rows() != counts.size()) throw Error("glm: sample counts differ");
  if ((counts.array() < 0).any()) throw Error("glm: counts must be non-negative");
  const Eigen::Index n = X.rows(), F = X.cols();
  Eigen::MatrixXd Xa(n, F + 1);
  Xa.col(0).setOnes();
  Xa.rightCols(F) = X;
  GlmFit fit;
  fit.weights = Eigen::VectorXd::Zero(F + 1);
  fit.weights(0) = std::log(std::max(counts.mean(), 1e-3));
  double obj = glm_objective(Xa, counts, fit.weights, l2);
  for (int it = 0; it < max_iter; ++it) {
    fit.iterations = it + 1;
    const Eigen::VectorXd mu = (Xa * fit.weights).array().exp().matrix();
    const Eigen::VectorXd grad = Xa.transpose() * (counts - mu) - l2 * fit.weights;
    Eigen::MatrixXd Hs = Xa.transpose() * mu.asDiagonal() * Xa;
    Hs.diagonal().array() += l2;
    const Eigen::VectorXd step = Hs.ldlt().solve(grad);
    double t = 1.0;
    Eigen::VectorXd next = fit.weights + step;
    double next_obj = glm_objective(Xa, counts, next, l2);
    while (!(next_obj >= obj - 1e-12 * std::fabs(obj)) && t > 1e-10) {
      t *= 0.5;
      next = fit.weights + t * step;
      next_obj = glm_objective(Xa, counts, next, l2);
    }
    const double change = (next - fit.weights).cwiseAbs().maxCoeff();
    fit.weights = next;
    obj = next_obj;
    if (change < tol) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

// Poisson log-likelihood sum, with 0 * ln(0) := 0.
inline double poisson_loglik(const Eigen::VectorXd& counts, const Eigen::VectorXd& rates) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < counts.size(); ++i) {
    const double y = counts(i), mu = rates(i);
    s += (y > 0 ? y * std::log(mu) : 0.0) - mu - lanczos_lgamma(y + 1.0);
  }
  return s;
}

// 1 - (ln L(S) - ln L(M)) / (ln L(S) - ln L(null)); NaN when every count is
// equal (degenerate denominator).
inline double pseudo_r2(const Eigen::VectorXd& counts, const Eigen::VectorXd& model_rates,
                        double null_rate) {
  const double ls = poisson_loglik(counts, counts);
  const double lm = poisson_loglik(counts, model_rates);
  const double ln = poisson_loglik(counts, Eigen::VectorXd::Constant(counts.size(), null_rate));
  const double denom = ls - ln;
  if (!(std::fabs(denom) > 1e-12)) return kNaN;
  return 1.0 - (ls - lm) / denom;
}

// ---------------------------------------------------------------------------
// Spectra

// In-place iterative radix-2 FFT; size must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n & (n - 1)) throw Error("fft size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// DFT of a real segment zero-padded to nfft; radix-2 FFT when nfft is a power
// of two, direct summation otherwise.
inline std::vector<std::complex<double>> dft(const std::vector<double>& x, std::size_t nfft) {
  std::vector<std::complex<double>> out(nfft, 0.0);
  if ((nfft & (nfft - 1)) == 0) {
    for (std::size_t i = 0; i < std::min(x.size(), nfft); ++i) out[i] = x[i];
    fft_radix2(out);
    return out;
  }
  for (std::size_t k = 0; k < nfft; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < std::min(x.size(), nfft); ++t) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * t % nfft) /
                         static_cast<double>(nfft);
      acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n == 1) return w;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                 static_cast<double>(n - 1)));
  return w;
}

struct CoherenceOptions {
  std::size_t window_len = 35;
  std::size_t overlap = 25;
  double sample_rate = 100.0;
  std::size_t nfft = 0;  // 0 -> next power of two >= window_len
};

struct CoherenceResult {
  std::vector<double> frequencies;
  std::vector<double> values;
  std::size_t segments = 0;
};

// Welch magnitude-squared coherence; each segment has its mean removed, and
// cross- and auto-spectra are summed over every segment of every signal pair.
inline CoherenceResult coherence_multi(const std::vector<std::vector<double>>& xs,
                                       const std::vector<std::vector<double>>& ys,
                                       const CoherenceOptions& opt = {}) {
  if (xs.size() != ys.size()) throw Error("coherence: signal lists differ in length");
  if (opt.overlap >= opt.window_len) throw Error("coherence: overlap must be < window");
  std::size_t nfft = opt.nfft;
  if (nfft == 0) {
    nfft = 1;
    while (nfft < opt.window_len) nfft <<= 1;
  }
  if (nfft < opt.window_len) throw Error("coherence: nfft shorter than window");
  const std::size_t nf = nfft / 2 + 1;
  const auto win = hann_window(opt.window_len);
  const std::size_t step = opt.window_len - opt.overlap;
  std::vector<double> pxx(nf, 0.0), pyy(nf, 0.0);
  std::vector<std::complex<double>> pxy(nf, 0.0);
  CoherenceResult res;
  std::vector<double> sx(opt.window_len), sy(opt.window_len);
  for (std::size_t s = 0; s < xs.size(); ++s) {
    const auto& x = xs[s];
    const auto& y = ys[s];
    if (x.size() != y.size()) throw Error("coherence: x and y lengths differ");
    if (x.size() < opt.window_len) throw Error("coherence: signal shorter than window");
    for (std::size_t start = 0; start + opt.window_len <= x.size(); start += step) {
      double mx = 0.0, my = 0.0;
      for (std::size_t i = 0; i < opt.window_len; ++i) {
        mx += x[start + i];
        my += y[start + i];
      }
      mx /= static_cast<double>(opt.window_len);
      my /= static_cast<double>(opt.window_len);
      for (std::size_t i = 0; i < opt.window_len; ++i) {
        sx[i] = (x[start + i] - mx) * win[i];
        sy[i] = (y[start + i] - my) * win[i];
      }
      const auto fx = dft(sx, nfft);
      const auto fy = dft(sy, nfft);
      for (std::size_t k = 0; k < nf; ++k) {
        pxx[k] += std::norm(fx[k]);
        pyy[k] += std::norm(fy[k]);
        pxy[k] += fx[k] * std::conj(fy[k]);
      }
      ++res.segments;
    }
  }
  if (res.segments < 2) throw Error("coherence: fewer than two segments");
  for (std::size_t k = 0; k < nf; ++k) {
    res.frequencies.push_back(static_cast<double>(k) * opt.sample_rate / static_cast<double>(nfft));
    const double den = pxx[k] * pyy[k];
    const double c = den > 0 ? std::norm(pxy[k]) / den : 0.0;
    res.values.push_back(std::clamp(c, 0.0, 1.0));
  }
  return res;
}

inline CoherenceResult coherence(const std::vector<double>& x, const std::vector<double>& y,
                                 const CoherenceOptions& opt = {}) {
  return coherence_multi({x}, {y}, opt);
}

// ---------------------------------------------------------------------------
// Smoothing, resampling, PSTHs

// Gaussian smoothing along time (sd in bins), kernel truncated at 4 sd and
// renormalized at the edges.
inline std::vector<double> gaussian_smooth(std::span<const double> x, double sd_bins) {
  if (sd_bins <= 0) return {x.begin(), x.end()};
  const auto half = static_cast<std::ptrdiff_t>(std::ceil(4.0 * sd_bins));
  std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
  for (std::ptrdiff_t i = -half; i <= half; ++i)
    k[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * static_cast<double>(i * i) / (sd_bins * sd_bins));
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  std::vector<double> out(x.size());
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    double s = 0, w = 0;
    for (std::ptrdiff_t i = -half; i <= half; ++i) {
      const auto j = t + i;
      if (j < 0 || j >= n) continue;
      const double kw = k[static_cast<std::size_t>(i + half)];
      s += kw * x[static_cast<std::size_t>(j)];
      w += kw;
    }
    out[static_cast<std::size_t>(t)] = s / w;
  }
  return out;
}

inline Tensor3 gaussian_smooth(const Tensor3& x, double sd_bins) {
  Tensor3 out(x.dim(0), x.dim(1), x.dim(2));
  std::vector<double> buf(x.dim(1));
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t c = 0; c < x.dim(2); ++c) {
      for (std::size_t t = 0; t < x.dim(1); ++t) buf[t] = x(i, t, c);
      const auto s = gaussian_smooth(buf, sd_bins);
      for (std::size_t t = 0; t < x.dim(1); ++t) out(i, t, c) = s[t];
    }
  return out;
}

// Linear interpolation from samples at i / rate_in to n_out samples at
// j / rate_out; beyond the last input sample the last slope is extended.
inline std::vector<double> resample_linear(std::span<const double> x, double rate_in,
                                           double rate_out, std::size_t n_out) {
  if (!(rate_in > 0 && rate_out > 0)) throw Error("resample: rates must be positive");
  std::vector<double> out(n_out);
  if (x.empty()) return out;
  if (x.size() == 1) {
    std::fill(out.begin(), out.end(), x[0]);
    return out;
  }
  const std::size_t last = x.size() - 1;
  for (std::size_t j = 0; j < n_out; ++j) {
    const double pos = static_cast<double>(j) * rate_in / rate_out;
    auto i = static_cast<std::size_t>(std::floor(pos));
    if (i >= last) i = last - 1;
    const double f = pos - static_cast<double>(i);
    out[j] = x[i] + f * (x[i + 1] - x[i]);
  }
  return out;
}

inline std::size_t resampled_length(std::size_t n_in, double rate_in, double rate_out) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * rate_out / rate_in));
}

inline Tensor3 resample_linear(const Tensor3& x, double rate_in, double rate_out, std::size_t n_out) {
  Tensor3 out(x.dim(0), n_out, x.dim(2));
  std::vector<double> buf(x.dim(1));
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t c = 0; c < x.dim(2); ++c) {
      for (std::size_t t = 0; t < x.dim(1); ++t) buf[t] = x(i, t, c);
      const auto r = resample_linear(buf, rate_in, rate_out, n_out);
      for (std::size_t t = 0; t < n_out; ++t) out(i, t, c) = r[t];
    }
  return out;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  if (n != b.size() || n < 2) return kNaN;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return kNaN;
  return sab / std::sqrt(saa * sbb);
}

struct PsthCorrelation {
  std::vector<double> r;       // per neuron; NaN where undefined
  std::vector<bool> undefined;
};

// Per neuron: Pearson r between concatenated single-trial rates and the PSTH
// of the trial's condition (trial mean of Gaussian-smoothed events).
inline PsthCorrelation psth_correlation(const Tensor3& rates, const Tensor3& events,
                                        const std::vector<int>& labels, double smooth_sd_bins) {
  if (!rates.same_shape(events)) throw Error("psth: rates and events differ in shape");
  if (labels.size() != rates.dim(0)) throw Error("psth: one label per trial");
  std::map<int, std::vector<std::size_t>> by_cond;
  for (std::size_t i = 0; i < labels.size(); ++i) by_cond[labels[i]].push_back(i);
  if (by_cond.size() < 2) throw Error("psth: need at least two conditions");
  for (const auto& [c, v] : by_cond)
    if (v.size() < 2) throw Error("psth: need at least two trials per condition");
  const Tensor3 sm = gaussian_smooth(events, smooth_sd_bins);
  const std::size_t T = rates.dim(1), N = rates.dim(2);
  PsthCorrelation out;
  std::vector<double> a, b;
  for (std::size_t n = 0; n < N; ++n) {
    a.clear();
    b.clear();
    for (const auto& [c, trials] : by_cond) {
      std::vector<double> psth(T, 0.0);
      for (auto i : trials)
        for (std::size_t t = 0; t < T; ++t) psth[t] += sm(i, t, n);
      for (auto& v : psth) v /= static_cast<double>(trials.size());
      for (auto i : trials)
        for (std::size_t t = 0; t < T; ++t) {
          a.push_back(rates(i, t, n));
          b.push_back(psth[t]);
        }
    }
    const double r = pearson(a, b);
    out.r.push_back(r);
    out.undefined.push_back(std::isnan(r));
  }
  return out;
}

}  // namespace sbtt
