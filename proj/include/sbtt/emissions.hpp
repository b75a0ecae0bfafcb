#pragma once

// Observation likelihoods: Gaussian, Poisson and zero-inflated gamma (ZIG).
//
// Pre-activation layout for C channels: rows [p*C, (p+1)*C) hold parameter p.
//   gaussian: p0 = mean
//   poisson:  p0 = log-rate
//   zig:      p0 = logit q, p1 = k pre-activation, p2 = alpha pre-activation
// For ZIG, k = s_k * sigmoid(p1) and alpha = s_alpha * sigmoid(p2), where the
// per-channel scales s are stored as log-scales (row 0: k, row 1: alpha).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "sbtt/rng.hpp"
#include "sbtt/special.hpp"
#include "sbtt/tensor.hpp"

namespace sbtt {

inline constexpr double kProbEps = 1e-6;
// Smallest gamma argument y - loc; keeps the density finite at y == loc.
inline constexpr double kZigOffsetFloor = 1e-6;
inline constexpr double kZigParamFloor = 1e-8;

struct ZigParams {
  double q = 0.5;
  double k = 1.0;
  double alpha = 1.0;
  double loc = 0.0;
};

enum class EmissionFamily { gaussian, poisson, zig };

struct EmissionKind {
  EmissionFamily family = EmissionFamily::poisson;
  double sd = 1.0;  // gaussian only

  int params_per_channel() const { return family == EmissionFamily::zig ? 3 : 1; }
};

inline std::string to_string(EmissionFamily f) {
  switch (f) {
    case EmissionFamily::gaussian: return "gaussian";
    case EmissionFamily::poisson: return "poisson";
    case EmissionFamily::zig: return "zig";
  }
  return "?";
}

inline EmissionFamily parse_emission_family(const std::string& s) {
  if (s == "gaussian") return EmissionFamily::gaussian;
  if (s == "poisson") return EmissionFamily::poisson;
  if (s == "zig") return EmissionFamily::zig;
  throw Error("unknown emission family '" + s + "'");
}

inline double clamp_prob(double q) { return std::clamp(q, kProbEps, 1.0 - kProbEps); }

inline double scaled_sigmoid(double x, double scale) { return scale * sigmoid(x); }

// Full Poisson NLL including ln(count!).
inline double poisson_nll(double rate, double count) {
  if (!(rate > 0.0)) throw Error("poisson_nll requires rate > 0");
  return rate - count * std::log(rate) + lanczos_lgamma(count + 1.0);
}

inline double gamma_log_pdf(double x, double shape, double scale) {
  return (shape - 1.0) * std::log(x) - x / scale - lanczos_lgamma(shape) - shape * std::log(scale);
}

inline double zig_nll(const ZigParams& p, double y) {
  const double q = clamp_prob(p.q);
  if (y == 0.0) return -std::log(1.0 - q);
  if (y < 0.0) throw Error("zig_nll: negative observation");
  if (y < p.loc) throw Error("zig_nll: event below the location parameter");
  const double off = std::max(y - p.loc, kZigOffsetFloor);
  return -std::log(q) - gamma_log_pdf(off, p.k, p.alpha);
}

inline double zig_mean(const ZigParams& p) { return p.q * (p.k * p.alpha + p.loc); }

inline double zig_sample(const ZigParams& p, Rng& rng) {
  const double q = clamp_prob(p.q);
  if (rng.uniform() >= q) return 0.0;
  return p.loc + rng.gamma(p.k, p.alpha);
}

inline ZigParams zig_from_preactivations(double a_q, double a_k, double a_alpha, double log_sk,
                                         double log_salpha, double loc) {
  return {clamp_prob(sigmoid(a_q)),
          std::max(scaled_sigmoid(a_k, std::exp(log_sk)), kZigParamFloor),
          std::max(scaled_sigmoid(a_alpha, std::exp(log_salpha)), kZigParamFloor), loc};
}

// Per-channel constants needed by an emission: ZIG location and log-scales.
struct EmissionContext {
  Eigen::VectorXd loc;         // [C], zig only
  Eigen::MatrixXd log_scales;  // [2, C], zig only
};

// Accumulates NLL of observed entries of one block of samples.
// pre: [P*C, n], y: [C, n], mask: [C, n] (nonzero = observed).
// Adds weight * dNLL/dpre into d_pre and weight * dNLL/dlog_scales into
// d_log_scales (if non-null). Returns the unweighted NLL sum.
template <class MaskMat>
double accumulate_emission(const EmissionKind& kind, const Eigen::MatrixXd& pre,
                           const Eigen::MatrixXd& y, const MaskMat& mask,
                           const EmissionContext& ctx, double weight, Eigen::MatrixXd* d_pre,
                           Eigen::MatrixXd* d_log_scales) {
  const Eigen::Index C = y.rows();
  const Eigen::Index n = y.cols();
  double total = 0.0;
  switch (kind.family) {
    case EmissionFamily::poisson:
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index c = 0; c < C; ++c) {
          if (!mask(c, j)) continue;
          const double a = pre(c, j);
          const double rate = std::exp(a);
          const double yc = y(c, j);
          total += rate - yc * a + lanczos_lgamma(yc + 1.0);
          if (d_pre) (*d_pre)(c, j) += weight * (rate - yc);
        }
      break;
    case EmissionFamily::gaussian: {
      const double var = kind.sd * kind.sd;
      const double cst = std::log(kind.sd) + 0.5 * std::log(2.0 * std::numbers::pi);
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index c = 0; c < C; ++c) {
          if (!mask(c, j)) continue;
          const double r = pre(c, j) - y(c, j);
          total += 0.5 * r * r / var + cst;
          if (d_pre) (*d_pre)(c, j) += weight * r / var;
        }
      break;
    }
    case EmissionFamily::zig:
      for (Eigen::Index c = 0; c < C; ++c) {
        const double sk = std::exp(ctx.log_scales(0, c));
        const double sa = std::exp(ctx.log_scales(1, c));
        const double loc = ctx.loc(c);
        for (Eigen::Index j = 0; j < n; ++j) {
          if (!mask(c, j)) continue;
          const double yc = y(c, j);
          const double sq = sigmoid(pre(c, j));
          const bool q_clamped = sq < kProbEps || sq > 1.0 - kProbEps;
          const double q = clamp_prob(sq);
          if (yc == 0.0) {
            total += -std::log(1.0 - q);
            if (d_pre && !q_clamped) (*d_pre)(c, j) += weight * q;
            continue;
          }
          if (yc < loc) throw Error("zig: event below the location parameter");
          const double sgk = sigmoid(pre(C + c, j));
          const double sga = sigmoid(pre(2 * C + c, j));
          const double k_raw = sk * sgk;
          const double a_raw = sa * sga;
          const double k = std::max(k_raw, kZigParamFloor);
          const double al = std::max(a_raw, kZigParamFloor);
          const double off = std::max(yc - loc, kZigOffsetFloor);
          const double lo = std::log(off);
          const double la = std::log(al);
          total += -std::log(q) - (k - 1.0) * lo + off / al + lanczos_lgamma(k) + k * la;
          const double dk = -lo + digamma(k) + la;
          const double dal = -off / (al * al) + k / al;
          if (d_pre) {
            if (!q_clamped) (*d_pre)(c, j) += weight * -(1.0 - q);
            if (k_raw > kZigParamFloor) (*d_pre)(C + c, j) += weight * dk * sk * sgk * (1.0 - sgk);
            if (a_raw > kZigParamFloor)
              (*d_pre)(2 * C + c, j) += weight * dal * sa * sga * (1.0 - sga);
          }
          if (d_log_scales) {
            if (k_raw > kZigParamFloor) (*d_log_scales)(0, c) += weight * dk * k;
            if (a_raw > kZigParamFloor) (*d_log_scales)(1, c) += weight * dal * al;
          }
        }
      }
      break;
  }
  return total;
}

struct EmissionNllGrad {
  double nll = 0.0;            // mean over observed entries
  Eigen::MatrixXd d_pre;       // [P*C, n]
  Eigen::MatrixXd d_log_scales;  // [2, C] (zig) or empty
  std::size_t observed = 0;
};

// Mean NLL over observed entries with analytic gradients through the
// emission nonlinearities. Unobserved entries contribute nothing.
template <class MaskMat>
EmissionNllGrad emission_nll_grad(const EmissionKind& kind, const Eigen::MatrixXd& pre,
                                  const Eigen::MatrixXd& y, const MaskMat& mask,
                                  const EmissionContext& ctx = {}) {
  if (pre.rows() != kind.params_per_channel() * y.rows() || pre.cols() != y.cols() ||
      mask.rows() != y.rows() || mask.cols() != y.cols())
    throw Error("emission_nll_grad shape mismatch");
  EmissionNllGrad out;
  for (Eigen::Index j = 0; j < y.cols(); ++j)
    for (Eigen::Index c = 0; c < y.rows(); ++c)
      if (mask(c, j)) ++out.observed;
  out.d_pre = Eigen::MatrixXd::Zero(pre.rows(), pre.cols());
  if (kind.family == EmissionFamily::zig) out.d_log_scales = Eigen::MatrixXd::Zero(2, y.rows());
  if (out.observed == 0) return out;
  const double w = 1.0 / static_cast<double>(out.observed);
  const double sum = accumulate_emission(kind, pre, y, mask, ctx, w, &out.d_pre,
                                         kind.family == EmissionFamily::zig ? &out.d_log_scales
                                                                            : nullptr);
  out.nll = sum * w;
  return out;
}

// Expected observation for each channel of one column of pre-activations.
inline Eigen::VectorXd emission_mean(const EmissionKind& kind, const Eigen::VectorXd& pre,
                                     const EmissionContext& ctx) {
  const Eigen::Index C = pre.size() / kind.params_per_channel();
  Eigen::VectorXd out(C);
  for (Eigen::Index c = 0; c < C; ++c) {
    switch (kind.family) {
      case EmissionFamily::poisson: out(c) = std::exp(pre(c)); break;
      case EmissionFamily::gaussian: out(c) = pre(c); break;
      case EmissionFamily::zig:
        out(c) = zig_mean(zig_from_preactivations(pre(c), pre(C + c), pre(2 * C + c),
                                                  ctx.log_scales(0, c), ctx.log_scales(1, c),
                                                  ctx.loc(c)));
        break;
    }
  }
  return out;
}

}  // namespace sbtt
