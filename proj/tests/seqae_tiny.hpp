#pragma once

// The tiny sequential autoencoder shared by the gradient tests and the
// acceptance run: E=4, Z=3, G=5, F=2, 6 channels, T=10.

#include <algorithm>

#include "gradcheck.hpp"
#include "sbtt/sampling.hpp"
#include "sbtt/seqae.hpp"

namespace sbtt::tiny {

inline SeqAeHyper tiny_hyper(EmissionFamily fam) {
  SeqAeHyper h;
  h.dims.channels = 6;
  h.dims.encoder = 4;
  h.dims.ic = 3;
  h.dims.generator = 5;
  h.dims.factors = 2;
  h.emission.family = fam;
  h.kl_weight_ic = 0.3;
  h.l2_generator = 0.05;
  h.ramp_epochs = 4;
  h.scale_prior_weight = 0.1;
  h.scale_prior = 1.5;
  return h;
}

inline Tensor3 tiny_values(EmissionFamily fam, std::size_t trials, std::uint64_t seed) {
  Rng rng(seed);
  Tensor3 v(trials, 10, 6);
  for (auto& x : v.storage()) {
    if (fam == EmissionFamily::poisson) x = static_cast<double>(rng.poisson(1.3));
    else if (fam == EmissionFamily::zig) x = rng.bernoulli(0.4) ? 0.2 + rng.gamma(2.0, 0.5) : 0.0;
    else x = rng.normal();
  }
  return v;
}

inline TimeSeriesBatch tiny_batch(EmissionFamily fam, double drop, std::uint64_t seed, std::size_t trials = 4) {
  auto b = make_dense_batch(tiny_values(fam, trials, seed), 0.01);
  if (drop > 0) b = apply_mask(b, random_drop_mask(trials, 10, 6, drop, Rng(seed + 1)));
  return b;
}

inline SeqAeParams tiny_params(const SeqAeHyper& h, const TimeSeriesBatch& batch) {
  Rng init(7);
  auto p = init_seqae(h.dims, h.emission, init, h.scale_prior);
  init_emission_from_data(p, batch);
  p.emission_log_scales.setConstant(0.3);
  return p;
}

inline double max_rel(const SeqAeParams& a, const SeqAeParams& b) {
  const auto ta = tensors(a);
  const auto tb = tensors(b);
  double worst = 0.0;
  for (std::size_t k = 0; k < ta.size(); ++k) {
    Eigen::Map<const Eigen::MatrixXd> x(ta[k].data, ta[k].rows, ta[k].cols);
    Eigen::Map<const Eigen::MatrixXd> y(tb[k].data, tb[k].rows, tb[k].cols);
    worst = std::max(worst, oracle::relative_error(x, y));
  }
  return worst;
}

inline bool bit_equal(const SeqAeParams& a, const SeqAeParams& b) {
  const auto ta = tensors(a);
  const auto tb = tensors(b);
  for (std::size_t k = 0; k < ta.size(); ++k)
    for (Eigen::Index i = 0; i < ta[k].size(); ++i)
      if (ta[k].data[i] != tb[k].data[i]) return false;
  return true;
}

inline const EmissionFamily kFamilies[] = {EmissionFamily::poisson, EmissionFamily::zig, EmissionFamily::gaussian};

// Largest relative error over trainable tensors against central differences,
// with the noise draw held fixed.
inline double seqae_fd_error(SeqAeParams p, const TimeSeriesBatch& batch, const SeqAeHyper& h,
                             const ForwardNoise& noise, int epoch) {
  const auto analytic = seqae_backward_with_noise(p, batch, h, noise, epoch);
  auto pv = tensors(p);
  const auto gv = tensors(analytic.grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < pv.size(); ++k) {
    if (pv[k].group == ParamGroup::fixed) continue;
    Eigen::Map<Eigen::MatrixXd> m(pv[k].data, pv[k].rows, pv[k].cols);
    Eigen::MatrixXd tmp = m;
    const Eigen::MatrixXd fd = oracle::numeric_gradient(tmp, [&] {
      m = tmp;
      return seqae_loss_with_noise(p, batch, h, noise, epoch).total;
    });
    m = tmp;
    Eigen::Map<const Eigen::MatrixXd> a(gv[k].data, gv[k].rows, gv[k].cols);
    worst = std::max(worst, oracle::relative_error(a, fd));
  }
  return worst;
}

}  // namespace sbtt::tiny
