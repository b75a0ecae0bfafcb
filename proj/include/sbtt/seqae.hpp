#pragma once

// Sequential variational autoencoder with an autonomous generator, trained
// with selective BPTT.
//
//   zero-filled inputs -> bidirectional GRU encoder -> (mean, log-var) of z
//   z -> generator initial state -> generator GRU (no inputs) -> factors
//   factors -> emission pre-activations -> masked mean NLL
//
// Only observed entries enter the reconstruction loss, so gradients from
// unobserved entries are exactly zero while the generator still emits
// factors at every time step.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sbtt/emissions.hpp"
#include "sbtt/gru.hpp"
#include "sbtt/rng.hpp"
#include "sbtt/sampling.hpp"
#include "sbtt/tensor.hpp"
#include "sbtt/tensor_file.hpp"

namespace sbtt {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

struct SeqAeDims {
  Eigen::Index channels = 0;
  Eigen::Index encoder = 64;    // per direction
  Eigen::Index ic = 64;         // z dimension
  Eigen::Index generator = 100;
  Eigen::Index factors = 40;
  bool mask_input = false;      // append observation mask to encoder input

  Eigen::Index encoder_inputs() const { return mask_input ? 2 * channels : channels; }
};

struct SeqAeHyper {
  SeqAeDims dims;
  EmissionKind emission;
  double kl_weight_ic = 1e-4;
  double l2_generator = 1e-4;
  double dropout_rate = 0.0;
  double cd_rate = 0.0;
  double lr = 1e-3;
  int epochs = 100;
  int ramp_epochs = 80;
  int batch_size = 32;
  std::uint64_t seed = 0;
  double grad_clip = 200.0;        // global norm; <= 0 disables
  double scale_prior = 1.0;        // zig scale-factor prior value
  double scale_prior_weight = 1e-4;
  double val_smoothing = 0.7;
  double train_fraction = 0.8;
  int eval_every = 1;              // epochs between validation passes
};

enum class ParamGroup { encoder, decoder, fixed };

struct SeqAeParams {
  SeqAeDims dims;
  EmissionKind emission;
  GruWeights enc_fwd, enc_bwd;
  Eigen::MatrixXd ic_W;  // [2Z, 2E]
  Eigen::VectorXd ic_b;  // [2Z]
  Eigen::MatrixXd g0_W;  // [G, Z]
  Eigen::VectorXd g0_b;  // [G]
  GruWeights gen;        // Wx is [3G, 0]
  Eigen::MatrixXd fac_W; // [F, G]
  Eigen::MatrixXd out_W; // [P*C, F]
  Eigen::VectorXd out_b; // [P*C]
  Eigen::MatrixXd emission_log_scales;  // [2, C]; zig k and alpha scales
  Eigen::VectorXd emission_loc;         // [C]; zig location, not trained

  EmissionContext emission_context() const { return {emission_loc, emission_log_scales}; }
};

struct TensorView {
  std::string name;
  ParamGroup group;
  double* data;
  Eigen::Index rows, cols;

  Eigen::Index size() const { return rows * cols; }
};

namespace detail {
template <class M>
TensorView view(std::string name, ParamGroup g, M& m) {
  return {std::move(name), g, m.data(), m.rows(), m.cols()};
}
}  // namespace detail

// Every tensor of the model, in a fixed order.
inline std::vector<TensorView> tensors(SeqAeParams& p) {
  using detail::view;
  using G = ParamGroup;
  return {view("enc_fwd.Wx", G::encoder, p.enc_fwd.Wx),
          view("enc_fwd.Wh", G::encoder, p.enc_fwd.Wh),
          view("enc_fwd.b", G::encoder, p.enc_fwd.b),
          view("enc_bwd.Wx", G::encoder, p.enc_bwd.Wx),
          view("enc_bwd.Wh", G::encoder, p.enc_bwd.Wh),
          view("enc_bwd.b", G::encoder, p.enc_bwd.b),
          view("ic.W", G::encoder, p.ic_W),
          view("ic.b", G::encoder, p.ic_b),
          view("g0.W", G::decoder, p.g0_W),
          view("g0.b", G::decoder, p.g0_b),
          view("gen.Wh", G::decoder, p.gen.Wh),
          view("gen.b", G::decoder, p.gen.b),
          view("factors.W", G::decoder, p.fac_W),
          view("emission.W", G::decoder, p.out_W),
          view("emission.b", G::decoder, p.out_b),
          view("emission.log_scales", G::decoder, p.emission_log_scales),
          view("emission.loc", G::fixed, p.emission_loc)};
}

inline std::vector<TensorView> tensors(const SeqAeParams& p) {
  return tensors(const_cast<SeqAeParams&>(p));
}

inline SeqAeParams zeros_like_dims(const SeqAeDims& d, const EmissionKind& e) {
  SeqAeParams p;
  p.dims = d;
  p.emission = e;
  const Eigen::Index P = e.params_per_channel();
  p.enc_fwd = GruWeights::zeros(d.encoder_inputs(), d.encoder);
  p.enc_bwd = GruWeights::zeros(d.encoder_inputs(), d.encoder);
  p.ic_W = Eigen::MatrixXd::Zero(2 * d.ic, 2 * d.encoder);
  p.ic_b = Eigen::VectorXd::Zero(2 * d.ic);
  p.g0_W = Eigen::MatrixXd::Zero(d.generator, d.ic);
  p.g0_b = Eigen::VectorXd::Zero(d.generator);
  p.gen = GruWeights::zeros(0, d.generator);
  p.fac_W = Eigen::MatrixXd::Zero(d.factors, d.generator);
  p.out_W = Eigen::MatrixXd::Zero(P * d.channels, d.factors);
  p.out_b = Eigen::VectorXd::Zero(P * d.channels);
  p.emission_log_scales = Eigen::MatrixXd::Zero(2, d.channels);
  p.emission_loc = Eigen::VectorXd::Zero(d.channels);
  return p;
}

inline SeqAeParams zeros_like(const SeqAeParams& p) { return zeros_like_dims(p.dims, p.emission); }

inline void fill_normal(Eigen::MatrixXd& m, double sd, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
}

inline SeqAeParams init_seqae(const SeqAeDims& d, const EmissionKind& e, Rng& rng,
                              double scale_prior = 1.0) {
  SeqAeParams p = zeros_like_dims(d, e);
  p.enc_fwd = GruWeights::random(d.encoder_inputs(), d.encoder, rng);
  p.enc_bwd = GruWeights::random(d.encoder_inputs(), d.encoder, rng);
  fill_normal(p.ic_W, 1.0 / std::sqrt(2.0 * static_cast<double>(d.encoder)), rng);
  fill_normal(p.g0_W, 1.0 / std::sqrt(static_cast<double>(d.ic)), rng);
  p.gen = GruWeights::random(0, d.generator, rng);
  fill_normal(p.fac_W, 1.0 / std::sqrt(static_cast<double>(d.generator)), rng);
  fill_normal(p.out_W, 1.0 / std::sqrt(static_cast<double>(d.factors)), rng);
  p.emission_log_scales.setConstant(std::log(scale_prior));
  return p;
}

// Data-driven emission biases and ZIG locations from the observed entries.
inline void init_emission_from_data(SeqAeParams& p, const TimeSeriesBatch& b) {
  const Eigen::Index C = p.dims.channels;
  for (Eigen::Index c = 0; c < C; ++c) {
    double sum = 0.0, nz = 0.0, n = 0.0;
    double min_nz = std::numeric_limits<double>::infinity();
    double sum_nz = 0.0;
    for (std::size_t i = 0; i < b.trials(); ++i)
      for (std::size_t t = 0; t < b.time(); ++t) {
        const auto uc = static_cast<std::size_t>(c);
        if (!b.mask(i, t, uc)) continue;
        const double v = b.values(i, t, uc);
        sum += v;
        n += 1;
        if (v != 0.0) {
          nz += 1;
          sum_nz += v;
          min_nz = std::min(min_nz, v);
        }
      }
    const double mean = n > 0 ? sum / n : 0.0;
    switch (p.emission.family) {
      case EmissionFamily::poisson: p.out_b(c) = std::log(std::max(mean, 1e-3)); break;
      case EmissionFamily::gaussian: p.out_b(c) = mean; break;
      case EmissionFamily::zig: {
        const double frac = n > 0 ? std::clamp(nz / n, 1e-3, 1.0 - 1e-3) : 0.5;
        p.out_b(c) = std::log(frac / (1.0 - frac));
        p.emission_loc(c) = std::isfinite(min_nz) ? min_nz : 0.0;
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Batch layout helpers

// [C, T*B] time-major matrix of a (trials x time x channels) array.
template <class T>
Eigen::MatrixXd to_time_major(const Array3<T>& a) {
  const auto B = static_cast<Eigen::Index>(a.dim(0));
  const auto Tn = static_cast<Eigen::Index>(a.dim(1));
  const auto C = static_cast<Eigen::Index>(a.dim(2));
  Eigen::MatrixXd m(C, Tn * B);
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index t = 0; t < Tn; ++t) {
      const auto row = a.row(static_cast<std::size_t>(b), static_cast<std::size_t>(t));
      for (Eigen::Index c = 0; c < C; ++c) m(c, t * B + b) = static_cast<double>(row[static_cast<std::size_t>(c)]);
    }
  return m;
}

inline Tensor3 from_time_major(const Eigen::MatrixXd& m, std::size_t trials, std::size_t time) {
  const auto C = static_cast<std::size_t>(m.rows());
  Tensor3 out(trials, time, C);
  const auto B = static_cast<Eigen::Index>(trials);
  for (std::size_t b = 0; b < trials; ++b)
    for (std::size_t t = 0; t < time; ++t)
      for (std::size_t c = 0; c < C; ++c)
        out(b, t, c) = m(static_cast<Eigen::Index>(c),
                         static_cast<Eigen::Index>(t) * B + static_cast<Eigen::Index>(b));
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct PosteriorIc {
  Eigen::MatrixXd mean;     // [Z, B]
  Eigen::MatrixXd log_var;  // [Z, B], clamped
};

// Random draws shared by a forward pass and its backward pass.
struct ForwardNoise {
  Eigen::MatrixXd eps;         // [Z, B]; zero -> posterior mean
  Eigen::MatrixXd input_keep;  // [I, T*B] inverted-dropout multipliers, or empty
  Eigen::MatrixXd factor_keep; // [F, T*B], or empty
  Mask3 cd_input;              // coordinated dropout partitions, or empty
  Mask3 cd_loss;
};

inline double ramp_factor(int epoch, int ramp_epochs) {
  if (ramp_epochs <= 0) return 1.0;
  return std::clamp(static_cast<double>(epoch) / ramp_epochs, 0.0, 1.0);
}

inline ForwardNoise draw_noise(const SeqAeHyper& h, const TimeSeriesBatch& batch, Rng& rng) {
  const auto B = static_cast<Eigen::Index>(batch.trials());
  const auto T = static_cast<Eigen::Index>(batch.time());
  ForwardNoise n;
  n.eps.resize(h.dims.ic, B);
  for (Eigen::Index i = 0; i < n.eps.size(); ++i) n.eps.data()[i] = rng.normal();
  if (h.dropout_rate > 0.0) {
    const double keep = 1.0 - h.dropout_rate;
    auto draw = [&](Eigen::Index rows) {
      Eigen::MatrixXd m(rows, T * B);
      for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
      return m;
    };
    n.input_keep = draw(h.dims.encoder_inputs());
    n.factor_keep = draw(h.dims.factors);
  }
  if (h.cd_rate > 0.0) {
    auto split = coordinated_dropout_split(batch.mask, h.cd_rate, rng);
    n.cd_input = std::move(split.input);
    n.cd_loss = std::move(split.loss);
  }
  return n;
}

inline ForwardNoise deterministic_noise(const SeqAeDims& d, std::size_t trials) {
  ForwardNoise n;
  n.eps = Eigen::MatrixXd::Zero(d.ic, static_cast<Eigen::Index>(trials));
  return n;
}

struct SeqAeForward {
  Eigen::Index B = 0, T = 0;
  Eigen::MatrixXd x_in;        // [I, T*B] encoder input after masking/dropout
  GruSequenceCache enc_f, enc_b;
  Eigen::MatrixXd enc_out;     // [2E, B]
  Eigen::MatrixXd ic_raw;      // [2Z, B] before clamping
  PosteriorIc post;
  Eigen::MatrixXd z, g0;
  GruSequenceCache gen;
  Eigen::MatrixXd factors;     // [F, T*B] before dropout
  Eigen::MatrixXd factors_d;   // after dropout
  Eigen::MatrixXd pre;         // [P*C, T*B]
  Eigen::MatrixXd y;           // [C, T*B]
  Eigen::MatrixXd loss_mask;   // [C, T*B] (0/1)
};

struct LossComponents {
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;      // weighted, ramped
  double l2 = 0.0;      // weighted, ramped
  double scale_penalty = 0.0;
  double kl_raw = 0.0;  // unweighted mean KL per trial
  std::size_t observed = 0;
};

inline void check_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw Error(std::string("non-finite activations in ") + what);
}

// Encoder input: zero-filled values restricted to the input mask.
inline Eigen::MatrixXd encoder_input(const SeqAeDims& d, const TimeSeriesBatch& batch,
                                     const ForwardNoise& noise) {
  const Mask3& in_mask = noise.cd_input.empty() ? batch.mask : noise.cd_input;
  const Eigen::MatrixXd vals = to_time_major(batch.values);
  const Eigen::MatrixXd m = to_time_major(in_mask);
  Eigen::MatrixXd x(d.encoder_inputs(), vals.cols());
  // select by mask rather than multiply so stored garbage never leaks in
  x.topRows(d.channels) = (m.array() != 0.0).select(vals, 0.0);
  if (d.mask_input) x.bottomRows(d.channels) = m;
  if (noise.input_keep.size()) x = x.cwiseProduct(noise.input_keep);
  return x;
}

inline PosteriorIc encode_cached(const SeqAeParams& p, const TimeSeriesBatch& batch,
                                 const ForwardNoise& noise, SeqAeForward& fw) {
  const auto& d = p.dims;
  fw.B = static_cast<Eigen::Index>(batch.trials());
  fw.T = static_cast<Eigen::Index>(batch.time());
  if (static_cast<Eigen::Index>(batch.channels()) != d.channels)
    throw Error("batch channel count does not match the model");
  fw.x_in = encoder_input(d, batch, noise);
  const Eigen::MatrixXd h0 = Eigen::MatrixXd::Zero(d.encoder, fw.B);
  fw.enc_f = gru_forward(p.enc_fwd, gru_input_projection(p.enc_fwd, fw.x_in), h0, fw.T, false);
  fw.enc_b = gru_forward(p.enc_bwd, gru_input_projection(p.enc_bwd, fw.x_in), h0, fw.T, true);
  fw.enc_out.resize(2 * d.encoder, fw.B);
  fw.enc_out.topRows(d.encoder) = gru_final_state(fw.enc_f);
  fw.enc_out.bottomRows(d.encoder) = gru_final_state(fw.enc_b);
  check_finite(fw.enc_out, "encoder");
  fw.ic_raw = p.ic_W * fw.enc_out;
  fw.ic_raw.colwise() += p.ic_b;
  fw.post.mean = fw.ic_raw.topRows(d.ic);
  fw.post.log_var = fw.ic_raw.bottomRows(d.ic).cwiseMax(kLogVarMin).cwiseMin(kLogVarMax);
  return fw.post;
}

inline PosteriorIc encode(const SeqAeParams& p, const TimeSeriesBatch& batch) {
  SeqAeForward fw;
  return encode_cached(p, batch, deterministic_noise(p.dims, batch.trials()), fw);
}

// KL(N(mean, diag exp(log_var)) || N(0, I)) for one trial (column).
inline double kl_ic(const Eigen::VectorXd& mean, const Eigen::VectorXd& log_var) {
  return 0.5 * (log_var.array().exp() + mean.array().square() - 1.0 - log_var.array()).sum();
}

struct GeneratorOutput {
  Eigen::MatrixXd factors;  // [F, T*B]
  Eigen::MatrixXd pre;      // [P*C, T*B]
};

inline void decode_cached(const SeqAeParams& p, const Eigen::MatrixXd& z, Eigen::Index T,
                          const ForwardNoise& noise, SeqAeForward& fw) {
  fw.T = T;
  fw.B = z.cols();
  fw.z = z;
  fw.g0 = p.g0_W * z;
  fw.g0.colwise() += p.g0_b;
  fw.gen = gru_forward(p.gen, Eigen::MatrixXd(), fw.g0, T, false);
  fw.factors = p.fac_W * fw.gen.out;
  fw.factors_d = noise.factor_keep.size() ? Eigen::MatrixXd(fw.factors.cwiseProduct(noise.factor_keep))
                                          : fw.factors;
  fw.pre = p.out_W * fw.factors_d;
  fw.pre.colwise() += p.out_b;
}

// Autonomous rollout from initial conditions z ([Z, B]) for T steps.
inline GeneratorOutput generate(const SeqAeParams& p, const Eigen::MatrixXd& z, Eigen::Index T) {
  if (T < 1) throw Error("T must be at least 1");
  SeqAeForward fw;
  ForwardNoise none;
  decode_cached(p, z, T, none, fw);
  return {fw.factors, fw.pre};
}

inline SeqAeForward seqae_forward(const SeqAeParams& p, const TimeSeriesBatch& batch,
                                  const ForwardNoise& noise) {
  SeqAeForward fw;
  encode_cached(p, batch, noise, fw);
  Eigen::MatrixXd z = fw.post.mean;
  if (noise.eps.size())
    z += (0.5 * fw.post.log_var.array()).exp().matrix().cwiseProduct(noise.eps);
  decode_cached(p, z, fw.T, noise, fw);
  check_finite(fw.pre, "emission readout");
  fw.y = to_time_major(batch.values);
  const Mask3& lm = noise.cd_loss.empty() ? batch.mask : noise.cd_loss;
  fw.loss_mask = to_time_major(lm);
  return fw;
}

inline LossComponents loss_from_forward(const SeqAeParams& p, const SeqAeForward& fw,
                                        const SeqAeHyper& h, double ramp, double* recon_weight,
                                        Eigen::MatrixXd* d_pre, Eigen::MatrixXd* d_scales) {
  LossComponents lc;
  const auto obs = static_cast<std::size_t>((fw.loss_mask.array() != 0.0).count());
  lc.observed = obs;
  const double w = obs ? 1.0 / static_cast<double>(obs) : 0.0;
  if (recon_weight) *recon_weight = w;
  if (obs) {
    const double sum = accumulate_emission(p.emission, fw.pre, fw.y, fw.loss_mask,
                                           p.emission_context(), w, d_pre, d_scales);
    lc.recon = sum * w;
  }
  double kl = 0.0;
  for (Eigen::Index b = 0; b < fw.B; ++b)
    kl += kl_ic(fw.post.mean.col(b), fw.post.log_var.col(b));
  lc.kl_raw = fw.B ? kl / static_cast<double>(fw.B) : 0.0;
  lc.kl = ramp * h.kl_weight_ic * lc.kl_raw;
  lc.l2 = ramp * h.l2_generator * p.gen.Wh.squaredNorm();
  if (p.emission.family == EmissionFamily::zig && h.scale_prior_weight > 0.0)
    lc.scale_penalty =
        h.scale_prior_weight * (p.emission_log_scales.array().exp() - h.scale_prior).square().sum();
  lc.total = lc.recon + lc.kl + lc.l2 + lc.scale_penalty;
  if (!std::isfinite(lc.total)) throw Error("non-finite loss");
  return lc;
}

inline LossComponents seqae_loss_with_noise(const SeqAeParams& p, const TimeSeriesBatch& batch,
                                            const SeqAeHyper& h, const ForwardNoise& noise,
                                            int epoch) {
  const auto fw = seqae_forward(p, batch, noise);
  return loss_from_forward(p, fw, h, ramp_factor(epoch, h.ramp_epochs), nullptr, nullptr, nullptr);
}

// Draws the forward noise from a copy of rng, so seqae_loss and
// seqae_backward called with the same rng see the same draws.
inline LossComponents seqae_loss(const SeqAeParams& p, const TimeSeriesBatch& batch,
                                 const SeqAeHyper& h, const Rng& rng, int epoch) {
  Rng r = rng;
  const auto noise = draw_noise(h, batch, r);
  return seqae_loss_with_noise(p, batch, h, noise, epoch);
}

struct SeqAeGradients {
  LossComponents loss;
  SeqAeParams grads;
};

// Backpropagates a given reconstruction gradient d_pre (and, for ZIG, the
// gradient already accumulated in g.emission_log_scales) plus the penalty
// terms through the network.
inline void seqae_backward_from_pre(const SeqAeParams& p, const SeqAeForward& fw, const SeqAeHyper& h,
                                    const ForwardNoise& noise, double ramp, const Eigen::MatrixXd& d_pre,
                                    SeqAeParams& g) {
  const auto& d = p.dims;
  const double B = static_cast<double>(fw.B);

  // emission readout
  g.out_W.noalias() = d_pre * fw.factors_d.transpose();
  g.out_b = d_pre.rowwise().sum();
  Eigen::MatrixXd d_fac = p.out_W.transpose() * d_pre;
  if (noise.factor_keep.size()) d_fac = d_fac.cwiseProduct(noise.factor_keep);
  g.fac_W.noalias() = d_fac * fw.gen.out.transpose();
  const Eigen::MatrixXd d_gen_out = p.fac_W.transpose() * d_fac;

  // generator
  const Eigen::MatrixXd d_g0 =
      gru_backward(p.gen, fw.gen, d_gen_out, Eigen::MatrixXd::Zero(d.generator, fw.B), g.gen, nullptr);
  g.gen.Wh += 2.0 * ramp * h.l2_generator * p.gen.Wh;
  g.g0_W.noalias() = d_g0 * fw.z.transpose();
  g.g0_b = d_g0.rowwise().sum();
  const Eigen::MatrixXd dz = p.g0_W.transpose() * d_g0;

  // posterior: reparameterization + KL
  const double klc = ramp * h.kl_weight_ic / B;
  Eigen::MatrixXd d_ic(2 * d.ic, fw.B);
  const Eigen::ArrayXXd sd = (0.5 * fw.post.log_var.array()).exp();
  d_ic.topRows(d.ic) = dz + klc * fw.post.mean;
  Eigen::ArrayXXd dlv = klc * 0.5 * (fw.post.log_var.array().exp() - 1.0);
  if (noise.eps.size()) dlv += dz.array() * noise.eps.array() * 0.5 * sd;
  const Eigen::ArrayXXd raw_lv = fw.ic_raw.bottomRows(d.ic).array();
  dlv = (raw_lv < kLogVarMin || raw_lv > kLogVarMax).select(0.0, dlv);
  d_ic.bottomRows(d.ic) = dlv.matrix();
  g.ic_W.noalias() = d_ic * fw.enc_out.transpose();
  g.ic_b = d_ic.rowwise().sum();
  const Eigen::MatrixXd d_enc = p.ic_W.transpose() * d_ic;

  // encoder
  Eigen::MatrixXd dxp;
  gru_backward(p.enc_fwd, fw.enc_f, Eigen::MatrixXd(), d_enc.topRows(d.encoder), g.enc_fwd, &dxp);
  g.enc_fwd.Wx.noalias() = dxp * fw.x_in.transpose();
  g.enc_fwd.b = dxp.rowwise().sum();
  gru_backward(p.enc_bwd, fw.enc_b, Eigen::MatrixXd(), d_enc.bottomRows(d.encoder), g.enc_bwd, &dxp);
  g.enc_bwd.Wx.noalias() = dxp * fw.x_in.transpose();
  g.enc_bwd.b = dxp.rowwise().sum();

  // zig scale prior
  if (p.emission.family == EmissionFamily::zig && h.scale_prior_weight > 0.0) {
    const Eigen::ArrayXXd s = p.emission_log_scales.array().exp();
    g.emission_log_scales += (2.0 * h.scale_prior_weight * (s - h.scale_prior) * s).matrix();
  }
}

inline SeqAeGradients seqae_backward_with_noise(const SeqAeParams& p, const TimeSeriesBatch& batch,
                                                const SeqAeHyper& h, const ForwardNoise& noise,
                                                int epoch, double ramp_override = -1.0) {
  const double ramp = ramp_override >= 0.0 ? ramp_override : ramp_factor(epoch, h.ramp_epochs);
  const auto fw = seqae_forward(p, batch, noise);
  SeqAeGradients out{{}, zeros_like(p)};
  Eigen::MatrixXd d_pre = Eigen::MatrixXd::Zero(fw.pre.rows(), fw.pre.cols());
  double w = 0.0;
  out.loss = loss_from_forward(p, fw, h, ramp, &w, &d_pre,
                               p.emission.family == EmissionFamily::zig ? &out.grads.emission_log_scales
                                                                        : nullptr);
  seqae_backward_from_pre(p, fw, h, noise, ramp, d_pre, out.grads);
  return out;
}

inline SeqAeGradients seqae_backward(const SeqAeParams& p, const TimeSeriesBatch& batch,
                                     const SeqAeHyper& h, const Rng& rng, int epoch) {
  Rng r = rng;
  const auto noise = draw_noise(h, batch, r);
  return seqae_backward_with_noise(p, batch, h, noise, epoch);
}

// ---------------------------------------------------------------------------
// Inference

struct Inference {
  Tensor3 factors;  // [trials, T, F]
  Tensor3 rates;    // [trials, T, C] emission means
  Eigen::MatrixXd ic_mean;  // [Z, trials]
};

// Posterior-mean inference at every time step, processed in chunks.
inline Inference infer(const SeqAeParams& p, const TimeSeriesBatch& batch,
                       std::size_t chunk = 256) {
  const std::size_t n = batch.trials();
  const std::size_t T = batch.time();
  Inference out{Tensor3(n, T, static_cast<std::size_t>(p.dims.factors)),
                Tensor3(n, T, static_cast<std::size_t>(p.dims.channels)),
                Eigen::MatrixXd(p.dims.ic, static_cast<Eigen::Index>(n))};
  const auto ctx = p.emission_context();
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), start);
    const auto sub = select_trials(batch, idx);
    const auto post = encode(p, sub);
    const auto gen = generate(p, post.mean, static_cast<Eigen::Index>(T));
    out.ic_mean.middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(m)) = post.mean;
    const auto B = static_cast<Eigen::Index>(m);
    for (std::size_t b = 0; b < m; ++b)
      for (std::size_t t = 0; t < T; ++t) {
        const Eigen::Index col = static_cast<Eigen::Index>(t) * B + static_cast<Eigen::Index>(b);
        for (Eigen::Index f = 0; f < p.dims.factors; ++f)
          out.factors(start + b, t, static_cast<std::size_t>(f)) = gen.factors(f, col);
        const Eigen::VectorXd mean = emission_mean(p.emission, gen.pre.col(col), ctx);
        for (Eigen::Index c = 0; c < p.dims.channels; ++c)
          out.rates(start + b, t, static_cast<std::size_t>(c)) = mean(c);
      }
  }
  return out;
}

inline Tensor3 infer_rates(const SeqAeParams& p, const TimeSeriesBatch& batch) {
  return infer(p, batch).rates;
}

// Reconstruction NLL of observed entries under posterior-mean inference.
inline double evaluate_nll(const SeqAeParams& p, const TimeSeriesBatch& batch,
                           std::size_t chunk = 256) {
  double sum = 0.0;
  std::size_t obs = 0;
  for (std::size_t start = 0; start < batch.trials(); start += chunk) {
    const std::size_t m = std::min(chunk, batch.trials() - start);
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), start);
    const auto sub = select_trials(batch, idx);
    const auto fw = seqae_forward(p, sub, deterministic_noise(p.dims, m));
    const auto n = static_cast<std::size_t>((fw.loss_mask.array() != 0.0).count());
    sum += accumulate_emission(p.emission, fw.pre, fw.y, fw.loss_mask, p.emission_context(), 0.0,
                               nullptr, nullptr);
    obs += n;
  }
  return obs ? sum / static_cast<double>(obs) : 0.0;
}

// ---------------------------------------------------------------------------
// Training

struct AdamState {
  SeqAeParams m, v;
  long step = 0;
};

inline AdamState adam_init(const SeqAeParams& p) { return {zeros_like(p), zeros_like(p), 0}; }

inline double grad_norm(const SeqAeParams& g, bool encoder_only) {
  double s = 0.0;
  for (const auto& t : tensors(g)) {
    if (t.group == ParamGroup::fixed) continue;
    if (encoder_only && t.group != ParamGroup::encoder) continue;
    s += Eigen::Map<const Eigen::VectorXd>(t.data, t.size()).squaredNorm();
  }
  return std::sqrt(s);
}

inline void adam_step(SeqAeParams& p, const SeqAeParams& g, AdamState& st, double lr,
                      bool encoder_only, double clip) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++st.step;
  const double gn = grad_norm(g, encoder_only);
  const double scale = (clip > 0.0 && gn > clip) ? clip / gn : 1.0;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  auto pv = tensors(p);
  const auto gv = tensors(g);
  auto mv = tensors(st.m);
  auto vv = tensors(st.v);
  for (std::size_t k = 0; k < pv.size(); ++k) {
    if (pv[k].group == ParamGroup::fixed) continue;
    if (encoder_only && pv[k].group != ParamGroup::encoder) continue;
    for (Eigen::Index i = 0; i < pv[k].size(); ++i) {
      const double gi = scale * gv[k].data[i];
      double& mi = mv[k].data[i];
      double& vi = vv[k].data[i];
      mi = b1 * mi + (1.0 - b1) * gi;
      vi = b2 * vi + (1.0 - b2) * gi * gi;
      pv[k].data[i] -= lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
    }
  }
}

enum class TrainMode { fresh, retrain_encoder };

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_recon = 0.0;
  double val_nll = std::numeric_limits<double>::quiet_NaN();
  double val_smoothed = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_smoothed = std::numeric_limits<double>::infinity();
  bool diverged = false;
  std::string divergence_message;
  std::vector<std::size_t> train_trials, val_trials;
};

struct TrainResult {
  SeqAeParams params;
  TrainLog log;
};

// Deterministic 80/20 split of trial indices (seeded shuffle).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_trials(
    std::size_t n, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed, 0x5b1u);
  rng.shuffle(idx);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, n > 1 ? 1 : n, n > 1 ? n - 1 : n);
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> va(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  return {tr, va};
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Adam over minibatches; keeps the parameters at the epoch with the best
// exponentially smoothed validation NLL. In retrain_encoder mode only the
// encoder and initial-condition readout are updated.
inline TrainResult train_seqae(const TimeSeriesBatch& data, const SeqAeHyper& h, TrainMode mode,
                               const std::optional<SeqAeParams>& start = std::nullopt,
                               const EpochCallback& on_epoch = {}) {
  if (data.trials() < 2) throw Error("need at least two trials to train");
  if (mode == TrainMode::retrain_encoder && !start)
    throw Error("retrain_encoder requires starting parameters");
  Rng init_rng(h.seed, 1);
  SeqAeParams params;
  if (start) {
    params = *start;
    if (params.dims.channels != static_cast<Eigen::Index>(data.channels()))
      throw Error("checkpoint channel count does not match data");
  } else {
    SeqAeDims d = h.dims;
    d.channels = static_cast<Eigen::Index>(data.channels());
    params = init_seqae(d, h.emission, init_rng, h.scale_prior);
    init_emission_from_data(params, data);
  }
  SeqAeHyper hh = h;
  hh.dims = params.dims;
  const bool enc_only = mode == TrainMode::retrain_encoder;

  TrainResult res{params, {}};
  auto [tr, va] = split_trials(data.trials(), h.train_fraction, h.seed);
  res.log.train_trials = tr;
  res.log.val_trials = va;
  const auto val_batch = select_trials(data, va);
  AdamState adam = adam_init(params);
  Rng shuffle_rng(h.seed, 2);
  std::uint64_t step_id = 0;
  double smoothed = std::numeric_limits<double>::quiet_NaN();
  const std::size_t bs = std::max<std::size_t>(1, static_cast<std::size_t>(h.batch_size));

  for (int epoch = 0; epoch < h.epochs; ++epoch) {
    std::vector<std::size_t> order = tr;
    shuffle_rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0, recon_sum = 0.0;
    std::size_t nb = 0;
    const double ramp = enc_only ? 1.0 : ramp_factor(epoch, h.ramp_epochs);
    try {
      for (std::size_t s = 0; s < order.size(); s += bs) {
        const std::size_t m = std::min(bs, order.size() - s);
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                     order.begin() + static_cast<std::ptrdiff_t>(s + m));
        const auto mb = select_trials(data, idx);
        Rng noise_rng(h.seed ^ 0xabcdefULL, 1000 + step_id++);
        const auto noise = draw_noise(hh, mb, noise_rng);
        auto gr = seqae_backward_with_noise(params, mb, hh, noise, epoch, ramp);
        loss_sum += gr.loss.total;
        recon_sum += gr.loss.recon;
        ++nb;
        if (h.lr > 0.0) adam_step(params, gr.grads, adam, h.lr, enc_only, h.grad_clip);
      }
      rec.train_loss = nb ? loss_sum / static_cast<double>(nb) : 0.0;
      rec.train_recon = nb ? recon_sum / static_cast<double>(nb) : 0.0;
      const bool last = epoch + 1 == h.epochs;
      if (!va.empty() && (epoch % std::max(1, h.eval_every) == 0 || last)) {
        rec.val_nll = evaluate_nll(params, val_batch);
        if (!std::isfinite(rec.val_nll)) throw Error("non-finite validation NLL");
        smoothed = std::isnan(smoothed) ? rec.val_nll
                                        : h.val_smoothing * smoothed + (1.0 - h.val_smoothing) * rec.val_nll;
        rec.val_smoothed = smoothed;
        if (smoothed < res.log.best_val_smoothed) {
          res.log.best_val_smoothed = smoothed;
          res.log.best_epoch = epoch;
          res.params = params;
        }
      }
    } catch (const Error& e) {
      res.log.diverged = true;
      res.log.divergence_message = e.what();
      break;
    }
    res.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (res.log.best_epoch < 0 && !res.log.diverged) res.params = params;
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json + one TensorFile per tensor.

inline nlohmann::json dims_to_json(const SeqAeDims& d) {
  return {{"channels", d.channels}, {"encoder", d.encoder}, {"ic", d.ic},
          {"generator", d.generator}, {"factors", d.factors}, {"mask_input", d.mask_input}};
}

inline SeqAeDims dims_from_json(const nlohmann::json& j) {
  SeqAeDims d;
  d.channels = j.at("channels").get<Eigen::Index>();
  d.encoder = j.at("encoder").get<Eigen::Index>();
  d.ic = j.at("ic").get<Eigen::Index>();
  d.generator = j.at("generator").get<Eigen::Index>();
  d.factors = j.at("factors").get<Eigen::Index>();
  d.mask_input = j.value("mask_input", false);
  return d;
}

inline void save_checkpoint(const SeqAeParams& p, const std::filesystem::path& dir,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = {{"role", "seqae_checkpoint"},
                      {"dims", dims_to_json(p.dims)},
                      {"emission", {{"family", to_string(p.emission.family)}, {"sd", p.emission.sd}}},
                      {"tensors", nlohmann::json::array()},
                      {"extra", extra}};
  for (const auto& t : tensors(p)) {
    TensorManifest m{{static_cast<std::size_t>(t.rows), static_cast<std::size_t>(t.cols)},
                     DType::f64, "row-major", t.name};
    // Eigen storage is column-major; write row-major.
    std::vector<double> rm(static_cast<std::size_t>(t.size()));
    for (Eigen::Index r = 0; r < t.rows; ++r)
      for (Eigen::Index c = 0; c < t.cols; ++c)
        rm[static_cast<std::size_t>(r * t.cols + c)] = t.data[c * t.rows + r];
    write_tensor(dir / t.name, m, std::span<const double>(rm));
    j["tensors"].push_back(t.name);
  }
  detail::write_file(dir / "manifest.json", j.dump(2) + "\n");
}

inline SeqAeParams load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad checkpoint manifest: " + std::string(e.what()));
  }
  EmissionKind ek{parse_emission_family(j.at("emission").at("family").get<std::string>()),
                  j.at("emission").value("sd", 1.0)};
  SeqAeParams p = zeros_like_dims(dims_from_json(j.at("dims")), ek);
  for (auto& t : tensors(p)) {
    const auto td = read_tensor(dir / t.name);
    if (td.manifest.dims.size() != 2 ||
        td.manifest.dims[0] != static_cast<std::size_t>(t.rows) ||
        td.manifest.dims[1] != static_cast<std::size_t>(t.cols))
      throw Error("checkpoint tensor " + t.name + " has unexpected shape");
    for (Eigen::Index r = 0; r < t.rows; ++r)
      for (Eigen::Index c = 0; c < t.cols; ++c)
        t.data[c * t.rows + r] = td.values[static_cast<std::size_t>(r * t.cols + c)];
  }
  return p;
}

}  // namespace sbtt
