#pragma once

// Synthetic data: Lorenz latents, Poisson spiking, calcium fluorescence,
// raster-scan sampling and naive AR(1) deconvolution.

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "sbtt/rng.hpp"
#include "sbtt/sampling.hpp"
#include "sbtt/tensor.hpp"

namespace sbtt {

struct LorenzConfig {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  double dt = 0.01;             // Euler step
  int downsample_factor = 1;    // Euler steps per output sample
  int n_conditions = 32;
  int trial_ms = 900;
  double bin_ms = 10.0;         // output sample spacing
  int burn_in_steps = 1000;
  std::uint64_t seed = 0;

  int samples() const { return static_cast<int>(std::lround(trial_ms / bin_ms)); }
};

struct CalciumConfig {
  double spike_amp_sd = 0.1;
  double gamma_lo = 0.93;
  double gamma_hi = 0.95;
  double noise_mean = 0.3;
  double noise_sd = 0.02;
  double noise_floor = 0.09;
  double s_min = 0.1;
  double hill_n = 2.0;
  double hill_k_percentile = 0.9;
  double signal_noise_exponent = 1.0;  // variance = d^2 * amplitude^exponent
  double fine_rate = 100.0;
  int n_phases = 3;
  bool add_noise = true;
  bool apply_nonlinearity = true;
};

using Vec3 = Eigen::Vector3d;

inline Vec3 lorenz_step(const Vec3& s, const LorenzConfig& c) {
  const Vec3 d(c.sigma * (s.y() - s.x()), s.x() * (c.rho - s.z()) - s.y(),
               s.x() * s.y() - c.beta * s.z());
  return s + c.dt * d;
}

// Euler trajectory of `samples` states spaced `downsample_factor` steps apart.
inline std::vector<Vec3> lorenz_trajectory(Vec3 s, const LorenzConfig& c, int samples) {
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    out.push_back(s);
    for (int k = 0; k < c.downsample_factor; ++k) s = lorenz_step(s, c);
  }
  return out;
}

// [conditions, T, 3]. Each condition starts from a random state, runs
// burn_in_steps Euler steps, then records T downsampled states.
inline Tensor3 lorenz_generate(const LorenzConfig& cfg, Rng& rng) {
  if (!(cfg.dt > 0) || cfg.downsample_factor < 1 || cfg.n_conditions < 1)
    throw Error("invalid Lorenz configuration");
  const int T = cfg.samples();
  Tensor3 out(static_cast<std::size_t>(cfg.n_conditions), static_cast<std::size_t>(T), 3);
  for (int c = 0; c < cfg.n_conditions; ++c) {
    Vec3 s(rng.uniform(-15, 15), rng.uniform(-15, 15), rng.uniform(5, 40));
    for (int k = 0; k < cfg.burn_in_steps; ++k) s = lorenz_step(s, cfg);
    const auto traj = lorenz_trajectory(s, cfg, T);
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < 3; ++d)
        out(static_cast<std::size_t>(c), static_cast<std::size_t>(t), static_cast<std::size_t>(d)) =
            traj[static_cast<std::size_t>(t)](d);
  }
  return out;
}

// z-score each channel over all trials and time points.
inline Tensor3 zscore_channels(const Tensor3& x) {
  Tensor3 out = x;
  const std::size_t C = x.dim(2);
  const double n = static_cast<double>(x.dim(0) * x.dim(1));
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0, ss = 0;
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t t = 0; t < x.dim(1); ++t) s += x(i, t, c);
    const double mean = s / n;
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t t = 0; t < x.dim(1); ++t) ss += (x(i, t, c) - mean) * (x(i, t, c) - mean);
    const double sd = std::sqrt(ss / n);
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t t = 0; t < x.dim(1); ++t)
        out(i, t, c) = sd > 0 ? (x(i, t, c) - mean) / sd : 0.0;
  }
  return out;
}

struct RateModel {
  Eigen::MatrixXd weights;  // [neurons, 3]
  Eigen::VectorXd offsets;  // [neurons] log-rate offsets giving the baseline
  Tensor3 rates;            // [conditions, T, neurons], Hz
};

// rate = exp(W * zscore(state) + b), with b set so each neuron's mean rate
// over conditions and time equals baseline_hz.
inline RateModel rates_from_latents(const Tensor3& states, int n_neurons, double baseline_hz,
                                    double w_sd, Rng& rng) {
  const Tensor3 zs = zscore_channels(states);
  const std::size_t K = zs.dim(0), T = zs.dim(1), D = zs.dim(2);
  const auto N = static_cast<std::size_t>(n_neurons);
  RateModel m{Eigen::MatrixXd(n_neurons, static_cast<Eigen::Index>(D)), Eigen::VectorXd(n_neurons),
              Tensor3(K, T, N)};
  for (Eigen::Index i = 0; i < m.weights.size(); ++i) m.weights.data()[i] = w_sd * rng.normal();
  for (std::size_t n = 0; n < N; ++n) {
    double mean = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < T; ++t) {
        double a = 0.0;
        for (std::size_t d = 0; d < D; ++d)
          a += m.weights(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d)) * zs(k, t, d);
        m.rates(k, t, n) = std::exp(a);
        mean += m.rates(k, t, n);
      }
    mean /= static_cast<double>(K * T);
    const double scale = baseline_hz / mean;
    m.offsets(static_cast<Eigen::Index>(n)) = std::log(scale);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < T; ++t) m.rates(k, t, n) *= scale;
  }
  return m;
}

// Repeat each condition `trials_per_condition` times; labels[i] is the
// condition of trial i (conditions are contiguous blocks).
template <class T>
Array3<T> repeat_conditions(const Array3<T>& per_condition, int trials_per_condition,
                            std::vector<int>* labels = nullptr) {
  const std::size_t K = per_condition.dim(0);
  const auto R = static_cast<std::size_t>(trials_per_condition);
  Array3<T> out(K * R, per_condition.dim(1), per_condition.dim(2));
  const std::size_t stride = per_condition.dim(1) * per_condition.dim(2);
  if (labels) labels->clear();
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t r = 0; r < R; ++r) {
      std::copy_n(per_condition.storage().begin() + static_cast<std::ptrdiff_t>(k * stride), stride,
                  out.storage().begin() + static_cast<std::ptrdiff_t>((k * R + r) * stride));
      if (labels) labels->push_back(static_cast<int>(k));
    }
  return out;
}

// Independent Poisson(rate * dt) counts per bin.
inline Tensor3 sample_spikes(const Tensor3& rates, double dt, Rng& rng) {
  Tensor3 out(rates.dim(0), rates.dim(1), rates.dim(2));
  const auto r = rates.flat();
  auto o = out.flat();
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r[i] < 0) throw Error("negative rate");
    o[i] = static_cast<double>(rng.poisson(r[i] * dt));
  }
  return out;
}

struct FluorescenceResult {
  Tensor3 traces;               // [trials, T, neurons]
  std::vector<double> gamma;    // per neuron, per fine bin
  std::vector<double> noise_sd; // per neuron (sn = d)
};

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Per neuron: jittered spike amplitudes -> AR(1) calcium -> Hill
// nonlinearity -> min-max normalization -> additive and signal-dependent
// Gaussian noise. Each trial's calcium starts from zero.
inline FluorescenceResult synth_fluorescence(const Tensor3& spikes, const CalciumConfig& cfg,
                                             Rng& rng) {
  const std::size_t R = spikes.dim(0), T = spikes.dim(1), N = spikes.dim(2);
  FluorescenceResult res{Tensor3(R, T, N), std::vector<double>(N), std::vector<double>(N)};
  for (std::size_t n = 0; n < N; ++n) {
    Rng nr = rng.derive(n);
    const double g = nr.uniform(cfg.gamma_lo, cfg.gamma_hi);
    const double sn = nr.truncated_normal_below(cfg.noise_mean, cfg.noise_sd, cfg.noise_floor);
    res.gamma[n] = g;
    res.noise_sd[n] = sn;
    std::vector<double> c(R * T);
    for (std::size_t i = 0; i < R; ++i) {
      double prev = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const auto k = static_cast<long>(spikes(i, t, n));
        double s = 0.0;
        for (long j = 0; j < k; ++j) s += 1.0 + cfg.spike_amp_sd * nr.normal();
        prev = g * prev + s;
        c[i * T + t] = prev;
      }
    }
    if (cfg.apply_nonlinearity) {
      const double K = percentile(c, cfg.hill_k_percentile);
      if (K > 0) {
        const double Kn = std::pow(K, cfg.hill_n);
        for (auto& v : c) {
          const double vn = std::pow(std::max(v, 0.0), cfg.hill_n);
          v = vn / (vn + Kn);
        }
      }
    }
    const auto [mn, mx] = std::minmax_element(c.begin(), c.end());
    const double lo = *mn, range = *mx - *mn;
    for (auto& v : c) v = range > 0 ? (v - lo) / range : 0.0;
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t t = 0; t < T; ++t) {
        double v = c[i * T + t];
        if (cfg.add_noise) {
          const double var_sig = sn * sn * std::pow(std::max(v, 0.0), cfg.signal_noise_exponent);
          v += sn * nr.normal() + std::sqrt(var_sig) * nr.normal();
        }
        res.traces(i, t, n) = v;
      }
  }
  return res;
}

// s(t) = max(0, c(t) - gamma c(t-1)) with c(-1) = 0; events below s_min are
// zeroed.
inline std::vector<double> naive_deconvolve(std::span<const double> trace, double gamma,
                                            double s_min) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw Error("gamma must lie in (0, 1)");
  std::vector<double> ev(trace.size());
  double prev = 0.0;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const double s = std::max(0.0, trace[t] - gamma * prev);
    ev[t] = s < s_min ? 0.0 : s;
    prev = trace[t];
  }
  return ev;
}

// Mean over neurons of the Pearson r between events and true spikes, both
// summed into windows of `bin` fine steps (4 -> 25 Hz at a 100 Hz grid).
// Neurons with no variance are skipped.
inline double spike_correlation(const Tensor3& events, const Tensor3& spikes, std::size_t bin = 4) {
  if (!events.same_shape(spikes)) throw Error("events and spikes differ in shape");
  if (bin == 0) throw Error("bin must be positive");
  const std::size_t R = events.dim(0), T = events.dim(1), N = events.dim(2);
  double sum = 0.0;
  std::size_t used = 0;
  std::vector<double> a, b;
  for (std::size_t n = 0; n < N; ++n) {
    a.clear();
    b.clear();
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t t = 0; t + bin <= T; t += bin) {
        double x = 0, y = 0;
        for (std::size_t k = 0; k < bin; ++k) {
          x += events(i, t + k, n);
          y += spikes(i, t + k, n);
        }
        a.push_back(x);
        b.push_back(y);
      }
    double ma = 0, mb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      ma += a[k];
      mb += b[k];
    }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      sab += (a[k] - ma) * (b[k] - mb);
      saa += (a[k] - ma) * (a[k] - ma);
      sbb += (b[k] - mb) * (b[k] - mb);
    }
    if (saa <= 0 || sbb <= 0) continue;
    sum += sab / std::sqrt(saa * sbb);
    ++used;
  }
  return used ? sum / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
}

// Raster-scanned traces on the fine grid: neuron n is observed at fine steps
// t with t mod n_phases == phase[n]; everything else is masked.
inline TimeSeriesBatch staggered_sample(const Tensor3& fine, const std::vector<int>& phase,
                                        int n_phases, double fine_rate = 100.0) {
  const std::size_t R = fine.dim(0), T = fine.dim(1), N = fine.dim(2);
  const auto rm = raster_mask(N, T, phase, n_phases, 1.0 / fine_rate);
  TimeSeriesBatch b;
  b.values = Tensor3(R, T, N);
  b.mask = Mask3(R, T, N);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < N; ++n)
        if (rm.observed(t, n)) {
          b.mask(i, t, n) = 1;
          b.values(i, t, n) = fine(i, t, n);
        }
  b.sample_times = rm.sample_times;
  b.bin_width = 1.0 / fine_rate;
  return b;
}

// Frame-resolution view: one dense bin per frame, holding each neuron's
// sample from that frame regardless of its phase.
inline TimeSeriesBatch frame_resolution(const Tensor3& fine, const std::vector<int>& phase,
                                        int n_phases, double fine_rate = 100.0) {
  const std::size_t R = fine.dim(0), T = fine.dim(1), N = fine.dim(2);
  const auto P = static_cast<std::size_t>(n_phases);
  if (T % P != 0) throw Error("fine length must be a multiple of n_phases");
  Tensor3 v(R, T / P, N);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < T / P; ++j)
      for (std::size_t n = 0; n < N; ++n)
        v(i, j, n) = fine(i, j * P + static_cast<std::size_t>(phase[n]), n);
  return make_dense_batch(std::move(v), static_cast<double>(P) / fine_rate);
}

// Deconvolve every neuron on its own frame-rate samples (AR coefficient
// gamma^n_phases per frame). Returns frame-rate events [trials, frames, N].
inline Tensor3 deconvolve_frames(const Tensor3& frame_traces, const std::vector<double>& gamma_fine,
                                 int n_phases, double s_min) {
  const std::size_t R = frame_traces.dim(0), F = frame_traces.dim(1), N = frame_traces.dim(2);
  Tensor3 ev(R, F, N);
  std::vector<double> tr(F);
  for (std::size_t n = 0; n < N; ++n) {
    const double g = std::pow(gamma_fine[n], n_phases);
    for (std::size_t i = 0; i < R; ++i) {
      for (std::size_t j = 0; j < F; ++j) tr[j] = frame_traces(i, j, n);
      const auto e = naive_deconvolve(tr, g, s_min);
      for (std::size_t j = 0; j < F; ++j) ev(i, j, n) = e[j];
    }
  }
  return ev;
}

// Place frame-rate values back on the fine grid at each neuron's phase.
inline TimeSeriesBatch frames_to_staggered(const Tensor3& frames, const std::vector<int>& phase,
                                           int n_phases, double fine_rate = 100.0) {
  const std::size_t R = frames.dim(0), F = frames.dim(1), N = frames.dim(2);
  const auto P = static_cast<std::size_t>(n_phases);
  Tensor3 fine(R, F * P, N);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < F; ++j)
      for (std::size_t n = 0; n < N; ++n)
        fine(i, j * P + static_cast<std::size_t>(phase[n]), n) = frames(i, j, n);
  return staggered_sample(fine, phase, n_phases, fine_rate);
}

// Frequency (Hz) of the largest non-DC peak of the mean power spectrum of
// channel `dim`, each trial zero-padded to `nfft` points.
inline double spectrum_peak_hz(const Tensor3& x, std::size_t dim, double fs, std::size_t nfft = 0) {
  const std::size_t T = x.dim(1);
  if (nfft == 0) nfft = std::max<std::size_t>(T, 256);
  std::vector<double> power(nfft / 2 + 1, 0.0);
  std::vector<double> seg(T);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    double mean = 0.0;
    for (std::size_t t = 0; t < T; ++t) mean += x(i, t, dim);
    mean /= static_cast<double>(T);
    for (std::size_t k = 1; k < power.size(); ++k) {
      std::complex<double> acc = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * t) / static_cast<double>(nfft);
        acc += (x(i, t, dim) - mean) * std::complex<double>(std::cos(ang), std::sin(ang));
      }
      power[k] += std::norm(acc);
    }
  }
  const auto it = std::max_element(power.begin() + 1, power.end());
  return static_cast<double>(std::distance(power.begin(), it)) * fs / static_cast<double>(nfft);
}

}  // namespace sbtt
