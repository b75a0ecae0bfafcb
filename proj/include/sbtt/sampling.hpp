#pragma once

// Observation-mask generators: per-timestep random dropping, raster-scan
// phase staggering, and coordinated dropout.

#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sbtt/rng.hpp"
#include "sbtt/tensor.hpp"

namespace sbtt {

enum class ScheduleKind { full, random_drop, raster_phase };

struct SamplingSchedule {
  ScheduleKind kind = ScheduleKind::full;
  double drop_fraction = 0.0;
  std::vector<double> phases;  // seconds
  double frame_period = 0.03;  // seconds

  void validate() const {
    if (!(drop_fraction >= 0.0 && drop_fraction <= 1.0))
      throw Error("drop_fraction must lie in [0, 1]");
    for (double p : phases)
      if (!(p >= 0.0 && p < frame_period)) throw Error("phase outside [0, frame_period)");
  }
};

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "full") return ScheduleKind::full;
  if (s == "random_drop") return ScheduleKind::random_drop;
  if (s == "raster_phase") return ScheduleKind::raster_phase;
  throw Error("unknown sampling kind '" + s + "'");
}

// Number of channels dropped per time step; ties round to even.
inline std::size_t drop_count(double fraction, std::size_t channels) {
  return static_cast<std::size_t>(std::nearbyint(fraction * static_cast<double>(channels)));
}

// Each (trial, time) slice gets exactly drop_count(fraction, channels)
// entries set false, chosen uniformly without replacement. Trial i draws from
// rng.derive(i), so trials are independent of processing order.
inline Mask3 random_drop_mask(std::size_t trials, std::size_t time, std::size_t channels,
                              double fraction, const Rng& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error("drop fraction must lie in [0, 1]");
  Mask3 mask(trials, time, channels, 1);
  const std::size_t ndrop = drop_count(fraction, channels);
  std::vector<std::size_t> perm(channels);
  for (std::size_t i = 0; i < trials; ++i) {
    Rng r = rng.derive(i);
    for (std::size_t t = 0; t < time; ++t) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      // partial Fisher-Yates: first ndrop slots are the dropped channels
      for (std::size_t k = 0; k < ndrop; ++k) {
        const std::size_t j = k + static_cast<std::size_t>(r.below(channels - k));
        std::swap(perm[k], perm[j]);
        mask(i, t, perm[k]) = 0;
      }
    }
  }
  return mask;
}

// Restrict a batch to entries observed in both its own mask and `mask`.
[[nodiscard]] inline TimeSeriesBatch apply_mask(const TimeSeriesBatch& b, const Mask3& mask) {
  if (!b.mask.same_shape(mask)) throw Error("mask shape mismatch");
  TimeSeriesBatch out = b;
  auto m = out.mask.flat();
  const auto extra = mask.flat();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (m[i] && extra[i]) ? 1 : 0;
  canonicalize(out);
  return out;
}

struct RasterMask {
  std::size_t time = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> mask;   // [time, channels]
  std::vector<double> sample_times; // [time], fine-grid clock

  bool observed(std::size_t t, std::size_t c) const { return mask[t * channels + c] != 0; }
};

// Channel c is observed at fine steps t with t mod n_phases == phase(c).
inline RasterMask raster_mask(std::size_t n_channels, std::size_t n_fine_steps,
                              const std::vector<int>& phase_of_channel, int n_phases,
                              double fine_dt = 0.01) {
  if (n_phases < 1) throw Error("n_phases must be positive");
  if (phase_of_channel.size() != n_channels) throw Error("one phase per channel required");
  if (n_fine_steps % static_cast<std::size_t>(n_phases) != 0)
    throw Error("n_fine_steps must be a multiple of n_phases");
  for (int p : phase_of_channel)
    if (p < 0 || p >= n_phases) throw Error("phase index out of range");
  RasterMask r;
  r.time = n_fine_steps;
  r.channels = n_channels;
  r.mask.assign(n_fine_steps * n_channels, 0);
  for (std::size_t t = 0; t < n_fine_steps; ++t)
    for (std::size_t c = 0; c < n_channels; ++c)
      r.mask[t * n_channels + c] =
          static_cast<int>(t % static_cast<std::size_t>(n_phases)) == phase_of_channel[c] ? 1 : 0;
  r.sample_times = uniform_times(n_fine_steps, fine_dt);
  return r;
}

inline std::vector<int> random_phase_assignment(std::size_t n_channels, int n_phases, Rng& rng) {
  std::vector<int> phases(n_channels);
  for (auto& p : phases) p = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_phases)));
  return phases;
}

struct CoordinatedDropoutMasks {
  Mask3 input;
  Mask3 loss;
};

// Partition of batch.mask: every observed entry lands in `loss` with
// probability cd_rate, otherwise in `input`.
inline CoordinatedDropoutMasks coordinated_dropout_split(const Mask3& observed, double cd_rate,
                                                         Rng& rng) {
  if (!(cd_rate >= 0.0 && cd_rate < 1.0)) throw Error("cd_rate must lie in [0, 1)");
  CoordinatedDropoutMasks out{Mask3(observed.dim(0), observed.dim(1), observed.dim(2)),
                              Mask3(observed.dim(0), observed.dim(1), observed.dim(2))};
  const auto m = observed.flat();
  auto in = out.input.flat();
  auto lo = out.loss.flat();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    if (cd_rate > 0.0 && rng.uniform() < cd_rate)
      lo[i] = 1;
    else
      in[i] = 1;
  }
  return out;
}

inline CoordinatedDropoutMasks coordinated_dropout_split(const TimeSeriesBatch& b, double cd_rate,
                                                         Rng& rng) {
  return coordinated_dropout_split(b.mask, cd_rate, rng);
}

}  // namespace sbtt
