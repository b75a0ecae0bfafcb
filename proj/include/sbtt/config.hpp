#pragma once

// Experiment configuration: a JSON tree with every field defaulted except the
// seed. Unknown keys are rejected at every level.

#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbtt/emissions.hpp"
#include "sbtt/eval.hpp"
#include "sbtt/sampling.hpp"
#include "sbtt/seqae.hpp"
#include "sbtt/synth.hpp"
#include "sbtt/tensor.hpp"

namespace sbtt {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Reads fields from one JSON object and remembers which keys were used so
// leftovers can be reported.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  ObjectReader child(const char* key) {
    used_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return ObjectReader(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError("unknown key '" + path_ + "." + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

struct SynthSection {
  LorenzConfig lorenz;
  CalciumConfig calcium;
  int n_neurons = 30;
  int heldout_neurons = 0;
  double baseline_hz = 3.0;
  double w_sd = 0.5;
  int trials_per_condition = 60;
};

struct SamplingSection {
  SamplingSchedule schedule;
  int n_phases = 3;
  std::vector<double> fractions{0.0, 0.2, 0.4, 0.6, 0.7, 0.8, 0.9};
  std::vector<int> speeds{2, 5, 7, 10};  // Lorenz downsample factors
};

struct LdsSection {
  int latent_dim = 2;
  int obs_dim = 10;
  int time = 200;
  int trials = 100;
  int heldout_trials = 50;
  double radius = 0.99;     // |eigenvalue| of the true dynamics
  double angle = 0.1;       // rotation per step (rad)
  double observation_sd = 0.05;
  double process_sd = 0.0;
  double drop_fraction = 0.5;
  double lr = 1e-2;
  int epochs = 2000;
  std::vector<int> horizons{10, 25, 50, 100, 200};
  bool estimate_x0 = false;
  std::string optimizer = "adam";  // gd | adam
};

struct EvalSection {
  RidgeCvOptions ridge;
  int lag = 0;
  double smooth_sd_ms = 40.0;
  double glm_l2 = 1e-4;
  CoherenceOptions coherence;
};

// Encoder retraining overrides; zero keeps the seqae value.
struct RetrainSection {
  int epochs = 0;
  double lr = 0.0;
};

struct ExperimentConfig {
  std::string experiment = "experiment";
  std::uint64_t seed = 0;
  std::string output = "runs";
  std::string model = "seqae";  // seqae | lds
  SynthSection synth;
  SamplingSection sampling;
  SeqAeHyper seqae;
  LdsSection lds;
  RetrainSection retrain;
  EvalSection eval;
};

namespace detail {

inline void read_lorenz(ObjectReader r, LorenzConfig& c) {
  r.get("sigma", c.sigma);
  r.get("rho", c.rho);
  r.get("beta", c.beta);
  r.get("dt", c.dt);
  r.get("downsample_factor", c.downsample_factor);
  r.get("n_conditions", c.n_conditions);
  r.get("trial_ms", c.trial_ms);
  r.get("bin_ms", c.bin_ms);
  r.get("burn_in_steps", c.burn_in_steps);
  r.finish();
}

inline nlohmann::json write_lorenz(const LorenzConfig& c) {
  return {{"sigma", c.sigma}, {"rho", c.rho}, {"beta", c.beta}, {"dt", c.dt},
          {"downsample_factor", c.downsample_factor}, {"n_conditions", c.n_conditions},
          {"trial_ms", c.trial_ms}, {"bin_ms", c.bin_ms}, {"burn_in_steps", c.burn_in_steps}};
}

inline void read_calcium(ObjectReader r, CalciumConfig& c) {
  r.get("spike_amp_sd", c.spike_amp_sd);
  r.get("gamma_lo", c.gamma_lo);
  r.get("gamma_hi", c.gamma_hi);
  r.get("noise_mean", c.noise_mean);
  r.get("noise_sd", c.noise_sd);
  r.get("noise_floor", c.noise_floor);
  r.get("s_min", c.s_min);
  r.get("hill_n", c.hill_n);
  r.get("hill_k_percentile", c.hill_k_percentile);
  r.get("signal_noise_exponent", c.signal_noise_exponent);
  r.get("fine_rate", c.fine_rate);
  r.get("n_phases", c.n_phases);
  r.get("add_noise", c.add_noise);
  r.get("apply_nonlinearity", c.apply_nonlinearity);
  r.finish();
}

inline nlohmann::json write_calcium(const CalciumConfig& c) {
  return {{"spike_amp_sd", c.spike_amp_sd}, {"gamma_lo", c.gamma_lo}, {"gamma_hi", c.gamma_hi},
          {"noise_mean", c.noise_mean}, {"noise_sd", c.noise_sd}, {"noise_floor", c.noise_floor},
          {"s_min", c.s_min}, {"hill_n", c.hill_n}, {"hill_k_percentile", c.hill_k_percentile},
          {"signal_noise_exponent", c.signal_noise_exponent}, {"fine_rate", c.fine_rate},
          {"n_phases", c.n_phases}, {"add_noise", c.add_noise},
          {"apply_nonlinearity", c.apply_nonlinearity}};
}

inline void read_seqae(ObjectReader r, SeqAeHyper& h) {
  auto d = r.child("dims");
  d.get("encoder", h.dims.encoder);
  d.get("ic", h.dims.ic);
  d.get("generator", h.dims.generator);
  d.get("factors", h.dims.factors);
  d.get("mask_input", h.dims.mask_input);
  d.finish();
  auto e = r.child("emission");
  std::string family = to_string(h.emission.family);
  e.get("family", family);
  h.emission.family = parse_emission_family(family);
  e.get("sd", h.emission.sd);
  e.finish();
  r.get("kl_weight_ic", h.kl_weight_ic);
  r.get("l2_generator", h.l2_generator);
  r.get("dropout_rate", h.dropout_rate);
  r.get("cd_rate", h.cd_rate);
  r.get("lr", h.lr);
  r.get("epochs", h.epochs);
  r.get("ramp_epochs", h.ramp_epochs);
  r.get("batch_size", h.batch_size);
  r.get("grad_clip", h.grad_clip);
  r.get("scale_prior", h.scale_prior);
  r.get("scale_prior_weight", h.scale_prior_weight);
  r.get("val_smoothing", h.val_smoothing);
  r.get("train_fraction", h.train_fraction);
  r.get("eval_every", h.eval_every);
  r.finish();
}

inline nlohmann::json write_seqae(const SeqAeHyper& h) {
  return {{"dims",
           {{"encoder", h.dims.encoder}, {"ic", h.dims.ic}, {"generator", h.dims.generator},
            {"factors", h.dims.factors}, {"mask_input", h.dims.mask_input}}},
          {"emission", {{"family", to_string(h.emission.family)}, {"sd", h.emission.sd}}},
          {"kl_weight_ic", h.kl_weight_ic}, {"l2_generator", h.l2_generator},
          {"dropout_rate", h.dropout_rate}, {"cd_rate", h.cd_rate}, {"lr", h.lr},
          {"epochs", h.epochs}, {"ramp_epochs", h.ramp_epochs}, {"batch_size", h.batch_size},
          {"grad_clip", h.grad_clip}, {"scale_prior", h.scale_prior},
          {"scale_prior_weight", h.scale_prior_weight}, {"val_smoothing", h.val_smoothing},
          {"train_fraction", h.train_fraction}, {"eval_every", h.eval_every}};
}

inline std::string schedule_kind_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::random_drop: return "random_drop";
    case ScheduleKind::raster_phase: return "raster_phase";
    case ScheduleKind::full: return "full";
  }
  return "full";
}

}  // namespace detail

inline void validate(const SeqAeHyper& h) {
  if (h.kl_weight_ic < 0 || h.l2_generator < 0 || h.scale_prior_weight < 0)
    throw ConfigError("seqae: penalty weights must be non-negative");
  if (h.dropout_rate < 0 || h.dropout_rate >= 1) throw ConfigError("seqae: dropout_rate in [0,1)");
  if (h.cd_rate < 0 || h.cd_rate >= 1) throw ConfigError("seqae: cd_rate in [0,1)");
  if (h.lr < 0) throw ConfigError("seqae: lr must be non-negative");
  if (h.epochs < 1 || h.ramp_epochs < 0 || h.batch_size < 1)
    throw ConfigError("seqae: epochs >= 1, ramp_epochs >= 0, batch_size >= 1");
  if (h.dims.encoder < 1 || h.dims.ic < 1 || h.dims.generator < 1 || h.dims.factors < 1)
    throw ConfigError("seqae: dims must be positive");
  if (h.emission.family == EmissionFamily::gaussian && !(h.emission.sd > 0))
    throw ConfigError("seqae: gaussian sd must be positive");
  if (!(h.train_fraction > 0 && h.train_fraction < 1)) throw ConfigError("seqae: train_fraction in (0,1)");
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig c;
  ObjectReader r(j, "config");
  if (!j.contains("seed")) throw ConfigError("config.seed is required");
  r.get("seed", c.seed);
  r.get("experiment", c.experiment);
  r.get("output", c.output);
  r.get("model", c.model);
  if (c.model != "seqae" && c.model != "lds") throw ConfigError("config.model must be seqae or lds");

  auto s = r.child("synth");
  detail::read_lorenz(s.child("lorenz"), c.synth.lorenz);
  detail::read_calcium(s.child("calcium"), c.synth.calcium);
  s.get("n_neurons", c.synth.n_neurons);
  s.get("heldout_neurons", c.synth.heldout_neurons);
  s.get("baseline_hz", c.synth.baseline_hz);
  s.get("w_sd", c.synth.w_sd);
  s.get("trials_per_condition", c.synth.trials_per_condition);
  s.finish();
  if (c.synth.n_neurons < 1 || c.synth.heldout_neurons < 0 ||
      c.synth.heldout_neurons >= c.synth.n_neurons)
    throw ConfigError("synth: need 0 <= heldout_neurons < n_neurons");
  if (c.synth.trials_per_condition < 1) throw ConfigError("synth: trials_per_condition >= 1");

  auto sm = r.child("sampling");
  std::string kind = detail::schedule_kind_name(c.sampling.schedule.kind);
  sm.get("kind", kind);
  c.sampling.schedule.kind = parse_schedule_kind(kind);
  sm.get("drop_fraction", c.sampling.schedule.drop_fraction);
  sm.get("phases", c.sampling.schedule.phases);
  sm.get("frame_period", c.sampling.schedule.frame_period);
  sm.get("n_phases", c.sampling.n_phases);
  sm.get("fractions", c.sampling.fractions);
  sm.get("speeds", c.sampling.speeds);
  sm.finish();
  c.sampling.schedule.validate();
  for (double f : c.sampling.fractions)
    if (f < 0 || f > 1) throw ConfigError("sampling.fractions must lie in [0,1]");
  for (int v : c.sampling.speeds)
    if (v < 1) throw ConfigError("sampling.speeds are downsample factors >= 1");

  detail::read_seqae(r.child("seqae"), c.seqae);
  validate(c.seqae);

  auto l = r.child("lds");
  l.get("latent_dim", c.lds.latent_dim);
  l.get("obs_dim", c.lds.obs_dim);
  l.get("time", c.lds.time);
  l.get("trials", c.lds.trials);
  l.get("heldout_trials", c.lds.heldout_trials);
  l.get("radius", c.lds.radius);
  l.get("angle", c.lds.angle);
  l.get("observation_sd", c.lds.observation_sd);
  l.get("process_sd", c.lds.process_sd);
  l.get("drop_fraction", c.lds.drop_fraction);
  l.get("lr", c.lds.lr);
  l.get("epochs", c.lds.epochs);
  l.get("horizons", c.lds.horizons);
  l.get("estimate_x0", c.lds.estimate_x0);
  l.get("optimizer", c.lds.optimizer);
  l.finish();
  if (c.lds.latent_dim < 1 || c.lds.obs_dim < 1 || c.lds.time < 1 || c.lds.trials < 1)
    throw ConfigError("lds: dimensions must be positive");
  if (!(c.lds.lr > 0)) throw ConfigError("lds: lr must be positive");
  if (c.lds.optimizer != "gd" && c.lds.optimizer != "adam") throw ConfigError("lds.optimizer must be gd or adam");

  auto rt = r.child("retrain");
  rt.get("epochs", c.retrain.epochs);
  rt.get("lr", c.retrain.lr);
  rt.finish();
  if (c.retrain.epochs < 0 || c.retrain.lr < 0) throw ConfigError("retrain: epochs and lr must be >= 0");

  auto e = r.child("eval");
  e.get("lambdas", c.eval.ridge.lambdas);
  e.get("repeats", c.eval.ridge.repeats);
  e.get("inner_folds", c.eval.ridge.inner_folds);
  e.get("lag", c.eval.lag);
  e.get("smooth_sd_ms", c.eval.smooth_sd_ms);
  e.get("glm_l2", c.eval.glm_l2);
  auto co = e.child("coherence");
  co.get("window_len", c.eval.coherence.window_len);
  co.get("overlap", c.eval.coherence.overlap);
  co.get("nfft", c.eval.coherence.nfft);
  co.finish();
  e.finish();
  if (c.eval.ridge.lambdas.empty()) throw ConfigError("eval.lambdas must not be empty");
  if (c.eval.ridge.repeats < 2 || c.eval.ridge.inner_folds < 2)
    throw ConfigError("eval: repeats and inner_folds must be >= 2");

  r.finish();
  c.seqae.seed = c.seed;
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_config(j);
}

// Fully resolved config; the canonical form used for hashing.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"experiment", c.experiment},
          {"seed", c.seed},
          {"output", c.output},
          {"model", c.model},
          {"synth",
           {{"lorenz", detail::write_lorenz(c.synth.lorenz)},
            {"calcium", detail::write_calcium(c.synth.calcium)},
            {"n_neurons", c.synth.n_neurons},
            {"heldout_neurons", c.synth.heldout_neurons},
            {"baseline_hz", c.synth.baseline_hz},
            {"w_sd", c.synth.w_sd},
            {"trials_per_condition", c.synth.trials_per_condition}}},
          {"sampling",
           {{"kind", detail::schedule_kind_name(c.sampling.schedule.kind)},
            {"drop_fraction", c.sampling.schedule.drop_fraction},
            {"phases", c.sampling.schedule.phases},
            {"frame_period", c.sampling.schedule.frame_period},
            {"n_phases", c.sampling.n_phases},
            {"fractions", c.sampling.fractions},
            {"speeds", c.sampling.speeds}}},
          {"seqae", detail::write_seqae(c.seqae)},
          {"lds",
           {{"latent_dim", c.lds.latent_dim}, {"obs_dim", c.lds.obs_dim}, {"time", c.lds.time},
            {"trials", c.lds.trials}, {"heldout_trials", c.lds.heldout_trials},
            {"radius", c.lds.radius}, {"angle", c.lds.angle},
            {"observation_sd", c.lds.observation_sd}, {"process_sd", c.lds.process_sd},
            {"drop_fraction", c.lds.drop_fraction}, {"lr", c.lds.lr}, {"epochs", c.lds.epochs},
            {"horizons", c.lds.horizons}, {"estimate_x0", c.lds.estimate_x0},
            {"optimizer", c.lds.optimizer}}},
          {"retrain", {{"epochs", c.retrain.epochs}, {"lr", c.retrain.lr}}},
          {"eval",
           {{"lambdas", c.eval.ridge.lambdas}, {"repeats", c.eval.ridge.repeats},
            {"inner_folds", c.eval.ridge.inner_folds}, {"lag", c.eval.lag},
            {"smooth_sd_ms", c.eval.smooth_sd_ms}, {"glm_l2", c.eval.glm_l2},
            {"coherence",
             {{"window_len", c.eval.coherence.window_len}, {"overlap", c.eval.coherence.overlap},
              {"nfft", c.eval.coherence.nfft}}}}}};
}

// FNV-1a over the canonical dump.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Flattened dotted keys of a config tree; arrays are leaves.
inline void flatten_config(const nlohmann::json& j, const std::string& prefix,
                           std::vector<std::pair<std::string, nlohmann::json>>& out) {
  if (!j.is_object()) {
    out.emplace_back(prefix, j);
    return;
  }
  for (const auto& [k, v] : j.items()) flatten_config(v, prefix.empty() ? k : prefix + "." + k, out);
}

inline const std::map<std::string, std::string>& config_descriptions() {
  static const std::map<std::string, std::string> d = {
      {"experiment", "Experiment name; output goes to <output>/<experiment>/"},
      {"seed", "Master seed (required); every random stream derives from it"},
      {"output", "Root output directory"},
      {"model", "Model used by single-run commands: seqae or lds"},
      {"synth.lorenz.sigma", "Lorenz sigma"},
      {"synth.lorenz.rho", "Lorenz rho"},
      {"synth.lorenz.beta", "Lorenz beta"},
      {"synth.lorenz.dt", "Euler step of the Lorenz integration"},
      {"synth.lorenz.downsample_factor", "Integration steps per output bin; higher is faster dynamics"},
      {"synth.lorenz.n_conditions", "Number of distinct Lorenz initial states"},
      {"synth.lorenz.trial_ms", "Trial duration in ms"},
      {"synth.lorenz.bin_ms", "Output bin width in ms"},
      {"synth.lorenz.burn_in_steps", "Integration steps discarded before each condition"},
      {"synth.calcium.spike_amp_sd", "SD of per-spike amplitude noise"},
      {"synth.calcium.gamma_lo", "Lower bound of the per-neuron AR(1) decay"},
      {"synth.calcium.gamma_hi", "Upper bound of the per-neuron AR(1) decay"},
      {"synth.calcium.noise_mean", "Mean of the per-neuron noise level"},
      {"synth.calcium.noise_sd", "SD of the per-neuron noise level"},
      {"synth.calcium.noise_floor", "Truncation floor of the per-neuron noise level"},
      {"synth.calcium.s_min", "Minimum deconvolved event size; also the ZIG location"},
      {"synth.calcium.hill_n", "Hill exponent of the indicator nonlinearity"},
      {"synth.calcium.hill_k_percentile", "Quantile in (0,1) of calcium used as the Hill half-activation"},
      {"synth.calcium.signal_noise_exponent", "Exponent on the signal in the signal-dependent noise variance"},
      {"synth.calcium.fine_rate", "Fine-grid rate in Hz"},
      {"synth.calcium.n_phases", "Sub-frame phases per frame"},
      {"synth.calcium.add_noise", "Add fluorescence noise"},
      {"synth.calcium.apply_nonlinearity", "Apply the indicator nonlinearity"},
      {"synth.n_neurons", "Simulated neurons, including held-out ones"},
      {"synth.heldout_neurons", "Neurons withheld from the model and scored by pseudo-R^2"},
      {"synth.baseline_hz", "Baseline firing rate in Hz"},
      {"synth.w_sd", "SD of latent-to-neuron projection weights"},
      {"synth.trials_per_condition", "Trials sampled per condition"},
      {"sampling.kind", "Mask schedule for the mask command: full, random_drop or raster_phase"},
      {"sampling.drop_fraction", "Channel fraction dropped per time step (random_drop)"},
      {"sampling.phases", "Per-channel sample offsets in s (raster_phase); empty draws them at random"},
      {"sampling.frame_period", "Frame period in s (raster_phase)"},
      {"sampling.n_phases", "Phases per frame used by random phase assignment"},
      {"sampling.fractions", "Drop fractions swept by sweep-drop and sweep-retrain"},
      {"sampling.speeds", "Lorenz downsample factors swept by sweep-superres"},
      {"seqae.dims.encoder", "Encoder GRU width per direction"},
      {"seqae.dims.ic", "Initial-condition latent dimension"},
      {"seqae.dims.generator", "Generator GRU width"},
      {"seqae.dims.factors", "Factor dimension"},
      {"seqae.dims.mask_input", "Feed the observation mask to the encoder"},
      {"seqae.emission.family", "Emission family: poisson, zig or gaussian"},
      {"seqae.emission.sd", "Gaussian emission SD"},
      {"seqae.kl_weight_ic", "Initial-condition KL weight after ramping"},
      {"seqae.l2_generator", "Generator recurrent L2 weight after ramping"},
      {"seqae.dropout_rate", "Dropout rate on encoder inputs and factors"},
      {"seqae.cd_rate", "Coordinated dropout rate"},
      {"seqae.lr", "Adam learning rate"},
      {"seqae.epochs", "Training epochs"},
      {"seqae.ramp_epochs", "Epochs over which penalty weights ramp up linearly"},
      {"seqae.batch_size", "Minibatch size in trials"},
      {"seqae.grad_clip", "Global gradient-norm clip"},
      {"seqae.scale_prior", "Prior value of the per-channel ZIG scale factor"},
      {"seqae.scale_prior_weight", "Weight of the ZIG scale-factor prior"},
      {"seqae.val_smoothing", "Exponential smoothing of the validation loss"},
      {"seqae.train_fraction", "Fraction of trials used for training; the rest validate"},
      {"seqae.eval_every", "Epochs between validation evaluations"},
      {"lds.latent_dim", "Latent dimension D"},
      {"lds.obs_dim", "Observation dimension N"},
      {"lds.time", "Trial length T"},
      {"lds.trials", "Training trials"},
      {"lds.heldout_trials", "Held-out trials for predictive MSE"},
      {"lds.radius", "Eigenvalue modulus of the true dynamics"},
      {"lds.angle", "Rotation per step of the true dynamics in rad"},
      {"lds.observation_sd", "Observation noise SD"},
      {"lds.process_sd", "Process noise SD"},
      {"lds.drop_fraction", "Observation fraction dropped per time step"},
      {"lds.lr", "Learning rate"},
      {"lds.epochs", "Full-batch epochs, split evenly across horizons"},
      {"lds.horizons", "Training horizon curriculum; the full length is always appended"},
      {"lds.estimate_x0", "Estimate initial states jointly instead of using the true ones"},
      {"lds.optimizer", "gd (fixed-step) or adam"},
      {"retrain.epochs", "Encoder retraining epochs; 0 uses seqae.epochs"},
      {"retrain.lr", "Encoder retraining learning rate; 0 uses seqae.lr"},
      {"eval.lambdas", "Ridge penalty grid"},
      {"eval.repeats", "Outer train/test repeats of ridge CV"},
      {"eval.inner_folds", "Inner folds for ridge penalty selection"},
      {"eval.lag", "Lag in bins between features and targets"},
      {"eval.smooth_sd_ms", "Gaussian smoothing SD of the smoothing baseline in ms"},
      {"eval.glm_l2", "L2 penalty of held-out Poisson GLMs"},
      {"eval.coherence.window_len", "Coherence window length in samples"},
      {"eval.coherence.overlap", "Coherence window overlap in samples"},
      {"eval.coherence.nfft", "Coherence FFT length; 0 uses the next power of two"},
  };
  return d;
}

// Markdown table of every key with its default and meaning.
inline std::string config_reference_markdown() {
  ExperimentConfig c;
  std::vector<std::pair<std::string, nlohmann::json>> keys;
  flatten_config(to_json(c), "", keys);
  const auto& desc = config_descriptions();
  std::string out =
      "# Configuration reference\n\n"
      "Generated by `sbtt-lab config-reference`. Configs are JSON objects; every key except `seed` is "
      "optional and unknown keys are rejected.\n\n"
      "| key | default | description |\n|---|---|---|\n";
  for (const auto& [k, v] : keys) {
    const auto it = desc.find(k);
    if (it == desc.end()) throw Error("config key '" + k + "' has no description");
    const std::string dv = k == "seed" ? "required" : v.dump();
    out += "| `" + k + "` | `" + dv + "` | " + it->second + " |\n";
  }
  return out;
}

}  // namespace sbtt
