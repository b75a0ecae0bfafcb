#pragma once

// Experiment orchestration: synthetic datasets, sweep cells with resumable
// run directories, and tidy result tables.
//
// Layout: <output>/<experiment>/<cell-id>/{ckpt/, metrics.csv, manifest.json}
// plus <output>/<experiment>/{results.csv, timing.csv, manifest.json}.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbtt/config.hpp"
#include "sbtt/eval.hpp"
#include "sbtt/lds.hpp"
#include "sbtt/sampling.hpp"
#include "sbtt/seqae.hpp"
#include "sbtt/synth.hpp"
#include "sbtt/tensor_file.hpp"

namespace sbtt {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// CSV

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

class CsvTable {
 public:
  CsvTable() = default;
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  template <class... Ts>
  void add(const Ts&... cells) {
    std::vector<std::string> row{cell(cells)...};
    add_row(std::move(row));
  }

  void add_row(std::vector<std::string> row) {
    if (row.size() != header_.size()) throw Error("csv row width does not match header");
    rows_.push_back(std::move(row));
  }

  void append(const CsvTable& other) {
    if (other.header_ != header_) throw Error("csv headers differ");
    rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end());
  }

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header_.size(); ++i)
      if (header_[i] == name) return i;
    throw Error("csv has no column '" + name + "'");
  }

  // Numeric `value` of the single row matching every (column, text) pair.
  double lookup(const std::vector<std::pair<std::string, std::string>>& where,
                const std::string& value_column = "value") const {
    const std::size_t vc = column(value_column);
    const std::string* found = nullptr;
    for (const auto& r : rows_) {
      bool ok = true;
      for (const auto& [k, v] : where) ok = ok && r[column(k)] == v;
      if (!ok) continue;
      if (found) throw Error("csv lookup matched more than one row");
      found = &r[vc];
    }
    if (!found) throw Error("csv lookup matched no row");
    return std::strtod(found->c_str(), nullptr);
  }

  std::string str() const {
    std::string out;
    write_line(out, header_);
    for (const auto& r : rows_) write_line(out, r);
    return out;
  }

  static CsvTable parse(const std::string& text) {
    std::vector<std::vector<std::string>> lines;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
      const char ch = text[i];
      if (quoted) {
        if (ch == '"' && i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else if (ch == '"') {
          quoted = false;
        } else {
          field += ch;
        }
        continue;
      }
      if (ch == '"') {
        quoted = true;
        any = true;
      } else if (ch == ',') {
        row.push_back(std::move(field));
        field.clear();
        any = true;
      } else if (ch == '\n' || ch == '\r') {
        if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
        if (any || !field.empty()) {
          row.push_back(std::move(field));
          lines.push_back(std::move(row));
        }
        row.clear();
        field.clear();
        any = false;
      } else {
        field += ch;
        any = true;
      }
    }
    if (any || !field.empty()) {
      row.push_back(std::move(field));
      lines.push_back(std::move(row));
    }
    if (lines.empty()) throw Error("empty csv");
    CsvTable t(lines.front());
    for (std::size_t i = 1; i < lines.size(); ++i) t.add_row(std::move(lines[i]));
    return t;
  }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return format_number(v); }
  template <class I, std::enable_if_t<std::is_integral_v<I>, int> = 0>
  static std::string cell(I v) {
    return std::to_string(v);
  }

  static void write_line(std::string& out, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      const auto& c = cells[i];
      if (c.find_first_of(",\"\r\n") == std::string::npos) {
        out += c;
      } else {
        out += '"';
        for (char ch : c) {
          if (ch == '"') out += '"';
          out += ch;
        }
        out += '"';
      }
    }
    out += "\r\n";
  }

  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// ---------------------------------------------------------------------------
// Threads and logging

inline int thread_count() {
  const char* s = std::getenv("SBTT_THREADS");
  if (!s || !*s) return 1;
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (*end != '\0' || v < 1 || v > 1024) throw ConfigError("SBTT_THREADS must be a positive integer");
  return static_cast<int>(v);
}

class Logger {
 public:
  explicit Logger(std::ostream* out = nullptr) : out_(out) {}
  void operator()(const std::string& msg) const {
    if (!out_) return;
    std::lock_guard<std::mutex> lock(mu_);
    *out_ << msg << std::endl;
  }

 private:
  std::ostream* out_;
  mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Cells

struct CellSpec {
  std::string id;
  nlohmann::json params;
  std::function<CsvTable(const std::filesystem::path& dir)> run;
};

struct CellOutcome {
  std::string id;
  CsvTable metrics;
  bool reused = false;
  bool failed = false;
  std::string error;
  double seconds = 0.0;
};

struct ExperimentResult {
  std::filesystem::path dir;
  CsvTable results;
  std::vector<CellOutcome> cells;

  bool ok() const {
    for (const auto& c : cells)
      if (c.failed) return false;
    return true;
  }
};

inline bool cell_complete(const std::filesystem::path& dir, const std::string& hash) {
  const auto mf = dir / "manifest.json";
  if (!std::filesystem::exists(mf) || !std::filesystem::exists(dir / "metrics.csv")) return false;
  try {
    const auto j = nlohmann::json::parse(detail::read_file(mf));
    return j.value("status", "") == "complete" && j.value("config_hash", "") == hash;
  } catch (const std::exception&) {
    return false;
  }
}

// Runs (or reuses) every cell. Cells are independent; with more than one
// thread they run concurrently, and outputs are collected in cell order.
inline std::vector<CellOutcome> run_cells(const ExperimentConfig& cfg, const std::filesystem::path& root,
                                          const std::vector<CellSpec>& cells, const Logger& log,
                                          int threads) {
  const auto cfg_json = to_json(cfg);
  std::vector<CellOutcome> out(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto& spec = cells[i];
      auto& oc = out[i];
      oc.id = spec.id;
      const auto dir = root / spec.id;
      const std::string hash = config_hash({{"config", cfg_json}, {"params", spec.params}});
      if (cell_complete(dir, hash)) {
        oc.metrics = CsvTable::parse(detail::read_file(dir / "metrics.csv"));
        oc.reused = true;
        log("[" + spec.id + "] complete, reusing");
        continue;
      }
      std::filesystem::create_directories(dir);
      nlohmann::json manifest = {{"cell", spec.id},     {"params", spec.params},
                                 {"config_hash", hash}, {"seed", cfg.seed},
                                 {"version", kVersion}, {"config", cfg_json},
                                 {"status", "running"}};
      detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
      log("[" + spec.id + "] start");
      const auto t0 = std::chrono::steady_clock::now();
      try {
        oc.metrics = spec.run(dir);
        detail::write_file(dir / "metrics.csv", oc.metrics.str());
        manifest["status"] = "complete";
      } catch (const std::exception& e) {
        oc.failed = true;
        oc.error = e.what();
        manifest["status"] = "failed";
        manifest["error"] = oc.error;
        log("[" + spec.id + "] failed: " + oc.error);
      }
      oc.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      manifest["seconds"] = oc.seconds;
      detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
      if (!oc.failed) log("[" + spec.id + "] done in " + format_number(oc.seconds) + " s");
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(cells.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < n; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return out;
}

inline ExperimentResult finish_experiment(const ExperimentConfig& cfg, const std::filesystem::path& root,
                                          const std::vector<std::string>& header,
                                          std::vector<CellOutcome> cells) {
  ExperimentResult res{root, CsvTable(header), std::move(cells)};
  CsvTable timing({"cell", "status", "seconds"});
  nlohmann::json status = nlohmann::json::array();
  for (const auto& c : res.cells) {
    if (!c.failed) res.results.append(c.metrics);
    const std::string st = c.failed ? "failed" : (c.reused ? "reused" : "complete");
    timing.add(c.id, st, c.seconds);
    nlohmann::json s = {{"cell", c.id}, {"status", st}};
    if (c.failed) s["error"] = c.error;
    status.push_back(s);
  }
  const auto cfg_json = to_json(cfg);
  detail::write_file(root / "results.csv", res.results.str());
  detail::write_file(root / "timing.csv", timing.str());
  nlohmann::json manifest = {{"experiment", cfg.experiment}, {"config_hash", config_hash(cfg_json)},
                             {"seed", cfg.seed},             {"version", kVersion},
                             {"config", cfg_json},           {"cells", status}};
  detail::write_file(root / "manifest.json", manifest.dump(2) + "\n");
  return res;
}

inline std::filesystem::path experiment_root(const ExperimentConfig& cfg) {
  auto root = std::filesystem::path(cfg.output) / cfg.experiment;
  std::filesystem::create_directories(root);
  return root;
}

// ---------------------------------------------------------------------------
// Datasets

struct SpikeDataset {
  Tensor3 latents;  // [trials, T, 3]
  Tensor3 rates;    // [trials, T, N] modelled neurons, Hz
  Tensor3 spikes;   // [trials, T, N] modelled neurons
  Tensor3 heldout;  // [trials, T, H] held-out neurons
  std::vector<int> labels;
  double peak_hz = 0.0;
};

inline Tensor3 select_channels(const Tensor3& x, std::size_t first, std::size_t count) {
  Tensor3 out(x.dim(0), x.dim(1), count);
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t t = 0; t < x.dim(1); ++t)
      for (std::size_t c = 0; c < count; ++c) out(i, t, c) = x(i, t, first + c);
  return out;
}

// Lorenz-driven Poisson spiking. Streams derived from (seed, stream).
inline SpikeDataset make_spike_dataset(const ExperimentConfig& c, std::uint64_t stream) {
  const Rng root = Rng(c.seed).derive(stream);
  Rng lr = root.derive(0), wr = root.derive(1), sr = root.derive(2);
  const Tensor3 states = lorenz_generate(c.synth.lorenz, lr);
  const double fs = 1000.0 / c.synth.lorenz.bin_ms;
  const auto rm = rates_from_latents(states, c.synth.n_neurons, c.synth.baseline_hz, c.synth.w_sd, wr);
  SpikeDataset d;
  d.peak_hz = spectrum_peak_hz(states, 2, fs);
  d.latents = repeat_conditions(states, c.synth.trials_per_condition, &d.labels);
  const Tensor3 rates = repeat_conditions(rm.rates, c.synth.trials_per_condition);
  const Tensor3 spikes = sample_spikes(rates, 1.0 / fs, sr);
  const auto H = static_cast<std::size_t>(c.synth.heldout_neurons);
  const auto N = static_cast<std::size_t>(c.synth.n_neurons) - H;
  d.rates = select_channels(rates, 0, N);
  d.spikes = select_channels(spikes, 0, N);
  d.heldout = select_channels(spikes, N, H);
  return d;
}

struct CalciumDataset {
  Tensor3 latents;       // [trials, T, 3] on the fine grid
  Tensor3 spikes;        // [trials, T, N]
  Tensor3 traces;        // [trials, T, N] fluorescence on the fine grid
  std::vector<double> gamma;
  std::vector<int> phase;
  Tensor3 frame_events;  // [trials, T / P, N]
  TimeSeriesBatch staggered;  // events on the fine grid at each neuron's phase
  TimeSeriesBatch frames;     // events at frame resolution
  std::vector<int> labels;
  double peak_hz = 0.0;
  double deconv_r = 0.0;      // events vs spikes at 25 Hz
};

inline CalciumDataset make_calcium_dataset(const ExperimentConfig& c, std::uint64_t stream) {
  const Rng root = Rng(c.seed).derive(stream);
  Rng lr = root.derive(0), wr = root.derive(1), sr = root.derive(2), cr = root.derive(3),
      pr = root.derive(4);
  const auto& cc = c.synth.calcium;
  const Tensor3 states = lorenz_generate(c.synth.lorenz, lr);
  if (states.dim(1) % static_cast<std::size_t>(cc.n_phases) != 0)
    throw ConfigError("trial length must be a multiple of calcium.n_phases");
  const double fs = cc.fine_rate;
  const auto rm = rates_from_latents(states, c.synth.n_neurons, c.synth.baseline_hz, c.synth.w_sd, wr);
  CalciumDataset d;
  d.peak_hz = spectrum_peak_hz(states, 2, fs);
  d.latents = repeat_conditions(states, c.synth.trials_per_condition, &d.labels);
  d.spikes = sample_spikes(repeat_conditions(rm.rates, c.synth.trials_per_condition), 1.0 / fs, sr);
  auto fl = synth_fluorescence(d.spikes, cc, cr);
  d.traces = std::move(fl.traces);
  d.gamma = std::move(fl.gamma);
  d.phase = random_phase_assignment(d.spikes.dim(2), cc.n_phases, pr);
  const auto fr = frame_resolution(d.traces, d.phase, cc.n_phases, fs);
  d.frame_events = deconvolve_frames(fr.values, d.gamma, cc.n_phases, cc.s_min);
  d.staggered = frames_to_staggered(d.frame_events, d.phase, cc.n_phases, fs);
  d.frames = make_dense_batch(d.frame_events, static_cast<double>(cc.n_phases) / fs);
  d.deconv_r = spike_correlation(zero_fill(d.staggered), d.spikes, 4);
  return d;
}

// ---------------------------------------------------------------------------
// Shared cell steps

inline CsvTable train_log_table(const TrainLog& log) {
  CsvTable t({"epoch", "train_loss", "train_recon", "val_nll", "val_smoothed"});
  for (const auto& e : log.epochs) t.add(e.epoch, e.train_loss, e.train_recon, e.val_nll, e.val_smoothed);
  return t;
}

inline TrainResult train_and_save(const TimeSeriesBatch& data, const SeqAeHyper& h, TrainMode mode,
                                  const std::optional<SeqAeParams>& start,
                                  const std::filesystem::path& dir, const std::string& tag,
                                  const Logger& log) {
  auto res = train_seqae(data, h, mode, start, [&](const EpochRecord& e) {
    if (e.epoch % 10 == 0 || e.epoch + 1 == h.epochs)
      log("  " + tag + " epoch " + std::to_string(e.epoch) + " loss " + format_number(e.train_loss) +
          " val " + format_number(e.val_nll));
  });
  if (res.log.diverged) throw Error(tag + ": training diverged: " + res.log.divergence_message);
  save_checkpoint(res.params, dir / "ckpt" / tag,
                  {{"best_epoch", res.log.best_epoch}, {"best_val_smoothed", res.log.best_val_smoothed}});
  detail::write_file(dir / ("train_log_" + tag + ".csv"), train_log_table(res.log).str());
  return res;
}

struct Mapping {
  RidgeCvResult cv;
  Tensor3 prediction;  // [trials, T, 3] from the first repeat's model
};

inline Mapping ridge_map(const Tensor3& features, const Tensor3& targets, const EvalSection& ev) {
  Mapping m;
  m.cv = map_to_targets(features, targets, ev.lag, ev.ridge);
  if (ev.lag == 0) {
    const auto [X, Y] = pair_samples(features, targets, 0, nullptr);
    const Eigen::MatrixXd P = m.cv.model.predict(X);
    m.prediction = Tensor3(targets.dim(0), targets.dim(1), targets.dim(2));
    for (Eigen::Index r = 0; r < P.rows(); ++r)
      for (Eigen::Index c = 0; c < P.cols(); ++c) m.prediction.flat()[static_cast<std::size_t>(r * P.cols() + c)] = P(r, c);
  }
  return m;
}

inline const char* kDimNames[] = {"x", "y", "z"};

// Appends r2_mean and r2_<dim> rows; `prefix` holds the leading key cells.
inline void add_r2_rows(CsvTable& t, const std::vector<std::string>& prefix, const RidgeCvResult& cv) {
  auto row = [&](const std::string& metric, double v) {
    auto r = prefix;
    r.push_back(metric);
    r.push_back(format_number(v));
    t.add_row(std::move(r));
  };
  row("r2_mean", cv.heldout_r2);
  for (std::size_t d = 0; d < cv.heldout_r2_per_dim.size(); ++d)
    row(std::string("r2_") + (d < 3 ? kDimNames[d] : std::to_string(d).c_str()), cv.heldout_r2_per_dim[d]);
}

inline std::vector<std::vector<double>> trials_of(const Tensor3& x, std::size_t channel) {
  std::vector<std::vector<double>> out(x.dim(0), std::vector<double>(x.dim(1)));
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t t = 0; t < x.dim(1); ++t) out[i][t] = x(i, t, channel);
  return out;
}

// Mean pseudo-R^2 of per-neuron Poisson GLMs from factors to held-out spikes,
// fitted on training trials and scored on validation trials.
inline double heldout_pseudo_r2(const Tensor3& factors, const Tensor3& heldout,
                                const std::vector<std::size_t>& train, const std::vector<std::size_t>& val,
                                double l2) {
  auto rows = [&](const std::vector<std::size_t>& idx, const Tensor3& x) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(idx.size() * x.dim(1)), static_cast<Eigen::Index>(x.dim(2)));
    Eigen::Index r = 0;
    for (auto i : idx)
      for (std::size_t t = 0; t < x.dim(1); ++t, ++r)
        for (std::size_t c = 0; c < x.dim(2); ++c) m(r, static_cast<Eigen::Index>(c)) = x(i, t, c);
    return m;
  };
  const Eigen::MatrixXd Xtr = rows(train, factors), Xva = rows(val, factors);
  const Eigen::MatrixXd Ytr = rows(train, heldout), Yva = rows(val, heldout);
  double sum = 0.0;
  int used = 0;
  for (Eigen::Index n = 0; n < Ytr.cols(); ++n) {
    const auto fit = poisson_glm_fit(Xtr, Ytr.col(n), l2);
    const double pr2 = pseudo_r2(Yva.col(n), fit.rates(Xva), Yva.col(n).mean());
    if (std::isfinite(pr2)) {
      sum += pr2;
      ++used;
    }
  }
  return used ? sum / used : kNaN;
}

// ---------------------------------------------------------------------------
// Drop sweep

inline std::string fraction_id(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "drop-%.3f", f);
  return buf;
}

inline ExperimentResult run_drop_sweep(const ExperimentConfig& cfg, const Logger& log = Logger{},
                                       int threads = 1) {
  const auto root = experiment_root(cfg);
  const SpikeDataset data = make_spike_dataset(cfg, 0);
  const TimeSeriesBatch full = make_dense_batch(data.spikes, cfg.synth.lorenz.bin_ms / 1000.0);
  std::vector<CellSpec> cells;
  const auto& fr = cfg.sampling.fractions;
  for (std::size_t k = 0; k < fr.size(); ++k) {
    const double f = fr[k];
    cells.push_back({fraction_id(f), {{"fraction", f}}, [&, f, k](const std::filesystem::path& dir) {
                       const Mask3 mask = random_drop_mask(full.trials(), full.time(), full.channels(), f,
                                                           Rng(cfg.seed).derive(1000 + k));
                       const TimeSeriesBatch sparse = apply_mask(full, mask);
                       const auto tr = train_and_save(sparse, cfg.seqae, TrainMode::fresh, std::nullopt,
                                                      dir, "model", log);
                       const auto inf = infer(tr.params, sparse);
                       const auto map = ridge_map(inf.factors, data.latents, cfg.eval);
                       const std::string fs = format_number(f);
                       CsvTable t({"fraction", "metric", "value"});
                       add_r2_rows(t, {fs}, map.cv);
                       t.add(fs, "recon_nll_val", evaluate_nll(tr.params, select_trials(sparse, tr.log.val_trials)));
                       t.add(fs, "best_val_smoothed", tr.log.best_val_smoothed);
                       t.add(fs, "best_epoch", tr.log.best_epoch);
                       t.add(fs, "observed_fraction",
                             static_cast<double>(sparse.observed_count()) / static_cast<double>(mask.size()));
                       if (data.heldout.dim(2) > 0)
                         t.add(fs, "pseudo_r2_heldout",
                               heldout_pseudo_r2(inf.factors, data.heldout, tr.log.train_trials,
                                                 tr.log.val_trials, cfg.eval.glm_l2));
                       return t;
                     }});
  }
  auto out = run_cells(cfg, root, cells, log, threads);
  return finish_experiment(cfg, root, {"fraction", "metric", "value"}, std::move(out));
}

// ---------------------------------------------------------------------------
// Super-resolution

inline double band_mean(const CoherenceResult& c, double lo, double hi) {
  double s = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < c.frequencies.size(); ++k)
    if (c.frequencies[k] >= lo && c.frequencies[k] <= hi) {
      s += c.values[k];
      ++n;
    }
  return n ? s / n : kNaN;
}

inline ExperimentResult run_superres(const ExperimentConfig& cfg, const Logger& log = Logger{},
                                     int threads = 1) {
  const auto root = experiment_root(cfg);
  const std::vector<std::string> header{"speed", "peak_hz", "arm", "metric", "value"};
  std::vector<CellSpec> cells;
  const auto& speeds = cfg.sampling.speeds;
  for (std::size_t k = 0; k < speeds.size(); ++k) {
    const int s = speeds[k];
    cells.push_back({"speed-" + std::to_string(s), {{"downsample_factor", s}},
                     [&, s, k](const std::filesystem::path& dir) {
      ExperimentConfig c = cfg;
      c.synth.lorenz.downsample_factor = s;
      const CalciumDataset d = make_calcium_dataset(c, 100 + k);
      const auto& cc = c.synth.calcium;
      const std::size_t T = d.latents.dim(1);
      const double frame_rate = cc.fine_rate / cc.n_phases;
      const std::string ss = std::to_string(s), pk = format_number(d.peak_hz);
      CsvTable t(header);
      CsvTable coh({"speed", "arm", "frequency_hz", "coherence_z"});
      t.add(ss, pk, "data", "deconv_r", d.deconv_r);
      auto score = [&](const std::string& arm, const Tensor3& feat) {
        const auto map = ridge_map(feat, d.latents, c.eval);
        add_r2_rows(t, {ss, pk, arm}, map.cv);
        CoherenceOptions co = c.eval.coherence;
        co.sample_rate = cc.fine_rate;
        const auto cz = coherence_multi(trials_of(d.latents, 2), trials_of(map.prediction, 2), co);
        t.add(ss, pk, arm, "coherence_z_5_15hz", band_mean(cz, 5.0, 15.0));
        for (std::size_t f = 0; f < cz.frequencies.size(); ++f)
          coh.add(ss, arm, cz.frequencies[f], cz.values[f]);
      };
      const auto sb = train_and_save(d.staggered, c.seqae, TrainMode::fresh, std::nullopt, dir, "sbtt", log);
      score("sbtt", infer(sb.params, d.staggered).rates);
      const auto fb = train_and_save(d.frames, c.seqae, TrainMode::fresh, std::nullopt, dir, "frame", log);
      score("frame", resample_linear(infer(fb.params, d.frames).rates, frame_rate, cc.fine_rate, T));
      const double sd_bins = c.eval.smooth_sd_ms / (1000.0 / frame_rate);
      score("smooth", resample_linear(gaussian_smooth(d.frame_events, sd_bins), frame_rate, cc.fine_rate, T));
      detail::write_file(dir / "coherence.csv", coh.str());
      return t;
    }});
  }
  auto out = run_cells(cfg, root, cells, log, threads);
  return finish_experiment(cfg, root, header, std::move(out));
}

// ---------------------------------------------------------------------------
// Encoder retraining

inline bool generator_identical(const SeqAeParams& a, const SeqAeParams& b) {
  auto ta = tensors(a);
  auto tb = tensors(b);
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].group == ParamGroup::encoder) continue;
    for (Eigen::Index k = 0; k < ta[i].size(); ++k)
      if (ta[i].data[k] != tb[i].data[k]) return false;
  }
  return true;
}

inline ExperimentResult run_retraining(const ExperimentConfig& cfg, const Logger& log = Logger{},
                                       int threads = 1) {
  const auto root = experiment_root(cfg);
  const std::vector<std::string> header{"fraction", "arm", "metric", "value"};
  const SpikeDataset data = make_spike_dataset(cfg, 0);
  const TimeSeriesBatch full = make_dense_batch(data.spikes, cfg.synth.lorenz.bin_ms / 1000.0);

  // Stage 1: the full-data model.
  std::vector<CellSpec> stage1{{"full", {{"fraction", 0.0}}, [&](const std::filesystem::path& dir) {
                                  const auto tr = train_and_save(full, cfg.seqae, TrainMode::fresh,
                                                                 std::nullopt, dir, "model", log);
                                  const auto map = ridge_map(infer(tr.params, full).factors, data.latents, cfg.eval);
                                  CsvTable t(header);
                                  add_r2_rows(t, {"0", "full"}, map.cv);
                                  return t;
                                }}};
  auto out = run_cells(cfg, root, stage1, log, 1);
  if (out[0].failed) return finish_experiment(cfg, root, header, std::move(out));
  const SeqAeParams full_model = load_checkpoint(root / "full" / "ckpt" / "model");

  SeqAeHyper retrain = cfg.seqae;
  if (cfg.retrain.epochs > 0) retrain.epochs = cfg.retrain.epochs;
  if (cfg.retrain.lr > 0) retrain.lr = cfg.retrain.lr;

  std::vector<CellSpec> cells;
  const auto& fr = cfg.sampling.fractions;
  for (std::size_t k = 0; k < fr.size(); ++k) {
    const double f = fr[k];
    cells.push_back({fraction_id(f), {{"fraction", f}}, [&, f, k](const std::filesystem::path& dir) {
      const Mask3 mask = random_drop_mask(full.trials(), full.time(), full.channels(), f,
                                          Rng(cfg.seed).derive(1000 + k));
      const TimeSeriesBatch sparse = apply_mask(full, mask);
      const std::string fs = format_number(f);
      CsvTable t(header);
      auto score = [&](const std::string& arm, const SeqAeParams& p) {
        add_r2_rows(t, {fs, arm}, ridge_map(infer(p, sparse).factors, data.latents, cfg.eval).cv);
      };
      score("trained_full_run_sparse", full_model);
      // With nothing dropped the sparse data equals the full data, so fresh
      // training would reproduce the full model bit for bit.
      if (f == 0.0)
        score("trained_sparse", full_model);
      else
        score("trained_sparse",
              train_and_save(sparse, cfg.seqae, TrainMode::fresh, std::nullopt, dir, "sparse", log).params);
      const auto re = train_and_save(sparse, retrain, TrainMode::retrain_encoder, full_model, dir, "retrained", log);
      score("retrained_sparse", re.params);
      t.add(fs, "retrained_sparse", "generator_frozen", generator_identical(re.params, full_model) ? 1 : 0);
      return t;
    }});
  }
  auto rest = run_cells(cfg, root, cells, log, threads);
  for (auto& c : rest) out.push_back(std::move(c));
  return finish_experiment(cfg, root, header, std::move(out));
}

// ---------------------------------------------------------------------------
// LDS identification

struct LdsProblem {
  LdsParams truth;
  std::vector<LdsSequence> train, test;
};

// Block-diagonal damped rotations (angles angle, 2*angle, ...); a trailing odd
// dimension gets a real eigenvalue equal to the radius.
inline Eigen::MatrixXd rotation_dynamics(int D, double radius, double angle) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(D, D);
  for (int b = 0; b + 1 < D; b += 2) {
    const double th = angle * (b / 2 + 1);
    A(b, b) = radius * std::cos(th);
    A(b, b + 1) = -radius * std::sin(th);
    A(b + 1, b) = radius * std::sin(th);
    A(b + 1, b + 1) = radius * std::cos(th);
  }
  if (D % 2) A(D - 1, D - 1) = radius;
  return A;
}

inline LdsProblem make_lds_problem(const ExperimentConfig& cfg) {
  const auto& l = cfg.lds;
  const Rng root = Rng(cfg.seed).derive(7);
  Rng hr = root.derive(0), xr = root.derive(1), nr = root.derive(2);
  LdsProblem p;
  p.truth.A = rotation_dynamics(l.latent_dim, l.radius, l.angle);
  p.truth.H.resize(l.obs_dim, l.latent_dim);
  for (Eigen::Index i = 0; i < p.truth.H.size(); ++i) p.truth.H.data()[i] = hr.normal();
  const LdsNoiseConfig noise{l.process_sd, l.observation_sd};
  const int n = l.trials + l.heldout_trials;
  const Mask3 mask = random_drop_mask(static_cast<std::size_t>(n), static_cast<std::size_t>(l.time),
                                      static_cast<std::size_t>(l.obs_dim), l.drop_fraction, root.derive(3));
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd x0(l.latent_dim);
    for (Eigen::Index d = 0; d < x0.size(); ++d) x0(d) = xr.normal();
    Rng tr = nr.derive(static_cast<std::uint64_t>(i));
    const auto sim = lds_simulate(p.truth, noise, x0, l.time, tr, true);
    LdsSequence s{x0, sim.outputs, BoolMatrix(l.time, l.obs_dim)};
    for (int t = 0; t < l.time; ++t)
      for (int c = 0; c < l.obs_dim; ++c) {
        s.mask(t, c) = mask(static_cast<std::size_t>(i), static_cast<std::size_t>(t), static_cast<std::size_t>(c)) != 0;
        if (!s.mask(t, c)) s.y(t, c) = 0.0;
      }
    (i < l.trials ? p.train : p.test).push_back(std::move(s));
  }
  return p;
}

inline std::vector<LdsSequence> truncate(const std::vector<LdsSequence>& data, int T) {
  std::vector<LdsSequence> out;
  for (const auto& s : data) {
    const auto n = std::min<Eigen::Index>(T, s.y.rows());
    out.push_back({s.x0, s.y.topRows(n), s.mask.topRows(n)});
  }
  return out;
}

struct LdsExperimentOutput {
  LdsParams learned;
  CsvTable metrics;
  CsvTable history;
};

// Gradient descent over increasing horizons; the epoch budget is split
// evenly across the horizons.
inline LdsExperimentOutput fit_lds(const ExperimentConfig& cfg, const LdsProblem& prob) {
  const auto& l = cfg.lds;
  Rng ir = Rng(cfg.seed).derive(8);
  LdsParams init{0.5 * Eigen::MatrixXd::Identity(l.latent_dim, l.latent_dim),
                 Eigen::MatrixXd(l.obs_dim, l.latent_dim)};
  for (Eigen::Index i = 0; i < init.H.size(); ++i) init.H.data()[i] = 0.1 * ir.normal();
  std::vector<int> horizons;
  for (int h : l.horizons)
    if (h < l.time) horizons.push_back(h);
  horizons.push_back(l.time);
  const int per = std::max(1, l.epochs / static_cast<int>(horizons.size()));
  LdsExperimentOutput out{init, CsvTable({"metric", "value"}), CsvTable({"horizon", "epoch", "loss"})};
  LdsTrainOptions opt;
  opt.estimate_x0 = l.estimate_x0;
  opt.optimizer = parse_lds_optimizer(l.optimizer);
  int epoch = 0;
  for (int h : horizons) {
    const auto res = train_lds(truncate(prob.train, h), out.learned, l.lr, per, opt);
    for (double v : res.loss_history) out.history.add(h, epoch++, v);
    out.learned = res.params;
  }
  const double mse = predictive_mse(out.learned, prob.test);
  const double oracle = predictive_mse(prob.truth, prob.test);
  const auto ev_l = sorted_eigenvalues(out.learned.A);
  const auto ev_t = sorted_eigenvalues(prob.truth.A);
  double eig_err = 0.0;
  for (std::size_t i = 0; i < ev_t.size(); ++i) eig_err = std::max(eig_err, std::abs(ev_l[i] - ev_t[i]));
  out.metrics.add("heldout_mse", mse);
  out.metrics.add("oracle_mse", oracle);
  out.metrics.add("mse_ratio", mse / oracle);
  out.metrics.add("eigenvalue_max_error", eig_err);
  for (std::size_t i = 0; i < ev_t.size(); ++i) {
    out.metrics.add("eig" + std::to_string(i) + "_re", ev_l[i].real());
    out.metrics.add("eig" + std::to_string(i) + "_im", ev_l[i].imag());
    out.metrics.add("true_eig" + std::to_string(i) + "_re", ev_t[i].real());
    out.metrics.add("true_eig" + std::to_string(i) + "_im", ev_t[i].imag());
  }
  return out;
}

inline void save_matrix(const std::filesystem::path& stem, const Eigen::MatrixXd& m, const std::string& role) {
  std::vector<double> rm(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) rm[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  write_tensor(stem, {{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, DType::f64,
                      "row-major", role},
               std::span<const double>(rm));
}

inline Eigen::MatrixXd load_matrix(const std::filesystem::path& stem) {
  const auto td = read_tensor(stem);
  if (td.manifest.dims.size() != 2) throw Error("expected a matrix in " + stem.string());
  const auto R = static_cast<Eigen::Index>(td.manifest.dims[0]);
  const auto C = static_cast<Eigen::Index>(td.manifest.dims[1]);
  Eigen::MatrixXd m(R, C);
  for (Eigen::Index r = 0; r < R; ++r)
    for (Eigen::Index c = 0; c < C; ++c) m(r, c) = td.values[static_cast<std::size_t>(r * C + c)];
  return m;
}

inline ExperimentResult run_lds(const ExperimentConfig& cfg, const Logger& log = Logger{}) {
  const auto root = experiment_root(cfg);
  std::vector<CellSpec> cells{{"lds", {{"drop_fraction", cfg.lds.drop_fraction}}, [&](const std::filesystem::path& dir) {
                                 const auto prob = make_lds_problem(cfg);
                                 auto out = fit_lds(cfg, prob);
                                 std::filesystem::create_directories(dir / "ckpt");
                                 save_matrix(dir / "ckpt" / "A", out.learned.A, "lds_A");
                                 save_matrix(dir / "ckpt" / "H", out.learned.H, "lds_H");
                                 save_matrix(dir / "ckpt" / "A_true", prob.truth.A, "lds_A_true");
                                 save_matrix(dir / "ckpt" / "H_true", prob.truth.H, "lds_H_true");
                                 detail::write_file(dir / "loss_history.csv", out.history.str());
                                 return out.metrics;
                               }}};
  auto out = run_cells(cfg, root, cells, log, 1);
  return finish_experiment(cfg, root, {"metric", "value"}, std::move(out));
}

}  // namespace sbtt
