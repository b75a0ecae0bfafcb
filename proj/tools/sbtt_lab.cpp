// sbtt-lab: synthetic data, masking, training, inference, evaluation and sweeps.

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sbtt/config.hpp"
#include "sbtt/eval.hpp"
#include "sbtt/experiments.hpp"
#include "sbtt/lds.hpp"
#include "sbtt/sampling.hpp"
#include "sbtt/seqae.hpp"
#include "sbtt/synth.hpp"
#include "sbtt/tensor_file.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sbtt;

namespace {

enum ExitCode { kOk = 0, kRuntime = 1, kUsage = 2, kCellFailure = 3 };

struct CellFailure : Error {
  json cells;
  CellFailure(const std::string& msg, json c) : Error(msg), cells(std::move(c)) {}
};

ExperimentConfig load_config(const std::string& path, const std::string& out_root = "") {
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config '" + path + "': " + e.what());
  }
  auto cfg = parse_config_text(text);
  if (!out_root.empty()) cfg.output = out_root;
  return cfg;
}

void emit_ok(json j) {
  j["status"] = "ok";
  std::cout << j.dump() << std::endl;
}

void write_manifest(const fs::path& dir, json j) {
  fs::create_directories(dir);
  j["version"] = kVersion;
  detail::write_file(dir / "manifest.json", j.dump(2) + "\n");
}

void check_result(const ExperimentResult& r) {
  if (r.ok()) return;
  json failed = json::array();
  for (const auto& c : r.cells)
    if (c.failed) failed.push_back({{"cell", c.id}, {"error", c.error}});
  throw CellFailure(std::to_string(failed.size()) + " cell(s) failed", failed);
}

Tensor3 load_values(const fs::path& stem) {
  const auto j = json::parse(detail::read_file(manifest_path(stem)));
  if (j.value("role", "") == "batch") return zero_fill(load_batch(stem));
  return load_tensor3(stem);
}

json vec_json(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(std::isfinite(x) ? json(x) : json(nullptr));
  return a;
}

double finite_mean(const std::vector<double>& v) {
  double s = 0.0;
  int n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  return n ? s / n : std::nan("");
}

// ---------------------------------------------------------------------------

void cmd_synth(const std::string& config, const std::string& kind, std::string out) {
  const auto cfg = load_config(config);
  const fs::path dir = out.empty() ? fs::path(cfg.output) / cfg.experiment / "synth" : fs::path(out);
  fs::create_directories(dir);
  json files = json::array();
  auto put3 = [&](const std::string& name, const Tensor3& t) {
    save_tensor3(dir / name, t, name);
    files.push_back(name);
  };
  auto putb = [&](const std::string& name, const TimeSeriesBatch& b) {
    save_batch(b, dir / name);
    files.push_back(name);
  };
  json extra;
  if (kind == "spikes") {
    const auto d = make_spike_dataset(cfg, 0);
    put3("latents", d.latents);
    put3("rates", d.rates);
    putb("spikes", make_dense_batch(d.spikes, cfg.synth.lorenz.bin_ms / 1000.0));
    if (d.heldout.dim(2) > 0) putb("heldout", make_dense_batch(d.heldout, cfg.synth.lorenz.bin_ms / 1000.0));
    extra = {{"labels", d.labels}, {"peak_hz", d.peak_hz}};
  } else if (kind == "calcium") {
    const auto d = make_calcium_dataset(cfg, 0);
    put3("latents", d.latents);
    putb("spikes", make_dense_batch(d.spikes, 1.0 / cfg.synth.calcium.fine_rate));
    put3("traces", d.traces);
    putb("events_staggered", d.staggered);
    putb("events_frames", d.frames);
    extra = {{"labels", d.labels}, {"peak_hz", d.peak_hz}, {"deconv_r", d.deconv_r},
             {"phase", d.phase}, {"gamma", d.gamma}};
  } else {
    throw ConfigError("--kind must be spikes or calcium");
  }
  extra["kind"] = kind;
  extra["files"] = files;
  extra["seed"] = cfg.seed;
  extra["config_hash"] = config_hash(to_json(cfg));
  extra["config"] = to_json(cfg);
  write_manifest(dir, extra);
  emit_ok({{"command", "synth"}, {"output", dir.string()}});
}

void cmd_mask(const std::string& config, const std::string& in, const std::string& out) {
  const auto cfg = load_config(config);
  const auto b = load_batch(in);
  const auto& s = cfg.sampling.schedule;
  Mask3 mask(b.trials(), b.time(), b.channels(), 1);
  if (s.kind == ScheduleKind::random_drop) {
    mask = random_drop_mask(b.trials(), b.time(), b.channels(), s.drop_fraction, Rng(cfg.seed).derive(2000));
  } else if (s.kind == ScheduleKind::raster_phase) {
    const double ratio = s.frame_period / b.bin_width;
    const int n_phases = static_cast<int>(std::lround(ratio));
    if (n_phases < 1 || std::abs(ratio - n_phases) > 1e-6)
      throw ConfigError("sampling.frame_period must be a whole number of bins");
    std::vector<int> phase;
    if (s.phases.empty()) {
      Rng pr = Rng(cfg.seed).derive(2001);
      phase = random_phase_assignment(b.channels(), n_phases, pr);
    } else {
      if (s.phases.size() != b.channels()) throw ConfigError("sampling.phases needs one entry per channel");
      for (double p : s.phases) {
        const double k = p / b.bin_width;
        if (std::abs(k - std::lround(k)) > 1e-6) throw ConfigError("sampling.phases must be whole bins");
        phase.push_back(static_cast<int>(std::lround(k)));
      }
    }
    const auto r = raster_mask(b.channels(), b.time(), phase, n_phases, b.bin_width);
    for (std::size_t i = 0; i < b.trials(); ++i)
      for (std::size_t t = 0; t < b.time(); ++t)
        for (std::size_t c = 0; c < b.channels(); ++c) mask(i, t, c) = r.observed(t, c) ? 1 : 0;
  }
  const auto masked = apply_mask(b, mask);
  fs::create_directories(fs::path(out).parent_path().empty() ? fs::path(".") : fs::path(out).parent_path());
  save_batch(masked, out);
  emit_ok({{"command", "mask"},
           {"output", out},
           {"observed", masked.observed_count()},
           {"entries", masked.values.size()}});
}

void cmd_train_lds(const std::string& config, const std::string& out_root, const Logger& log) {
  const auto cfg = load_config(config, out_root);
  const auto r = run_lds(cfg, log);
  check_result(r);
  emit_ok({{"command", "train-lds"}, {"output", r.dir.string()}});
}

void cmd_train_seqae(const std::string& config, const std::string& out_root, const std::string& data,
                     const std::string& ckpt, const Logger& log) {
  const auto cfg = load_config(config, out_root);
  const auto root = experiment_root(cfg);
  const bool retrain = !ckpt.empty();
  const std::string id = retrain ? "retrain-encoder" : "train-seqae";
  json params = {{"data", fs::absolute(data).string()}};
  if (retrain) params["checkpoint"] = fs::absolute(ckpt).string();
  CellSpec cell{id, params, [&](const fs::path& dir) {
                  const auto batch = load_batch(data);
                  SeqAeHyper h = cfg.seqae;
                  std::optional<SeqAeParams> start;
                  TrainMode mode = TrainMode::fresh;
                  if (retrain) {
                    start = load_checkpoint(ckpt);
                    mode = TrainMode::retrain_encoder;
                    if (cfg.retrain.epochs > 0) h.epochs = cfg.retrain.epochs;
                    if (cfg.retrain.lr > 0) h.lr = cfg.retrain.lr;
                  }
                  const auto tr = train_and_save(batch, h, mode, start, dir, "model", log);
                  return train_log_table(tr.log);
                }};
  const auto out = run_cells(cfg, root, {cell}, log, 1);
  const auto r = finish_experiment(cfg, root, train_log_table(TrainLog{}).header(), out);
  check_result(r);
  emit_ok({{"command", id}, {"output", (root / id).string()}, {"checkpoint", (root / id / "ckpt" / "model").string()}});
}

void cmd_infer(const std::string& ckpt, const std::string& data, const std::string& out) {
  const auto p = load_checkpoint(ckpt);
  const auto batch = load_batch(data);
  const auto inf = infer(p, batch);
  const fs::path dir(out);
  fs::create_directories(dir);
  save_tensor3(dir / "factors", inf.factors, "factors");
  save_tensor3(dir / "rates", inf.rates, "rates");
  std::vector<double> ic(static_cast<std::size_t>(inf.ic_mean.size()));
  for (Eigen::Index i = 0; i < inf.ic_mean.cols(); ++i)
    for (Eigen::Index z = 0; z < inf.ic_mean.rows(); ++z)
      ic[static_cast<std::size_t>(i * inf.ic_mean.rows() + z)] = inf.ic_mean(z, i);
  write_tensor(dir / "ic_mean",
               {{static_cast<std::size_t>(inf.ic_mean.cols()), static_cast<std::size_t>(inf.ic_mean.rows())},
                DType::f64, "row-major", "ic_mean"},
               std::span<const double>(ic));
  write_manifest(dir, {{"checkpoint", fs::absolute(ckpt).string()},
                       {"data", fs::absolute(data).string()},
                       {"files", {"factors", "rates", "ic_mean"}}});
  emit_ok({{"command", "infer"}, {"output", dir.string()}});
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void cmd_eval(const std::string& pred_path, const std::string& truth_path, const std::string& metrics,
              const std::string& out, const std::string& config, const std::string& map, double rate) {
  EvalSection ev;
  if (!config.empty()) ev = load_config(config).eval;
  const Tensor3 pred = load_values(pred_path);
  const Tensor3 truth = load_values(truth_path);
  if (pred.dim(0) != truth.dim(0) || pred.dim(1) != truth.dim(1))
    throw Error("prediction and truth differ in trials or time");
  const fs::path report(out);
  const fs::path dir = report.parent_path().empty() ? fs::path(".") : report.parent_path();
  fs::create_directories(dir);
  const std::string stem = report.stem().string();
  json rep = {{"pred", pred_path}, {"truth", truth_path}, {"version", kVersion}};
  for (const auto& m : split_list(metrics)) {
    if (m == "r2") {
      CsvTable t({"target", "r2"});
      std::vector<double> per;
      double mean = 0.0;
      if (map == "ridge") {
        const auto cv = map_to_targets(pred, truth, ev.lag, ev.ridge);
        per = cv.heldout_r2_per_dim;
        mean = cv.heldout_r2;
      } else if (map == "none") {
        if (pred.dim(2) != truth.dim(2)) throw Error("--map none needs matching channel counts");
        const auto n = static_cast<Eigen::Index>(pred.dim(0) * pred.dim(1));
        const auto c = static_cast<Eigen::Index>(pred.dim(2));
        const Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> P(pred.flat().data(), n, c);
        const Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>> Y(truth.flat().data(), n, c);
        const auto r = r2(Y, P);
        per = r.per_dim;
        mean = r.mean;
      } else {
        throw ConfigError("--map must be ridge or none");
      }
      for (std::size_t d = 0; d < per.size(); ++d) t.add(static_cast<int>(d), per[d]);
      detail::write_file(dir / (stem + "_r2.csv"), t.str());
      rep["r2"] = {{"mean", std::isfinite(mean) ? json(mean) : json(nullptr)}, {"per_dim", vec_json(per)}, {"map", map}};
    } else if (m == "pr2") {
      if (pred.dim(2) != truth.dim(2)) throw Error("pr2 needs one predicted rate per truth channel");
      CsvTable t({"unit", "pseudo_r2"});
      std::vector<double> per;
      const auto n = static_cast<Eigen::Index>(pred.dim(0) * pred.dim(1));
      for (std::size_t c = 0; c < pred.dim(2); ++c) {
        Eigen::VectorXd y(n), mu(n);
        Eigen::Index k = 0;
        for (std::size_t i = 0; i < pred.dim(0); ++i)
          for (std::size_t tt = 0; tt < pred.dim(1); ++tt, ++k) {
            y(k) = truth(i, tt, c);
            mu(k) = pred(i, tt, c);
          }
        per.push_back(pseudo_r2(y, mu, y.mean()));
        t.add(static_cast<int>(c), per.back());
      }
      detail::write_file(dir / (stem + "_pr2.csv"), t.str());
      const double pm = finite_mean(per);
      rep["pr2"] = {{"mean", std::isfinite(pm) ? json(pm) : json(nullptr)}, {"per_unit", vec_json(per)}};
    } else if (m == "coherence") {
      if (pred.dim(2) != truth.dim(2)) throw Error("coherence needs matching channel counts");
      CoherenceOptions co = ev.coherence;
      co.sample_rate = rate;
      CsvTable t({"channel", "frequency_hz", "coherence"});
      json means = json::array();
      for (std::size_t c = 0; c < pred.dim(2); ++c) {
        const auto r = coherence_multi(trials_of(truth, c), trials_of(pred, c), co);
        for (std::size_t f = 0; f < r.frequencies.size(); ++f) t.add(static_cast<int>(c), r.frequencies[f], r.values[f]);
        means.push_back(finite_mean(r.values));
      }
      detail::write_file(dir / (stem + "_coherence.csv"), t.str());
      rep["coherence"] = {{"mean_per_channel", means}, {"sample_rate", rate}};
    } else {
      throw ConfigError("unknown metric '" + m + "' (use r2, pr2, coherence)");
    }
  }
  detail::write_file(report, rep.dump(2) + "\n");
  emit_ok({{"command", "eval"}, {"output", report.string()}});
}

template <class F>
void cmd_sweep(const std::string& name, const std::string& config, const std::string& out_root,
               const Logger& log, F run) {
  const auto cfg = load_config(config, out_root);
  const auto r = run(cfg, log, thread_count());
  check_result(r);
  emit_ok({{"command", name}, {"output", r.dir.string()}, {"results", (r.dir / "results.csv").string()}});
}

void emit_error(const std::string& type, const std::string& msg, const json& extra = nullptr) {
  json j = {{"status", "error"}, {"error", {{"type", type}, {"message", msg}}}};
  if (!extra.is_null()) j["error"]["details"] = extra;
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sbtt-lab: selective backpropagation through time experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages on stderr");

  std::string config, out, out_root, data, ckpt, in, kind = "spikes", pred, truth, metrics = "r2", map = "ridge",
                                       format = "markdown";
  double rate = 100.0;

  auto* synth = app.add_subcommand("synth", "Generate synthetic Lorenz spiking or calcium data");
  synth->add_option("-c,--config", config, "Config file")->required();
  synth->add_option("--kind", kind, "spikes or calcium")->check(CLI::IsMember({"spikes", "calcium"}));
  synth->add_option("-o,--out", out, "Output directory (default <output>/<experiment>/synth)");

  auto* mask = app.add_subcommand("mask", "Apply the configured sampling schedule to a batch");
  mask->add_option("-c,--config", config, "Config file")->required();
  mask->add_option("-i,--in", in, "Input batch stem")->required();
  mask->add_option("-o,--out", out, "Output batch stem")->required();

  auto* tlds = app.add_subcommand("train-lds", "Simulate and fit a linear dynamical system with SBTT");
  tlds->add_option("-c,--config", config, "Config file")->required();
  tlds->add_option("-o,--out", out_root, "Output root (overrides config output)");

  auto* tseq = app.add_subcommand("train-seqae", "Train a sequential autoencoder on a batch");
  tseq->add_option("-c,--config", config, "Config file")->required();
  tseq->add_option("-o,--out", out_root, "Output root (overrides config output)");
  tseq->add_option("-d,--data", data, "Batch stem")->required();

  auto* rtr = app.add_subcommand("retrain-encoder", "Retrain only the encoder of a checkpoint");
  rtr->add_option("-c,--config", config, "Config file")->required();
  rtr->add_option("-o,--out", out_root, "Output root (overrides config output)");
  rtr->add_option("-d,--data", data, "Batch stem")->required();
  rtr->add_option("--ckpt", ckpt, "Checkpoint directory")->required();

  auto* inf = app.add_subcommand("infer", "Infer factors and rates from a checkpoint");
  inf->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  inf->add_option("-d,--data", data, "Batch stem")->required();
  inf->add_option("-o,--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Score predictions against ground truth");
  ev->add_option("--pred", pred, "Prediction tensor or batch stem")->required();
  ev->add_option("--truth", truth, "Truth tensor or batch stem")->required();
  ev->add_option("--metrics", metrics, "Comma-separated subset of r2,pr2,coherence");
  ev->add_option("-o,--out", out, "Report JSON path; CSV tables are written beside it")->required();
  ev->add_option("-c,--config", config, "Config file for eval settings");
  ev->add_option("--map", map, "r2 mapping: ridge (cross-validated) or none")->check(CLI::IsMember({"ridge", "none"}));
  ev->add_option("--rate", rate, "Sample rate in Hz for coherence");

  auto* sdrop = app.add_subcommand("sweep-drop", "Random-drop fraction sweep");
  sdrop->add_option("-c,--config", config, "Config file")->required();
  sdrop->add_option("-o,--out", out_root, "Output root (overrides config output)");
  auto* ssr = app.add_subcommand("sweep-superres", "Calcium super-resolution sweep over Lorenz speeds");
  ssr->add_option("-c,--config", config, "Config file")->required();
  ssr->add_option("-o,--out", out_root, "Output root (overrides config output)");
  auto* sret = app.add_subcommand("sweep-retrain", "Encoder retraining sweep");
  sret->add_option("-c,--config", config, "Config file")->required();
  sret->add_option("-o,--out", out_root, "Output root (overrides config output)");

  auto* ref = app.add_subcommand("config-reference", "Print the configuration reference");
  ref->add_option("--format", format, "markdown or json")->check(CLI::IsMember({"markdown", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return kUsage;
  }

  const Logger log(quiet ? nullptr : &std::cerr);
  try {
    if (*synth) cmd_synth(config, kind, out);
    else if (*mask) cmd_mask(config, in, out);
    else if (*tlds) cmd_train_lds(config, out_root, log);
    else if (*tseq) cmd_train_seqae(config, out_root, data, "", log);
    else if (*rtr) cmd_train_seqae(config, out_root, data, ckpt, log);
    else if (*inf) cmd_infer(ckpt, data, out);
    else if (*ev) cmd_eval(pred, truth, metrics, out, config, map, rate);
    else if (*sdrop)
      cmd_sweep("sweep-drop", config, out_root, log, [](const auto& c, const auto& l, int t) { return run_drop_sweep(c, l, t); });
    else if (*ssr)
      cmd_sweep("sweep-superres", config, out_root, log, [](const auto& c, const auto& l, int t) { return run_superres(c, l, t); });
    else if (*sret)
      cmd_sweep("sweep-retrain", config, out_root, log, [](const auto& c, const auto& l, int t) { return run_retraining(c, l, t); });
    else if (*ref) std::cout << (format == "json" ? to_json(ExperimentConfig{}).dump(2) + "\n" : config_reference_markdown());
  } catch (const CellFailure& e) {
    emit_error("cell_failure", e.what(), e.cells);
    return kCellFailure;
  } catch (const ConfigError& e) {
    emit_error("config", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    emit_error("runtime", e.what());
    return kRuntime;
  }
  return kOk;
}
