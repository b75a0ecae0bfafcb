// Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "dense_reference.hpp"
#include "lds_instances.hpp"
#include "sbtt/experiments.hpp"
#include "seqae_tiny.hpp"

using namespace sbtt;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

const fs::path kRunRoot = SBTT_ACCEPT_DIR;
const fs::path kConfigs = fs::path(SBTT_SOURCE_DIR) / "configs";

ExperimentConfig load(const std::string& name, const nlohmann::json& patch = nlohmann::json::object(),
                      const fs::path& out = kRunRoot) {
  auto j = nlohmann::json::parse(detail::read_file(kConfigs / name));
  j.merge_patch(patch);
  j["output"] = out.string();
  auto cfg = parse_config(j);
  fs::remove_all(experiment_root(cfg));
  return cfg;
}

const Logger& quiet() {
  static const Logger log;
  return log;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void require_ok(const ExperimentResult& r) {
  for (const auto& c : r.cells)
    if (c.failed) throw Error("cell " + c.id + " failed: " + c.error);
}

// ---------------------------------------------------------------------------

Verdict lds_gradient() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2718);
  const int n = 24;
  double worst = 0.0;
  for (int k = 0; k < n; ++k) {
    const int D = 1 + static_cast<int>(rng.below(4));
    const int N = 1 + static_cast<int>(rng.below(8));
    const int T = 2 + static_cast<int>(rng.below(29));
    const double drop = static_cast<double>(k) / (n - 1);
    worst = std::max(worst, oracle::lds_fd_error(oracle::random_lds_instance(rng, D, N, T, drop)));
  }
  const double s = seconds_since(t0);
  return {worst < 1e-6 && s < 60.0,
          "instances=" + std::to_string(n) + " max_rel_err=" + fmt(worst) + " seconds=" + fmt(s)};
}

Verdict seqae_gradient() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (auto fam : tiny::kFamilies) {
    const auto h = tiny::tiny_hyper(fam);
    const auto batch = tiny::tiny_batch(fam, 0.4, 11);
    const auto p = tiny::tiny_params(h, batch);
    Rng noise_rng(99);
    const auto noise = draw_noise(h, batch, noise_rng);
    worst = std::max(worst, tiny::seqae_fd_error(p, batch, h, noise, 2));
  }
  const double s = seconds_since(t0);
  return {worst < 1e-5 && s < 300.0, "families=3 max_rel_err=" + fmt(worst) + " seconds=" + fmt(s)};
}

Verdict equivalence() {
  double lds_worst = 0.0;
  Rng rng(31);
  for (int k = 0; k < 20; ++k) {
    const auto in = oracle::random_lds_instance(rng, 1 + k % 4, 1 + k % 8, 2 + k, 0.0);
    const auto g = sbtt_backward_full(in.p, in.s);
    const auto [loss, ref] = bptt_unmasked(in.p, in.s.x0, in.s.y);
    lds_worst = std::max({lds_worst, std::abs(g.loss - loss) / std::max(1.0, std::abs(loss)),
                          oracle::relative_error(g.grads.dA, ref.dA), oracle::relative_error(g.grads.dH, ref.dH)});
  }
  double seq_worst = 0.0;
  for (auto fam : tiny::kFamilies) {
    const auto h = tiny::tiny_hyper(fam);
    const Tensor3 values = tiny::tiny_values(fam, 4, 21);
    const auto batch = apply_mask(make_dense_batch(values, 0.01), Mask3(4, 10, 6, 1));
    const auto p = tiny::tiny_params(h, batch);
    Rng noise_rng(3);
    const auto noise = draw_noise(h, batch, noise_rng);
    const auto masked = seqae_backward_with_noise(p, batch, h, noise, 2);
    const auto dense = reference::dense_backward(p, values, h, noise, ramp_factor(2, h.ramp_epochs));
    seq_worst = std::max({seq_worst, std::abs(masked.loss.total - dense.total) / std::max(1.0, std::abs(dense.total)),
                          tiny::max_rel(masked.grads, dense.grads)});
  }
  return {lds_worst <= 1e-12 && seq_worst <= 1e-12,
          "lds_max_rel=" + fmt(lds_worst) + " seqae_max_rel=" + fmt(seq_worst)};
}

Verdict mask_independence() {
  int lds_diffs = 0;
  Rng rng(41);
  for (int k = 0; k < 10; ++k) {
    auto in = oracle::random_lds_instance(rng, 1 + k % 4, 2 + k % 7, 5 + 2 * k, 0.1 * (k + 1) * 0.9);
    const auto a = sbtt_backward_full(in.p, in.s);
    for (Eigen::Index t = 0; t < in.s.y.rows(); ++t)
      for (Eigen::Index i = 0; i < in.s.y.cols(); ++i)
        if (!in.s.mask(t, i)) in.s.y(t, i) = 1e6 * rng.normal();
    const auto b = sbtt_backward_full(in.p, in.s);
    if (!(a.loss == b.loss && a.grads.dA == b.grads.dA && a.grads.dH == b.grads.dH)) ++lds_diffs;
  }
  int seq_diffs = 0, seq_cases = 0;
  for (auto fam : tiny::kFamilies)
    for (int variant = 0; variant < 2; ++variant) {
      auto h = tiny::tiny_hyper(fam);
      h.dims.mask_input = variant == 1;
      if (variant == 1) {
        h.dropout_rate = 0.3;
        h.cd_rate = 0.3;
      }
      const auto batch = tiny::tiny_batch(fam, 0.5, 31);
      const auto p = tiny::tiny_params(h, batch);
      auto dirty = batch;
      Rng g(4);
      auto v = dirty.values.flat();
      const auto m = dirty.mask.flat();
      for (std::size_t i = 0; i < v.size(); ++i)
        if (!m[i]) v[i] = fam == EmissionFamily::poisson ? static_cast<double>(g.poisson(50.0)) : 1e3 * g.normal();
      Rng r1(8), r2(8);
      const auto a = seqae_backward(p, batch, h, r1, 1);
      const auto b = seqae_backward(p, dirty, h, r2, 1);
      ++seq_cases;
      if (!(a.loss.total == b.loss.total && tiny::bit_equal(a.grads, b.grads))) ++seq_diffs;
    }
  return {lds_diffs == 0 && seq_diffs == 0,
          "lds_cases=10 lds_changed=" + std::to_string(lds_diffs) + " seqae_cases=" + std::to_string(seq_cases) +
              " seqae_changed=" + std::to_string(seq_diffs)};
}

Verdict lds_identification() {
  const auto cfg = load("acceptance-lds.json");
  const auto& l = cfg.lds;
  if (l.latent_dim != 2 || l.obs_dim != 10 || l.time != 200 || l.trials != 100 || l.observation_sd != 0.05 ||
      l.drop_fraction != 0.5)
    throw Error("acceptance-lds.json does not match the required problem size");
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_lds(cfg, quiet());
  const double s = seconds_since(t0);
  require_ok(r);
  const double ratio = r.results.lookup({{"metric", "mse_ratio"}});
  const double eig = r.results.lookup({{"metric", "eigenvalue_max_error"}});
  return {std::abs(ratio - 1.0) <= 0.1 && eig <= 0.05 && s < 300.0,
          "mse_over_oracle=" + fmt(ratio) + " eig_max_err=" + fmt(eig) + " seconds=" + fmt(s)};
}

Verdict drop_sweep() {
  const auto cfg = load("acceptance-drop.json");
  const int trials = cfg.synth.lorenz.n_conditions * cfg.synth.trials_per_condition;
  if (cfg.synth.n_neurons != 30 || trials < 500 || cfg.synth.lorenz.downsample_factor != 1)
    throw Error("acceptance-drop.json does not match the required benchmark");
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_drop_sweep(cfg, quiet(), thread_count());
  const double s = seconds_since(t0);
  require_ok(r);
  const double r0 = r.results.lookup({{"fraction", "0"}, {"metric", "r2_mean"}});
  const double r6 = r.results.lookup({{"fraction", "0.6"}, {"metric", "r2_mean"}});
  return {r6 >= 0.9 * r0 && r0 >= 0.7 && s < 1800.0,
          "r2_0=" + fmt(r0) + " r2_0.6=" + fmt(r6) + " ratio=" + fmt(r6 / r0) + " trials=" + std::to_string(trials) +
              " seconds=" + fmt(s)};
}

Verdict superres() {
  const auto cfg = load("acceptance-superres.json");
  const auto& sp = cfg.sampling.speeds;
  if (sp.size() < 2) throw Error("acceptance-superres.json needs at least two speeds");
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_superres(cfg, quiet(), thread_count());
  const double s = seconds_since(t0);
  require_ok(r);
  const std::string fast = std::to_string(*std::max_element(sp.begin(), sp.end()));
  const std::string slow = std::to_string(*std::min_element(sp.begin(), sp.end()));
  auto arm = [&](const std::string& speed, const std::string& a) {
    return r.results.lookup({{"speed", speed}, {"arm", a}, {"metric", "r2_mean"}});
  };
  const double peak = r.results.lookup({{"speed", fast}, {"arm", "sbtt"}, {"metric", "r2_mean"}}, "peak_hz");
  const double fs = arm(fast, "sbtt"), ff = arm(fast, "frame"), fm = arm(fast, "smooth");
  const double ss = arm(slow, "sbtt"), sf = arm(slow, "frame"), sm = arm(slow, "smooth");
  const double spread = std::max({ss, sf, sm}) - std::min({ss, sf, sm});
  const bool fast_ok = peak >= 12.0 && fs >= ff + 0.1 && fs > fm;
  return {fast_ok && spread <= 0.1 && s < 2700.0,
          "fast_peak_hz=" + fmt(peak) + " fast_sbtt=" + fmt(fs) + " fast_frame=" + fmt(ff) + " fast_smooth=" +
              fmt(fm) + " slow_sbtt=" + fmt(ss) + " slow_frame=" + fmt(sf) + " slow_smooth=" + fmt(sm) +
              " slow_spread=" + fmt(spread) + " seconds=" + fmt(s)};
}

Verdict retraining() {
  const auto cfg = load("acceptance-retrain.json");
  const auto& fr = cfg.sampling.fractions;
  const double top = *std::max_element(fr.begin(), fr.end());
  if (top < 0.8 || std::find(fr.begin(), fr.end(), 0.0) == fr.end())
    throw Error("acceptance-retrain.json needs fraction 0 and a fraction of at least 0.8");
  const auto r = run_retraining(cfg, quiet(), thread_count());
  require_ok(r);
  const std::string hi = format_number(top);
  auto arm = [&](const std::string& f, const std::string& a) {
    return r.results.lookup({{"fraction", f}, {"arm", a}, {"metric", "r2_mean"}});
  };
  const double re = arm(hi, "retrained_sparse"), ts = arm(hi, "trained_sparse"),
               fr_ = arm(hi, "trained_full_run_sparse");
  const double z0 = arm("0", "retrained_sparse"), z1 = arm("0", "trained_sparse"),
               z2 = arm("0", "trained_full_run_sparse");
  const double spread = std::max({z0, z1, z2}) - std::min({z0, z1, z2});
  return {re >= ts && ts >= fr_ && re >= fr_ && spread <= 0.02,
          "fraction=" + hi + " retrained=" + fmt(re) + " trained_sparse=" + fmt(ts) + " full_run_sparse=" + fmt(fr_) +
              " zero_spread=" + fmt(spread)};
}

Verdict metric_identities() {
  std::vector<std::string> failed;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };
  Rng r(17);
  Eigen::MatrixXd y(60, 3);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = r.normal();
  check(r2(y, y).mean == 1.0, "r2_self");
  Eigen::MatrixXd ybar = y;
  for (Eigen::Index d = 0; d < 3; ++d) ybar.col(d).setConstant(y.col(d).mean());
  check(std::abs(r2(y, ybar).mean) < 1e-12, "r2_mean");

  Eigen::VectorXd cnt(300), mu(300);
  for (Eigen::Index i = 0; i < 300; ++i) {
    mu(i) = std::exp(r.normal(0.0, 0.6));
    cnt(i) = static_cast<double>(r.poisson(mu(i)));
  }
  const double nr = cnt.mean();
  check(std::abs(pseudo_r2(cnt, cnt.cwiseMax(1e-300), nr) - 1.0) < 1e-12, "pr2_saturated");
  check(std::abs(pseudo_r2(cnt, Eigen::VectorXd::Constant(300, nr), nr)) < 1e-12, "pr2_null");
  auto loglik = [&](const Eigen::VectorXd& m) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < cnt.size(); ++i) {
      const double k = cnt(i);
      double fact = 1.0;
      for (int j = 2; j <= static_cast<int>(k); ++j) fact *= j;
      s += std::log(std::pow(m(i), k) * std::exp(-m(i)) / fact);
    }
    return s;
  };
  double ls = 0.0;
  for (Eigen::Index i = 0; i < cnt.size(); ++i)
    if (cnt(i) > 0) {
      double fact = 1.0;
      for (int j = 2; j <= static_cast<int>(cnt(i)); ++j) fact *= j;
      ls += std::log(std::pow(cnt(i), cnt(i)) * std::exp(-cnt(i)) / fact);
    }
  const double lm = loglik(mu), ln = loglik(Eigen::VectorXd::Constant(300, nr));
  check(std::abs(pseudo_r2(cnt, mu, nr) - (1.0 - (ls - lm) / (ls - ln))) < 1e-10, "pr2_oracle");

  std::vector<std::vector<double>> xs(6, std::vector<double>(90));
  for (auto& x : xs)
    for (auto& v : x) v = r.normal();
  double coh_err = 0.0;
  for (double v : coherence_multi(xs, xs).values) coh_err = std::max(coh_err, std::abs(v - 1.0));
  check(coh_err < 1e-9, "self_coherence");

  const ZigParams zp{0.35, 1.7, 0.6, 0.1};
  Rng zr(123);
  double zs = 0.0;
  const int nz = 1000000;
  for (int i = 0; i < nz; ++i) zs += zig_sample(zp, zr);
  check(std::abs(zs / nz - zig_mean(zp)) <= 0.01 * zig_mean(zp), "zig_mean_mc");

  check(std::abs(poisson_nll(1.0, 0.0) - 1.0) < 1e-12, "poisson_nll(1,0)");
  check(std::abs(poisson_nll(2.0, 2.0) - (2.0 - std::log(2.0))) < 1e-12, "poisson_nll(2,2)");
  check(std::abs(zig_nll({0.5, 1.0, 1.0, 0.0}, 0.0) - std::log(2.0)) < 1e-12, "zig_nll(y=0)");
  check(std::abs(zig_nll({0.5, 1.0, 1.0, 0.0}, 1.0) - 1.6931) < 1e-4, "zig_nll(y=1)");

  std::string detail = "checks=11 coherence_max_err=" + fmt(coh_err) + " zig_mc_rel=" +
                       fmt(std::abs(zs / nz - zig_mean(zp)) / zig_mean(zp));
  for (const auto& f : failed) detail += " failed:" + f;
  return {failed.empty(), detail};
}

// Small versions of every experiment, each run twice into fresh roots with
// different thread counts; every metrics CSV must match byte for byte.
Verdict determinism() {
  const nlohmann::json small_seqae = {{"dims", {{"encoder", 8}, {"ic", 4}, {"generator", 12}, {"factors", 4}}},
                                      {"epochs", 3},
                                      {"ramp_epochs", 2},
                                      {"batch_size", 8}};
  const nlohmann::json small_synth = {{"lorenz", {{"n_conditions", 4}}}, {"n_neurons", 24}, {"trials_per_condition", 4}};
  const std::vector<std::pair<std::string, nlohmann::json>> runs{
      {"acceptance-lds.json", {{"lds", {{"trials", 10}, {"time", 60}, {"epochs", 60}, {"horizons", {20}}}}}},
      {"acceptance-drop.json", {{"synth", small_synth}, {"seqae", small_seqae}, {"sampling", {{"fractions", {0, 0.5}}}}}},
      {"acceptance-retrain.json",
       {{"synth", small_synth}, {"seqae", small_seqae}, {"sampling", {{"fractions", {0, 0.8}}}}, {"retrain", {{"epochs", 2}}}}},
      {"acceptance-superres.json",
       {{"synth", {{"lorenz", {{"n_conditions", 4}}}, {"n_neurons", 30}, {"trials_per_condition", 3}}},
        {"seqae", small_seqae},
        {"sampling", {{"speeds", {2, 4}}}}}}};
  std::size_t files = 0;
  std::vector<std::string> differ;
  for (const auto& [name, patch] : runs) {
    std::map<std::string, std::string> csv[2];
    std::string experiment;
    for (int threads : {1, 2}) {
      const auto cfg = load(name, patch, kRunRoot / ("determinism-" + std::to_string(threads)));
      experiment = cfg.experiment;
      ExperimentResult r;
      if (name == "acceptance-lds.json") r = run_lds(cfg, quiet());
      else if (name == "acceptance-drop.json") r = run_drop_sweep(cfg, quiet(), threads);
      else if (name == "acceptance-retrain.json") r = run_retraining(cfg, quiet(), threads);
      else r = run_superres(cfg, quiet(), threads);
      require_ok(r);
      for (const auto& e : fs::recursive_directory_iterator(r.dir))
        if (e.path().extension() == ".csv" && e.path().filename() != "timing.csv")
          csv[threads - 1][fs::relative(e.path(), r.dir).string()] = detail::read_file(e.path());
    }
    files += csv[0].size();
    for (const auto& [rel, text] : csv[0]) {
      const auto it = csv[1].find(rel);
      if (it == csv[1].end() || it->second != text) differ.push_back(experiment + "/" + rel);
    }
    if (csv[0].size() != csv[1].size()) differ.push_back(experiment + "/<file set>");
  }
  std::string detail = "experiments=4 csv_files=" + std::to_string(files) + " threads=1,2";
  for (const auto& d : differ) detail += " differs:" + d;
  return {differ.empty() && files > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"lds-gradient-fd", lds_gradient},
      {"seqae-gradient-fd", seqae_gradient},
      {"masked-unmasked-equivalence", equivalence},
      {"mask-independence", mask_independence},
      {"lds-identification", lds_identification},
      {"drop-sweep-trend", drop_sweep},
      {"superres-trend", superres},
      {"retraining-ordering", retraining},
      {"metric-identities", metric_identities},
      {"determinism", determinism}};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    if (!v.pass) ++failures;
    std::cout << (v.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[k].first << " " << v.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
