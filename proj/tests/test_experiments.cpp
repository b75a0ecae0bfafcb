#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "sbtt/experiments.hpp"
#include "temp_dir.hpp"

using namespace sbtt;
using sbtt::testing::TempDir;

namespace {

ExperimentConfig tiny_config(const std::filesystem::path& out) {
  auto c = parse_config_text(R"({"seed": 5, "experiment": "tiny"})");
  c.output = out.string();
  return c;
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    if (value)
      setenv(name, value, 1);
    else
      unsetenv(name);
  }
  ~ScopedEnv() {
    if (old_)
      setenv(name_, old_->c_str(), 1);
    else
      unsetenv(name_);
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

}  // namespace

TEST(Config, SeedIsRequired) {
  EXPECT_THROW(parse_config_text("{}"), ConfigError);
  EXPECT_NO_THROW(parse_config_text(R"({"seed": 0})"));
}

TEST(Config, UnknownKeysAreRejectedAtEveryLevel) {
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "bogus": 2})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "seqae": {"dims": {"width": 3}}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "synth": {"lorenz": {"speed": 3}}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "eval": {"coherence": {"win": 3}}})"), ConfigError);
}

TEST(Config, TypeAndRangeErrors) {
  EXPECT_THROW(parse_config_text(R"({"seed": "one"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "seqae": {"lr": "fast"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "seqae": {"dropout_rate": 1.0}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "sampling": {"fractions": [1.5]}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "sampling": {"speeds": [0]}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "lds": {"optimizer": "sgd"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "model": "rnn"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "retrain": {"epochs": -1}})"), ConfigError);
  EXPECT_THROW(parse_config_text("{seed: 1"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": 1, "seqae": {"emission": {"family": "gamma"}}})"), Error);
}

TEST(Config, CanonicalJsonRoundTrips) {
  const auto c = parse_config_text(R"({"seed": 9, "seqae": {"lr": 0.02, "dims": {"ic": 7}},
                                       "sampling": {"fractions": [0, 0.5]}, "retrain": {"epochs": 4}})");
  EXPECT_EQ(c.seqae.lr, 0.02);
  EXPECT_EQ(c.seqae.dims.ic, 7);
  EXPECT_EQ(c.seqae.seed, 9u);
  EXPECT_EQ(c.retrain.epochs, 4);
  const auto j = to_json(c);
  EXPECT_EQ(to_json(parse_config(j)), j);
}

TEST(Config, HashIsStableAndSensitive) {
  const auto a = to_json(parse_config_text(R"({"seed": 1})"));
  const auto b = to_json(parse_config_text(R"({"seed": 1, "seqae": {"lr": 0.001}})"));
  const auto c = to_json(parse_config_text(R"({"seed": 2})"));
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_NE(config_hash(a), config_hash(c));
  EXPECT_EQ(config_hash(a).size(), 16u);
  // FNV-1a 64 of the empty object dump "{}"
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : std::string("{}")) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  EXPECT_EQ(config_hash(nlohmann::json::object()), buf);
}

TEST(Config, ReferenceDocumentsEveryKeyAndIsCurrent) {
  const std::string md = config_reference_markdown();
  std::vector<std::pair<std::string, nlohmann::json>> keys;
  flatten_config(to_json(ExperimentConfig{}), "", keys);
  for (const auto& [k, v] : keys) EXPECT_NE(md.find("| `" + k + "` |"), std::string::npos) << k;
  EXPECT_EQ(detail::read_file(std::filesystem::path(SBTT_SOURCE_DIR) / "docs" / "config-reference.md"), md)
      << "regenerate with: sbtt-lab config-reference > docs/config-reference.md";
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& e : std::filesystem::directory_iterator(std::filesystem::path(SBTT_SOURCE_DIR) / "configs"))
    EXPECT_NO_THROW(parse_config_text(detail::read_file(e.path()))) << e.path();
}

TEST(Csv, QuotingAndParseRoundTrip) {
  CsvTable t({"a", "b", "c"});
  t.add("x", 1.5, 3);
  t.add("has,comma", "quote\"d", std::numeric_limits<double>::quiet_NaN());
  t.add("line\nbreak", -std::numeric_limits<double>::infinity(), std::size_t{7});
  const std::string s = t.str();
  EXPECT_EQ(s.substr(0, 14), "a,b,c\r\nx,1.5,3");
  EXPECT_NE(s.find("\"has,comma\",\"quote\"\"d\",nan\r\n"), std::string::npos);
  const auto back = CsvTable::parse(s);
  EXPECT_EQ(back.header(), t.header());
  EXPECT_EQ(back.rows(), t.rows());
  EXPECT_THROW(t.add("too", "few"), Error);
  EXPECT_THROW(CsvTable::parse(""), Error);
}

TEST(Csv, LookupAndAppend) {
  CsvTable t({"arm", "metric", "value"});
  t.add("a", "r2", 0.5);
  t.add("b", "r2", 0.25);
  EXPECT_EQ(t.lookup({{"arm", "b"}, {"metric", "r2"}}), 0.25);
  EXPECT_THROW(t.lookup({{"metric", "r2"}}), Error);
  EXPECT_THROW(t.lookup({{"arm", "c"}}), Error);
  EXPECT_THROW(t.column("nope"), Error);
  CsvTable u({"arm", "metric", "value"});
  u.add("c", "r2", 1);
  t.append(u);
  EXPECT_EQ(t.size(), 3u);
  EXPECT_THROW(t.append(CsvTable({"x"})), Error);
}

TEST(Csv, NumberFormatting) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(1.0 / 3.0), "0.3333333333");
  EXPECT_EQ(format_number(1e-12), "1e-12");
  EXPECT_EQ(format_number(std::numeric_limits<double>::infinity()), "inf");
}

TEST(Threads, EnvironmentVariable) {
  {
    ScopedEnv e("SBTT_THREADS", nullptr);
    EXPECT_EQ(thread_count(), 1);
  }
  {
    ScopedEnv e("SBTT_THREADS", "3");
    EXPECT_EQ(thread_count(), 3);
  }
  for (const char* bad : {"0", "-2", "two", "4x", "5000"}) {
    ScopedEnv e("SBTT_THREADS", bad);
    EXPECT_THROW(thread_count(), ConfigError) << bad;
  }
}

TEST(Cells, WritesManifestsAndResumes) {
  TempDir dir;
  const auto cfg = tiny_config(dir.path());
  const auto root = experiment_root(cfg);
  int calls = 0;
  std::vector<CellSpec> cells;
  for (int k = 0; k < 3; ++k)
    cells.push_back({"cell-" + std::to_string(k), {{"k", k}}, [&calls, k](const std::filesystem::path& d) {
                       ++calls;
                       detail::write_file(d / "ckpt" / "w", "weights");
                       CsvTable t({"k", "metric", "value"});
                       t.add(k, "square", k * k);
                       return t;
                     }});
  const auto first = run_cells(cfg, root, cells, Logger{}, 1);
  EXPECT_EQ(calls, 3);
  const auto res = finish_experiment(cfg, root, {"k", "metric", "value"}, first);
  EXPECT_TRUE(res.ok());
  EXPECT_EQ(res.results.lookup({{"k", "2"}}), 4.0);
  const auto m = nlohmann::json::parse(detail::read_file(root / "cell-1" / "manifest.json"));
  EXPECT_EQ(m["status"], "complete");
  EXPECT_EQ(m["seed"], 5);
  EXPECT_EQ(m["version"], kVersion);
  EXPECT_EQ(m["params"]["k"], 1);
  EXPECT_TRUE(m.contains("config_hash"));
  EXPECT_TRUE(std::filesystem::exists(root / "cell-1" / "metrics.csv"));
  EXPECT_TRUE(std::filesystem::exists(root / "cell-1" / "ckpt" / "w"));
  EXPECT_TRUE(std::filesystem::exists(root / "timing.csv"));
  const std::string results = detail::read_file(root / "results.csv");

  std::filesystem::remove(root / "cell-2" / "metrics.csv");
  const auto second = run_cells(cfg, root, cells, Logger{}, 1);
  EXPECT_EQ(calls, 4);
  EXPECT_TRUE(second[0].reused);
  EXPECT_FALSE(second[2].reused);
  finish_experiment(cfg, root, {"k", "metric", "value"}, second);
  EXPECT_EQ(detail::read_file(root / "results.csv"), results);

  auto changed = cfg;
  changed.seqae.lr = 0.123;
  run_cells(changed, root, cells, Logger{}, 1);
  EXPECT_EQ(calls, 7);
}

TEST(Cells, FailuresAreRecordedAndOthersContinue) {
  TempDir dir;
  const auto cfg = tiny_config(dir.path());
  const auto root = experiment_root(cfg);
  std::vector<CellSpec> cells{
      {"bad", {}, [](const std::filesystem::path&) -> CsvTable { throw Error("boom"); }},
      {"good", {}, [](const std::filesystem::path&) {
         CsvTable t({"metric", "value"});
         t.add("x", 1);
         return t;
       }}};
  const auto out = run_cells(cfg, root, cells, Logger{}, 2);
  EXPECT_TRUE(out[0].failed);
  EXPECT_EQ(out[0].error, "boom");
  EXPECT_FALSE(out[1].failed);
  const auto res = finish_experiment(cfg, root, {"metric", "value"}, out);
  EXPECT_FALSE(res.ok());
  const auto m = nlohmann::json::parse(detail::read_file(root / "bad" / "manifest.json"));
  EXPECT_EQ(m["status"], "failed");
  EXPECT_EQ(m["error"], "boom");
  EXPECT_FALSE(cell_complete(root / "bad", m["config_hash"]));
}

TEST(Cells, ResultsIndependentOfThreadCount) {
  TempDir dir;
  std::vector<std::string> texts;
  for (int threads : {1, 3}) {
    auto cfg = tiny_config(dir / std::to_string(threads));
    const auto root = experiment_root(cfg);
    std::vector<CellSpec> cells;
    for (int k = 0; k < 6; ++k)
      cells.push_back({"c" + std::to_string(k), {{"k", k}}, [k](const std::filesystem::path&) {
                         Rng r = Rng(11).derive(static_cast<std::uint64_t>(k));
                         CsvTable t({"k", "value"});
                         t.add(k, r.normal());
                         return t;
                       }});
    finish_experiment(cfg, root, {"k", "value"}, run_cells(cfg, root, cells, Logger{}, threads));
    texts.push_back(detail::read_file(root / "results.csv"));
  }
  EXPECT_EQ(texts[0], texts[1]);
}

TEST(Datasets, SpikeDatasetShapesAndDeterminism) {
  auto cfg = parse_config_text(R"({"seed": 3, "synth": {"lorenz": {"n_conditions": 2}, "n_neurons": 6,
                                   "heldout_neurons": 2, "trials_per_condition": 3}})");
  const auto a = make_spike_dataset(cfg, 0), b = make_spike_dataset(cfg, 0), c = make_spike_dataset(cfg, 1);
  EXPECT_EQ(a.spikes.dims(), (std::array<std::size_t, 3>{6, 90, 4}));
  EXPECT_EQ(a.heldout.dim(2), 2u);
  EXPECT_EQ(a.latents.dims(), (std::array<std::size_t, 3>{6, 90, 3}));
  EXPECT_EQ(a.labels, (std::vector<int>{0, 0, 0, 1, 1, 1}));
  EXPECT_EQ(a.spikes, b.spikes);
  EXPECT_NE(a.spikes, c.spikes);
  EXPECT_EQ(a.rates(0, 5, 1), a.rates(2, 5, 1));
}

TEST(Datasets, CalciumDatasetViews) {
  auto cfg = parse_config_text(R"({"seed": 4, "synth": {"lorenz": {"n_conditions": 2}, "n_neurons": 9,
                                   "trials_per_condition": 2}})");
  const auto d = make_calcium_dataset(cfg, 0);
  EXPECT_EQ(d.staggered.values.dims(), (std::array<std::size_t, 3>{4, 90, 9}));
  EXPECT_EQ(d.frames.values.dims(), (std::array<std::size_t, 3>{4, 30, 9}));
  EXPECT_NO_THROW(validate(d.staggered));
  for (std::size_t n = 0; n < 9; ++n)
    for (std::size_t j = 0; j < 30; ++j)
      EXPECT_EQ(d.staggered.values(1, 3 * j + static_cast<std::size_t>(d.phase[n]), n), d.frames.values(1, j, n));
  EXPECT_TRUE(std::isfinite(d.deconv_r));
  cfg.synth.lorenz.trial_ms = 910;
  EXPECT_THROW(make_calcium_dataset(cfg, 0), ConfigError);
}

TEST(LdsExperiment, ProblemAndOracle) {
  auto cfg = parse_config_text(R"({"seed": 2, "model": "lds", "lds": {"trials": 4, "heldout_trials": 3, "time": 20}})");
  const auto p = make_lds_problem(cfg);
  EXPECT_EQ(p.train.size(), 4u);
  EXPECT_EQ(p.test.size(), 3u);
  EXPECT_NEAR(spectral_radius(p.truth.A), 0.99, 1e-12);
  std::size_t obs = 0;
  for (const auto& s : p.train) obs += static_cast<std::size_t>(s.mask.count());
  EXPECT_EQ(obs, 4u * 20u * 5u);
  const auto t = truncate(p.train, 7);
  EXPECT_EQ(t[0].y.rows(), 7);
  EXPECT_EQ(t[0].y, p.train[0].y.topRows(7));
}

TEST(LdsExperiment, MatrixFileRoundTrip) {
  TempDir dir;
  Eigen::MatrixXd m(2, 3);
  m << 1, 2, 3, 4, 5, 6.5;
  save_matrix(dir / "m", m, "A");
  EXPECT_EQ(load_matrix(dir / "m"), m);
}
