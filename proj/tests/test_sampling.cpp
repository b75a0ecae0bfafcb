#include <gtest/gtest.h>

#include <map>
#include <set>

#include "sbtt/sampling.hpp"

using namespace sbtt;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43), d(42, 1);
  bool differs_seed = false, differs_stream = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs_seed |= x != c.next();
    differs_stream |= x != d.next();
  }
  EXPECT_TRUE(differs_seed);
  EXPECT_TRUE(differs_stream);
}

TEST(Rng, DeriveDoesNotAdvanceParent) {
  Rng a(7), b(7);
  const Rng child = a.derive(3);
  EXPECT_EQ(a.next(), b.next());
  Rng c1 = child, c2 = Rng(7).derive(3), c3 = Rng(7).derive(4);
  const auto v = c1.next();
  EXPECT_EQ(v, c2.next());
  EXPECT_NE(v, c3.next());
}

TEST(Rng, DistributionMoments) {
  Rng r(1);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0, sg = 0, sp = 0, se = 0;
  for (int i = 0; i < n; ++i) {
    su += r.uniform();
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
    sg += r.gamma(2.5, 0.4);
    sp += static_cast<double>(r.poisson(3.0));
    se += r.exponential(2.0);
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.01);
  EXPECT_NEAR(sg / n, 1.0, 0.01);
  EXPECT_NEAR(sp / n, 3.0, 0.02);
  EXPECT_NEAR(se / n, 2.0, 0.02);
  double sbig = 0;
  for (int i = 0; i < 50000; ++i) sbig += static_cast<double>(r.poisson(40.0));
  EXPECT_NEAR(sbig / 50000, 40.0, 0.15);
}

TEST(Rng, BelowIsUniformAndInRange) {
  Rng r(2);
  std::map<std::uint64_t, int> counts;
  for (int i = 0; i < 70000; ++i) {
    const auto v = r.below(7);
    ASSERT_LT(v, 7u);
    ++counts[v];
  }
  for (const auto& [k, c] : counts) EXPECT_NEAR(c, 10000, 400) << k;
}

TEST(Sampling, DropCountRoundsHalfToEven) {
  EXPECT_EQ(drop_count(0.5, 5), 2u);
  EXPECT_EQ(drop_count(0.5, 7), 4u);
  EXPECT_EQ(drop_count(0.3, 10), 3u);
  EXPECT_EQ(drop_count(1.0, 9), 9u);
  EXPECT_EQ(drop_count(0.0, 9), 0u);
}

TEST(Sampling, RandomDropHasExactCountPerStep) {
  for (double f : {0.0, 0.1, 0.35, 0.6, 0.9, 1.0}) {
    const Mask3 m = random_drop_mask(5, 40, 17, f, Rng(3));
    const std::size_t expect_obs = 17 - drop_count(f, 17);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t t = 0; t < 40; ++t) {
        std::size_t obs = 0;
        for (std::size_t c = 0; c < 17; ++c) obs += m(i, t, c);
        ASSERT_EQ(obs, expect_obs) << f;
      }
  }
}

TEST(Sampling, RandomDropIsUniformOverChannels) {
  const Mask3 m = random_drop_mask(20, 500, 10, 0.4, Rng(4));
  std::vector<double> freq(10, 0.0);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t t = 0; t < 500; ++t)
      for (std::size_t c = 0; c < 10; ++c) freq[c] += m(i, t, c);
  for (double f : freq) EXPECT_NEAR(f / 10000.0, 0.6, 0.02);
}

TEST(Sampling, RandomDropTrialsAreIndependentOfCount) {
  const Mask3 a = random_drop_mask(3, 10, 6, 0.5, Rng(5));
  const Mask3 b = random_drop_mask(8, 10, 6, 0.5, Rng(5));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t t = 0; t < 10; ++t)
      for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(a(i, t, c), b(i, t, c));
  EXPECT_THROW(random_drop_mask(1, 1, 1, 1.5, Rng(5)), Error);
}

TEST(Sampling, ApplyMaskIntersectsAndZeroFills) {
  TimeSeriesBatch b = make_dense_batch(Tensor3(1, 2, 2, 3.0), 0.01);
  b.mask(0, 0, 0) = 0;
  canonicalize(b);
  Mask3 extra(1, 2, 2, 1);
  extra(0, 1, 1) = 0;
  const auto out = apply_mask(b, extra);
  EXPECT_EQ(out.mask(0, 0, 0), 0);
  EXPECT_EQ(out.mask(0, 1, 1), 0);
  EXPECT_EQ(out.mask(0, 0, 1), 1);
  EXPECT_EQ(out.values(0, 1, 1), 0.0);
  EXPECT_EQ(out.values(0, 0, 1), 3.0);
  EXPECT_THROW(apply_mask(b, Mask3(1, 2, 3, 1)), Error);
}

TEST(Sampling, RasterMaskObservesEachChannelOncePerFrame) {
  const std::vector<int> phases{0, 2, 1, 2};
  const auto r = raster_mask(4, 9, phases, 3, 0.01);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t f = 0; f < 3; ++f) {
      int hits = 0;
      for (std::size_t t = 3 * f; t < 3 * f + 3; ++t) hits += r.observed(t, c);
      EXPECT_EQ(hits, 1);
    }
    for (std::size_t t = 0; t < 9; ++t)
      EXPECT_EQ(r.observed(t, c), static_cast<int>(t % 3) == phases[c]);
  }
  EXPECT_DOUBLE_EQ(r.sample_times[8], 0.08);
  EXPECT_THROW(raster_mask(4, 10, phases, 3), Error);
  EXPECT_THROW(raster_mask(3, 9, phases, 3), Error);
  EXPECT_THROW(raster_mask(4, 9, {0, 3, 1, 2}, 3), Error);
  EXPECT_THROW(raster_mask(4, 9, phases, 0), Error);
}

TEST(Sampling, RandomPhasesCoverRange) {
  Rng r(6);
  const auto p = random_phase_assignment(3000, 5, r);
  std::vector<int> counts(5, 0);
  for (int v : p) {
    ASSERT_GE(v, 0);
    ASSERT_LT(v, 5);
    ++counts[v];
  }
  for (int c : counts) EXPECT_NEAR(c, 600, 90);
}

TEST(Sampling, CoordinatedDropoutIsAPartition) {
  Mask3 obs = random_drop_mask(4, 30, 8, 0.3, Rng(7));
  Rng r(8);
  const auto cd = coordinated_dropout_split(obs, 0.25, r);
  std::size_t n_obs = 0, n_loss = 0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto o = obs.storage()[i], a = cd.input.storage()[i], b = cd.loss.storage()[i];
    EXPECT_EQ(a + b, o);
    n_obs += o;
    n_loss += b;
  }
  EXPECT_NEAR(static_cast<double>(n_loss) / static_cast<double>(n_obs), 0.25, 0.04);
  Rng r0(9);
  const auto none = coordinated_dropout_split(obs, 0.0, r0);
  EXPECT_EQ(none.input, obs);
  EXPECT_THROW(coordinated_dropout_split(obs, 1.0, r0), Error);
}

TEST(Sampling, ScheduleValidation) {
  EXPECT_EQ(parse_schedule_kind("raster_phase"), ScheduleKind::raster_phase);
  EXPECT_THROW(parse_schedule_kind("other"), Error);
  SamplingSchedule s;
  s.drop_fraction = 1.2;
  EXPECT_THROW(s.validate(), Error);
  s.drop_fraction = 0.2;
  s.phases = {0.0, 0.03};
  EXPECT_THROW(s.validate(), Error);
  s.phases = {0.0, 0.029};
  EXPECT_NO_THROW(s.validate());
}
