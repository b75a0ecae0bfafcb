#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <limits>

#include "sbtt/tensor_file.hpp"
#include "temp_dir.hpp"

using namespace sbtt;
using sbtt::testing::TempDir;

namespace {

Tensor3 ramp_tensor(std::size_t a, std::size_t b, std::size_t c) {
  Tensor3 t(a, b, c);
  for (std::size_t i = 0; i < t.size(); ++i) t.storage()[i] = 0.25 * static_cast<double>(i) - 3.0;
  return t;
}

std::string bytes_of(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(TensorIo, F64RoundTripIsBitExact) {
  TempDir dir;
  Tensor3 t = ramp_tensor(2, 3, 4);
  t(0, 0, 0) = std::numeric_limits<double>::denorm_min();
  t(1, 2, 3) = -0.1;
  t(1, 1, 1) = std::numeric_limits<double>::infinity();
  save_tensor3(dir / "x", t, "values");
  EXPECT_EQ(load_tensor3(dir / "x"), t);
  const auto m = read_manifest(dir / "x");
  EXPECT_EQ(m.dims, (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(m.dtype, DType::f64);
  EXPECT_EQ(m.role, "values");
  EXPECT_EQ(std::filesystem::file_size(payload_path(dir / "x")), 2u * 3u * 4u * 8u);
}

TEST(TensorIo, F32RoundTripMatchesFloatCast) {
  TempDir dir;
  Tensor3 t = ramp_tensor(1, 2, 5);
  t(0, 1, 4) = 0.1;
  save_tensor3(dir / "x", t, "values", DType::f32);
  const Tensor3 back = load_tensor3(dir / "x");
  for (std::size_t i = 0; i < t.size(); ++i)
    EXPECT_EQ(back.storage()[i], static_cast<double>(static_cast<float>(t.storage()[i])));
  EXPECT_EQ(std::filesystem::file_size(payload_path(dir / "x")), 10u * 4u);
}

TEST(TensorIo, U8RoundTrip) {
  TempDir dir;
  std::vector<std::uint8_t> v{0, 1, 255, 7, 0, 1};
  write_tensor(dir / "m", TensorManifest{{2, 3}, DType::u8, "row-major", "mask"}, std::span<const std::uint8_t>(v));
  const auto td = read_tensor(dir / "m");
  ASSERT_EQ(td.values.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(td.values[i], static_cast<double>(v[i]));
  EXPECT_EQ(bytes_of(payload_path(dir / "m")), std::string(reinterpret_cast<const char*>(v.data()), v.size()));
}

TEST(TensorIo, PayloadIsLittleEndianRowMajor) {
  TempDir dir;
  Tensor3 t(1, 1, 2);
  t(0, 0, 0) = 1.0;   // 0x3FF0000000000000
  t(0, 0, 1) = -2.0;  // 0xC000000000000000
  save_tensor3(dir / "x", t, "values");
  const std::string b = bytes_of(payload_path(dir / "x"));
  ASSERT_EQ(b.size(), 16u);
  const unsigned char expect[16] = {0, 0, 0, 0, 0, 0, 0xF0, 0x3F, 0, 0, 0, 0, 0, 0, 0, 0xC0};
  EXPECT_EQ(std::memcmp(b.data(), expect, 16), 0);

  save_tensor3(dir / "f", t, "values", DType::f32);
  const std::string f = bytes_of(payload_path(dir / "f"));
  const unsigned char expect_f[8] = {0, 0, 0x80, 0x3F, 0, 0, 0, 0xC0};
  ASSERT_EQ(f.size(), 8u);
  EXPECT_EQ(std::memcmp(f.data(), expect_f, 8), 0);
}

TEST(TensorIo, RankTwoLoadsAsSingleTrial) {
  TempDir dir;
  std::vector<double> v{1, 2, 3, 4, 5, 6};
  write_tensor(dir / "x", TensorManifest{{3, 2}, DType::f64, "row-major", "values"}, std::span<const double>(v));
  const Tensor3 t = load_tensor3(dir / "x");
  EXPECT_EQ(t.dims(), (std::array<std::size_t, 3>{1, 3, 2}));
  EXPECT_EQ(t(0, 2, 1), 6.0);
}

TEST(TensorIo, BatchRoundTripSharedAndPerChannelClocks) {
  TempDir dir;
  TimeSeriesBatch b = make_dense_batch(ramp_tensor(2, 4, 3), 0.02);
  b.mask(0, 1, 2) = 0;
  b.mask(1, 3, 0) = 0;
  canonicalize(b);
  b.channel_names = {"a", "b", "c"};
  save_batch(b, dir / "batch");
  EXPECT_EQ(load_batch(dir / "batch"), b);
  EXPECT_EQ(read_manifest(dir / "batch.mask").dtype, DType::u8);

  b.per_channel_times = true;
  b.sample_times.clear();
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 3; ++c) b.sample_times.push_back(0.02 * static_cast<double>(t) + 0.001 * static_cast<double>(c));
  save_batch(b, dir / "pc");
  EXPECT_EQ(load_batch(dir / "pc"), b);
}

TEST(TensorIo, RejectsCorruptFiles) {
  TempDir dir;
  save_tensor3(dir / "x", ramp_tensor(1, 2, 2), "values");
  {
    std::ofstream out(payload_path(dir / "x"), std::ios::binary | std::ios::app);
    out << 'z';
  }
  EXPECT_THROW(load_tensor3(dir / "x"), Error);
  EXPECT_THROW(load_tensor3(dir / "missing"), Error);

  save_tensor3(dir / "y", ramp_tensor(1, 2, 2), "values");
  detail::write_file(manifest_path(dir / "y"), R"({"dims":[1,2,2],"dtype":"f16"})");
  EXPECT_THROW(load_tensor3(dir / "y"), Error);
  detail::write_file(manifest_path(dir / "y"), R"({"dims":[1,2,2],"dtype":"f64","order":"col-major"})");
  EXPECT_THROW(load_tensor3(dir / "y"), Error);
  detail::write_file(manifest_path(dir / "y"), "{not json");
  EXPECT_THROW(load_tensor3(dir / "y"), Error);

  std::vector<double> v(8, 0.0);
  write_tensor(dir / "r4", TensorManifest{{1, 2, 2, 2}, DType::f64, "row-major", ""}, std::span<const double>(v));
  EXPECT_THROW(load_tensor3(dir / "r4"), Error);
  EXPECT_THROW(write_tensor(dir / "bad", TensorManifest{{3}, DType::f64, "row-major", ""}, std::span<const double>(v)),
               Error);
}

TEST(TensorIo, BatchValidation) {
  TimeSeriesBatch b = make_dense_batch(ramp_tensor(1, 3, 2), 0.01);
  EXPECT_NO_THROW(validate(b));
  b.mask(0, 0, 1) = 0;
  EXPECT_THROW(validate(b), Error);
  canonicalize(b);
  EXPECT_NO_THROW(validate(b));
  EXPECT_EQ(b.values(0, 0, 1), 0.0);
  b.sample_times[2] = b.sample_times[1];
  EXPECT_THROW(validate(b), Error);
  b.sample_times.pop_back();
  EXPECT_THROW(validate(b), Error);
  TempDir dir;
  EXPECT_THROW(save_batch(b, dir / "b"), Error);
}

TEST(TensorIo, SelectTrialsKeepsOrder) {
  const TimeSeriesBatch b = make_dense_batch(ramp_tensor(4, 2, 2), 0.01);
  const std::vector<std::size_t> idx{3, 1};
  const auto s = select_trials(b, idx);
  EXPECT_EQ(s.trials(), 2u);
  EXPECT_EQ(s.values(0, 1, 1), b.values(3, 1, 1));
  EXPECT_EQ(s.values(1, 0, 0), b.values(1, 0, 0));
  const std::vector<std::size_t> bad{4};
  EXPECT_THROW(select_trials(b, bad), Error);
}
