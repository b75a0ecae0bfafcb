#pragma once

// Dense row-major rank-3 arrays and the TimeSeriesBatch data carrier.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbtt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
class Array3 {
 public:
  Array3() = default;
  Array3(std::size_t n0, std::size_t n1, std::size_t n2, T fill = T{})
      : dims_{n0, n1, n2}, data_(n0 * n1 * n2, fill) {}

  std::size_t dim(std::size_t i) const { return dims_[i]; }
  const std::array<std::size_t, 3>& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[index(i, j, k)]; }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[index(i, j, k)];
  }

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return (i * dims_[1] + j) * dims_[2] + k;
  }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  // Row (i, j, :).
  std::span<T> row(std::size_t i, std::size_t j) {
    return std::span<T>(data_).subspan(index(i, j, 0), dims_[2]);
  }
  std::span<const T> row(std::size_t i, std::size_t j) const {
    return std::span<const T>(data_).subspan(index(i, j, 0), dims_[2]);
  }

  bool same_shape(const auto& other) const { return dims_ == other.dims(); }

  friend bool operator==(const Array3&, const Array3&) = default;

 private:
  std::array<std::size_t, 3> dims_{0, 0, 0};
  std::vector<T> data_;
};

using Tensor3 = Array3<double>;
using Mask3 = Array3<std::uint8_t>;

// values/mask are [trials, time, channels]. sample_times is either [time]
// (shared clock) or [time * channels] row-major (per-channel clock).
struct TimeSeriesBatch {
  Tensor3 values;
  Mask3 mask;
  std::vector<double> sample_times;
  bool per_channel_times = false;
  double bin_width = 0.01;
  std::vector<std::string> channel_names;

  std::size_t trials() const { return values.dim(0); }
  std::size_t time() const { return values.dim(1); }
  std::size_t channels() const { return values.dim(2); }

  std::size_t observed_count() const {
    return static_cast<std::size_t>(std::count(mask.flat().begin(), mask.flat().end(), 1));
  }

  friend bool operator==(const TimeSeriesBatch&, const TimeSeriesBatch&) = default;
};

inline std::vector<double> uniform_times(std::size_t n, double bin_width) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i) * bin_width;
  return t;
}

// Throws if any invariant of the batch is violated. Masked entries holding a
// nonzero value count as a violation; use canonicalize() to repair instead.
inline void validate(const TimeSeriesBatch& b) {
  if (!b.values.same_shape(b.mask)) throw Error("values and mask shapes differ");
  const std::size_t nt = b.time();
  const std::size_t nc = b.channels();
  if (b.per_channel_times) {
    if (b.sample_times.size() != nt * nc) throw Error("sample_times must be [time, channels]");
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t t = 1; t < nt; ++t)
        if (!(b.sample_times[t * nc + c] > b.sample_times[(t - 1) * nc + c]))
          throw Error("sample_times not strictly increasing");
  } else {
    if (b.sample_times.size() != nt) throw Error("sample_times must be [time]");
    for (std::size_t t = 1; t < nt; ++t)
      if (!(b.sample_times[t] > b.sample_times[t - 1]))
        throw Error("sample_times not strictly increasing");
  }
  const auto v = b.values.flat();
  const auto m = b.mask.flat();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (m[i] > 1) throw Error("mask entries must be 0 or 1");
    if (!m[i] && v[i] != 0.0) throw Error("masked entry is not zero-filled");
  }
}

// Values tensor with every masked entry set to exactly zero.
inline Tensor3 zero_fill(const TimeSeriesBatch& b) {
  Tensor3 out = b.values;
  auto v = out.flat();
  const auto m = b.mask.flat();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!m[i]) v[i] = 0.0;
  return out;
}

inline void canonicalize(TimeSeriesBatch& b) { b.values = zero_fill(b); }

// Dense batch on a uniform clock, all entries observed.
inline TimeSeriesBatch make_dense_batch(Tensor3 values, double bin_width) {
  TimeSeriesBatch b;
  b.mask = Mask3(values.dim(0), values.dim(1), values.dim(2), 1);
  b.sample_times = uniform_times(values.dim(1), bin_width);
  b.bin_width = bin_width;
  b.values = std::move(values);
  return b;
}

// Subset of trials, in the given order.
inline TimeSeriesBatch select_trials(const TimeSeriesBatch& b, std::span<const std::size_t> idx) {
  TimeSeriesBatch out;
  out.values = Tensor3(idx.size(), b.time(), b.channels());
  out.mask = Mask3(idx.size(), b.time(), b.channels());
  const std::size_t stride = b.time() * b.channels();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= b.trials()) throw Error("trial index out of range");
    std::copy_n(b.values.storage().begin() + static_cast<std::ptrdiff_t>(idx[i] * stride), stride,
                out.values.storage().begin() + static_cast<std::ptrdiff_t>(i * stride));
    std::copy_n(b.mask.storage().begin() + static_cast<std::ptrdiff_t>(idx[i] * stride), stride,
                out.mask.storage().begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  out.sample_times = b.sample_times;
  out.per_channel_times = b.per_channel_times;
  out.bin_width = b.bin_width;
  out.channel_names = b.channel_names;
  return out;
}

template <class T>
Array3<T> select_trials(const Array3<T>& a, std::span<const std::size_t> idx) {
  Array3<T> out(idx.size(), a.dim(1), a.dim(2));
  const std::size_t stride = a.dim(1) * a.dim(2);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(a.storage().begin() + static_cast<std::ptrdiff_t>(idx[i] * stride), stride,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * stride));
  return out;
}

}  // namespace sbtt
