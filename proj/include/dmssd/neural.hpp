#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dmssd/common.hpp"

namespace dmssd {

using Logits = std::array<double, kNumActions>;
using Probs = std::array<double, kNumActions>;

struct NetOutput {
  Logits logits{};
  double value = 0.0;
};

// Activations kept from a forward pass for the matching backward pass.
struct ForwardCache {
  std::vector<double> input;
  std::vector<double> hidden1;
  std::vector<double> hidden2;
  NetOutput out;
};

// Shared two-layer Tanh trunk feeding a 5-way policy head and a scalar value
// head. All parameters live in one flat vector:
//   W1[h1][in] b1[h1] W2[h2][h1] b2[h2] Wp[5][h2] bp[5] Wv[1][h2] bv[1]
class PolicyValueNet {
 public:
  PolicyValueNet() = default;

  PolicyValueNet(int input_dim, int n_p, int hidden1 = 64, int hidden2 = 64)
      : input_dim_(input_dim), n_p_(n_p), hidden1_(hidden1), hidden2_(hidden2) {
    if (input_dim < 1 || hidden1 < 1 || hidden2 < 1) throw ConfigError("PolicyValueNet: non-positive dimension");
    params_.assign(parameter_count(input_dim, hidden1, hidden2), 0.0);
  }

  static std::size_t parameter_count(int in, int h1, int h2) {
    const auto i = static_cast<std::size_t>(in), a = static_cast<std::size_t>(h1), b = static_cast<std::size_t>(h2);
    return a * i + a + b * a + b + kNumActions * b + kNumActions + b + 1;
  }

  int input_dim() const { return input_dim_; }
  int n_p() const { return n_p_; }
  int hidden1() const { return hidden1_; }
  int hidden2() const { return hidden2_; }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::size_t size() const { return params_.size(); }

  // Offsets into the flat parameter vector.
  std::size_t off_w1() const { return 0; }
  std::size_t off_b1() const { return off_w1() + h1() * in(); }
  std::size_t off_w2() const { return off_b1() + h1(); }
  std::size_t off_b2() const { return off_w2() + h2() * h1(); }
  std::size_t off_wp() const { return off_b2() + h2(); }
  std::size_t off_bp() const { return off_wp() + kNumActions * h2(); }
  std::size_t off_wv() const { return off_bp() + kNumActions; }
  std::size_t off_bv() const { return off_wv() + h2(); }

  // Orthogonal initialisation with the customary gains: sqrt(2) on the
  // trunk, 0.01 on the policy head, 1 on the value head; zero biases.
  void initialize(Rng& rng) {
    std::fill(params_.begin(), params_.end(), 0.0);
    orthogonal_fill(rng, off_w1(), h1(), in(), std::sqrt(2.0));
    orthogonal_fill(rng, off_w2(), h2(), h1(), std::sqrt(2.0));
    orthogonal_fill(rng, off_wp(), kNumActions, h2(), 0.01);
    orthogonal_fill(rng, off_wv(), 1, h2(), 1.0);
  }

  NetOutput forward(std::span<const double> obs) const {
    ForwardCache cache;
    forward(obs, cache);
    return cache.out;
  }

  void forward(std::span<const double> obs, ForwardCache& cache) const {
    if (obs.size() != in()) throw ContractError("PolicyValueNet::forward: observation length mismatch");
    cache.input.assign(obs.begin(), obs.end());
    cache.hidden1.resize(h1());
    cache.hidden2.resize(h2());
    dense(off_w1(), off_b1(), h1(), in(), cache.input.data(), cache.hidden1.data(), true);
    dense(off_w2(), off_b2(), h2(), h1(), cache.hidden1.data(), cache.hidden2.data(), true);
    dense(off_wp(), off_bp(), kNumActions, h2(), cache.hidden2.data(), cache.out.logits.data(), false);
    dense(off_wv(), off_bv(), 1, h2(), cache.hidden2.data(), &cache.out.value, false);
  }

  // Accumulates d(loss)/d(params) into `grads` given the loss gradient with
  // respect to the logits and the value of the cached forward pass.
  void backward(const ForwardCache& cache, const Logits& dlogits, double dvalue, std::span<double> grads) const {
    if (grads.size() != params_.size()) throw ContractError("PolicyValueNet::backward: gradient size mismatch");
    const double* p = params_.data();
    double* g = grads.data();

    std::vector<double> dh2(h2(), 0.0);
    for (std::size_t k = 0; k < kNumActions; ++k) {
      const double d = dlogits[k];
      if (d == 0.0) continue;
      g[off_bp() + k] += d;
      const std::size_t row = off_wp() + k * h2();
      for (std::size_t j = 0; j < h2(); ++j) {
        g[row + j] += d * cache.hidden2[j];
        dh2[j] += d * p[row + j];
      }
    }
    if (dvalue != 0.0) {
      g[off_bv()] += dvalue;
      for (std::size_t j = 0; j < h2(); ++j) {
        g[off_wv() + j] += dvalue * cache.hidden2[j];
        dh2[j] += dvalue * p[off_wv() + j];
      }
    }

    std::vector<double> dh1(h1(), 0.0);
    for (std::size_t j = 0; j < h2(); ++j) {
      const double dz = dh2[j] * (1.0 - cache.hidden2[j] * cache.hidden2[j]);
      if (dz == 0.0) continue;
      g[off_b2() + j] += dz;
      const std::size_t row = off_w2() + j * h1();
      for (std::size_t i = 0; i < h1(); ++i) {
        g[row + i] += dz * cache.hidden1[i];
        dh1[i] += dz * p[row + i];
      }
    }
    for (std::size_t j = 0; j < h1(); ++j) {
      const double dz = dh1[j] * (1.0 - cache.hidden1[j] * cache.hidden1[j]);
      if (dz == 0.0) continue;
      g[off_b1() + j] += dz;
      const std::size_t row = off_w1() + j * in();
      for (std::size_t i = 0; i < in(); ++i) g[row + i] += dz * cache.input[i];
    }
  }

  friend bool operator==(const PolicyValueNet&, const PolicyValueNet&) = default;

 private:
  std::size_t in() const { return static_cast<std::size_t>(input_dim_); }
  std::size_t h1() const { return static_cast<std::size_t>(hidden1_); }
  std::size_t h2() const { return static_cast<std::size_t>(hidden2_); }

  void dense(std::size_t w, std::size_t b, std::size_t rows, std::size_t cols, const double* x, double* y,
             bool activate) const {
    const double* p = params_.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = p[b + r];
      const double* row = p + w + r * cols;
      for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
      y[r] = activate ? std::tanh(acc) : acc;
    }
  }

  // Fills a rows x cols block with a (semi-)orthogonal matrix times `gain`:
  // Gram-Schmidt on Gaussian vectors along the shorter side.
  void orthogonal_fill(Rng& rng, std::size_t offset, std::size_t rows, std::size_t cols, double gain) {
    const bool by_rows = rows <= cols;
    const std::size_t count = by_rows ? rows : cols;
    const std::size_t len = by_rows ? cols : rows;
    std::vector<std::vector<double>> basis;
    basis.reserve(count);
    while (basis.size() < count) {
      std::vector<double> v(len);
      for (auto& e : v) e = rng.normal();
      for (const auto& q : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) dot += v[i] * q[i];
        for (std::size_t i = 0; i < len; ++i) v[i] -= dot * q[i];
      }
      double norm = 0.0;
      for (double e : v) norm += e * e;
      norm = std::sqrt(norm);
      if (norm < 1e-10) continue;
      for (auto& e : v) e /= norm;
      basis.push_back(std::move(v));
    }
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        params_[offset + r * cols + c] = gain * (by_rows ? basis[r][c] : basis[c][r]);
      }
    }
  }

  int input_dim_ = 0;
  int n_p_ = 0;
  int hidden1_ = 0;
  int hidden2_ = 0;
  std::vector<double> params_;
};

inline constexpr double kMaskedLogit = -1e8;

inline Probs masked_distribution(const Logits& logits, const ActionMask& mask) {
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
    throw ContractError("masked_distribution: every action is masked");
  Logits z{};
  for (std::size_t i = 0; i < kNumActions; ++i) z[i] = mask[i] ? logits[i] : kMaskedLogit;
  const double top = *std::max_element(z.begin(), z.end());
  Probs p{};
  double sum = 0.0;
  for (std::size_t i = 0; i < kNumActions; ++i) {
    p[i] = std::exp(z[i] - top);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

inline Probs unmasked_distribution(const Logits& logits) {
  ActionMask all;
  all.fill(true);
  return masked_distribution(logits, all);
}

// Inverse-CDF draw in fixed action order.
inline int sample_action(const Probs& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last = 0;
  for (int i = 0; i < kNumActions; ++i) {
    const double pi = probs[static_cast<std::size_t>(i)];
    if (pi <= 0.0) continue;
    acc += pi;
    last = i;
    if (u < acc) return i;
  }
  return last;
}

inline int greedy_action(const Probs& probs) {
  return static_cast<int>(std::distance(probs.begin(), std::max_element(probs.begin(), probs.end())));
}

struct LogProbEntropy {
  double log_prob = 0.0;
  double entropy = 0.0;
};

inline LogProbEntropy log_prob_entropy(const Probs& probs, int action) {
  LogProbEntropy r;
  r.log_prob = std::log(probs[static_cast<std::size_t>(action)]);
  for (double p : probs) {
    if (p > 0.0) r.entropy -= p * std::log(p);
  }
  return r;
}

struct OptimState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  OptimState() = default;
  explicit OptimState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grads, OptimState& opt, double lr) {
  if (params.size() != grads.size() || opt.m.size() != params.size() || opt.v.size() != params.size())
    throw ContractError("adam_step: shape mismatch");
  ++opt.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grads[i];
    opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
    const double m_hat = opt.m[i] / bc1;
    const double v_hat = opt.v[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + opt.eps);
  }
}

// ---------------------------------------------------------------------------
// Model file: "DMSSDNET1", u64 input_dim, u64 n_p, u64 layer count, u64 per
// layer width (input, hidden1, hidden2, policy, value), f64 parameters in
// flat order, u32 CRC-32 of everything before it. All little-endian.

inline constexpr std::string_view kModelMagic = "DMSSDNET1";

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

template <class T>
T get_le(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("model: truncated file");
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  pos += sizeof(T);
  return std::bit_cast<T>(bytes);
}

}  // namespace detail

inline std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string serialize_model(const PolicyValueNet& net) {
  std::string out(kModelMagic);
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(net.input_dim()));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(net.n_p()));
  const std::array<std::uint64_t, 5> dims{static_cast<std::uint64_t>(net.input_dim()),
                                          static_cast<std::uint64_t>(net.hidden1()),
                                          static_cast<std::uint64_t>(net.hidden2()), kNumActions, 1};
  detail::put_le<std::uint64_t>(out, dims.size());
  for (auto d : dims) detail::put_le<std::uint64_t>(out, d);
  for (double p : net.params()) detail::put_le<double>(out, p);
  detail::put_le<std::uint32_t>(out, crc32_of(out));
  return out;
}

inline PolicyValueNet deserialize_model(std::string_view bytes) {
  if (bytes.size() < kModelMagic.size() + 4 || bytes.substr(0, kModelMagic.size()) != kModelMagic)
    throw FormatError("model: bad magic");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  std::size_t tail = body.size();
  if (detail::get_le<std::uint32_t>(bytes, tail) != crc32_of(body)) throw FormatError("model: checksum mismatch");

  std::size_t pos = kModelMagic.size();
  const auto input_dim = detail::get_le<std::uint64_t>(body, pos);
  const auto n_p = detail::get_le<std::uint64_t>(body, pos);
  const auto layers = detail::get_le<std::uint64_t>(body, pos);
  if (layers != 5) throw FormatError("model: unexpected layer count");
  std::array<std::uint64_t, 5> dims{};
  for (auto& d : dims) d = detail::get_le<std::uint64_t>(body, pos);
  if (dims[0] != input_dim || dims[3] != kNumActions || dims[4] != 1 || dims[1] > 1u << 16 || dims[2] > 1u << 16 ||
      input_dim > 1u << 16)
    throw FormatError("model: inconsistent layer dimensions");

  PolicyValueNet net(static_cast<int>(input_dim), static_cast<int>(n_p), static_cast<int>(dims[1]),
                     static_cast<int>(dims[2]));
  if (body.size() - pos != net.size() * sizeof(double)) throw FormatError("model: parameter block size mismatch");
  for (double& p : net.params()) p = detail::get_le<double>(body, pos);
  return net;
}

inline void save_model(const std::string& path, const PolicyValueNet& net) {
  const std::string bytes = serialize_model(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("model: cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline PolicyValueNet load_model(const std::string& path) { return deserialize_model(read_file_bytes(path)); }

}  // namespace dmssd
