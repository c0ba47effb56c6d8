#pragma once

// Dense MLP substrate: forward/backward passes, Adam, categorical sampling and
// a binary checkpoint format. Everything is templated on the scalar type and
// operates on Eigen dense matrices; samples are stored column-wise.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sppo/error.hpp"

namespace sppo {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from exactly one 64-bit draw. Bit-reproducible
/// across standard libraries, unlike std::uniform_real_distribution.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for (master, a, b), e.g. (seed, update, trajectory).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(master) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

enum class Head : std::uint8_t { Softmax = 0, Sigmoid = 1, Linear = 2 };

/// Weights and biases for every layer. Also used as the gradient type and
/// for optimizer moments, so all three always share one shape.
template <typename Scalar>
struct Params {
  std::vector<Mat<Scalar>> weights;  // weights[i] is sizes[i+1] x sizes[i]
  std::vector<Vec<Scalar>> biases;

  Params zeros_like() const {
    Params out;
    for (const auto& w : weights) out.weights.push_back(Mat<Scalar>::Zero(w.rows(), w.cols()));
    for (const auto& b : biases) out.biases.push_back(Vec<Scalar>::Zero(b.size()));
    return out;
  }

  bool same_shape(const Params& other) const {
    if (weights.size() != other.weights.size() || biases.size() != other.biases.size()) return false;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i].rows() != other.weights[i].rows() || weights[i].cols() != other.weights[i].cols())
        return false;
      if (biases[i].size() != other.biases[i].size()) return false;
    }
    return true;
  }

  bool all_finite() const {
    for (const auto& w : weights)
      if (!w.allFinite()) return false;
    for (const auto& b : biases)
      if (!b.allFinite()) return false;
    return true;
  }

  Scalar squared_norm() const {
    Scalar s = 0;
    for (const auto& w : weights) s += w.squaredNorm();
    for (const auto& b : biases) s += b.squaredNorm();
    return s;
  }

  Params& operator+=(const Params& other) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      weights[i] += other.weights[i];
      biases[i] += other.biases[i];
    }
    return *this;
  }

  Params& operator*=(Scalar k) {
    for (auto& w : weights) w *= k;
    for (auto& b : biases) b *= k;
    return *this;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
    for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
    return n;
  }
};

/// Feed-forward network: tanh hidden layers, then a softmax, sigmoid or
/// linear head on the final affine layer.
template <typename Scalar>
struct Mlp {
  std::vector<Eigen::Index> layer_sizes;
  Head head = Head::Softmax;
  Params<Scalar> params;

  Eigen::Index input_size() const { return layer_sizes.front(); }
  Eigen::Index output_size() const { return layer_sizes.back(); }
  std::size_t layer_count() const { return params.weights.size(); }
};

/// Glorot-uniform weights, zero biases. The last layer is additionally scaled
/// by `output_scale` (small values give a near-uniform initial policy).
template <typename Scalar = double>
Mlp<Scalar> make_mlp(std::vector<Eigen::Index> layer_sizes, Head head, Rng& rng,
                     Scalar output_scale = Scalar(1)) {
  if (layer_sizes.size() < 2) throw DimensionError("mlp layer count", 2, static_cast<long>(layer_sizes.size()));
  for (auto s : layer_sizes)
    if (s <= 0) throw DimensionError("mlp layer width must be positive", 1, static_cast<long>(s));
  if (head != Head::Softmax && layer_sizes.back() != 1)
    throw DimensionError("scalar head output width", 1, static_cast<long>(layer_sizes.back()));

  Mlp<Scalar> net;
  net.layer_sizes = std::move(layer_sizes);
  net.head = head;
  const std::size_t layers = net.layer_sizes.size() - 1;
  for (std::size_t i = 0; i < layers; ++i) {
    const auto fan_in = net.layer_sizes[i];
    const auto fan_out = net.layer_sizes[i + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Mat<Scalar> w(fan_out, fan_in);
    for (Eigen::Index r = 0; r < fan_out; ++r)
      for (Eigen::Index c = 0; c < fan_in; ++c) w(r, c) = static_cast<Scalar>(uniform(rng, -limit, limit));
    if (i + 1 == layers) w *= output_scale;
    net.params.weights.push_back(std::move(w));
    net.params.biases.push_back(Vec<Scalar>::Zero(fan_out));
  }
  return net;
}

/// All-zero network of the given shape.
template <typename Scalar = double>
Mlp<Scalar> make_zero_mlp(std::vector<Eigen::Index> layer_sizes, Head head) {
  Rng rng(0);
  auto net = make_mlp<Scalar>(std::move(layer_sizes), head, rng);
  net.params *= Scalar(0);
  return net;
}

/// FNV-1a over shape and parameter bytes; ties a forward cache to the exact
/// parameters it was computed with.
template <typename Scalar>
std::uint64_t parameter_digest(const Mlp<Scalar>& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  const auto head = static_cast<std::uint8_t>(net.head);
  mix(&head, 1);
  for (auto s : net.layer_sizes) mix(&s, sizeof(s));
  for (const auto& w : net.params.weights) mix(w.data(), sizeof(Scalar) * static_cast<std::size_t>(w.size()));
  for (const auto& b : net.params.biases) mix(b.data(), sizeof(Scalar) * static_cast<std::size_t>(b.size()));
  return h;
}

/// Column-wise numerically stable softmax.
template <typename Derived>
Mat<typename Derived::Scalar> softmax_columns(const Eigen::MatrixBase<Derived>& logits) {
  using S = typename Derived::Scalar;
  Mat<S> out = logits;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    auto col = out.col(c);
    col.array() -= col.maxCoeff();
    col = col.array().exp().matrix();
    col /= col.sum();
  }
  return out;
}

template <typename Derived>
Mat<typename Derived::Scalar> log_softmax_columns(const Eigen::MatrixBase<Derived>& logits) {
  using S = typename Derived::Scalar;
  Mat<S> out = logits;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    auto col = out.col(c);
    const S m = col.maxCoeff();
    const S lse = m + std::log((col.array() - m).exp().sum());
    col.array() -= lse;
  }
  return out;
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  // Split on sign so neither branch overflows exp.
  if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Mat<Scalar> apply_head(Head head, const Mat<Scalar>& logits) {
  switch (head) {
    case Head::Softmax:
      return softmax_columns(logits);
    case Head::Sigmoid:
      return logits.unaryExpr([](Scalar z) { return sigmoid(z); });
    case Head::Linear:
      return logits;
  }
  return logits;
}

/// Everything the backward pass needs from a forward pass over a batch of
/// column samples.
template <typename Scalar>
struct ForwardCache {
  std::uint64_t digest = 0;
  std::vector<Mat<Scalar>> activations;  // [0] is the input, then each tanh layer
  Mat<Scalar> logits;
  Mat<Scalar> output;

  Eigen::Index batch_size() const { return logits.cols(); }
};

template <typename Scalar>
struct ForwardResult {
  Vec<Scalar> output;
  ForwardCache<Scalar> cache;
};

namespace detail {

template <typename Scalar>
void check_input_rows(const Mlp<Scalar>& net, Eigen::Index rows) {
  if (rows != net.input_size())
    throw DimensionError("mlp input length", static_cast<long>(net.input_size()), static_cast<long>(rows));
}

template <typename Scalar, typename Derived>
Mat<Scalar> logits_only(const Mlp<Scalar>& net, const Eigen::MatrixBase<Derived>& inputs) {
  Mat<Scalar> h = inputs;
  const std::size_t last = net.layer_count() - 1;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    Mat<Scalar> z = net.params.weights[i] * h;
    z.colwise() += net.params.biases[i];
    if (i == last) return z;
    h = z.array().tanh().matrix();
  }
  return h;
}

}  // namespace detail

/// Batched forward pass; column j of `inputs` is one sample.
template <typename Scalar, typename Derived>
ForwardCache<Scalar> forward_batch(const Mlp<Scalar>& net, const Eigen::MatrixBase<Derived>& inputs) {
  detail::check_input_rows(net, inputs.rows());
  ForwardCache<Scalar> cache;
  cache.digest = parameter_digest(net);
  cache.activations.reserve(net.layer_count());
  cache.activations.push_back(inputs);
  const std::size_t last = net.layer_count() - 1;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    Mat<Scalar> z = net.params.weights[i] * cache.activations.back();
    z.colwise() += net.params.biases[i];
    if (i == last) {
      cache.logits = std::move(z);
    } else {
      cache.activations.push_back(z.array().tanh().matrix());
    }
  }
  cache.output = apply_head(net.head, cache.logits);
  if (!cache.output.allFinite()) throw NumericError("mlp forward produced a non-finite output");
  return cache;
}

template <typename Scalar>
ForwardResult<Scalar> mlp_forward(const Mlp<Scalar>& net, const Vec<Scalar>& input) {
  ForwardResult<Scalar> result;
  result.cache = forward_batch(net, input);
  result.output = result.cache.output.col(0);
  return result;
}

/// Cache-free forward for rollouts and evaluation.
template <typename Scalar>
Vec<Scalar> predict(const Mlp<Scalar>& net, const Vec<Scalar>& input) {
  detail::check_input_rows(net, input.size());
  Mat<Scalar> out = apply_head(net.head, detail::logits_only(net, input));
  return out.col(0);
}

template <typename Scalar, typename Derived>
Mat<Scalar> predict_batch(const Mlp<Scalar>& net, const Eigen::MatrixBase<Derived>& inputs) {
  detail::check_input_rows(net, inputs.rows());
  return apply_head(net.head, detail::logits_only(net, inputs));
}

/// Raw last-layer outputs before the head.
template <typename Scalar, typename Derived>
Mat<Scalar> predict_logits(const Mlp<Scalar>& net, const Eigen::MatrixBase<Derived>& inputs) {
  detail::check_input_rows(net, inputs.rows());
  return detail::logits_only(net, inputs);
}

/// Reverse pass given the loss gradient w.r.t. the head's *logits*. Gradients
/// are summed over the batch columns.
template <typename Scalar>
Params<Scalar> backward_from_logits(const Mlp<Scalar>& net, const ForwardCache<Scalar>& cache,
                                    const Mat<Scalar>& logit_grad) {
  if (cache.digest != parameter_digest(net))
    throw StateError("forward cache does not match these parameters (stale or foreign cache)");
  if (logit_grad.rows() != net.output_size())
    throw DimensionError("logit gradient rows", static_cast<long>(net.output_size()),
                         static_cast<long>(logit_grad.rows()));
  if (logit_grad.cols() != cache.batch_size())
    throw DimensionError("logit gradient columns", static_cast<long>(cache.batch_size()),
                         static_cast<long>(logit_grad.cols()));

  Params<Scalar> grads;
  const std::size_t n = net.layer_count();
  grads.weights.resize(n);
  grads.biases.resize(n);
  Mat<Scalar> delta = logit_grad;
  for (std::size_t k = n; k-- > 0;) {
    grads.weights[k].noalias() = delta * cache.activations[k].transpose();
    grads.biases[k] = delta.rowwise().sum();
    if (k == 0) break;
    Mat<Scalar> upstream = net.params.weights[k].transpose() * delta;
    const auto& a = cache.activations[k];
    delta = (upstream.array() * (Scalar(1) - a.array().square())).matrix();
  }
  return grads;
}

/// Reverse pass given the loss gradient w.r.t. the head *output*.
template <typename Scalar>
Params<Scalar> mlp_backward(const Mlp<Scalar>& net, const ForwardCache<Scalar>& cache,
                            const Mat<Scalar>& output_grad) {
  if (output_grad.rows() != cache.output.rows() || output_grad.cols() != cache.output.cols())
    throw DimensionError("output gradient size", static_cast<long>(cache.output.size()),
                         static_cast<long>(output_grad.size()));
  Mat<Scalar> logit_grad;
  switch (net.head) {
    case Head::Softmax: {
      // J^T g for softmax: p * (g - <p, g>)
      const Mat<Scalar>& p = cache.output;
      logit_grad = p.cwiseProduct(output_grad);
      const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dots = logit_grad.colwise().sum();
      logit_grad -= p * dots.asDiagonal();
      break;
    }
    case Head::Sigmoid:
      logit_grad = (output_grad.array() * cache.output.array() * (Scalar(1) - cache.output.array())).matrix();
      break;
    case Head::Linear:
      logit_grad = output_grad;
      break;
  }
  return backward_from_logits(net, cache, logit_grad);
}

template <typename Scalar>
Params<Scalar> mlp_backward(const Mlp<Scalar>& net, const ForwardCache<Scalar>& cache,
                            const Vec<Scalar>& output_grad) {
  return mlp_backward(net, cache, Mat<Scalar>(output_grad));
}

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
Scalar clip_global_norm(Params<Scalar>& grads, Scalar max_norm) {
  const Scalar norm = std::sqrt(grads.squared_norm());
  if (norm > max_norm && norm > 0) grads *= max_norm / norm;
  return norm;
}

template <typename Scalar>
struct AdamState {
  Params<Scalar> first_moment;
  Params<Scalar> second_moment;
  std::uint64_t step_count = 0;
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
  Scalar learning_rate = Scalar(3e-4);
};

template <typename Scalar>
AdamState<Scalar> make_adam(const Mlp<Scalar>& net, Scalar learning_rate) {
  AdamState<Scalar> state;
  state.first_moment = net.params.zeros_like();
  state.second_moment = net.params.zeros_like();
  state.learning_rate = learning_rate;
  return state;
}

/// Bias-corrected Adam update, in place. Refuses non-finite gradients.
template <typename Scalar>
void adam_step(Mlp<Scalar>& net, const Params<Scalar>& grads, AdamState<Scalar>& state) {
  if (!grads.same_shape(net.params) || !state.first_moment.same_shape(net.params) ||
      !state.second_moment.same_shape(net.params))
    throw DimensionError("adam parameter count", static_cast<long>(net.params.parameter_count()),
                         static_cast<long>(grads.parameter_count()));
  if (!grads.all_finite()) throw NumericError("adam_step received a non-finite gradient");

  state.step_count += 1;
  const Scalar t = static_cast<Scalar>(state.step_count);
  const Scalar c1 = Scalar(1) - std::pow(state.beta1, t);
  const Scalar c2 = Scalar(1) - std::pow(state.beta2, t);
  const Scalar b1 = state.beta1, b2 = state.beta2, eps = state.epsilon, lr = state.learning_rate;

  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    update(net.params.weights[i], grads.weights[i], state.first_moment.weights[i], state.second_moment.weights[i]);
    update(net.params.biases[i], grads.biases[i], state.first_moment.biases[i], state.second_moment.biases[i]);
  }
}

/// Inverse-CDF draw from a probability vector using exactly one RNG draw.
template <typename Scalar>
std::size_t sample_categorical(std::span<const Scalar> probs, Rng& rng) {
  if (probs.empty()) throw DimensionError("categorical support size", 1, 0);
  Scalar total = 0;
  for (Scalar p : probs) {
    if (!(p >= 0)) throw NumericError("categorical probabilities must be non-negative and finite");
    total += p;
  }
  if (std::abs(total - Scalar(1)) > Scalar(1e-6))
    throw NumericError("categorical probabilities sum to " + std::to_string(static_cast<double>(total)) +
                       ", expected 1");
  const double u = uniform01(rng) * static_cast<double>(total);
  double acc = 0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0) last_positive = i;
    acc += static_cast<double>(probs[i]);
    if (u < acc) return i;
  }
  return last_positive;  // u landed in rounding slack at the top end
}

template <typename Scalar>
std::size_t sample_categorical(const Vec<Scalar>& probs, Rng& rng) {
  return sample_categorical(std::span<const Scalar>(probs.data(), static_cast<std::size_t>(probs.size())), rng);
}

/// Lowest index of the maximum entry.
template <typename Derived>
std::size_t argmax(const Eigen::MatrixBase<Derived>& v) {
  Eigen::Index best = 0;
  v.maxCoeff(&best);
  return static_cast<std::size_t>(best);
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   "SPMP" | u8 version | u8 head | u32 layer count | u32 sizes[count]
//   then per layer: weights row-major f64, biases f64

inline constexpr char kCheckpointMagic[4] = {'S', 'P', 'M', 'P'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return std::bit_cast<double>(v);
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_mlp(const Mlp<double>& net) {
  std::string out(kCheckpointMagic, 4);
  out.push_back(static_cast<char>(kCheckpointVersion));
  out.push_back(static_cast<char>(net.head));
  detail::put_u32(out, static_cast<std::uint32_t>(net.layer_sizes.size()));
  for (auto s : net.layer_sizes) detail::put_u32(out, static_cast<std::uint32_t>(s));
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const auto& w = net.params.weights[i];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) detail::put_f64(out, w(r, c));
    for (Eigen::Index r = 0; r < net.params.biases[i].size(); ++r) detail::put_f64(out, net.params.biases[i](r));
  }
  return out;
}

inline Mlp<double> deserialize_mlp(const std::string& bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw Error("not an MLP checkpoint (bad magic)");
  detail::ByteReader in(bytes);
  for (int i = 0; i < 4; ++i) in.u8();
  const auto version = in.u8();
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto head = in.u8();
  if (head > static_cast<std::uint8_t>(Head::Linear)) throw Error("unknown head kind in checkpoint");
  const auto count = in.u32();
  if (count < 2 || count > 64) throw Error("implausible layer count in checkpoint");
  std::vector<Eigen::Index> sizes;
  for (std::uint32_t i = 0; i < count; ++i) sizes.push_back(static_cast<Eigen::Index>(in.u32()));

  Mlp<double> net = make_zero_mlp<double>(sizes, static_cast<Head>(head));
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    auto& w = net.params.weights[i];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = in.f64();
    for (Eigen::Index r = 0; r < net.params.biases[i].size(); ++r) net.params.biases[i](r) = in.f64();
  }
  if (!in.at_end()) throw Error("trailing bytes after checkpoint payload");
  return net;
}

inline void save_checkpoint(const Mlp<double>& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open checkpoint for writing: " + path);
  const auto bytes = serialize_mlp(net);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint: " + path);
}

inline Mlp<double> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_mlp(bytes);
}

using MlpParams = Mlp<double>;
using Gradient = Params<double>;
using VectorXd = Vec<double>;
using MatrixXd = Mat<double>;

}  // namespace sppo
