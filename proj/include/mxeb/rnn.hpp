#pragma once

// Autoregressive GRU model over fixed-length bit records.
//
// Cell (gate order reset, update, candidate; same recurrence as torch.nn.GRU):
//
//   r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//   z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//   n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//   h' = (1 - z) * n + z * h
//   y  = softmax(W_o dropout(h') + b_o)
//
// Site i is predicted from the one-hot encoding of bit i-1, with the all-zero
// start token in front of site 1. The loss is the negative log-likelihood
// averaged over records and sites.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mxeb/error.hpp"
#include "mxeb/format.hpp"
#include "mxeb/rng.hpp"
#include "mxeb/trajectory.hpp"
#include "mxeb/xeb.hpp"

namespace mxeb {

inline constexpr int kInputDim = 2;
inline constexpr int kOutputDim = 2;

struct GruParameters {
  Eigen::MatrixXd w_input;   // 3H x 2
  Eigen::MatrixXd w_hidden;  // 3H x H
  Eigen::VectorXd b_input;   // 3H
  Eigen::VectorXd b_hidden;  // 3H
  Eigen::MatrixXd w_out;     // 2 x H
  Eigen::VectorXd b_out;     // 2

  GruParameters() = default;

  explicit GruParameters(int hidden)
      : w_input(Eigen::MatrixXd::Zero(3 * hidden, kInputDim)),
        w_hidden(Eigen::MatrixXd::Zero(3 * hidden, hidden)),
        b_input(Eigen::VectorXd::Zero(3 * hidden)),
        b_hidden(Eigen::VectorXd::Zero(3 * hidden)),
        w_out(Eigen::MatrixXd::Zero(kOutputDim, hidden)),
        b_out(Eigen::VectorXd::Zero(kOutputDim)) {}

  int hidden() const noexcept { return static_cast<int>(w_hidden.cols()); }

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(w_input.size() + w_hidden.size() + b_input.size() +
                                    b_hidden.size() + w_out.size() + b_out.size());
  }

  /// Calls fn(matrix&) on each block in checkpoint order.
  template <typename Fn>
  void for_each_block(Fn&& fn) {
    fn(w_input);
    fn(w_hidden);
    fn(b_input);
    fn(b_hidden);
    fn(w_out);
    fn(b_out);
  }
  template <typename Fn>
  void for_each_block(Fn&& fn) const {
    fn(w_input);
    fn(w_hidden);
    fn(b_input);
    fn(b_hidden);
    fn(w_out);
    fn(b_out);
  }

  /// Row-major concatenation of the blocks in checkpoint order.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(size());
    for_each_block([&](const auto& m) {
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
    });
    return out;
  }

  void unflatten(std::span<const double> values) {
    if (values.size() != size()) {
      throw Error(ErrorKind::length_mismatch, "parameter vector has wrong length");
    }
    std::size_t k = 0;
    for_each_block([&](auto& m) {
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = values[k++];
    });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_block([&](const auto& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  void set_zero() {
    for_each_block([](auto& m) { m.setZero(); });
  }
};

enum class RnnMode { train, eval };

struct RnnModel {
  GruParameters params;
  double dropout = 0.0;
  std::size_t record_length = 0;
  RnnMode mode = RnnMode::eval;
  std::uint64_t seed = 0;

  int hidden() const noexcept { return params.hidden(); }
};

/// Uniform(-1/sqrt(H), 1/sqrt(H)) on every weight and bias.
inline RnnModel init_model(int hidden, std::size_t record_length, double dropout,
                           std::uint64_t seed) {
  if (hidden < 1) throw Error(ErrorKind::invalid_argument, "hidden size must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw Error(ErrorKind::invalid_argument, "dropout must be in [0, 1)");
  }
  RnnModel m;
  m.params = GruParameters(hidden);
  m.dropout = dropout;
  m.record_length = record_length;
  m.seed = seed;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  SplitMix64 rng(derive_seed(seed, stream_tag::init));
  m.params.for_each_block([&](auto& block) {
    for (Eigen::Index r = 0; r < block.rows(); ++r)
      for (Eigen::Index c = 0; c < block.cols(); ++c) block(r, c) = bound * (2.0 * rng.uniform() - 1.0);
  });
  return m;
}

enum class Token { zero, one, start };

inline Token token_of(std::uint8_t bit) noexcept { return bit ? Token::one : Token::zero; }

struct StepOutput {
  Eigen::VectorXd hidden;
  std::array<double, 2> y{};
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& x) { return 1.0 / (1.0 + (-x).exp()); }

/// log softmax of a two-logit column.
inline std::array<double, 2> log_softmax2(double l0, double l1) {
  const double m = std::max(l0, l1);
  const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
  return {l0 - lse, l1 - lse};
}

}  // namespace detail

/// One GRU step for a single sequence. In train mode a dropout stream must be
/// supplied; in eval mode the step is a pure function of its arguments.
inline StepOutput forward_step(const RnnModel& model, const Eigen::VectorXd& hidden, Token input,
                               SplitMix64* dropout_rng = nullptr) {
  const auto& p = model.params;
  const int h = p.hidden();
  if (hidden.size() != h) throw Error(ErrorKind::length_mismatch, "hidden state size");
  if (!hidden.allFinite()) throw Error(ErrorKind::divergence, "non-finite hidden state");
  if (model.mode == RnnMode::train && model.dropout > 0.0 && dropout_rng == nullptr) {
    throw Error(ErrorKind::invalid_argument, "train-mode step needs a dropout stream");
  }
  Eigen::VectorXd gi = p.b_input;
  if (input != Token::start) gi += p.w_input.col(input == Token::one ? 1 : 0);
  const Eigen::VectorXd gh = p.w_hidden * hidden + p.b_hidden;
  StepOutput out;
  out.hidden.resize(h);
  for (int k = 0; k < h; ++k) {
    const double r = detail::sigmoid(gi(k) + gh(k));
    const double z = detail::sigmoid(gi(h + k) + gh(h + k));
    const double n = std::tanh(gi(2 * h + k) + r * gh(2 * h + k));
    out.hidden(k) = (1.0 - z) * n + z * hidden(k);
  }
  Eigen::VectorXd dropped = out.hidden;
  if (model.mode == RnnMode::train && model.dropout > 0.0) {
    const double keep = 1.0 - model.dropout;
    for (int k = 0; k < h; ++k) dropped(k) = dropout_rng->uniform() < model.dropout ? 0.0 : dropped(k) / keep;
  }
  const Eigen::Vector2d logits = p.w_out * dropped + p.b_out;
  const auto lp = detail::log_softmax2(logits(0), logits(1));
  out.y = {std::exp(lp[0]), std::exp(lp[1])};
  if (!out.hidden.allFinite()) throw Error(ErrorKind::divergence, "non-finite hidden state");
  return out;
}

struct LogProb {
  double value = 0.0;  // natural log; -inf when some conditional is exactly zero
  bool zero_probability = false;
};

/// log P(m) = sum_i log y_i[m_i], eval mode.
inline LogProb sequence_log_prob(const RnnModel& model, const MeasurementRecord& record) {
  if (model.mode != RnnMode::eval) throw Error(ErrorKind::invalid_argument, "model not in eval mode");
  if (record.size() != model.record_length) {
    throw Error(ErrorKind::length_mismatch, "record length " + std::to_string(record.size()) +
                                                " != model length " +
                                                std::to_string(model.record_length));
  }
  const auto& p = model.params;
  const int h = p.hidden();
  Eigen::VectorXd hidden = Eigen::VectorXd::Zero(h);
  LogProb out;
  Token input = Token::start;
  for (std::size_t i = 0; i < record.size(); ++i) {
    Eigen::VectorXd gi = p.b_input;
    if (input != Token::start) gi += p.w_input.col(input == Token::one ? 1 : 0);
    const Eigen::VectorXd gh = p.w_hidden * hidden + p.b_hidden;
    for (int k = 0; k < h; ++k) {
      const double r = detail::sigmoid(gi(k) + gh(k));
      const double z = detail::sigmoid(gi(h + k) + gh(h + k));
      const double n = std::tanh(gi(2 * h + k) + r * gh(2 * h + k));
      hidden(k) = (1.0 - z) * n + z * hidden(k);
    }
    const Eigen::Vector2d logits = p.w_out * hidden + p.b_out;
    const auto lp = detail::log_softmax2(logits(0), logits(1));
    const double term = lp[record.bits[i]];
    if (std::isinf(term)) out.zero_probability = true;
    out.value += term;
    input = token_of(record.bits[i]);
  }
  if (!std::isfinite(out.value) && !out.zero_probability) {
    throw Error(ErrorKind::divergence, "non-finite log probability");
  }
  return out;
}

namespace detail {

using Mat = Eigen::MatrixXd;
using Arr = Eigen::ArrayXXd;

/// Batched forward/backward over records of equal length. Columns are records.
class GruBatch {
 public:
  GruBatch(const GruParameters& params, std::span<const MeasurementRecord* const> records)
      : p_(params), records_(records), h_(params.hidden()),
        b_(static_cast<Eigen::Index>(records.size())),
        n_(records.empty() ? 0 : records[0]->size()) {}

  /// Mean NLL per site. With `dropout_rng` and rate > 0, inverted dropout masks
  /// are drawn (site-major, then hidden unit, then record). With `cache`, the
  /// activations needed by backward() are kept.
  double forward(double dropout, SplitMix64* dropout_rng, bool cache) {
    const bool use_dropout = dropout > 0.0 && dropout_rng != nullptr;
    if (cache) steps_.assign(n_, {});
    Mat hidden = Mat::Zero(h_, b_);
    double nll = 0.0;
    for (std::size_t t = 0; t < n_; ++t) {
      Mat gi = p_.b_input.replicate(1, b_);
      if (t > 0) {
        for (Eigen::Index j = 0; j < b_; ++j) gi.col(j) += p_.w_input.col(records_[j]->bits[t - 1]);
      }
      Mat gh = p_.w_hidden * hidden;
      gh.colwise() += p_.b_hidden;
      const Arr r = sigmoid(gi.topRows(h_).array() + gh.topRows(h_).array());
      const Arr z = sigmoid(gi.middleRows(h_, h_).array() + gh.middleRows(h_, h_).array());
      const Arr ghn = gh.bottomRows(h_).array();
      const Arr n = (gi.bottomRows(h_).array() + r * ghn).tanh();
      Mat next = ((1.0 - z) * n + z * hidden.array()).matrix();

      Arr mask;
      Mat dropped;
      if (use_dropout) {
        mask.resize(h_, b_);
        const double keep = 1.0 - dropout;
        for (Eigen::Index k = 0; k < h_; ++k)
          for (Eigen::Index j = 0; j < b_; ++j)
            mask(k, j) = dropout_rng->uniform() < dropout ? 0.0 : 1.0 / keep;
        dropped = (next.array() * mask).matrix();
      }
      const Mat& out_in = use_dropout ? dropped : next;
      Mat logits = p_.w_out * out_in;
      logits.colwise() += p_.b_out;

      Mat dlogits(kOutputDim, b_);
      for (Eigen::Index j = 0; j < b_; ++j) {
        const auto lp = log_softmax2(logits(0, j), logits(1, j));
        const int target = records_[j]->bits[t];
        nll -= lp[target];
        dlogits(0, j) = std::exp(lp[0]) - (target == 0 ? 1.0 : 0.0);
        dlogits(1, j) = std::exp(lp[1]) - (target == 1 ? 1.0 : 0.0);
      }
      if (cache) {
        auto& s = steps_[t];
        s.h_prev = std::move(hidden);
        s.r = r;
        s.z = z;
        s.n = n;
        s.ghn = ghn;
        s.mask = std::move(mask);
        s.out_in = out_in;
        s.dlogits = std::move(dlogits);
      }
      hidden = std::move(next);
    }
    const double denom = static_cast<double>(b_) * static_cast<double>(n_);
    return denom > 0 ? nll / denom : 0.0;
  }

  /// Gradient of the last cached forward's loss.
  GruParameters backward() const {
    GruParameters g(h_);
    const double scale = 1.0 / (static_cast<double>(b_) * static_cast<double>(n_));
    Mat dh_next = Mat::Zero(h_, b_);
    Mat dgi(3 * h_, b_);
    Mat dgh(3 * h_, b_);
    for (std::size_t tt = n_; tt-- > 0;) {
      const auto& s = steps_[tt];
      const Mat dlogits = s.dlogits * scale;
      g.w_out.noalias() += dlogits * s.out_in.transpose();
      g.b_out += dlogits.rowwise().sum();
      Arr dh = (p_.w_out.transpose() * dlogits).array();
      if (s.mask.size() > 0) dh *= s.mask;
      dh += dh_next.array();

      const Arr dn = dh * (1.0 - s.z);
      const Arr dz = dh * (s.h_prev.array() - s.n);
      const Arr da_n = dn * (1.0 - s.n.square());
      const Arr da_z = dz * s.z * (1.0 - s.z);
      const Arr da_r = da_n * s.ghn * s.r * (1.0 - s.r);

      dgi.topRows(h_) = da_r.matrix();
      dgi.middleRows(h_, h_) = da_z.matrix();
      dgi.bottomRows(h_) = da_n.matrix();
      dgh.topRows(h_) = da_r.matrix();
      dgh.middleRows(h_, h_) = da_z.matrix();
      dgh.bottomRows(h_) = (da_n * s.r).matrix();

      if (tt > 0) {
        for (Eigen::Index j = 0; j < b_; ++j) g.w_input.col(records_[j]->bits[tt - 1]) += dgi.col(j);
      }
      g.b_input += dgi.rowwise().sum();
      g.w_hidden.noalias() += dgh * s.h_prev.transpose();
      g.b_hidden += dgh.rowwise().sum();

      dh_next = (dh * s.z).matrix();
      dh_next.noalias() += p_.w_hidden.transpose() * dgh;
    }
    return g;
  }

 private:
  struct StepCache {
    Mat h_prev;
    Arr r, z, n, ghn, mask;
    Mat out_in;
    Mat dlogits;
  };

  const GruParameters& p_;
  std::span<const MeasurementRecord* const> records_;
  Eigen::Index h_;
  Eigen::Index b_;
  std::size_t n_;
  std::vector<StepCache> steps_;
};

inline std::vector<const MeasurementRecord*> pointers(std::span<const MeasurementRecord> records) {
  std::vector<const MeasurementRecord*> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(&r);
  return out;
}

}  // namespace detail

/// Mean NLL per site over `records` in eval mode (no dropout).
inline double mean_nll(const RnnModel& model, std::span<const MeasurementRecord> records) {
  if (records.empty()) return 0.0;
  const auto ptrs = detail::pointers(records);
  detail::GruBatch batch(model.params, ptrs);
  return batch.forward(0.0, nullptr, false);
}

struct LossAndGradient {
  double loss = 0.0;
  GruParameters gradient;
};

inline LossAndGradient loss_and_gradient(const GruParameters& params,
                                         std::span<const MeasurementRecord* const> batch,
                                         double dropout = 0.0, SplitMix64* dropout_rng = nullptr) {
  detail::GruBatch b(params, batch);
  LossAndGradient out;
  out.loss = b.forward(dropout, dropout_rng, true);
  out.gradient = b.backward();
  return out;
}

/// Probabilities of every record of length model.record_length, indexed by
/// MeasurementRecord::index(). Evaluated in chunks of equal-length batches.
inline std::vector<double> enumerate_model_distribution(const RnnModel& model) {
  const auto n = model.record_length;
  if (n > kMaxEnumerableSites) {
    throw Error(ErrorKind::enumeration_infeasible, std::to_string(n) + " sites (limit 22)");
  }
  const std::uint64_t total = std::uint64_t{1} << n;
  std::vector<double> out(total, 1.0);
  if (n == 0) return out;
  const std::uint64_t chunk = 4096;
  const auto& p = model.params;
  const Eigen::Index h = p.hidden();
  for (std::uint64_t begin = 0; begin < total; begin += chunk) {
    const auto b = static_cast<Eigen::Index>(std::min(chunk, total - begin));
    Eigen::MatrixXd hidden = Eigen::MatrixXd::Zero(h, b);
    Eigen::ArrayXd logp = Eigen::ArrayXd::Zero(b);
    for (std::size_t t = 0; t < n; ++t) {
      Eigen::MatrixXd gi = p.b_input.replicate(1, b);
      if (t > 0) {
        for (Eigen::Index j = 0; j < b; ++j) {
          const auto bit = ((begin + j) >> (n - t)) & 1;
          gi.col(j) += p.w_input.col(static_cast<Eigen::Index>(bit));
        }
      }
      Eigen::MatrixXd gh = p.w_hidden * hidden;
      gh.colwise() += p.b_hidden;
      const Eigen::ArrayXXd r = detail::sigmoid(gi.topRows(h).array() + gh.topRows(h).array());
      const Eigen::ArrayXXd z =
          detail::sigmoid(gi.middleRows(h, h).array() + gh.middleRows(h, h).array());
      const Eigen::ArrayXXd nn = (gi.bottomRows(h).array() + r * gh.bottomRows(h).array()).tanh();
      hidden = ((1.0 - z) * nn + z * hidden.array()).matrix();
      Eigen::MatrixXd logits = p.w_out * hidden;
      logits.colwise() += p.b_out;
      for (Eigen::Index j = 0; j < b; ++j) {
        const auto bit = ((begin + j) >> (n - 1 - t)) & 1;
        logp(j) += detail::log_softmax2(logits(0, j), logits(1, j))[bit];
      }
    }
    for (Eigen::Index j = 0; j < b; ++j) out[begin + j] = std::exp(logp(j));
  }
  return out;
}

/// Ancestral sampling; sample k uses stream derive_seed(seed, sampler, k).
inline std::vector<MeasurementRecord> sample(const RnnModel& model, std::size_t count,
                                             std::uint64_t seed) {
  if (model.mode != RnnMode::eval) throw Error(ErrorKind::invalid_argument, "model not in eval mode");
  const auto n = model.record_length;
  std::vector<MeasurementRecord> out(count);
  for (auto& r : out) r.bits.resize(n);
  if (n == 0 || count == 0) return out;
  const auto& p = model.params;
  const Eigen::Index h = p.hidden();
  const std::size_t chunk = 4096;
  for (std::size_t begin = 0; begin < count; begin += chunk) {
    const auto b = static_cast<Eigen::Index>(std::min(chunk, count - begin));
    std::vector<SplitMix64> streams;
    streams.reserve(b);
    for (Eigen::Index j = 0; j < b; ++j) streams.emplace_back(derive_seed(seed, stream_tag::sampler, begin + j));
    Eigen::MatrixXd hidden = Eigen::MatrixXd::Zero(h, b);
    for (std::size_t t = 0; t < n; ++t) {
      Eigen::MatrixXd gi = p.b_input.replicate(1, b);
      if (t > 0) {
        for (Eigen::Index j = 0; j < b; ++j) gi.col(j) += p.w_input.col(out[begin + j].bits[t - 1]);
      }
      Eigen::MatrixXd gh = p.w_hidden * hidden;
      gh.colwise() += p.b_hidden;
      const Eigen::ArrayXXd r = detail::sigmoid(gi.topRows(h).array() + gh.topRows(h).array());
      const Eigen::ArrayXXd z =
          detail::sigmoid(gi.middleRows(h, h).array() + gh.middleRows(h, h).array());
      const Eigen::ArrayXXd nn = (gi.bottomRows(h).array() + r * gh.bottomRows(h).array()).tanh();
      hidden = ((1.0 - z) * nn + z * hidden.array()).matrix();
      Eigen::MatrixXd logits = p.w_out * hidden;
      logits.colwise() += p.b_out;
      for (Eigen::Index j = 0; j < b; ++j) {
        const double p1 = std::exp(detail::log_softmax2(logits(0, j), logits(1, j))[1]);
        out[begin + j].bits[t] = streams[j].uniform() < p1 ? 1 : 0;
      }
    }
  }
  return out;
}

/// Probability of each record under the model, exp(sequence_log_prob).
inline std::vector<double> probabilities(const RnnModel& model,
                                         std::span<const MeasurementRecord> records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(std::exp(sequence_log_prob(model, r).value));
  return out;
}

/// N_sample for chi_rnn: a finite count, or exact enumeration over all records.
struct SampleBudget {
  std::optional<std::size_t> count;  // nullopt = exact enumeration
  static SampleBudget exact() { return {}; }
  static SampleBudget finite(std::size_t n) { return {n}; }
};

inline XebEstimate chi_rnn(const RnnModel& rho_model, const RnnModel& sigma_model,
                           SampleBudget budget, std::uint64_t seed) {
  if (rho_model.record_length != sigma_model.record_length) {
    throw Error(ErrorKind::length_mismatch, "rho and sigma models disagree on record length");
  }
  XebEstimate e;
  e.estimator = EstimatorKind::rnn;
  if (!budget.count) {
    const auto pr = enumerate_model_distribution(rho_model);
    const auto ps = enumerate_model_distribution(sigma_model);
    for (std::size_t i = 0; i < pr.size(); ++i) {
      e.numerator += pr[i] * ps[i];
      e.denominator += ps[i] * ps[i];
    }
  } else {
    if (*budget.count == 0) throw Error(ErrorKind::invalid_argument, "N_sample must be positive");
    const auto from_rho = sample(rho_model, *budget.count, derive_seed(seed, stream_tag::sampler, 0));
    const auto from_sigma =
        sample(sigma_model, *budget.count, derive_seed(seed, stream_tag::sampler, 1));
    e.numerator = mean(probabilities(sigma_model, from_rho));
    e.denominator = mean(probabilities(sigma_model, from_sigma));
    e.runs = *budget.count;
  }
  if (!(e.denominator > 0.0)) throw Error(ErrorKind::degenerate_estimate, "zero denominator");
  e.chi = e.numerator / e.denominator;
  return e;
}

struct TrainingConfig {
  std::size_t dataset_size = 0;  // M
  std::size_t batch_size = 1;
  std::size_t validation_size = 0;
  int hidden = 1;
  double dropout = 0.0;
  std::size_t epochs = 1;
  double learning_rate = 1e-3;
  SampleBudget n_sample = SampleBudget::exact();
};

struct LossReport {
  std::vector<double> train_loss;       // per epoch, mean over training batches
  std::vector<double> validation_loss;  // per epoch; equals train_loss when no validation split
  std::size_t best_epoch = 0;           // 1-based epoch of the returned checkpoint
};

struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double epsilon = 1e-8;
};

inline void adam_update(std::vector<double>& params, std::span<const double> grad, AdamState& s,
                        double lr) {
  if (s.m.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = AdamState::beta1 * s.m[i] + (1.0 - AdamState::beta1) * grad[i];
    s.v[i] = AdamState::beta2 * s.v[i] + (1.0 - AdamState::beta2) * grad[i] * grad[i];
    params[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + AdamState::epsilon);
  }
}

struct TrainingResult {
  RnnModel model;
  LossReport report;
};

/// Mini-batch Adam on the per-site NLL. The validation split is the first
/// `validation_size` entries of a seeded permutation; each epoch reshuffles
/// the training split and draws dropout from its own derived stream. Returns
/// the parameters with the lowest validation loss, in eval mode.
inline TrainingResult train(std::span<const MeasurementRecord> dataset, const TrainingConfig& cfg,
                            std::uint64_t seed) {
  if (dataset.empty()) throw Error(ErrorKind::invalid_argument, "empty dataset");
  if (cfg.batch_size == 0 || dataset.size() < cfg.batch_size + cfg.validation_size) {
    throw Error(ErrorKind::invalid_argument, "dataset smaller than batch + validation size");
  }
  const auto n = dataset[0].size();
  for (const auto& r : dataset) {
    if (r.size() != n) throw Error(ErrorKind::length_mismatch, "records differ in length");
  }
  if (n == 0) throw Error(ErrorKind::invalid_argument, "records are empty");

  RnnModel model = init_model(cfg.hidden, n, cfg.dropout, seed);
  model.mode = RnnMode::train;

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  {
    SplitMix64 split_rng(derive_seed(seed, stream_tag::split));
    shuffle(order.begin(), order.end(), split_rng);
  }
  std::vector<MeasurementRecord> validation;
  for (std::size_t i = 0; i < cfg.validation_size; ++i) validation.push_back(dataset[order[i]]);
  std::vector<const MeasurementRecord*> training;
  for (std::size_t i = cfg.validation_size; i < order.size(); ++i) training.push_back(&dataset[order[i]]);

  auto flat = model.params.flatten();
  AdamState adam;
  TrainingResult result;
  auto best = flat;
  double best_loss = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    SplitMix64 rng(derive_seed(seed, stream_tag::epoch, epoch));
    shuffle(training.begin(), training.end(), rng);
    double weighted = 0.0;
    for (std::size_t begin = 0; begin < training.size(); begin += cfg.batch_size) {
      const auto len = std::min(cfg.batch_size, training.size() - begin);
      const std::span<const MeasurementRecord* const> batch(training.data() + begin, len);
      auto lg = loss_and_gradient(model.params, batch, cfg.dropout, &rng);
      if (!std::isfinite(lg.loss)) {
        throw Error(ErrorKind::divergence, "non-finite loss at epoch " + std::to_string(epoch) +
                                               ", batch offset " + std::to_string(begin));
      }
      weighted += lg.loss * static_cast<double>(len);
      adam_update(flat, lg.gradient.flatten(), adam, cfg.learning_rate);
      model.params.unflatten(flat);
    }
    const double train_loss = weighted / static_cast<double>(training.size());
    const double val_loss = validation.empty() ? train_loss : mean_nll(model, validation);
    if (!std::isfinite(val_loss)) {
      throw Error(ErrorKind::divergence, "non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.report.train_loss.push_back(train_loss);
    result.report.validation_loss.push_back(val_loss);
    if (val_loss < best_loss) {
      best_loss = val_loss;
      best = flat;
      result.report.best_epoch = epoch;
    }
  }
  model.params.unflatten(best);
  model.mode = RnnMode::eval;
  result.model = std::move(model);
  return result;
}

inline std::string training_curve_csv(const LossReport& report) {
  std::string out = "epoch,train_nll,val_nll\n";
  for (std::size_t e = 0; e < report.train_loss.size(); ++e) {
    out += std::to_string(e + 1) + "," + format_double(report.train_loss[e]) + "," +
           format_double(report.validation_loss[e]) + "\n";
  }
  return out;
}

/// Largest |analytic - central difference| / max(|analytic|, |fd|, 1e-6)
/// over all parameters, dropout off.
inline double gradient_check(const RnnModel& model, std::span<const MeasurementRecord> batch,
                             double epsilon_fd) {
  const auto ptrs = detail::pointers(batch);
  const auto analytic = loss_and_gradient(model.params, ptrs).gradient.flatten();
  auto flat = model.params.flatten();
  GruParameters probe = model.params;
  auto loss_at = [&](const std::vector<double>& values) {
    probe.unflatten(values);
    detail::GruBatch b(probe, ptrs);
    return b.forward(0.0, nullptr, false);
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double saved = flat[i];
    flat[i] = saved + epsilon_fd;
    const double up = loss_at(flat);
    flat[i] = saved - epsilon_fd;
    const double down = loss_at(flat);
    flat[i] = saved;
    const double fd = (up - down) / (2.0 * epsilon_fd);
    const double scale = std::max({std::abs(analytic[i]), std::abs(fd), 1e-6});
    worst = std::max(worst, std::abs(analytic[i] - fd) / scale);
  }
  return worst;
}

// Checkpoint format (version 1):
//
//   mxeb-rnn 1
//   hidden <H>
//   input 2
//   output 2
//   dropout <rate>
//   record_length <N>
//   seed <u64>
//   optimizer adam lr=<lr> beta1=0.9 beta2=0.999 eps=1e-08
//   optimizer_state none
//   params <count>
//   <value>                        one per line, shortest round-trip decimal,
//                                  blocks w_input, w_hidden, b_input, b_hidden,
//                                  w_out, b_out, each row-major; gate rows
//                                  ordered reset, update, candidate
//   hash <16 hex>                  FNV-1a 64 of every preceding byte

inline std::string serialize(const RnnModel& model, double learning_rate = 1e-3) {
  std::string out;
  out += "mxeb-rnn 1\n";
  out += "hidden " + std::to_string(model.hidden()) + "\n";
  out += "input 2\noutput 2\n";
  out += "dropout " + format_double(model.dropout) + "\n";
  out += "record_length " + std::to_string(model.record_length) + "\n";
  out += "seed " + std::to_string(model.seed) + "\n";
  out += "optimizer adam lr=" + format_double(learning_rate) + " beta1=0.9 beta2=0.999 eps=1e-08\n";
  out += "optimizer_state none\n";
  const auto flat = model.params.flatten();
  out += "params " + std::to_string(flat.size()) + "\n";
  for (double v : flat) out += format_double(v) + "\n";
  out += "hash " + hex64(fnv1a64(out)) + "\n";
  return out;
}

inline RnnModel deserialize_model(std::string_view text) {
  LineReader in(text);
  const auto header = split_ws(in.next());
  if (header.size() != 2 || header[0] != "mxeb-rnn") {
    throw Error(ErrorKind::malformed_input, "missing 'mxeb-rnn' header");
  }
  if (header[1] != "1") throw Error(ErrorKind::version_mismatch, "checkpoint version " + std::string(header[1]));
  const int hidden = parse_int<int>(in.expect("hidden", 1)[0]);
  if (parse_int<int>(in.expect("input", 1)[0]) != kInputDim ||
      parse_int<int>(in.expect("output", 1)[0]) != kOutputDim || hidden < 1) {
    throw Error(ErrorKind::malformed_input, "unsupported dimensions");
  }
  RnnModel m;
  m.params = GruParameters(hidden);
  m.dropout = parse_double(in.expect("dropout", 1)[0]);
  m.record_length = parse_int<std::size_t>(in.expect("record_length", 1)[0]);
  m.seed = parse_int<std::uint64_t>(in.expect("seed", 1)[0]);
  in.expect("optimizer", 5);
  in.expect("optimizer_state", 1);
  const auto count = parse_int<std::size_t>(in.expect("params", 1)[0]);
  if (count != m.params.size()) throw Error(ErrorKind::malformed_input, "parameter count mismatch");
  std::vector<double> flat;
  flat.reserve(count);
  for (std::size_t i = 0; i < count; ++i) flat.push_back(parse_double(in.next()));
  const auto body_end = in.offset();
  const auto stored = parse_hex64(in.expect("hash", 1)[0]);
  if (stored != fnv1a64(text.substr(0, body_end))) {
    throw Error(ErrorKind::hash_mismatch, "checkpoint content does not match its hash");
  }
  m.params.unflatten(flat);
  m.mode = RnnMode::eval;
  return m;
}

// Hyperparameter tables for the two L=8 reference circuits (p = 0.1 and
// p = 0.2), keyed by dataset size M. Learning rate is 1e-3 throughout.

inline std::vector<TrainingConfig> training_table_p01() {
  struct Row { std::size_t m, batch, val; int hidden; double dropout; };
  static constexpr Row rows[] = {
      {15000, 1000, 3000, 20, 0.2}, {12000, 1000, 2000, 18, 0.2}, {10000, 1000, 2000, 14, 0.1},
      {9000, 1000, 2000, 13, 0.1},  {8000, 1000, 1000, 12, 0.2},  {7000, 1000, 1000, 12, 0.2},
      {6000, 1000, 1000, 12, 0.2},  {5000, 1000, 1000, 12, 0.35}, {4000, 1000, 1000, 12, 0.6},
      {3000, 600, 600, 10, 0.5},    {2000, 400, 400, 9, 0.5},     {1000, 200, 200, 7, 0.6},
      {500, 100, 100, 5, 0.6},      {100, 20, 20, 3, 0.6},
  };
  std::vector<TrainingConfig> out;
  for (const auto& r : rows) {
    out.push_back({r.m, r.batch, r.val, r.hidden, r.dropout, 60000, 1e-3, SampleBudget::exact()});
  }
  return out;
}

inline std::vector<TrainingConfig> training_table_p02() {
  struct Row { std::size_t m, batch, val; int hidden; double dropout; std::size_t epochs, n_sample; };
  static constexpr Row rows[] = {
      {12000, 1000, 2000, 19, 0.1, 40000, 20000}, {10000, 1000, 2000, 18, 0.1, 40000, 20000},
      {7000, 1000, 1000, 18, 0.2, 40000, 50000},  {5000, 1000, 1000, 17, 0.2, 40000, 20000},
      {3000, 600, 600, 14, 0.2, 40000, 50000},    {1000, 200, 200, 12, 0.4, 60000, 50000},
      {200, 40, 40, 6, 0.5, 60000, 50000},
  };
  std::vector<TrainingConfig> out;
  for (const auto& r : rows) {
    out.push_back({r.m, r.batch, r.val, r.hidden, r.dropout, r.epochs, 1e-3,
                   SampleBudget::finite(r.n_sample)});
  }
  return out;
}

inline std::optional<TrainingConfig> find_config(std::span<const TrainingConfig> table,
                                                  std::size_t m) {
  for (const auto& c : table) {
    if (c.dataset_size == m) return c;
  }
  return std::nullopt;
}

}  // namespace mxeb
