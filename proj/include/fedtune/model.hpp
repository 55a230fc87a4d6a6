#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedtune/data.hpp"
#include "fedtune/error.hpp"
#include "fedtune/random.hpp"

namespace fedtune::model {

using data::Dataset;
using data::DataShard;
using data::EvalSet;

enum class ModelKind { logistic, mlp };

inline const char* to_string(ModelKind k) { return k == ModelKind::logistic ? "logistic" : "mlp"; }

struct ModelSpec {
  ModelKind kind = ModelKind::logistic;
  std::size_t input_dim = 1;
  std::size_t hidden_dim = 0;
  std::size_t num_classes = 2;
  double dropout_rate = 0.0;

  void validate() const {
    if (input_dim < 1) throw ConfigError("model.input_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
    if (kind == ModelKind::mlp && hidden_dim < 1)
      throw ConfigError("model.hidden_dim must be >= 1 for an mlp");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("model.dropout_rate must lie in [0, 1)");
  }

  std::size_t parameter_count() const {
    if (kind == ModelKind::logistic) return num_classes * input_dim + num_classes;
    return hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes;
  }

  /// Architecture fingerprint. Dropout is a training-time setting and does
  /// not change the parameter layout.
  std::string layout_id() const {
    return std::string(to_string(kind)) + ":" + std::to_string(input_dim) + ":" +
           std::to_string(kind == ModelKind::mlp ? hidden_dim : 0) + ":" +
           std::to_string(num_classes);
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct WeightVector {
  std::vector<double> values;
  std::string layout_id;

  std::size_t size() const noexcept { return values.size(); }
  bool all_finite() const noexcept {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }
  double norm() const noexcept {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }

  friend bool operator==(const WeightVector&, const WeightVector&) = default;
};

/// Local (client-side) training hyperparameters.
struct TrainHp {
  double learning_rate = 0.01;
  double weight_decay = 0.0;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  double dropout = 0.0;

  friend bool operator==(const TrainHp&, const TrainHp&) = default;
};

struct TrainResult {
  WeightVector weights;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

struct Offsets {
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
};

inline Offsets offsets(const ModelSpec& s) {
  Offsets o;
  if (s.kind == ModelKind::logistic) {
    o.w2 = 0;
    o.b2 = s.num_classes * s.input_dim;
  } else {
    o.w1 = 0;
    o.b1 = s.hidden_dim * s.input_dim;
    o.w2 = o.b1 + s.hidden_dim;
    o.b2 = o.w2 + s.num_classes * s.hidden_dim;
  }
  return o;
}

inline void check_layout(const ModelSpec& spec, std::span<const double> w) {
  if (w.size() != spec.parameter_count())
    throw ConfigError("weight vector has " + std::to_string(w.size()) + " entries, model " +
                      spec.layout_id() + " expects " + std::to_string(spec.parameter_count()));
}

inline void check_features(const ModelSpec& spec, const Dataset& ds) {
  if (!ds.empty() && ds.input_dim() != spec.input_dim)
    throw DataError("dataset has " + std::to_string(ds.input_dim()) +
                    " features, model expects " + std::to_string(spec.input_dim));
  for (int y : ds.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= spec.num_classes)
      throw DataError("label " + std::to_string(y) + " outside model's class range");
}

/// Per-call scratch buffers for one sample's forward/backward pass.
struct Scratch {
  std::vector<double> hidden, mask, logits, dlogits, dhidden;
  explicit Scratch(const ModelSpec& s)
      : hidden(s.hidden_dim), mask(s.hidden_dim, 1.0), logits(s.num_classes),
        dlogits(s.num_classes), dhidden(s.hidden_dim) {}
};

// Computes logits for x into sc.logits. For the mlp, sc.hidden holds the
// post-dropout activations.
inline void forward(const ModelSpec& s, const Offsets& o, std::span<const double> w,
                    std::span<const double> x, Scratch& sc, bool use_mask) {
  const std::size_t d = s.input_dim;
  if (s.kind == ModelKind::logistic) {
    for (std::size_t k = 0; k < s.num_classes; ++k) {
      const double* wk = w.data() + o.w2 + k * d;
      double z = w[o.b2 + k];
      for (std::size_t j = 0; j < d; ++j) z += wk[j] * x[j];
      sc.logits[k] = z;
    }
    return;
  }
  const std::size_t h = s.hidden_dim;
  for (std::size_t u = 0; u < h; ++u) {
    const double* wu = w.data() + o.w1 + u * d;
    double a = w[o.b1 + u];
    for (std::size_t j = 0; j < d; ++j) a += wu[j] * x[j];
    a = std::tanh(a);
    sc.hidden[u] = use_mask ? a * sc.mask[u] : a;
  }
  for (std::size_t k = 0; k < s.num_classes; ++k) {
    const double* wk = w.data() + o.w2 + k * h;
    double z = w[o.b2 + k];
    for (std::size_t u = 0; u < h; ++u) z += wk[u] * sc.hidden[u];
    sc.logits[k] = z;
  }
}

// Cross-entropy of the current logits, stabilised by log-sum-exp. When probs
// is non-empty it receives the softmax.
inline double cross_entropy(std::span<const double> logits, int label, std::span<double> probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  if (!probs.empty())
    for (std::size_t k = 0; k < logits.size(); ++k) probs[k] = std::exp(logits[k] - lse);
  return lse - logits[static_cast<std::size_t>(label)];
}

}  // namespace detail

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer, zero biases.
inline WeightVector init_weights(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  WeightVector w;
  w.layout_id = spec.layout_id();
  w.values.assign(spec.parameter_count(), 0.0);
  Rng rng = make_rng(derive_seed(seed, seed_tag("init")));
  const auto o = detail::offsets(spec);
  auto fill = [&](std::size_t begin, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < count; ++i) w.values[begin + i] = u(rng);
  };
  if (spec.kind == ModelKind::logistic) {
    fill(o.w2, spec.num_classes * spec.input_dim, spec.input_dim);
  } else {
    fill(o.w1, spec.hidden_dim * spec.input_dim, spec.input_dim);
    fill(o.w2, spec.num_classes * spec.hidden_dim, spec.hidden_dim);
  }
  return w;
}

/// Mean cross-entropy over `batch` and its gradient (written into grad).
/// With dropout > 0 and an rng, inverted dropout is applied to the hidden
/// layer of an mlp; logistic models ignore dropout.
inline double loss_and_gradient(const ModelSpec& spec, std::span<const double> w,
                                const Dataset& ds, std::span<const std::size_t> batch,
                                std::span<double> grad, double dropout = 0.0,
                                Rng* rng = nullptr) {
  detail::check_layout(spec, w);
  if (grad.size() != w.size()) throw ConfigError("gradient buffer size mismatch");
  std::fill(grad.begin(), grad.end(), 0.0);
  if (batch.empty()) return 0.0;

  const auto o = detail::offsets(spec);
  detail::Scratch sc(spec);
  const bool use_mask = spec.kind == ModelKind::mlp && dropout > 0.0 && rng != nullptr;
  std::bernoulli_distribution keep(1.0 - dropout);
  const double keep_scale = use_mask ? 1.0 / (1.0 - dropout) : 1.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const std::size_t d = spec.input_dim, h = spec.hidden_dim, c = spec.num_classes;

  double total = 0.0;
  for (std::size_t i : batch) {
    const auto x = ds.features.row(i);
    const int y = ds.labels[i];
    if (use_mask)
      for (std::size_t u = 0; u < h; ++u) sc.mask[u] = keep(*rng) ? keep_scale : 0.0;
    detail::forward(spec, o, w, x, sc, use_mask);
    total += detail::cross_entropy(sc.logits, y, sc.dlogits);
    sc.dlogits[static_cast<std::size_t>(y)] -= 1.0;
    for (double& g : sc.dlogits) g *= inv_n;

    if (spec.kind == ModelKind::logistic) {
      for (std::size_t k = 0; k < c; ++k) {
        double* gk = grad.data() + o.w2 + k * d;
        const double dz = sc.dlogits[k];
        for (std::size_t j = 0; j < d; ++j) gk[j] += dz * x[j];
        grad[o.b2 + k] += dz;
      }
      continue;
    }
    std::fill(sc.dhidden.begin(), sc.dhidden.end(), 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      double* gk = grad.data() + o.w2 + k * h;
      const double* wk = w.data() + o.w2 + k * h;
      const double dz = sc.dlogits[k];
      for (std::size_t u = 0; u < h; ++u) {
        gk[u] += dz * sc.hidden[u];
        sc.dhidden[u] += dz * wk[u];
      }
      grad[o.b2 + k] += dz;
    }
    for (std::size_t u = 0; u < h; ++u) {
      const double m = use_mask ? sc.mask[u] : 1.0;
      if (m == 0.0) continue;
      const double a = sc.hidden[u] / m;  // pre-mask tanh output
      const double dpre = sc.dhidden[u] * m * (1.0 - a * a);
      double* gu = grad.data() + o.w1 + u * d;
      for (std::size_t j = 0; j < d; ++j) gu[j] += dpre * x[j];
      grad[o.b1 + u] += dpre;
    }
  }
  return total * inv_n;
}

/// Mean cross-entropy over a whole set, no dropout.
inline double mean_loss(const ModelSpec& spec, std::span<const double> w, const Dataset& ds) {
  detail::check_layout(spec, w);
  if (ds.empty()) throw DataError("cannot compute loss on an empty set");
  const auto o = detail::offsets(spec);
  detail::Scratch sc(spec);
  double total = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    detail::forward(spec, o, w, ds.features.row(i), sc, false);
    total += detail::cross_entropy(sc.logits, ds.labels[i], {});
  }
  return total / static_cast<double>(ds.size());
}

/// w <- w - lr * (grad + weight_decay * w)
inline void sgd_step(std::span<double> w, std::span<const double> grad, double lr,
                     double weight_decay) {
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (grad[i] + weight_decay * w[i]);
}

/// Scalar model with loss w^2 used to check the update rule in isolation.
struct QuadraticProbe {
  static double gradient(double w) { return 2.0 * w; }
  static double step(double w, double lr, double weight_decay) {
    const double g = gradient(w);
    sgd_step(std::span<double>(&w, 1), std::span<const double>(&g, 1), lr, weight_decay);
    return w;
  }
};

/// Mean cross-entropy and top-1 accuracy. Argmax ties go to the lowest class.
inline EvalResult evaluate(const ModelSpec& spec, const WeightVector& w, const EvalSet& set) {
  if (w.layout_id != spec.layout_id())
    throw ConfigError("weight layout " + w.layout_id + " does not match model " + spec.layout_id());
  detail::check_layout(spec, w.values);
  if (set.empty()) throw DataError("cannot evaluate on an empty set");
  detail::check_features(spec, set);
  const auto o = detail::offsets(spec);
  detail::Scratch sc(spec);
  double total = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    detail::forward(spec, o, w.values, set.features.row(i), sc, false);
    total += detail::cross_entropy(sc.logits, set.labels[i], {});
    const auto pred = static_cast<int>(std::max_element(sc.logits.begin(), sc.logits.end()) -
                                       sc.logits.begin());
    if (pred == set.labels[i]) ++correct;
  }
  const double n = static_cast<double>(set.size());
  return {total / n, static_cast<double>(correct) / n};
}

/// Mini-batch SGD for hp.local_epochs epochs. Batches are reshuffled every
/// epoch from a stream derived from `seed`. Returned losses are measured after
/// training on the full train and validation splits (validation falls back to
/// the train loss when the split is empty).
inline TrainResult local_train(const ModelSpec& spec, const WeightVector& w, const TrainHp& hp,
                               const DataShard& shard, std::uint64_t seed) {
  if (shard.train.empty())
    throw DataError("client " + std::to_string(shard.client_id) + " has no training data");
  if (w.layout_id != spec.layout_id())
    throw ConfigError("weight layout " + w.layout_id + " does not match model " + spec.layout_id());
  detail::check_layout(spec, w.values);
  detail::check_features(spec, shard.train);
  if (!(hp.learning_rate >= 0.0) || !(hp.weight_decay >= 0.0) || hp.batch_size < 1 ||
      !(hp.dropout >= 0.0 && hp.dropout < 1.0))
    throw ConfigError("training hyperparameters out of range");

  TrainResult out;
  out.weights = w;
  auto& values = out.weights.values;
  std::vector<double> grad(values.size());
  std::vector<std::size_t> order(shard.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng dropout_rng = make_rng(derive_seed(seed, seed_tag("dropout")));
  const std::size_t bs = std::min(hp.batch_size, order.size());

  for (std::size_t epoch = 0; epoch < hp.local_epochs; ++epoch) {
    Rng shuffle_rng = make_rng(derive_seed(seed, seed_tag("epoch"), epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t len = std::min(bs, order.size() - start);
      const double loss = loss_and_gradient(spec, values, shard.train,
                                            std::span(order).subspan(start, len), grad,
                                            hp.dropout, &dropout_rng);
      if (!std::isfinite(loss))
        throw DivergenceError("non-finite training loss in epoch " + std::to_string(epoch));
      sgd_step(values, grad, hp.learning_rate, hp.weight_decay);
    }
    if (!out.weights.all_finite())
      throw DivergenceError("non-finite weights after epoch " + std::to_string(epoch));
  }

  out.train_loss = mean_loss(spec, values, shard.train);
  out.val_loss = shard.val.empty() ? out.train_loss : mean_loss(spec, values, shard.val);
  if (!std::isfinite(out.train_loss) || !std::isfinite(out.val_loss))
    throw DivergenceError("non-finite loss after local training");
  return out;
}

}  // namespace fedtune::model
