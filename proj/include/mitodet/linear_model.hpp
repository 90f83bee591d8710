#pragma once

#include <cmath>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mitodet/common.hpp"

namespace mitodet {

using FeatureMatrix = std::vector<std::vector<double>>;

/// Logistic regression over standardized features.
struct LogisticModel {
  std::vector<double> mean;
  std::vector<double> scale;
  std::vector<double> weights;
  double bias = 0.0;

  std::size_t dims() const { return weights.size(); }

  double logit(std::span<const double> x) const {
    if (x.size() != weights.size()) throw DimensionError("feature vector has wrong length");
    double z = bias;
    for (std::size_t k = 0; k < x.size(); ++k) z += weights[k] * (x[k] - mean[k]) / scale[k];
    return z;
  }

  double predict(std::span<const double> x) const {
    const double z = logit(x);
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
};

struct LogisticHyper {
  double learning_rate = 0.5;
  int epochs = 400;
  double l2 = 1e-3;
};

inline double f1_at_half(const LogisticModel& m, const FeatureMatrix& x, std::span<const int> y) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool pos = m.predict(x[i]) >= 0.5;
    if (pos && y[i]) ++tp;
    if (pos && !y[i]) ++fp;
    if (!pos && y[i]) ++fn;
  }
  const double denom = 2.0 * tp + fp + fn;
  return denom > 0 ? 2.0 * tp / denom : 0.0;
}

inline double accuracy(const LogisticModel& m, const FeatureMatrix& x, std::span<const int> y) {
  if (x.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < x.size(); ++i) ok += (m.predict(x[i]) >= 0.5) == (y[i] != 0);
  return static_cast<double>(ok) / static_cast<double>(x.size());
}

/// Full-batch gradient descent on the L2-regularized log loss, initialized
/// from a seeded normal draw. When a validation set is supplied, the weights
/// of the epoch with the best validation F1 (earliest on ties) are returned.
inline LogisticModel train_logistic(const FeatureMatrix& x, std::span<const int> y, const LogisticHyper& hyper,
                                    std::uint64_t seed, const FeatureMatrix* val_x = nullptr,
                                    std::span<const int> val_y = {}) {
  if (x.empty() || x.size() != y.size()) throw TrainingError("training set is empty or mislabeled");
  const std::size_t n = x.size();
  const std::size_t d = x.front().size();
  std::size_t positives = 0;
  for (int v : y) positives += v != 0;
  if (positives == 0 || positives == n) throw TrainingError("training set needs both classes");

  LogisticModel m;
  m.mean.assign(d, 0.0);
  m.scale.assign(d, 0.0);
  for (const auto& row : x) {
    if (row.size() != d) throw DimensionError("ragged feature matrix");
    for (std::size_t k = 0; k < d; ++k) m.mean[k] += row[k];
  }
  for (auto& v : m.mean) v /= static_cast<double>(n);
  for (const auto& row : x)
    for (std::size_t k = 0; k < d; ++k) m.scale[k] += (row[k] - m.mean[k]) * (row[k] - m.mean[k]);
  for (auto& v : m.scale) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12)) v = 1.0;
  }

  FeatureMatrix z(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) z[i][k] = (x[i][k] - m.mean[k]) / m.scale[k];

  auto rng = make_stream(seed, "logistic-init");
  std::normal_distribution<double> init(0.0, 0.01);
  m.weights.resize(d);
  for (auto& w : m.weights) w = init(rng);

  LogisticModel best = m;
  double best_f1 = -1.0;
  std::vector<double> grad(d);
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double grad_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = m.bias;
      for (std::size_t k = 0; k < d; ++k) s += m.weights[k] * z[i][k];
      const double p = s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
      const double err = p - (y[i] ? 1.0 : 0.0);
      for (std::size_t k = 0; k < d; ++k) grad[k] += err * z[i][k];
      grad_b += err;
    }
    for (std::size_t k = 0; k < d; ++k) {
      m.weights[k] -= hyper.learning_rate * (grad[k] / static_cast<double>(n) + hyper.l2 * m.weights[k]);
    }
    m.bias -= hyper.learning_rate * grad_b / static_cast<double>(n);
    if (val_x && !val_x->empty()) {
      const double f1 = f1_at_half(m, *val_x, val_y);
      if (f1 > best_f1) {
        best_f1 = f1;
        best = m;
      }
    }
  }
  return (val_x && !val_x->empty()) ? best : m;
}

inline nlohmann::json logistic_to_json(const LogisticModel& m) {
  return {{"mean", m.mean}, {"scale", m.scale}, {"weights", m.weights}, {"bias", m.bias}};
}

inline LogisticModel logistic_from_json(const nlohmann::json& j) {
  LogisticModel m;
  m.mean = j.at("mean").get<std::vector<double>>();
  m.scale = j.at("scale").get<std::vector<double>>();
  m.weights = j.at("weights").get<std::vector<double>>();
  m.bias = j.at("bias").get<double>();
  if (m.mean.size() != m.weights.size() || m.scale.size() != m.weights.size()) {
    throw ValidationError("logistic model has inconsistent dimensions");
  }
  return m;
}

}  // namespace mitodet
