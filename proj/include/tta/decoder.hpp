#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "tta/errors.hpp"
#include "tta/matrix.hpp"
#include "tta/rng.hpp"

namespace tta {

// Minimal differentiable decoder:
//   per-timepoint affine (C -> H) -> BN over the T positions -> affine
//   gamma/beta -> ReLU -> mean-pool over time -> affine (H -> K) -> logits.
struct DecoderParams {
  std::size_t channels = 0;  // C
  std::size_t hidden = 0;    // H
  std::size_t classes = 0;   // K
  Matrix w1;                 // H x C
  std::vector<double> b1;    // H
  std::vector<double> gamma; // H
  std::vector<double> beta;  // H
  Matrix w2;                 // K x H
  std::vector<double> b2;    // K
};

struct BnState {
  std::vector<double> mu;   // running mean, H
  std::vector<double> var;  // running variance, H
  double eps = 3e-5;
};

enum class BnMode { TrainBatchStats, InferenceRunningStats };

struct ForwardCache {
  BnMode mode = BnMode::InferenceRunningStats;
  Matrix input;                    // C x T
  Matrix normalized;               // H x T, pre-affine BN output
  std::vector<char> relu_mask;     // H*T
  std::vector<double> inv_std;     // H, 1/sqrt(var_used + eps)
  std::vector<double> pooled;      // H
  std::vector<double> logits;      // K
  std::vector<double> probs;       // K
  std::vector<double> trial_mean;  // H, stats of e over the T positions
  std::vector<double> trial_var;   // H, biased (1/T)
};

struct DecoderGrads {
  Matrix w1;
  std::vector<double> b1;
  std::vector<double> gamma;
  std::vector<double> beta;
  Matrix w2;
  std::vector<double> b2;
};

enum class UpdateMask { All, BnAffineOnly };

inline std::pair<DecoderParams, BnState> init_decoder(std::size_t c, std::size_t t,
                                                      std::size_t h, std::size_t k,
                                                      std::uint64_t seed) {
  (void)t;
  DecoderParams p;
  p.channels = c;
  p.hidden = h;
  p.classes = k;
  Rng rng(seed);
  p.w1 = Matrix(h, c);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(c));
  for (double& v : p.w1.data) v = rng.uniform(-s1, s1);
  p.b1.assign(h, 0.0);
  for (double& v : p.b1) v = rng.uniform(-s1, s1);
  p.gamma.assign(h, 1.0);
  p.beta.assign(h, 0.0);
  p.w2 = Matrix(k, h);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(h));
  for (double& v : p.w2.data) v = rng.uniform(-s2, s2);
  p.b2.assign(k, 0.0);
  for (double& v : p.b2) v = rng.uniform(-s2, s2);
  BnState bn;
  bn.mu.assign(h, 0.0);
  bn.var.assign(h, 1.0);
  return {std::move(p), bn};
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

inline std::pair<std::vector<double>, ForwardCache> forward(const DecoderParams& p,
                                                            const BnState& bn,
                                                            const Matrix& trial,
                                                            BnMode mode) {
  const std::size_t c = p.channels, h = p.hidden, k = p.classes, t = trial.cols;
  if (trial.rows != c) throw ShapeMismatch("forward: channel count mismatch");
  if (t == 0) throw ShapeMismatch("forward: empty trial");

  ForwardCache cache;
  cache.mode = mode;
  cache.input = trial;

  // e = w1 x + b1
  Matrix e(h, t);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      double s = p.b1[i];
      for (std::size_t m = 0; m < c; ++m) s += p.w1(i, m) * trial(m, j);
      e(i, j) = s;
    }
  }

  cache.trial_mean.assign(h, 0.0);
  cache.trial_var.assign(h, 0.0);
  const double inv_t = 1.0 / static_cast<double>(t);
  for (std::size_t i = 0; i < h; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < t; ++j) s += e(i, j);
    cache.trial_mean[i] = s * inv_t;
    double v = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      const double d = e(i, j) - cache.trial_mean[i];
      v += d * d;
    }
    cache.trial_var[i] = v * inv_t;
  }

  const std::vector<double>& mu =
      mode == BnMode::TrainBatchStats ? cache.trial_mean : bn.mu;
  const std::vector<double>& var =
      mode == BnMode::TrainBatchStats ? cache.trial_var : bn.var;

  cache.inv_std.resize(h);
  for (std::size_t i = 0; i < h; ++i)
    cache.inv_std[i] = 1.0 / std::sqrt(var[i] + bn.eps);

  cache.normalized = Matrix(h, t);
  cache.relu_mask.assign(h * t, 0);
  cache.pooled.assign(h, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    double pool = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      const double nrm = (e(i, j) - mu[i]) * cache.inv_std[i];
      cache.normalized(i, j) = nrm;
      const double z = p.gamma[i] * nrm + p.beta[i];
      if (z > 0.0) {
        cache.relu_mask[i * t + j] = 1;
        pool += z;
      }
    }
    cache.pooled[i] = pool * inv_t;
  }

  cache.logits.assign(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double s = p.b2[i];
    for (std::size_t m = 0; m < h; ++m) s += p.w2(i, m) * cache.pooled[m];
    cache.logits[i] = s;
  }
  cache.probs = softmax(cache.logits);
  return {cache.logits, std::move(cache)};
}

// Exact gradients through the pipeline. In TrainBatchStats mode the BN
// statistics depend on the input and their Jacobian is included; in
// InferenceRunningStats mode mu/var are constants.
inline DecoderGrads backward(const DecoderParams& p, const BnState& bn,
                             const ForwardCache& cache,
                             const std::vector<double>& grad_logits) {
  (void)bn;
  const std::size_t c = p.channels, h = p.hidden, k = p.classes;
  const std::size_t t = cache.input.cols;
  if (grad_logits.size() != k) throw CacheMismatch("backward: grad_logits size");
  if (cache.pooled.size() != h || cache.input.rows != c)
    throw CacheMismatch("backward: cache does not match params");

  DecoderGrads g;
  g.w1 = Matrix(h, c);
  g.b1.assign(h, 0.0);
  g.gamma.assign(h, 0.0);
  g.beta.assign(h, 0.0);
  g.w2 = Matrix(k, h);
  g.b2.assign(k, 0.0);

  // head
  std::vector<double> d_pooled(h, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    g.b2[i] = grad_logits[i];
    for (std::size_t m = 0; m < h; ++m) {
      g.w2(i, m) = grad_logits[i] * cache.pooled[m];
      d_pooled[m] += p.w2(i, m) * grad_logits[i];
    }
  }

  const double inv_t = 1.0 / static_cast<double>(t);
  Matrix d_e(h, t);
  for (std::size_t i = 0; i < h; ++i) {
    // dz through pool and ReLU; then BN affine
    double sum_dn = 0.0, sum_dn_nrm = 0.0;
    std::vector<double> d_nrm(t, 0.0);
    for (std::size_t j = 0; j < t; ++j) {
      if (!cache.relu_mask[i * t + j]) continue;
      const double dz = d_pooled[i] * inv_t;
      g.gamma[i] += dz * cache.normalized(i, j);
      g.beta[i] += dz;
      d_nrm[j] = dz * p.gamma[i];
      sum_dn += d_nrm[j];
      sum_dn_nrm += d_nrm[j] * cache.normalized(i, j);
    }
    if (cache.mode == BnMode::TrainBatchStats) {
      for (std::size_t j = 0; j < t; ++j)
        d_e(i, j) = cache.inv_std[i] *
                    (d_nrm[j] - inv_t * sum_dn -
                     inv_t * cache.normalized(i, j) * sum_dn_nrm);
    } else {
      for (std::size_t j = 0; j < t; ++j) d_e(i, j) = cache.inv_std[i] * d_nrm[j];
    }
  }

  for (std::size_t i = 0; i < h; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < t; ++j) s += d_e(i, j);
    g.b1[i] = s;
    for (std::size_t m = 0; m < c; ++m) {
      double w = 0.0;
      for (std::size_t j = 0; j < t; ++j) w += d_e(i, j) * cache.input(m, j);
      g.w1(i, m) = w;
    }
  }
  return g;
}

inline DecoderParams sgd_step(DecoderParams params, const DecoderGrads& grads,
                              double eta, UpdateMask mask = UpdateMask::All) {
  for (std::size_t i = 0; i < params.gamma.size(); ++i) {
    params.gamma[i] -= eta * grads.gamma[i];
    params.beta[i] -= eta * grads.beta[i];
  }
  if (mask == UpdateMask::All) {
    for (std::size_t i = 0; i < params.w1.data.size(); ++i)
      params.w1.data[i] -= eta * grads.w1.data[i];
    for (std::size_t i = 0; i < params.b1.size(); ++i)
      params.b1[i] -= eta * grads.b1[i];
    for (std::size_t i = 0; i < params.w2.data.size(); ++i)
      params.w2.data[i] -= eta * grads.w2.data[i];
    for (std::size_t i = 0; i < params.b2.size(); ++i)
      params.b2[i] -= eta * grads.b2[i];
  }
  return params;
}

// loss = -log probs[label]; grad wrt logits = probs - onehot(label)
inline std::pair<double, std::vector<double>> cross_entropy(
    const std::vector<double>& probs, std::size_t label) {
  if (label >= probs.size()) throw ShapeMismatch("cross_entropy: label out of range");
  std::vector<double> grad = probs;
  grad[label] -= 1.0;
  return {-std::log(probs[label]), std::move(grad)};
}

inline void accumulate(DecoderGrads& acc, const DecoderGrads& g, double scale = 1.0) {
  for (std::size_t i = 0; i < acc.w1.data.size(); ++i)
    acc.w1.data[i] += scale * g.w1.data[i];
  for (std::size_t i = 0; i < acc.b1.size(); ++i) acc.b1[i] += scale * g.b1[i];
  for (std::size_t i = 0; i < acc.gamma.size(); ++i) {
    acc.gamma[i] += scale * g.gamma[i];
    acc.beta[i] += scale * g.beta[i];
  }
  for (std::size_t i = 0; i < acc.w2.data.size(); ++i)
    acc.w2.data[i] += scale * g.w2.data[i];
  for (std::size_t i = 0; i < acc.b2.size(); ++i) acc.b2[i] += scale * g.b2[i];
}

inline DecoderGrads zero_grads(const DecoderParams& p) {
  DecoderGrads g;
  g.w1 = Matrix(p.hidden, p.channels);
  g.b1.assign(p.hidden, 0.0);
  g.gamma.assign(p.hidden, 0.0);
  g.beta.assign(p.hidden, 0.0);
  g.w2 = Matrix(p.classes, p.hidden);
  g.b2.assign(p.classes, 0.0);
  return g;
}

}  // namespace tta
