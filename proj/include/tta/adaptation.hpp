#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "tta/alignment.hpp"
#include "tta/decoder.hpp"
#include "tta/errors.hpp"

namespace tta {

struct AdaptConfig {
  double eta = 1e-3;       // online learning rate
  double alpha = 0.7;      // BN EMA weight
  double omega = 500.0;    // reference-update weight
  double lambda_ = 1.2;    // entropy <-> calibrated-CE coefficient
  double eps = 3e-5;       // BN stabilizer
  double a_val = 0.66;     // validation accuracy feeding the soft label
  UpdateMask update_mask = UpdateMask::All;
  bool enable_ea = true;
  bool enable_bn_update = true;
  bool enable_loss_update = true;
  BnMode bn_forward_mode = BnMode::InferenceRunningStats;

  void validate() const {
    if (eta < 0.0) throw ConfigError("eta must be >= 0");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0,1]");
    if (omega <= 0.0) throw ConfigError("omega must be > 0");
    if (lambda_ < 0.0) throw ConfigError("lambda must be >= 0");
    if (eps <= 0.0) throw ConfigError("eps must be > 0");
    if (a_val <= 0.0 || a_val > 1.0) throw ConfigError("a_val must be in (0,1]");
  }
};

struct SoftLabel {
  std::vector<double> probs;
  std::size_t argmax = 0;  // the class carrying a_val
};

struct LossBreakdown {
  double entropy = 0.0;        // L_Ent
  double calibrated_ce = 0.0;  // soft-pseudo-label CE proxy
  double total = 0.0;
  double ell_plus = 0.0;   // -log q(argmax)
  double ell_minus = 0.0;  // mean -log q over the other classes
  double gap = 0.0;        // calibrated_ce - entropy (computable surrogate)
};

// mu_i = (1-a) mu_{i-1} + a mu_e
// var_i = (1-a) var_{i-1} + a var_e + a(1-a)(mu_e - mu_{i-1})^2
inline BnState bn_ema_update(BnState bn, const std::vector<double>& trial_mean,
                             const std::vector<double>& trial_var, double alpha) {
  for (std::size_t i = 0; i < bn.mu.size(); ++i) {
    const double d = trial_mean[i] - bn.mu[i];
    bn.var[i] = (1.0 - alpha) * bn.var[i] + alpha * trial_var[i] +
                alpha * (1.0 - alpha) * d * d;
    bn.mu[i] = (1.0 - alpha) * bn.mu[i] + alpha * trial_mean[i];
  }
  return bn;
}

// Shannon entropy of the prediction, with its exact gradient wrt logits.
inline std::pair<double, std::vector<double>> entropy_loss(
    const std::vector<double>& probs) {
  double loss = 0.0;
  for (double q : probs)
    if (q > 0.0) loss -= q * std::log(q);
  std::vector<double> grad(probs.size(), 0.0);
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const double lq = probs[j] > 0.0 ? std::log(probs[j]) : 0.0;
    grad[j] = -probs[j] * lq - probs[j] * loss;
  }
  return {loss, std::move(grad)};
}

// a_val on the argmax class, (1-a_val)/(K-1) elsewhere. Ties break low.
inline SoftLabel soft_pseudo_label(const std::vector<double>& probs, double a_val) {
  SoftLabel label;
  label.argmax = 0;
  for (std::size_t k = 1; k < probs.size(); ++k)
    if (probs[k] > probs[label.argmax]) label.argmax = k;
  const double rest = (1.0 - a_val) / static_cast<double>(probs.size() - 1);
  label.probs.assign(probs.size(), rest);
  label.probs[label.argmax] = a_val;
  return label;
}

struct CalibratedCeResult {
  double loss = 0.0;
  std::vector<double> grad_logits;
  double ell_plus = 0.0;
  double ell_minus = 0.0;
};

// Soft cross-entropy against the pseudo-label, with the l+/l- decomposition:
// loss = a_val * l+ + (1 - a_val) * l-.
inline CalibratedCeResult calibrated_ce(const std::vector<double>& probs,
                                        const SoftLabel& label) {
  const std::size_t k = probs.size();
  CalibratedCeResult r;
  r.grad_logits.assign(k, 0.0);
  double loss = 0.0;
  double neg_sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double lq = probs[j] > 0.0 ? std::log(probs[j])
                                     : -std::numeric_limits<double>::infinity();
    loss -= label.probs[j] * lq;
    if (j == label.argmax)
      r.ell_plus = -lq;
    else
      neg_sum -= lq;
    r.grad_logits[j] = probs[j] - label.probs[j];
  }
  r.ell_minus = neg_sum / static_cast<double>(k - 1);
  r.loss = loss;
  return r;
}

// L_test = L_Ent + lambda * (calibrated_ce - L_Ent)
inline std::pair<LossBreakdown, std::vector<double>> total_test_loss(
    const std::vector<double>& probs, double a_val, double lambda_) {
  const SoftLabel label = soft_pseudo_label(probs, a_val);
  auto [ent, g_ent] = entropy_loss(probs);
  const CalibratedCeResult ce = calibrated_ce(probs, label);

  LossBreakdown b;
  b.entropy = ent;
  b.calibrated_ce = ce.loss;
  b.total = ent + lambda_ * (ce.loss - ent);
  b.ell_plus = ce.ell_plus;
  b.ell_minus = ce.ell_minus;
  b.gap = ce.loss - ent;

  std::vector<double> grad(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j)
    grad[j] = (1.0 - lambda_) * g_ent[j] + lambda_ * ce.grad_logits[j];
  return {b, std::move(grad)};
}

// Appendix check: proxy bias (a_val - a_test)(l+ - l-).
inline double bias_gap(double ell_plus, double ell_minus, double a_val,
                       double a_test) {
  return (a_val - a_test) * (ell_plus - ell_minus);
}

struct SessionState {
  AlignerState aligner;
  DecoderParams params;
  BnState bn;
  std::size_t skipped_steps = 0;
};

struct AdaptResult {
  std::size_t prediction = 0;
  std::vector<double> probs;
  LossBreakdown loss;
};

// One streamed trial: (1) Euclidean alignment (online when enabled, frozen
// training-reference whitening otherwise), (2) BN statistics EMA update,
// (3) prediction, (4) self-supervised gradient step. The returned prediction
// precedes the gradient step.
inline AdaptResult adapt_step(SessionState& s, const Matrix& trial,
                              const AdaptConfig& cfg) {
  Matrix aligned;
  if (cfg.enable_ea) {
    auto [x, st] = align_online(std::move(s.aligner), trial);
    aligned = std::move(x);
    s.aligner = std::move(st);
  } else {
    aligned = align_offline(s.aligner, trial);
  }

  s.bn.eps = cfg.eps;
  // Trial statistics come from a first pass; the EMA update precedes the
  // normalization so trial i is normalized by the index-i running stats.
  auto [logits0, probe] = forward(s.params, s.bn, aligned, BnMode::TrainBatchStats);
  if (cfg.enable_bn_update)
    s.bn = bn_ema_update(std::move(s.bn), probe.trial_mean, probe.trial_var,
                         cfg.alpha);

  auto [logits, cache] = forward(s.params, s.bn, aligned, cfg.bn_forward_mode);

  AdaptResult out;
  out.probs = cache.probs;
  out.prediction = 0;
  for (std::size_t k = 1; k < cache.probs.size(); ++k)
    if (cache.probs[k] > cache.probs[out.prediction]) out.prediction = k;

  auto [breakdown, grad_logits] = total_test_loss(cache.probs, cfg.a_val, cfg.lambda_);
  out.loss = breakdown;

  if (cfg.enable_loss_update) {
    bool finite = std::isfinite(breakdown.total);
    for (double g : grad_logits)
      if (!std::isfinite(g)) finite = false;
    if (!finite) {
      ++s.skipped_steps;  // keep alignment/BN updates, skip the gradient step
    } else {
      const DecoderGrads grads = backward(s.params, s.bn, cache, grad_logits);
      s.params = sgd_step(std::move(s.params), grads, cfg.eta, cfg.update_mask);
    }
  }
  return out;
}

}  // namespace tta
