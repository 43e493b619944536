#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tta/adaptation.hpp"
#include "tta/checkpoint.hpp"
#include "tta/synth_data.hpp"

namespace tta {

struct SubjectSlices {
  std::size_t subject_id = 0;
  std::size_t n_train = 0;  // leading 80%; the trailing trials are validation
};

struct SplitPlan {
  std::size_t held_out = 0;
  std::vector<SubjectSlices> train_subjects;
};

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 16;
  double learning_rate = 0.3;
  std::size_t hidden = 16;
  std::uint64_t seed = 1;

  void validate() const {
    // epochs == 0 is allowed (untrained decoder)
    if (batch_size == 0) throw ConfigError("batch_size must be > 0");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
    if (hidden == 0) throw ConfigError("hidden must be > 0");
  }
};

struct TrialMetrics {
  std::size_t trial_idx = 0;
  bool correct = false;
  LossBreakdown loss;
  double prediction_entropy = 0.0;
};

struct MetricsRecord {
  std::vector<TrialMetrics> trials;
  double accuracy = 0.0;  // A_test
  double a_val = 0.0;
  double ece = 0.0;
  std::size_t floor_events = 0;
  std::size_t skipped_steps = 0;
  std::string preset;
  std::size_t subject = 0;
  std::uint64_t seed = 0;
};

inline SplitPlan loso_split(const Corpus& corpus, std::size_t held_out) {
  if (held_out >= corpus.size()) throw UnknownSubject("loso_split: no such subject");
  SplitPlan plan;
  plan.held_out = held_out;
  for (const Session& s : corpus) {
    if (s.subject_id == held_out) continue;
    SubjectSlices sl;
    sl.subject_id = s.subject_id;
    sl.n_train = (s.trials.size() * 4) / 5;  // last 20% is validation
    plan.train_subjects.push_back(sl);
  }
  return plan;
}

// ECE over equal-width confidence bins on (0, 1]; empty bins contribute 0.
inline double compute_ece(const std::vector<std::vector<double>>& probs_list,
                          const std::vector<int>& labels, std::size_t n_bins = 10) {
  if (probs_list.size() != labels.size())
    throw ShapeMismatch("compute_ece: length mismatch");
  if (n_bins < 1) throw ConfigError("compute_ece: n_bins must be >= 1");
  if (probs_list.empty()) return 0.0;
  std::vector<double> conf_sum(n_bins, 0.0), acc_sum(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  for (std::size_t i = 0; i < probs_list.size(); ++i) {
    std::size_t pred = 0;
    for (std::size_t k = 1; k < probs_list[i].size(); ++k)
      if (probs_list[i][k] > probs_list[i][pred]) pred = k;
    const double conf = probs_list[i][pred];
    std::size_t bin = 0;
    if (conf > 0.0) {
      bin = static_cast<std::size_t>(
          std::ceil(conf * static_cast<double>(n_bins))) - 1;
      bin = std::min(bin, n_bins - 1);
    }
    conf_sum[bin] += conf;
    acc_sum[bin] += (static_cast<int>(pred) == labels[i]) ? 1.0 : 0.0;
    ++count[bin];
  }
  const double n = static_cast<double>(probs_list.size());
  double ece = 0.0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const double c = static_cast<double>(count[b]);
    ece += (c / n) * std::abs(acc_sum[b] / c - conf_sum[b] / c);
  }
  return ece;
}

// Offline phase: fit the alignment reference on the training slices, align
// everything, train the decoder by mini-batch SGD, then measure a_val on the
// aligned validation slices with running statistics.
inline TrainedState train_offline(const SplitPlan& split, const Corpus& corpus,
                                  const TrainConfig& tcfg, double omega = 500.0,
                                  double bn_eps = 3e-5) {
  tcfg.validate();
  std::vector<Matrix> train_x;
  std::vector<int> train_y;
  std::vector<const Trial*> val;
  for (const SubjectSlices& sl : split.train_subjects) {
    const Session& sess = corpus[sl.subject_id];
    for (std::size_t i = 0; i < sess.trials.size(); ++i) {
      if (i < sl.n_train) {
        train_x.push_back(sess.trials[i].data);
        train_y.push_back(sess.trials[i].label);
      } else {
        val.push_back(&sess.trials[i]);
      }
    }
  }
  if (train_x.empty()) throw EmptyCorpus("train_offline: empty train set");

  TrainedState out;
  out.aligner = fit_reference(train_x, omega);
  for (Matrix& x : train_x) x = align_offline(out.aligner, x);

  const std::size_t c = train_x[0].rows, t = train_x[0].cols;
  std::size_t k = 0;
  for (int y : train_y) k = std::max(k, static_cast<std::size_t>(y) + 1);
  auto [params, bn] = init_decoder(c, t, tcfg.hidden, k, tcfg.seed);
  bn.eps = bn_eps;

  Rng shuffle_rng(tcfg.seed * 0x9E3779B97F4A7C15ull + 13);
  std::vector<std::size_t> order(train_x.size());
  std::iota(order.begin(), order.end(), 0);
  const double bn_momentum = 0.1;

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t stop = std::min(start + tcfg.batch_size, order.size());
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      DecoderGrads acc = zero_grads(params);
      std::vector<double> batch_mean(params.hidden, 0.0);
      std::vector<double> batch_var(params.hidden, 0.0);
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t idx = order[i];
        auto [logits, cache] =
            forward(params, bn, train_x[idx], BnMode::TrainBatchStats);
        auto [loss, grad_logits] =
            cross_entropy(cache.probs, static_cast<std::size_t>(train_y[idx]));
        (void)loss;
        accumulate(acc, backward(params, bn, cache, grad_logits), inv_b);
        for (std::size_t h = 0; h < params.hidden; ++h) {
          batch_mean[h] += inv_b * cache.trial_mean[h];
          batch_var[h] += inv_b * cache.trial_var[h];
        }
      }
      params = sgd_step(std::move(params), acc, tcfg.learning_rate);
      for (std::size_t h = 0; h < params.hidden; ++h) {
        bn.mu[h] = (1.0 - bn_momentum) * bn.mu[h] + bn_momentum * batch_mean[h];
        bn.var[h] = (1.0 - bn_momentum) * bn.var[h] + bn_momentum * batch_var[h];
      }
    }
  }

  std::size_t correct = 0;
  for (const Trial* trial : val) {
    const Matrix aligned = align_offline(out.aligner, trial->data);
    auto [logits, cache] = forward(params, bn, aligned, BnMode::InferenceRunningStats);
    std::size_t pred = 0;
    for (std::size_t j = 1; j < cache.probs.size(); ++j)
      if (cache.probs[j] > cache.probs[pred]) pred = j;
    if (static_cast<int>(pred) == trial->label) ++correct;
  }
  out.a_val = val.empty() ? 0.0
                          : static_cast<double>(correct) / static_cast<double>(val.size());
  out.params = std::move(params);
  out.bn = std::move(bn);
  return out;
}

// Streams a held-out session through the adaptation engine. buffer > 1
// accumulates the gradient application over that many trials (Euclidean
// alignment and BN statistic updates stay per-trial); buffer == 1 is the
// plain single-trial path.
inline MetricsRecord run_online_session(const TrainedState& trained,
                                        const Session& session,
                                        const AdaptConfig& cfg,
                                        std::size_t buffer = 1) {
  if (buffer == 0) throw ConfigError("run_online_session: buffer must be >= 1");
  SessionState s;
  s.aligner = trained.aligner;
  s.aligner.omega = cfg.omega;
  s.params = trained.params;
  s.bn = trained.bn;
  s.bn.eps = cfg.eps;

  MetricsRecord rec;
  rec.a_val = cfg.a_val;
  rec.subject = session.subject_id;
  std::vector<std::vector<double>> probs_list;
  std::vector<int> labels;
  std::size_t correct = 0;

  if (buffer == 1) {
    for (std::size_t i = 0; i < session.trials.size(); ++i) {
      const Trial& trial = session.trials[i];
      const AdaptResult r = adapt_step(s, trial.data, cfg);
      TrialMetrics m;
      m.trial_idx = i;
      m.correct = static_cast<int>(r.prediction) == trial.label;
      m.loss = r.loss;
      m.prediction_entropy = r.loss.entropy;
      if (m.correct) ++correct;
      rec.trials.push_back(m);
      probs_list.push_back(r.probs);
      labels.push_back(trial.label);
    }
  } else {
    DecoderGrads acc = zero_grads(s.params);
    std::size_t pending = 0;
    auto flush = [&]() {
      if (pending == 0) return;
      const double inv = 1.0 / static_cast<double>(pending);
      if (cfg.enable_loss_update) {
        DecoderGrads step = zero_grads(s.params);
        accumulate(step, acc, inv);
        s.params = sgd_step(std::move(s.params), step, cfg.eta, cfg.update_mask);
      }
      acc = zero_grads(s.params);
      pending = 0;
    };
    for (std::size_t i = 0; i < session.trials.size(); ++i) {
      const Trial& trial = session.trials[i];
      Matrix aligned;
      if (cfg.enable_ea) {
        auto [x, st] = align_online(std::move(s.aligner), trial.data);
        aligned = std::move(x);
        s.aligner = std::move(st);
      } else {
        aligned = align_offline(s.aligner, trial.data);
      }
      if (cfg.enable_bn_update) {
        auto [plog, probe] = forward(s.params, s.bn, aligned, cfg.bn_forward_mode);
        s.bn = bn_ema_update(std::move(s.bn), probe.trial_mean, probe.trial_var,
                             cfg.alpha);
      }
      auto [logits, cache] = forward(s.params, s.bn, aligned, cfg.bn_forward_mode);
      std::size_t pred = 0;
      for (std::size_t j = 1; j < cache.probs.size(); ++j)
        if (cache.probs[j] > cache.probs[pred]) pred = j;
      auto [breakdown, grad_logits] =
          total_test_loss(cache.probs, cfg.a_val, cfg.lambda_);
      bool finite = std::isfinite(breakdown.total);
      for (double g : grad_logits)
        if (!std::isfinite(g)) finite = false;
      if (finite) {
        accumulate(acc, backward(s.params, s.bn, cache, grad_logits));
      } else {
        ++s.skipped_steps;
      }
      ++pending;
      if (pending == buffer) flush();

      TrialMetrics m;
      m.trial_idx = i;
      m.correct = static_cast<int>(pred) == trial.label;
      m.loss = breakdown;
      m.prediction_entropy = breakdown.entropy;
      if (m.correct) ++correct;
      rec.trials.push_back(m);
      probs_list.push_back(cache.probs);
      labels.push_back(trial.label);
    }
    flush();
  }

  rec.accuracy = rec.trials.empty()
                     ? 0.0
                     : static_cast<double>(correct) / static_cast<double>(rec.trials.size());
  rec.ece = compute_ece(probs_list, labels);
  rec.floor_events = s.aligner.floor_events;
  rec.skipped_steps = s.skipped_steps;
  return rec;
}

struct Preset {
  std::string name;
  AdaptConfig cfg;
};

// Ablation presets: the 8 EA/BN/loss on-off combinations plus the AdaBN-like
// and Tent-like configurations realized from this engine's own components.
inline std::vector<Preset> standard_presets(const AdaptConfig& base) {
  auto with = [&](bool ea, bool bn, bool loss) {
    AdaptConfig c = base;
    c.enable_ea = ea;
    c.enable_bn_update = bn;
    c.enable_loss_update = loss;
    return c;
  };
  std::vector<Preset> out;
  out.push_back({"baseline", with(false, false, false)});
  out.push_back({"ea_only", with(true, false, false)});
  out.push_back({"bn_only", with(false, true, false)});
  out.push_back({"loss_only", with(false, false, true)});
  out.push_back({"ea_bn", with(true, true, false)});
  out.push_back({"ea_loss", with(true, false, true)});
  out.push_back({"bn_loss", with(false, true, true)});
  out.push_back({"full", with(true, true, true)});
  out.push_back({"adabn", with(false, true, false)});
  AdaptConfig tent = with(false, true, true);
  tent.lambda_ = 0.0;
  tent.update_mask = UpdateMask::BnAffineOnly;
  out.push_back({"tent", tent});
  return out;
}

inline Preset find_preset(const std::vector<Preset>& presets, const std::string& name) {
  for (const Preset& p : presets)
    if (p.name == name) return p;
  throw ConfigError("unknown preset: " + name);
}

inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::thread::hardware_concurrency();
  if (const char* env = std::getenv("TTA_THREADS")) {
    const long v = std::atol(env);
    if (v >= 1) n = static_cast<std::size_t>(v);
  }
  if (n == 0) n = 1;
  return std::min(n, jobs);
}

// Deterministic parallel map: results land by job index.
template <typename Fn>
inline void parallel_for(std::size_t jobs, Fn&& fn) {
  const std::size_t workers = worker_count(jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs) return;
        fn(i);
      }
    });
  }
  for (std::thread& th : pool) th.join();
}

// One record per (preset x held-out subject); each fold trains once and is
// shared by every preset.
inline std::vector<MetricsRecord> run_ablation_grid(const Corpus& corpus,
                                                    const std::vector<Preset>& presets,
                                                    const TrainConfig& tcfg,
                                                    std::size_t buffer = 1) {
  if (presets.empty()) throw ConfigError("run_ablation_grid: no presets");
  std::vector<TrainedState> folds(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t s) {
    folds[s] = train_offline(loso_split(corpus, s), corpus, tcfg,
                             presets.front().cfg.omega, presets.front().cfg.eps);
  });
  std::vector<MetricsRecord> records(presets.size() * corpus.size());
  parallel_for(records.size(), [&](std::size_t j) {
    const std::size_t pi = j / corpus.size();
    const std::size_t s = j % corpus.size();
    AdaptConfig cfg = presets[pi].cfg;
    cfg.a_val = std::clamp(folds[s].a_val, 1e-6, 1.0);
    MetricsRecord rec = run_online_session(folds[s], corpus[s], cfg, buffer);
    rec.preset = presets[pi].name;
    rec.subject = s;
    records[j] = rec;
  });
  return records;
}

namespace csvfmt {
inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace csvfmt

inline void write_session_csv(const std::string& path, const MetricsRecord& rec) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << "trial_idx,correct,entropy,calibrated_ce,total_loss,running_acc\n";
  std::size_t correct = 0;
  for (const TrialMetrics& m : rec.trials) {
    if (m.correct) ++correct;
    const double running =
        static_cast<double>(correct) / static_cast<double>(m.trial_idx + 1);
    os << m.trial_idx << "," << (m.correct ? 1 : 0) << ","
       << csvfmt::num(m.loss.entropy) << "," << csvfmt::num(m.loss.calibrated_ce)
       << "," << csvfmt::num(m.loss.total) << "," << csvfmt::num(running) << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

inline void write_aggregate_csv(const std::string& path,
                                const std::vector<MetricsRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << "preset,subject,seed,accuracy,a_val,ece,floor_events,skipped_steps\n";
  for (const MetricsRecord& r : records) {
    os << r.preset << "," << r.subject << "," << r.seed << ","
       << csvfmt::num(r.accuracy) << "," << csvfmt::num(r.a_val) << ","
       << csvfmt::num(r.ece) << "," << r.floor_events << "," << r.skipped_steps
       << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace tta
