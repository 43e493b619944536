#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tta/errors.hpp"
#include "tta/io.hpp"
#include "tta/matrix.hpp"
#include "tta/rng.hpp"

namespace tta {

struct Trial {
  Matrix data;     // C x T
  int label = -1;  // -1 = unlabeled
};

struct GeneratorSpec {
  std::size_t n_subjects = 8;
  std::size_t n_trials_per_subject = 48;
  std::size_t channels = 8;
  std::size_t samples = 128;
  std::size_t classes = 4;
  double subject_shift_strength = 0.5;
  double class_separation = 1.0;
  double noise_level = 0.3;
  std::uint64_t seed = 42;

  void validate() const {
    if (n_subjects < 1 || n_trials_per_subject < 1 || channels < 1 || samples < 1)
      throw ConfigError("generator counts must be >= 1");
    if (classes < 2) throw ConfigError("classes must be >= 2");
    if (subject_shift_strength < 0.0)
      throw ConfigError("subject_shift_strength must be >= 0");
    if (class_separation <= 0.0) throw ConfigError("class_separation must be > 0");
    if (noise_level < 0.0) throw ConfigError("noise_level must be >= 0");
  }
};

struct Session {
  std::size_t subject_id = 0;
  std::vector<Trial> trials;
};

using Corpus = std::vector<Session>;

// Each class owns a sinusoidal source bank with a per-channel burst duty
// cycle; each subject applies a random spatial mixing I + s*E. The duty
// cycle vector codes the class in the temporal value distribution, which
// survives per-feature normalization. Burst amplitude is scaled so each
// channel's per-trial variance is the same for every class, keeping trial
// statistics in agreement with their long-run averages. Class labels
// interleave round-robin so every stream is balanced within +-1.
inline Corpus generate_corpus(const GeneratorSpec& spec) {
  spec.validate();
  const std::size_t c = spec.channels, t = spec.samples, k = spec.classes;

  const double off_env = 0.05;
  Rng class_rng(spec.seed * 0x9E3779B97F4A7C15ull + 1);
  std::vector<std::vector<double>> freq(k, std::vector<double>(c));
  std::vector<std::vector<double>> duty(k, std::vector<double>(c));
  std::vector<std::vector<double>> peak(k, std::vector<double>(c));
  std::size_t code_bits = 1;
  while ((std::size_t{1} << code_bits) < k) ++code_bits;
  const double spread = 0.35 * std::tanh(spec.class_separation);
  for (std::size_t cls = 0; cls < k; ++cls) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      // high enough that even the shortest burst spans a few periods
      freq[cls][ch] = 16.0 + static_cast<double>((cls * 5 + ch * 3) % 13);
      // distinct binary duty code per class, repeated across channels
      const bool hi = (cls >> (ch % code_bits)) & 1;
      duty[cls][ch] = 0.5 + (hi ? spread : -spread);
      // equal per-trial channel variance 1/2 for every class and channel
      const double d = duty[cls][ch];
      peak[cls][ch] = 1.0 / std::sqrt(d + off_env * off_env * (1.0 - d));
    }
  }

  const double two_pi = 6.283185307179586476925286766559;
  Corpus corpus;
  corpus.reserve(spec.n_subjects);
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    Rng rng(spec.seed * 0x9E3779B97F4A7C15ull + 7919 * (s + 1));
    // M_s = exp(A) with A symmetric: channel gains on the diagonal plus
    // cross-channel leakage off it, both scaled by the shift strength
    const double scale = spec.subject_shift_strength / std::sqrt(static_cast<double>(c));
    Matrix sym(c, c);
    for (std::size_t i = 0; i < c; ++i) {
      sym(i, i) = 0.3 * spec.subject_shift_strength * rng.normal();
      for (std::size_t j = i + 1; j < c; ++j) {
        const double v = scale * rng.normal();
        sym(i, j) = v;
        sym(j, i) = v;
      }
    }
    Matrix mix = Matrix::identity(c);
    Matrix term = Matrix::identity(c);
    for (int n = 1; n <= 30; ++n) {
      term = term * sym;
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < term.data.size(); ++i) {
        term.data[i] *= inv_n;
        mix.data[i] += term.data[i];
      }
    }

    Session sess;
    sess.subject_id = s;
    sess.trials.reserve(spec.n_trials_per_subject);
    for (std::size_t n = 0; n < spec.n_trials_per_subject; ++n) {
      const std::size_t cls = n % k;
      Matrix src(c, t);
      for (std::size_t ch = 0; ch < c; ++ch) {
        // one burst per channel per trial, wrapping at the edge
        const std::size_t burst_len = std::max<std::size_t>(
            1, static_cast<std::size_t>(duty[cls][ch] * static_cast<double>(t)));
        const std::size_t burst_start =
            static_cast<std::size_t>(rng.next_u64() % t);
        const double phase = rng.uniform(0.0, two_pi);
        const double w = two_pi * freq[cls][ch] / static_cast<double>(t);
        for (std::size_t j = 0; j < t; ++j) {
          const std::size_t offset = (j + t - burst_start) % t;
          const double env = offset < burst_len ? 1.0 : off_env;
          src(ch, j) =
              env * peak[cls][ch] * std::sin(w * static_cast<double>(j) + phase);
        }
      }
      Trial trial;
      trial.data = mix * src;
      trial.label = static_cast<int>(cls);
      if (spec.noise_level > 0.0)
        for (double& v : trial.data.data) v += spec.noise_level * rng.normal();
      sess.trials.push_back(std::move(trial));
    }
    corpus.push_back(std::move(sess));
  }
  return corpus;
}

// TTA1 trial file: magic "TTA1", u32 version, u32 C, u32 T, i32 label
// (-1 = none), then C*T little-endian doubles channel-major.
inline constexpr char kTrialMagic[4] = {'T', 'T', 'A', '1'};
inline constexpr std::uint32_t kTrialVersion = 1;

inline void write_trial_file(const std::string& path, const Trial& trial) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  io::write_magic(os, kTrialMagic);
  io::write_u32(os, kTrialVersion);
  io::write_u32(os, static_cast<std::uint32_t>(trial.data.rows));
  io::write_u32(os, static_cast<std::uint32_t>(trial.data.cols));
  io::write_i32(os, trial.label);
  io::write_f64_block(os, trial.data.data);
  if (!os) throw IoError("write failed: " + path);
}

inline Trial read_trial_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  io::expect_magic(is, kTrialMagic, path);
  const std::uint32_t version = io::read_u32(is);
  if (version != kTrialVersion) throw FormatError("unsupported trial version");
  const std::uint32_t c = io::read_u32(is), t = io::read_u32(is);
  Trial trial;
  trial.label = io::read_i32(is);
  trial.data = Matrix(c, t);
  io::read_f64_block(is, trial.data.data);
  if (!is) throw FormatError("truncated trial file: " + path);
  return trial;
}

namespace detail {
inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

// Manifest: [generator] key = value block, then one "subject label path"
// line per trial under [trials]. Paths are relative to the manifest.
inline void write_corpus(const std::string& dir, const GeneratorSpec& spec,
                         const Corpus& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream manifest;
  manifest << "[generator]\n";
  manifest << "n_subjects = " << spec.n_subjects << "\n";
  manifest << "n_trials_per_subject = " << spec.n_trials_per_subject << "\n";
  manifest << "channels = " << spec.channels << "\n";
  manifest << "samples = " << spec.samples << "\n";
  manifest << "classes = " << spec.classes << "\n";
  manifest << "subject_shift_strength = " << detail::fmt_double(spec.subject_shift_strength) << "\n";
  manifest << "class_separation = " << detail::fmt_double(spec.class_separation) << "\n";
  manifest << "noise_level = " << detail::fmt_double(spec.noise_level) << "\n";
  manifest << "seed = " << spec.seed << "\n";
  manifest << "[trials]\n";
  char name[64];
  for (const Session& sess : corpus) {
    const std::string subdir = "s" + std::to_string(sess.subject_id);
    fs::create_directories(fs::path(dir) / subdir);
    for (std::size_t i = 0; i < sess.trials.size(); ++i) {
      std::snprintf(name, sizeof name, "t%04zu.tta", i);
      const std::string rel = subdir + "/" + name;
      write_trial_file((fs::path(dir) / rel).string(), sess.trials[i]);
      manifest << sess.subject_id << " " << sess.trials[i].label << " " << rel << "\n";
    }
  }
  std::ofstream os(fs::path(dir) / "manifest.txt", std::ios::trunc);
  if (!os) throw IoError("cannot write manifest in " + dir);
  os << manifest.str();
}

struct LoadedCorpus {
  GeneratorSpec spec;
  Corpus sessions;
};

inline LoadedCorpus read_corpus(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest: " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();

  LoadedCorpus out;
  std::string line, section;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      section = line;
      continue;
    }
    if (section == "[generator]") {
      std::istringstream ls(line);
      std::string key, eq, value;
      ls >> key >> eq >> value;
      if (eq != "=") throw FormatError("bad manifest line: " + line);
      GeneratorSpec& g = out.spec;
      if (key == "n_subjects") g.n_subjects = std::stoul(value);
      else if (key == "n_trials_per_subject") g.n_trials_per_subject = std::stoul(value);
      else if (key == "channels") g.channels = std::stoul(value);
      else if (key == "samples") g.samples = std::stoul(value);
      else if (key == "classes") g.classes = std::stoul(value);
      else if (key == "subject_shift_strength") g.subject_shift_strength = std::stod(value);
      else if (key == "class_separation") g.class_separation = std::stod(value);
      else if (key == "noise_level") g.noise_level = std::stod(value);
      else if (key == "seed") g.seed = std::stoull(value);
      else throw FormatError("unknown manifest key: " + key);
    } else if (section == "[trials]") {
      std::istringstream ls(line);
      std::size_t subject;
      int label;
      std::string rel;
      if (!(ls >> subject >> label >> rel))
        throw FormatError("bad trial line: " + line);
      while (out.sessions.size() <= subject) {
        Session s;
        s.subject_id = out.sessions.size();
        out.sessions.push_back(std::move(s));
      }
      Trial trial = read_trial_file((base / rel).string());
      if (trial.label != label) throw FormatError("label mismatch for " + rel);
      out.sessions[subject].trials.push_back(std::move(trial));
    } else {
      throw FormatError("manifest content outside a known section: " + line);
    }
  }
  if (out.sessions.empty()) throw EmptyCorpus("manifest lists no trials");
  return out;
}

}  // namespace tta
