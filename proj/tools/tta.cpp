// Command-line driver: generate | train | adapt | ablate | sweep-lambda.
// Exit codes: 0 success, 2 configuration error, 3 I/O error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tta/checkpoint.hpp"
#include "tta/harness.hpp"
#include "tta/synth_data.hpp"

namespace fs = std::filesystem;
using namespace tta;

namespace {

using IniSection = std::vector<std::pair<std::string, std::string>>;
using IniFile = std::map<std::string, IniSection>;

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

IniFile parse_ini(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  IniFile out;
  std::string line, section;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      out[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line is not key = value: " + line);
    out[section].emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

struct RunConfig {
  GeneratorSpec generator;
  TrainConfig train;
  AdaptConfig adapt;
  bool adapt_a_val_override = false;
  std::string corpus_dir = "corpus";
  std::string checkpoint_dir = "checkpoints";
  std::string metrics_dir = "metrics";
  std::vector<std::uint64_t> seeds{1};
  std::size_t held_out = 0;
  std::size_t batch = 1;
  std::string preset = "full";
};

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad numeric value for " + key + ": " + v);
  }
}

std::uint64_t to_count(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("bad count value for " + key + ": " + v);
  }
}

void apply_config(RunConfig& rc, const IniFile& ini) {
  for (const auto& [section, entries] : ini) {
    for (const auto& [key, value] : entries) {
      if (section == "generator") {
        GeneratorSpec& g = rc.generator;
        if (key == "n_subjects") g.n_subjects = to_count(key, value);
        else if (key == "n_trials_per_subject") g.n_trials_per_subject = to_count(key, value);
        else if (key == "channels") g.channels = to_count(key, value);
        else if (key == "samples") g.samples = to_count(key, value);
        else if (key == "classes") g.classes = to_count(key, value);
        else if (key == "subject_shift_strength") g.subject_shift_strength = to_double(key, value);
        else if (key == "class_separation") g.class_separation = to_double(key, value);
        else if (key == "noise_level") g.noise_level = to_double(key, value);
        else if (key == "seed") g.seed = to_count(key, value);
        else throw ConfigError("unknown key [generator] " + key);
      } else if (section == "train") {
        TrainConfig& t = rc.train;
        if (key == "epochs") t.epochs = to_count(key, value);
        else if (key == "batch_size") t.batch_size = to_count(key, value);
        else if (key == "learning_rate") t.learning_rate = to_double(key, value);
        else if (key == "hidden") t.hidden = to_count(key, value);
        else if (key == "seed") t.seed = to_count(key, value);
        else throw ConfigError("unknown key [train] " + key);
      } else if (section == "adapt") {
        AdaptConfig& a = rc.adapt;
        if (key == "eta") a.eta = to_double(key, value);
        else if (key == "alpha") a.alpha = to_double(key, value);
        else if (key == "omega") a.omega = to_double(key, value);
        else if (key == "lambda") a.lambda_ = to_double(key, value);
        else if (key == "eps") a.eps = to_double(key, value);
        else if (key == "a_val") {
          a.a_val = to_double(key, value);
          rc.adapt_a_val_override = true;
        } else if (key == "update_mask") {
          if (value == "all") a.update_mask = UpdateMask::All;
          else if (value == "bn_affine") a.update_mask = UpdateMask::BnAffineOnly;
          else throw ConfigError("update_mask must be all|bn_affine");
        } else if (key == "bn_forward_mode") {
          if (value == "running") a.bn_forward_mode = BnMode::InferenceRunningStats;
          else if (value == "trial") a.bn_forward_mode = BnMode::TrainBatchStats;
          else throw ConfigError("bn_forward_mode must be running|trial");
        } else {
          throw ConfigError("unknown key [adapt] " + key);
        }
      } else if (section == "paths") {
        if (key == "corpus_dir") rc.corpus_dir = value;
        else if (key == "checkpoint_dir") rc.checkpoint_dir = value;
        else if (key == "metrics_dir") rc.metrics_dir = value;
        else throw ConfigError("unknown key [paths] " + key);
      } else if (section == "run") {
        if (key == "seeds") {
          rc.seeds.clear();
          std::istringstream ss(value);
          std::string tok;
          while (ss >> tok) rc.seeds.push_back(to_count(key, tok));
          if (rc.seeds.empty()) throw ConfigError("seed list is empty");
        } else if (key == "held_out") {
          rc.held_out = to_count(key, value);
        } else if (key == "batch") {
          rc.batch = to_count(key, value);
          if (rc.batch == 0) throw ConfigError("batch must be >= 1");
        } else if (key == "preset") {
          rc.preset = value;
        } else {
          throw ConfigError("unknown key [run] " + key);
        }
      } else {
        throw ConfigError("unknown config section [" + section + "]");
      }
    }
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Replay sidecar: the fully resolved configuration next to each output.
void write_echo(const std::string& out_path, const RunConfig& rc,
                const std::string& command) {
  std::ofstream os(out_path + ".echo.txt", std::ios::trunc);
  if (!os) throw IoError("cannot write config echo for " + out_path);
  os << "command = " << command << "\n";
  os << "[generator]\n";
  os << "n_subjects = " << rc.generator.n_subjects << "\n";
  os << "n_trials_per_subject = " << rc.generator.n_trials_per_subject << "\n";
  os << "channels = " << rc.generator.channels << "\n";
  os << "samples = " << rc.generator.samples << "\n";
  os << "classes = " << rc.generator.classes << "\n";
  os << "subject_shift_strength = " << fmt(rc.generator.subject_shift_strength) << "\n";
  os << "class_separation = " << fmt(rc.generator.class_separation) << "\n";
  os << "noise_level = " << fmt(rc.generator.noise_level) << "\n";
  os << "seed = " << rc.generator.seed << "\n";
  os << "[train]\n";
  os << "epochs = " << rc.train.epochs << "\n";
  os << "batch_size = " << rc.train.batch_size << "\n";
  os << "learning_rate = " << fmt(rc.train.learning_rate) << "\n";
  os << "hidden = " << rc.train.hidden << "\n";
  os << "seed = " << rc.train.seed << "\n";
  os << "[adapt]\n";
  os << "eta = " << fmt(rc.adapt.eta) << "\n";
  os << "alpha = " << fmt(rc.adapt.alpha) << "\n";
  os << "omega = " << fmt(rc.adapt.omega) << "\n";
  os << "lambda = " << fmt(rc.adapt.lambda_) << "\n";
  os << "eps = " << fmt(rc.adapt.eps) << "\n";
  os << "a_val = " << fmt(rc.adapt.a_val) << "\n";
  os << "update_mask = "
     << (rc.adapt.update_mask == UpdateMask::All ? "all" : "bn_affine") << "\n";
  os << "bn_forward_mode = "
     << (rc.adapt.bn_forward_mode == BnMode::InferenceRunningStats ? "running"
                                                                   : "trial")
     << "\n";
  os << "[run]\n";
  os << "seeds =";
  for (std::uint64_t s : rc.seeds) os << " " << s;
  os << "\n";
  os << "held_out = " << rc.held_out << "\n";
  os << "batch = " << rc.batch << "\n";
  os << "preset = " << rc.preset << "\n";
}

std::string checkpoint_path(const RunConfig& rc, std::size_t held_out,
                            std::uint64_t seed) {
  return (fs::path(rc.checkpoint_dir) /
          ("fold_s" + std::to_string(held_out) + "_seed" + std::to_string(seed) +
           ".ckpt"))
      .string();
}

int cmd_generate(RunConfig rc) {
  rc.generator.validate();
  const Corpus corpus = generate_corpus(rc.generator);
  write_corpus(rc.corpus_dir, rc.generator, corpus);
  const std::string manifest = (fs::path(rc.corpus_dir) / "manifest.txt").string();
  write_echo(manifest, rc, "generate");
  std::cout << manifest << "\n";
  return 0;
}

int cmd_train(RunConfig rc) {
  const LoadedCorpus corpus = read_corpus(
      (fs::path(rc.corpus_dir) / "manifest.txt").string());
  fs::create_directories(rc.checkpoint_dir);
  for (std::uint64_t seed : rc.seeds) {
    TrainConfig tcfg = rc.train;
    tcfg.seed = seed;
    const TrainedState trained =
        train_offline(loso_split(corpus.sessions, rc.held_out), corpus.sessions,
                      tcfg, rc.adapt.omega, rc.adapt.eps);
    const std::string path = checkpoint_path(rc, rc.held_out, seed);
    write_trained(path, trained);
    RunConfig echo = rc;
    echo.train.seed = seed;
    write_echo(path, echo, "train");
    std::cout << path << " a_val=" << fmt(trained.a_val) << "\n";
  }
  return 0;
}

AdaptConfig resolve_adapt(const RunConfig& rc, double trained_a_val) {
  const std::vector<Preset> presets = standard_presets(rc.adapt);
  AdaptConfig cfg = find_preset(presets, rc.preset).cfg;
  if (!rc.adapt_a_val_override)
    cfg.a_val = std::clamp(trained_a_val, 1e-6, 1.0);
  cfg.validate();
  return cfg;
}

int cmd_adapt(RunConfig rc) {
  const LoadedCorpus corpus = read_corpus(
      (fs::path(rc.corpus_dir) / "manifest.txt").string());
  if (rc.held_out >= corpus.sessions.size())
    throw ConfigError("held_out subject out of range");
  fs::create_directories(rc.metrics_dir);
  for (std::uint64_t seed : rc.seeds) {
    const TrainedState trained = read_trained(checkpoint_path(rc, rc.held_out, seed));
    const AdaptConfig cfg = resolve_adapt(rc, trained.a_val);
    MetricsRecord rec =
        run_online_session(trained, corpus.sessions[rc.held_out], cfg, rc.batch);
    rec.preset = rc.preset;
    rec.seed = seed;
    const std::string path =
        (fs::path(rc.metrics_dir) /
         ("adapt_" + rc.preset + "_s" + std::to_string(rc.held_out) + "_seed" +
          std::to_string(seed) + ".csv"))
            .string();
    write_session_csv(path, rec);
    write_echo(path, rc, "adapt");
    std::cout << path << " accuracy=" << fmt(rec.accuracy) << "\n";
  }
  return 0;
}

int cmd_ablate(RunConfig rc) {
  const LoadedCorpus corpus = read_corpus(
      (fs::path(rc.corpus_dir) / "manifest.txt").string());
  fs::create_directories(rc.metrics_dir);
  std::vector<MetricsRecord> all;
  for (std::uint64_t seed : rc.seeds) {
    TrainConfig tcfg = rc.train;
    tcfg.seed = seed;
    std::vector<MetricsRecord> records = run_ablation_grid(
        corpus.sessions, standard_presets(rc.adapt), tcfg, rc.batch);
    for (MetricsRecord& r : records) r.seed = seed;
    all.insert(all.end(), records.begin(), records.end());
  }
  const std::string path = (fs::path(rc.metrics_dir) / "ablation.csv").string();
  write_aggregate_csv(path, all);
  write_echo(path, rc, "ablate");
  std::cout << path << "\n";
  return 0;
}

int cmd_sweep_lambda(RunConfig rc) {
  const LoadedCorpus corpus = read_corpus(
      (fs::path(rc.corpus_dir) / "manifest.txt").string());
  fs::create_directories(rc.metrics_dir);
  std::vector<MetricsRecord> all;
  for (std::uint64_t seed : rc.seeds) {
    TrainConfig tcfg = rc.train;
    tcfg.seed = seed;
    std::vector<TrainedState> folds(corpus.sessions.size());
    parallel_for(folds.size(), [&](std::size_t s) {
      folds[s] = train_offline(loso_split(corpus.sessions, s), corpus.sessions,
                               tcfg, rc.adapt.omega, rc.adapt.eps);
    });
    // lambda in [0.1, 1.9] step 0.1: 19 rows per subject-seed
    std::vector<MetricsRecord> records(19 * folds.size());
    parallel_for(records.size(), [&](std::size_t j) {
      const std::size_t li = j / folds.size();
      const std::size_t s = j % folds.size();
      AdaptConfig cfg = rc.adapt;
      cfg.enable_ea = cfg.enable_bn_update = cfg.enable_loss_update = true;
      cfg.lambda_ = 0.1 * static_cast<double>(li + 1);
      if (!rc.adapt_a_val_override)
        cfg.a_val = std::clamp(folds[s].a_val, 1e-6, 1.0);
      MetricsRecord rec =
          run_online_session(folds[s], corpus.sessions[s], cfg, rc.batch);
      rec.preset = "lambda_" + fmt(cfg.lambda_);
      rec.subject = s;
      rec.seed = seed;
      records[j] = rec;
    });
    all.insert(all.end(), records.begin(), records.end());
  }
  const std::string path = (fs::path(rc.metrics_dir) / "lambda_sweep.csv").string();
  write_aggregate_csv(path, all);
  write_echo(path, rc, "sweep-lambda");
  std::cout << path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming test-time adaptation engine for multichannel "
               "time-series classification"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::uint64_t> seed_flags;
  std::string preset_flag, out_flag;
  double lambda_flag = -1.0, eta_flag = -1.0;
  long held_out_flag = -1;

  app.add_option("--config", config_path, "Config file (key = value sections)");
  app.add_option("--seed", seed_flags, "Seed (repeatable; overrides config)");
  app.add_option("--preset", preset_flag,
                 "baseline|ea_only|bn_only|loss_only|ea_bn|ea_loss|bn_loss|full|"
                 "adabn|tent");
  app.add_option("--lambda", lambda_flag, "Loss coefficient override");
  app.add_option("--eta", eta_flag, "Online learning-rate override");
  app.add_option("--out", out_flag, "Output directory override (metrics)");
  app.add_option("--held-out", held_out_flag, "Held-out subject override");

  auto* generate = app.add_subcommand("generate", "Write a synthetic corpus");
  auto* train = app.add_subcommand("train", "Offline LOSO fold training");
  auto* adapt = app.add_subcommand("adapt", "Stream the held-out subject");
  auto* ablate = app.add_subcommand("ablate", "Component on/off grid");
  auto* sweep = app.add_subcommand("sweep-lambda", "Lambda grid search");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig rc;
    if (!config_path.empty()) apply_config(rc, parse_ini(config_path));
    if (!seed_flags.empty()) rc.seeds = seed_flags;
    if (!preset_flag.empty()) rc.preset = preset_flag;
    if (lambda_flag >= 0.0) rc.adapt.lambda_ = lambda_flag;
    if (eta_flag >= 0.0) rc.adapt.eta = eta_flag;
    if (!out_flag.empty()) rc.metrics_dir = out_flag;
    if (held_out_flag >= 0) rc.held_out = static_cast<std::size_t>(held_out_flag);
    rc.adapt.validate();

    if (generate->parsed()) return cmd_generate(std::move(rc));
    if (train->parsed()) return cmd_train(std::move(rc));
    if (adapt->parsed()) return cmd_adapt(std::move(rc));
    if (ablate->parsed()) return cmd_ablate(std::move(rc));
    if (sweep->parsed()) return cmd_sweep_lambda(std::move(rc));
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UnknownSubject& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
