#include <cmath>
#include <fstream>
#include <future>
#include <mutex>
#include <ostream>
#include <thread>

#include "cpmlho/errors.hpp"
#include "cpmlho/experiment.hpp"

namespace cpmlho::experiment {

namespace fs = std::filesystem;

data::Corpus load_data(const DataConfig& data) {
  if (data.kind == DataKind::Idx) return data::load_corpus(data.dir);
  return data::make_synthetic_corpus(data.train_count, data.test_count, data.side, data.seed);
}

csv::Table schedule_table(const RunLog& log) {
  csv::Table t{{"step", "epoch", "train_loss", "val_loss"}, {}};
  for (const auto& name : log.lambda_names) t.header.push_back(name);
  t.header.push_back("g");
  t.header.push_back("phi");
  for (const auto& r : log.rows) {
    std::vector<std::string> row{std::to_string(r.step), std::to_string(r.epoch), csv::format_number(r.train_loss),
                                 csv::format_number(r.val_loss)};
    for (double v : r.lambda) row.push_back(csv::format_number(v));
    row.push_back(csv::format_number(r.gap));
    row.push_back(csv::format_number(r.phi));
    t.rows.push_back(std::move(row));
  }
  return t;
}

namespace {

std::vector<std::string> summary_header(const RunLog& log) {
  std::vector<std::string> h{"kind", "trial", "val_loss", "val_accuracy", "test_accuracy", "gap", "inner_steps"};
  h.insert(h.end(), log.lambda_names.begin(), log.lambda_names.end());
  return h;
}

std::vector<std::string> lambda_cells(const std::vector<double>& lambda) {
  std::vector<std::string> out;
  for (double v : lambda) out.push_back(csv::format_number(v));
  return out;
}

}  // namespace

csv::Table summary_table(const RunLog& log) {
  csv::Table t{summary_header(log), {}};
  const Evaluation& f = log.final;
  std::vector<std::string> row{"cpmlho",
                               "",
                               csv::format_number(f.val_loss),
                               csv::format_number(f.val_accuracy),
                               csv::format_optional(f.test_accuracy),
                               csv::format_number(f.gap),
                               std::to_string(log.inner_steps)};
  for (auto& c : lambda_cells(f.lambda)) row.push_back(std::move(c));
  t.rows.push_back(std::move(row));
  return t;
}

csv::Table baseline_table(const RunLog& log) {
  csv::Table t{summary_header(log), {}};
  for (const auto& tr : log.trials) {
    std::vector<std::string> row{"trial", std::to_string(tr.trial), csv::format_number(tr.val_loss),
                                 csv::format_number(tr.val_accuracy), "", "", ""};
    for (auto& c : lambda_cells(tr.lambda)) row.push_back(std::move(c));
    t.rows.push_back(std::move(row));
  }
  const Evaluation& f = log.final;
  std::vector<std::string> best{"best",
                                std::to_string(log.best_trial),
                                csv::format_number(f.val_loss),
                                csv::format_number(f.val_accuracy),
                                csv::format_optional(f.test_accuracy),
                                "",
                                std::to_string(log.inner_steps)};
  for (auto& c : lambda_cells(f.lambda)) best.push_back(std::move(c));
  t.rows.push_back(std::move(best));
  return t;
}

std::vector<std::string> check_schedule(const fs::path& path, const RunLog& log) {
  std::vector<std::string> problems;
  try {
    const csv::Table t = csv::read(path);
    if (t.header != schedule_table(RunLog{log.lambda_names, {}, {}, {}, 0, {}, 0}).header) {
      problems.push_back("schedule header does not match the lambda layout");
    }
    if (t.rows.size() != log.rows.size()) {
      problems.push_back("schedule has " + std::to_string(t.rows.size()) + " rows, the run logged " +
                         std::to_string(log.rows.size()));
    }
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      for (const auto& cell : t.rows[r]) csv::parse_number(cell);
    }
  } catch (const Error& e) {
    problems.push_back(e.what());
  }
  return problems;
}

namespace {

class Progress : public train::TrainObserver {
 public:
  Progress(std::ostream& out, std::mutex& mu, std::string tag) : out_(out), mu_(mu), tag_(std::move(tag)) {}

  void on_row(const ScheduleRow& row) override {
    if (row.epoch == last_epoch_) return;
    last_epoch_ = row.epoch;
    std::lock_guard lock(mu_);
    out_ << tag_ << "epoch " << row.epoch << " step " << row.step << " train_loss " << row.train_loss
         << " val_loss " << row.val_loss << " g " << row.gap << '\n';
  }

 private:
  std::ostream& out_;
  std::mutex& mu_;
  std::string tag_;
  std::size_t last_epoch_ = static_cast<std::size_t>(-1);
};

struct Outcome {
  int status = kOk;
  RunLog log;
  std::string message;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

fs::path output_dir(const ExperimentConfig& config, const CommandOptions& options) {
  if (options.out) return *options.out;
  if (!config.out.empty()) return config.out;
  throw ConfigError("config: no output directory; pass --out or set \"out\"");
}

ExperimentConfig with_overrides(ExperimentConfig config, const CommandOptions& options) {
  if (options.seed) config.train.seed = *options.seed;
  if (options.trials) {
    if (*options.trials == 0) throw ConfigError("config: --trials must be at least 1");
    config.trials = *options.trials;
  }
  return config;
}

// One training or baseline run into `dir`.
Outcome run_into(const ExperimentConfig& config, const fs::path& dir, bool baseline, std::ostream& out, std::mutex& mu,
                 const std::string& tag) {
  Outcome o;
  fs::create_directories(dir);
  ExperimentConfig echo = config;
  echo.out = dir.string();
  write_text(dir / "config.json", dump_config(echo));

  const data::Corpus corpus = load_data(config.data);
  const std::size_t side = corpus.train_source().rows;
  if (corpus.train_source().cols != side) throw DataError("images are not square");
  const nn::ModelSpec spec = resolved_spec(config, side);
  const train::TrainConfig tc = resolved_train(config, spec);
  try {
    train::validate(tc, spec);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  try {
    if (baseline) {
      o.log = train::random_search(spec, tc, corpus, config.trials).log;
    } else {
      Progress progress(out, mu, tag);
      o.log = train::train_cpmlho(spec, tc, corpus, &progress).log;
    }
  } catch (const TrainingDivergedError& e) {
    if (e.partial_log()) {
      o.log = *e.partial_log();
      csv::write(dir / "schedule.csv", schedule_table(o.log));
    }
    o.status = kDiverged;
    o.message = e.what();
    return o;
  }

  csv::write(dir / "schedule.csv", schedule_table(o.log));
  csv::write(dir / "summary.csv", baseline ? baseline_table(o.log) : summary_table(o.log));

  auto problems = check_schedule(dir / "schedule.csv", o.log);
  try {
    const csv::Table summary = csv::read(dir / "summary.csv");
    if (summary.rows.size() != (baseline ? o.log.trials.size() + 1 : 1)) problems.push_back("summary row count");
  } catch (const Error& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    o.status = kValidationFailed;
    for (const auto& p : problems) o.message += (o.message.empty() ? "" : "; ") + p;
  }
  return o;
}

int report(const Outcome& o, std::ostream& log, const std::string& what) {
  if (o.status == kOk) return kOk;
  log << what << ": " << o.message << '\n';
  return o.status;
}

template <class F>
int guarded(std::ostream& log, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    log << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kFailed;
  }
}

void print_final(std::ostream& log, const RunLog& l, const std::string& label) {
  log << label << " val_loss " << l.final.val_loss << " val_accuracy " << l.final.val_accuracy;
  if (!std::isnan(l.final.test_accuracy)) log << " test_accuracy " << l.final.test_accuracy;
  for (std::size_t i = 0; i < l.final.lambda.size() && i < l.lambda_names.size(); ++i) {
    log << ' ' << l.lambda_names[i] << ' ' << l.final.lambda[i];
  }
  log << '\n';
}

}  // namespace

int cmd_train(const fs::path& config_path, const CommandOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig config = with_overrides(load_config(config_path), options);
    const fs::path dir = output_dir(config, options);
    std::mutex mu;
    const Outcome o = run_into(config, dir, false, log, mu, "");
    if (o.status == kOk) print_final(log, o.log, "cpmlho");
    return report(o, log, "train");
  });
}

int cmd_baseline(const fs::path& config_path, const CommandOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig config = with_overrides(load_config(config_path), options);
    const fs::path dir = output_dir(config, options);
    std::mutex mu;
    const Outcome o = run_into(config, dir, true, log, mu, "");
    if (o.status == kOk) print_final(log, o.log, "random search best (trial " + std::to_string(o.log.best_trial) + ")");
    return report(o, log, "baseline");
  });
}

int cmd_sweep(const fs::path& config_path, const std::string& key, const std::vector<double>& values,
              const CommandOptions& options, std::ostream& log) {
  return guarded(log, [&]() -> int {
    if (values.empty()) throw ConfigError("config: --values needs at least one value");
    const ExperimentConfig base = with_overrides(load_config(config_path), options);
    const fs::path root = output_dir(base, options);
    std::vector<ExperimentConfig> configs;
    for (double v : values) configs.push_back(with_value(base, key, v));
    fs::create_directories(root);

    const std::size_t jobs =
        std::max<std::size_t>(1, options.jobs ? options.jobs : std::thread::hardware_concurrency());
    std::vector<Outcome> outcomes(values.size());
    std::vector<fs::path> dirs(values.size());
    std::mutex mu;
    for (std::size_t i = 0; i < values.size(); ++i) {
      dirs[i] = root / (key + "=" + csv::format_number(values[i]));
    }
    // independent runs, each single-threaded, in waves of `jobs`
    for (std::size_t start = 0; start < values.size(); start += jobs) {
      std::vector<std::future<Outcome>> wave;
      for (std::size_t i = start; i < std::min(values.size(), start + jobs); ++i) {
        const std::string tag = "[" + key + "=" + csv::format_number(values[i]) + "] ";
        wave.push_back(std::async(std::launch::async, [&, i, tag] {
          try {
            return run_into(configs[i], dirs[i], false, log, mu, tag);
          } catch (const std::exception& e) {
            return Outcome{kFailed, {}, e.what()};
          }
        }));
      }
      for (std::size_t k = 0; k < wave.size(); ++k) outcomes[start + k] = wave[k].get();
    }

    csv::Table t{{"param", "value", "status", "val_loss", "val_accuracy", "test_accuracy", "gap", "run_dir"}, {}};
    std::vector<std::string> names;
    for (const auto& o : outcomes) {
      if (!o.log.lambda_names.empty()) {
        names = o.log.lambda_names;
        break;
      }
    }
    for (const auto& n : names) t.header.insert(t.header.end() - 1, "final_" + n);
    int status = kOk;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Outcome& o = outcomes[i];
      const bool ok = o.status == kOk;
      std::vector<std::string> row{key, csv::format_number(values[i]), ok ? "ok" : "failed"};
      if (ok) {
        row.push_back(csv::format_number(o.log.final.val_loss));
        row.push_back(csv::format_number(o.log.final.val_accuracy));
        row.push_back(csv::format_optional(o.log.final.test_accuracy));
        row.push_back(csv::format_number(o.log.final.gap));
        for (double v : o.log.final.lambda) row.push_back(csv::format_number(v));
      } else {
        row.resize(row.size() + 4 + names.size());
        log << "sweep " << key << "=" << csv::format_number(values[i]) << ": " << o.message << '\n';
        status = o.status;
      }
      row.push_back(fs::relative(dirs[i], root).string());
      t.rows.push_back(std::move(row));
    }
    csv::write(root / "sensitivity.csv", t);
    if (csv::read(root / "sensitivity.csv").rows.size() != values.size()) return kValidationFailed;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (outcomes[i].status == kOk) print_final(log, outcomes[i].log, key + "=" + csv::format_number(values[i]));
    }
    return status;
  });
}

int cmd_gradcheck(std::uint64_t seed, const fs::path& out, std::ostream& log, const std::vector<check::OpCase>& extra) {
  return guarded(log, [&] {
    const check::SuiteReport report = check::run_suite(seed, extra);
    fs::create_directories(out);
    csv::write(out / "gradcheck.csv", report.table());
    for (const auto& l : report.lines) {
      log << (l.passed ? "pass " : "FAIL ") << l.kind << ' ' << l.name << " max_rel_error " << l.max_rel_error << '\n';
    }
    if (report.passed()) return static_cast<int>(kOk);
    log << "gradcheck failed:";
    for (const auto& name : report.failures()) log << ' ' << name;
    log << '\n';
    return static_cast<int>(kFailed);
  });
}

}  // namespace cpmlho::experiment
