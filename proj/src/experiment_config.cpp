#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cpmlho/errors.hpp"
#include "cpmlho/experiment.hpp"

namespace cpmlho::experiment {

namespace {

using json = nlohmann::ordered_json;

std::size_t line_of(const std::string& text, std::size_t pos) {
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

// Best-effort line of `section.key` in the source text.
std::string where(const std::string& text, const std::string& section, const std::string& key) {
  std::size_t from = 0;
  if (!section.empty()) {
    from = text.find('"' + section + '"');
    if (from == std::string::npos) return {};
  }
  const std::size_t pos = text.find('"' + key + '"', from);
  if (pos == std::string::npos) return {};
  return " (line " + std::to_string(line_of(text, pos)) + ")";
}

class Section {
 public:
  Section(const std::string& text, std::string name, const json& obj) : text_(text), name_(std::move(name)), obj_(obj) {
    if (!obj_.is_object()) fail_key("", "expected an object");
  }

  template <class F>
  void field(const std::string& key, F&& assign) {
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    seen_.insert(key);
    try {
      assign(*it);
    } catch (const ConfigError& e) {
      if (std::string(e.what()).rfind("config: ", 0) == 0) throw;
      fail_key(key, e.what());
    } catch (const Error& e) {
      fail_key(key, e.what());
    }
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError("config: unknown key '" + path(it.key()) + "'" + where(text_, name_, it.key()));
      }
    }
  }

  [[noreturn]] void fail_key(const std::string& key, const std::string& what) const {
    const std::string line = key.empty() ? where(text_, "", name_) : where(text_, name_, key);
    throw ConfigError("config: " + (key.empty() ? name_ : path(key)) + line + ": " + what);
  }

  std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

 private:
  const std::string& text_;
  std::string name_;
  const json& obj_;
  std::set<std::string> seen_;
};

double number(const json& v) {
  if (!v.is_number()) throw ConfigError("expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError("expected a finite number");
  return d;
}

std::uint64_t count(const json& v) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer()) throw ConfigError("expected a nonnegative integer");
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d >= 0.0 && d == std::floor(d) && d < 1.8e19) return static_cast<std::uint64_t>(d);
  }
  throw ConfigError("expected a nonnegative integer");
}

bool boolean(const json& v) {
  if (!v.is_boolean()) throw ConfigError("expected true or false");
  return v.get<bool>();
}

std::string string(const json& v) {
  if (!v.is_string()) throw ConfigError("expected a string");
  return v.get<std::string>();
}

json to_json(const ExperimentConfig& c) {
  const nn::ModelSpec& m = c.model;
  const train::TrainConfig& t = c.train;
  json j;
  j["model"] = {{"arch", nn::to_string(m.arch)}, {"hidden", m.hidden}, {"conv1", m.conv1}, {"conv2", m.conv2}};
  j["data"] = {{"kind", c.data.kind == DataKind::Idx ? "idx" : "synthetic"},
               {"dir", c.data.dir},
               {"train_count", c.data.train_count},
               {"test_count", c.data.test_count},
               {"side", c.data.side},
               {"seed", c.data.seed}};
  j["train"] = {{"lr_we", t.lr_we},
                {"lr_wh", t.lr_wh},
                {"lr_lambda", t.lr_lambda},
                {"theta", t.theta},
                {"theta_mode", train::to_string(t.theta_mode)},
                {"disable_cuts", t.disable_cuts},
                {"hypernet", t.hypernet},
                {"gate_std", t.gate_std},
                {"inner_steps_per_outer", t.inner_steps_per_outer},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"max_inner_steps", t.max_inner_steps},
                {"loss", nn::to_string(t.loss)},
                {"seed", t.seed},
                {"split_seed", t.split_seed},
                {"val_fraction", t.val_fraction},
                {"grad_clip", t.grad_clip},
                {"temperature", t.temperature},
                {"holes_max", t.holes_max},
                {"length_max", t.length_max},
                {"fixed_lambda", t.fixed_lambda},
                {"eval_batch", t.eval_batch}};
  j["penalty"] = {{"mu", t.penalty.mu},
                  {"eps", t.penalty.eps},
                  {"refresh_steps", t.penalty.refresh_steps},
                  {"live_lambda", t.penalty.live_lambda}};
  json lam = json::object();
  const auto specs = m.hyper_specs(t.holes_max, t.length_max);
  for (const auto& s : specs) lam[s.name] = c.init_lambda.at(s.name);
  j["init_lambda"] = lam;
  j["baseline"] = {{"trials", c.trials}};
  j["out"] = c.out;
  return j;
}

ExperimentConfig from_json(const json& root, const std::string& text) {
  ExperimentConfig c;
  Section top(text, "", root);
  top.field("model", [&](const json& v) {
    Section s(text, "model", v);
    std::string arch = "mlp";
    std::vector<std::size_t> hidden = c.model.hidden;
    std::size_t conv1 = c.model.conv1, conv2 = c.model.conv2;
    s.field("arch", [&](const json& x) {
      arch = string(x);
      if (arch != "mlp" && arch != "cnn") throw ConfigError("expected \"mlp\" or \"cnn\"");
    });
    s.field("hidden", [&](const json& x) {
      if (!x.is_array() || x.size() != 2) throw ConfigError("expected two layer widths");
      hidden = {count(x[0]), count(x[1])};
      if (hidden[0] == 0 || hidden[1] == 0) throw ConfigError("layer widths must be positive");
    });
    s.field("conv1", [&](const json& x) { conv1 = count(x); });
    s.field("conv2", [&](const json& x) { conv2 = count(x); });
    s.finish();
    c.model = arch == "mlp" ? nn::ModelSpec::mlp(hidden) : nn::ModelSpec::cnn(conv1, conv2);
    c.model.hidden = hidden;
  });
  top.field("data", [&](const json& v) {
    Section s(text, "data", v);
    DataConfig& d = c.data;
    s.field("kind", [&](const json& x) {
      const std::string k = string(x);
      if (k != "idx" && k != "synthetic") throw ConfigError("expected \"idx\" or \"synthetic\"");
      d.kind = k == "idx" ? DataKind::Idx : DataKind::Synthetic;
    });
    s.field("dir", [&](const json& x) { d.dir = string(x); });
    s.field("train_count", [&](const json& x) { d.train_count = count(x); });
    s.field("test_count", [&](const json& x) { d.test_count = count(x); });
    s.field("side", [&](const json& x) { d.side = count(x); });
    s.field("seed", [&](const json& x) { d.seed = count(x); });
    s.finish();
    if (d.kind == DataKind::Idx && d.dir.empty()) s.fail_key("dir", "required for idx data");
  });
  top.field("train", [&](const json& v) {
    Section s(text, "train", v);
    train::TrainConfig& t = c.train;
    s.field("lr_we", [&](const json& x) { t.lr_we = number(x); });
    s.field("lr_wh", [&](const json& x) { t.lr_wh = number(x); });
    s.field("lr_lambda", [&](const json& x) { t.lr_lambda = number(x); });
    s.field("theta", [&](const json& x) { t.theta = number(x); });
    s.field("theta_mode", [&](const json& x) { t.theta_mode = train::theta_mode_from_string(string(x)); });
    s.field("disable_cuts", [&](const json& x) { t.disable_cuts = boolean(x); });
    s.field("hypernet", [&](const json& x) { t.hypernet = boolean(x); });
    s.field("gate_std", [&](const json& x) { t.gate_std = number(x); });
    s.field("inner_steps_per_outer", [&](const json& x) { t.inner_steps_per_outer = count(x); });
    s.field("epochs", [&](const json& x) { t.epochs = count(x); });
    s.field("batch_size", [&](const json& x) { t.batch_size = count(x); });
    s.field("max_inner_steps", [&](const json& x) { t.max_inner_steps = count(x); });
    s.field("loss", [&](const json& x) {
      const std::string k = string(x);
      if (k != "cross_entropy" && k != "squared_error") throw ConfigError("expected \"cross_entropy\" or \"squared_error\"");
      t.loss = k == "cross_entropy" ? nn::LossKind::CrossEntropy : nn::LossKind::SquaredError;
    });
    s.field("seed", [&](const json& x) { t.seed = count(x); });
    s.field("split_seed", [&](const json& x) { t.split_seed = count(x); });
    s.field("val_fraction", [&](const json& x) { t.val_fraction = number(x); });
    s.field("grad_clip", [&](const json& x) { t.grad_clip = number(x); });
    s.field("temperature", [&](const json& x) { t.temperature = number(x); });
    s.field("holes_max", [&](const json& x) { t.holes_max = number(x); });
    s.field("length_max", [&](const json& x) { t.length_max = number(x); });
    s.field("fixed_lambda", [&](const json& x) { t.fixed_lambda = boolean(x); });
    s.field("eval_batch", [&](const json& x) { t.eval_batch = count(x); });
    s.finish();
  });
  top.field("penalty", [&](const json& v) {
    Section s(text, "penalty", v);
    cp::PenaltyConfig& p = c.train.penalty;
    s.field("mu", [&](const json& x) { p.mu = number(x); });
    s.field("eps", [&](const json& x) { p.eps = number(x); });
    s.field("refresh_steps", [&](const json& x) { p.refresh_steps = count(x); });
    s.field("live_lambda", [&](const json& x) { p.live_lambda = boolean(x); });
    s.finish();
  });
  top.field("baseline", [&](const json& v) {
    Section s(text, "baseline", v);
    s.field("trials", [&](const json& x) {
      c.trials = count(x);
      if (c.trials == 0) throw ConfigError("needs at least one trial");
    });
    s.finish();
  });
  top.field("out", [&](const json& v) { c.out = string(v); });

  // lambda names depend on the model, so this section goes last
  const auto specs = c.model.hyper_specs(c.train.holes_max, c.train.length_max);
  const auto defaults = train::default_lambda(c.model);
  for (std::size_t i = 0; i < specs.size(); ++i) c.init_lambda[specs[i].name] = defaults[i];
  top.field("init_lambda", [&](const json& v) {
    Section s(text, "init_lambda", v);
    for (const auto& spec : specs) {
      s.field(spec.name, [&](const json& x) {
        const double value = number(x);
        if (!(value > 0.0 && value < spec.upper)) {
          throw ConfigError("must lie strictly between 0 and " + csv::format_number(spec.upper));
        }
        c.init_lambda[spec.name] = value;
      });
    }
    s.finish();
  });
  top.finish();

  try {
    const nn::ModelSpec spec = resolved_spec(c, c.data.side);
    train::validate(resolved_train(c, spec), spec);
    if (c.data.kind == DataKind::Synthetic && (c.data.train_count == 0 || c.data.test_count == 0)) {
      throw ConfigError("synthetic data needs train_count and test_count above zero");
    }
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    throw ConfigError(what.rfind("config: ", 0) == 0 ? what : "config: " + what);
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t byte = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    throw ConfigError("config: syntax error at line " + std::to_string(line_of(text, byte)) + ": " + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: the document must be a JSON object");
  return from_json(root, text);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    std::string what = e.what();
    throw ConfigError(path.string() + ": " + what.substr(what.rfind("config: ", 0) == 0 ? 8 : 0));
  }
}

std::string dump_config(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

std::vector<std::string> sweepable_keys(const ExperimentConfig& config) {
  std::vector<std::string> keys;
  const json j = to_json(config);
  for (auto sec = j.begin(); sec != j.end(); ++sec) {
    if (!sec->is_object()) continue;
    for (auto it = sec->begin(); it != sec->end(); ++it) {
      if (it->is_number()) keys.push_back(sec.key() + "." + it.key());
    }
  }
  return keys;
}

ExperimentConfig with_value(const ExperimentConfig& config, const std::string& key, double value) {
  std::string full = key;
  if (key.find('.') == std::string::npos && config.init_lambda.count(key)) full = "init_lambda." + key;
  const auto keys = sweepable_keys(config);
  if (std::find(keys.begin(), keys.end(), full) == keys.end()) {
    std::string list;
    for (const auto& k : keys) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("config: '" + key + "' is not a sweepable key; choose one of: " + list);
  }
  json j = to_json(config);
  const std::size_t dot = full.find('.');
  json& slot = j[full.substr(0, dot)][full.substr(dot + 1)];
  if (slot.is_number_unsigned()) {
    if (!(value >= 0.0 && value == std::floor(value))) {
      throw ConfigError("config: " + full + " takes a nonnegative integer, got " + csv::format_number(value));
    }
    slot = static_cast<std::uint64_t>(value);
  } else {
    slot = value;
  }
  const std::string text = j.dump(2);
  return parse_config(text);
}

nn::ModelSpec resolved_spec(const ExperimentConfig& config, std::size_t image_side) {
  nn::ModelSpec spec = config.model;
  spec.image_side = image_side;
  return spec;
}

train::TrainConfig resolved_train(const ExperimentConfig& config, const nn::ModelSpec& spec) {
  train::TrainConfig t = config.train;
  t.init_lambda.clear();
  for (const auto& s : spec.hyper_specs(t.holes_max, t.length_max)) t.init_lambda.push_back(config.init_lambda.at(s.name));
  return t;
}

}  // namespace cpmlho::experiment
