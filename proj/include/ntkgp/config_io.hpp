#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntkgp/dataset.hpp"
#include "ntkgp/errors.hpp"
#include "ntkgp/mlp.hpp"
#include "ntkgp/train.hpp"

namespace ntkgp {

struct GridSpec {
  double min = -3.0;
  double max = 3.0;
  int count = 201;

  Eigen::VectorXd points() const { return Eigen::VectorXd::LinSpaced(count, min, max); }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/// One experiment, fully pinned: dataset, architecture, training knobs for
/// the mean head (train.learning_rate) and the covariance heads
/// (cov_learning_rate), rank choices, query grid, output location. A value
/// that validates determines a run bit for bit.
struct ExperimentConfig {
  DatasetSpec dataset;
  MlpConfig mlp;              // input_dim must be 2 (trig features)
  TrainConfig train;
  double cov_learning_rate = 5e-5;
  ModelMode mode = ModelMode::full;
  int k = 5;
  int k_prime = 0;
  GridSpec grid;
  std::string output_dir = "out";

  void validate() const {
    dataset.validate();
    mlp.validate();
    if (mlp.input_dim() != 2)
      throw ConfigError("mlp input dimension must be 2 (sin/cos features)");
    train.validate();
    if (!(train.beta_n > 0.0))
      throw ConfigError("train.beta_n must be positive (the pipeline needs sigma2 > 0)");
    if (!(cov_learning_rate > 0.0))
      throw ConfigError("cov_learning_rate must be positive");
    if (k < 1 || k > dataset.n) {
      std::ostringstream msg;
      msg << "k = " << k << " must lie in [1, " << dataset.n << "]";
      throw ConfigError(msg.str());
    }
    if (k_prime < 0) throw ConfigError("k_prime must be nonnegative");
    if (grid.count < 2) throw ConfigError("grid.count must be at least 2");
    if (!(grid.max > grid.min)) throw ConfigError("grid.max must exceed grid.min");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline std::string to_string(TargetFunction f) {
  return f == TargetFunction::sinusoid ? "sinusoid" : "sinusoid-plus-trend";
}

inline std::string to_string(ModelMode m) {
  return m == ModelMode::linearized ? "linearized" : "full";
}

inline std::string to_string(OptimizerKind o) {
  return o == OptimizerKind::adam ? "adam" : "gd";
}

namespace detail {

inline TargetFunction parse_target_function(const std::string& s, const std::string& at) {
  if (s == "sinusoid") return TargetFunction::sinusoid;
  if (s == "sinusoid-plus-trend") return TargetFunction::sinusoid_plus_trend;
  throw ConfigError(at + ": unknown target function \"" + s +
                    "\" (expected sinusoid or sinusoid-plus-trend)");
}

inline ModelMode parse_mode(const std::string& s, const std::string& at) {
  if (s == "linearized") return ModelMode::linearized;
  if (s == "full") return ModelMode::full;
  throw ConfigError(at + ": unknown mode \"" + s + "\" (expected linearized or full)");
}

inline OptimizerKind parse_optimizer(const std::string& s, const std::string& at) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "gd") return OptimizerKind::gd;
  throw ConfigError(at + ": unknown optimizer \"" + s + "\" (expected adam or gd)");
}

/// Unknown keys are errors: a misspelled knob must fail loudly, not fall
/// back to a default.
inline void check_keys(const nlohmann::json& obj, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed)
      if (item.key() == key) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown config key \"" + (path.empty() ? "" : path + ".") +
                        item.key() + "\"");
  }
}

inline const nlohmann::json* find_object(const nlohmann::json& j, const std::string& key) {
  const auto it = j.find(key);
  if (it == j.end()) return nullptr;
  if (!it->is_object()) throw ConfigError("config key \"" + key + "\" must be an object");
  return &*it;
}

template <typename T>
void read_field(const nlohmann::json& obj, const std::string& path, const char* key,
                T& target) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    target = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key \"" + path + "." + key + "\" has the wrong type");
  }
}

inline void read_interval(const nlohmann::json& obj, const std::string& path,
                          const char* key, Interval& target) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  std::vector<double> pair;
  try {
    pair = it->get<std::vector<double>>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key \"" + path + "." + key + "\" must be [lo, hi]");
  }
  if (pair.size() != 2)
    throw ConfigError("config key \"" + path + "." + key + "\" must be [lo, hi]");
  target = Interval{pair[0], pair[1]};
}

inline void read_string_as(const nlohmann::json& obj, const std::string& path,
                           const char* key, auto parse, auto& target) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  std::string s;
  try {
    s = it->get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key \"" + path + "." + key + "\" must be a string");
  }
  target = parse(s, "config key \"" + path + "." + key + "\"");
}

}  // namespace detail

/// Defaults reproduce the four-panel figure: sin(2x) with a central gap,
/// width-512 two-hidden-layer net, Adam at 1e-4 / 5e-5, beta_n matching the
/// observation noise (sigma2 = N beta_n = noise_std^2).
inline ExperimentConfig default_experiment_config() {
  ExperimentConfig cfg;
  cfg.mlp.layer_sizes = {2, 512, 512, 1};
  cfg.mlp.seed = 2;
  cfg.train.learning_rate = 1e-4;
  cfg.train.seed = 3;
  cfg.train.beta_n = cfg.dataset.noise_std * cfg.dataset.noise_std / cfg.dataset.n;
  return cfg;
}

/// Strict parse over defaults: every section and field is optional, unknown
/// keys throw, beta_n falls back to noise_std^2 / n of the resolved dataset.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("config root must be an object");
  detail::check_keys(root, "",
                     {"dataset", "mlp", "train", "grid", "k", "k_prime", "output_dir"});

  ExperimentConfig cfg = default_experiment_config();

  if (const auto* d = detail::find_object(root, "dataset")) {
    detail::check_keys(*d, "dataset", {"function", "domain", "gap", "n", "noise_std", "seed"});
    detail::read_string_as(*d, "dataset", "function", detail::parse_target_function,
                           cfg.dataset.function);
    detail::read_interval(*d, "dataset", "domain", cfg.dataset.domain);
    detail::read_interval(*d, "dataset", "gap", cfg.dataset.gap);
    detail::read_field(*d, "dataset", "n", cfg.dataset.n);
    detail::read_field(*d, "dataset", "noise_std", cfg.dataset.noise_std);
    detail::read_field(*d, "dataset", "seed", cfg.dataset.seed);
  }

  if (const auto* m = detail::find_object(root, "mlp")) {
    detail::check_keys(*m, "mlp",
                       {"hidden_layers", "hidden_width", "softplus_beta", "output_scale",
                        "sigma_w", "sigma_b", "seed"});
    int hidden_layers = cfg.mlp.depth() - 1;
    int hidden_width = cfg.mlp.layer_sizes[1];
    detail::read_field(*m, "mlp", "hidden_layers", hidden_layers);
    detail::read_field(*m, "mlp", "hidden_width", hidden_width);
    if (hidden_layers < 1) throw ConfigError("mlp.hidden_layers must be at least 1");
    if (hidden_width < 1) throw ConfigError("mlp.hidden_width must be at least 1");
    cfg.mlp.layer_sizes.assign(static_cast<size_t>(hidden_layers) + 2, hidden_width);
    cfg.mlp.layer_sizes.front() = 2;
    cfg.mlp.layer_sizes.back() = 1;
    detail::read_field(*m, "mlp", "softplus_beta", cfg.mlp.softplus_beta);
    detail::read_field(*m, "mlp", "output_scale", cfg.mlp.output_scale);
    detail::read_field(*m, "mlp", "sigma_w", cfg.mlp.sigma_w);
    detail::read_field(*m, "mlp", "sigma_b", cfg.mlp.sigma_b);
    detail::read_field(*m, "mlp", "seed", cfg.mlp.seed);
  }

  bool beta_n_given = false;
  if (const auto* t = detail::find_object(root, "train")) {
    detail::check_keys(*t, "train",
                       {"mean_learning_rate", "cov_learning_rate", "beta_n", "patience",
                        "max_epochs", "optimizer", "adam_beta1", "adam_beta2", "adam_eps",
                        "seed", "mode"});
    detail::read_field(*t, "train", "mean_learning_rate", cfg.train.learning_rate);
    detail::read_field(*t, "train", "cov_learning_rate", cfg.cov_learning_rate);
    if (t->contains("beta_n")) {
      beta_n_given = true;
      detail::read_field(*t, "train", "beta_n", cfg.train.beta_n);
    }
    detail::read_field(*t, "train", "patience", cfg.train.patience);
    detail::read_field(*t, "train", "max_epochs", cfg.train.max_epochs);
    detail::read_string_as(*t, "train", "optimizer", detail::parse_optimizer,
                           cfg.train.optimizer);
    detail::read_field(*t, "train", "adam_beta1", cfg.train.adam_beta1);
    detail::read_field(*t, "train", "adam_beta2", cfg.train.adam_beta2);
    detail::read_field(*t, "train", "adam_eps", cfg.train.adam_eps);
    detail::read_field(*t, "train", "seed", cfg.train.seed);
    detail::read_string_as(*t, "train", "mode", detail::parse_mode, cfg.mode);
  }
  if (!beta_n_given && cfg.dataset.n > 0)
    cfg.train.beta_n = cfg.dataset.noise_std * cfg.dataset.noise_std / cfg.dataset.n;

  if (const auto* g = detail::find_object(root, "grid")) {
    detail::check_keys(*g, "grid", {"min", "max", "count"});
    detail::read_field(*g, "grid", "min", cfg.grid.min);
    detail::read_field(*g, "grid", "max", cfg.grid.max);
    detail::read_field(*g, "grid", "count", cfg.grid.count);
  }

  detail::read_field(root, "", "k", cfg.k);
  detail::read_field(root, "", "k_prime", cfg.k_prime);
  detail::read_field(root, "", "output_dir", cfg.output_dir);
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_experiment_config(root);
}

/// Emits every knob explicitly, so the file written next to a run's
/// artifacts reproduces it without reference to defaults. Requires the
/// architecture to be expressible in the config schema (uniform hidden
/// width over sin/cos inputs), which parsing guarantees.
inline nlohmann::ordered_json resolved_config_json(const ExperimentConfig& cfg) {
  const auto& ls = cfg.mlp.layer_sizes;
  bool uniform = ls.size() >= 3 && ls.front() == 2 && ls.back() == 1;
  for (size_t i = 2; i + 1 < ls.size(); ++i)
    if (ls[i] != ls[1]) uniform = false;
  if (!uniform)
    throw ConfigError("architecture is not expressible as hidden_layers x hidden_width");

  nlohmann::ordered_json j;
  j["dataset"] = {{"function", to_string(cfg.dataset.function)},
                  {"domain", {cfg.dataset.domain.lo, cfg.dataset.domain.hi}},
                  {"gap", {cfg.dataset.gap.lo, cfg.dataset.gap.hi}},
                  {"n", cfg.dataset.n},
                  {"noise_std", cfg.dataset.noise_std},
                  {"seed", cfg.dataset.seed}};
  j["mlp"] = {{"hidden_layers", static_cast<int>(ls.size()) - 2},
              {"hidden_width", ls[1]},
              {"softplus_beta", cfg.mlp.softplus_beta},
              {"output_scale", cfg.mlp.output_scale},
              {"sigma_w", cfg.mlp.sigma_w},
              {"sigma_b", cfg.mlp.sigma_b},
              {"seed", cfg.mlp.seed}};
  j["train"] = {{"mean_learning_rate", cfg.train.learning_rate},
                {"cov_learning_rate", cfg.cov_learning_rate},
                {"beta_n", cfg.train.beta_n},
                {"patience", cfg.train.patience},
                {"max_epochs", cfg.train.max_epochs},
                {"optimizer", to_string(cfg.train.optimizer)},
                {"adam_beta1", cfg.train.adam_beta1},
                {"adam_beta2", cfg.train.adam_beta2},
                {"adam_eps", cfg.train.adam_eps},
                {"seed", cfg.train.seed},
                {"mode", to_string(cfg.mode)}};
  j["grid"] = {{"min", cfg.grid.min}, {"max", cfg.grid.max}, {"count", cfg.grid.count}};
  j["k"] = cfg.k;
  j["k_prime"] = cfg.k_prime;
  j["output_dir"] = cfg.output_dir;
  return j;
}

inline void write_resolved_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write resolved config to " + path);
  out << resolved_config_json(cfg).dump(2) << '\n';
  if (!out) throw IoError("failed writing resolved config to " + path);
}

}  // namespace ntkgp
