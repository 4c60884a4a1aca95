#pragma once

// Commands behind the proxforge executable: make-data, train, eval,
// diagnose. Exit codes: 0 success, 2 usage or configuration error,
// 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bench.hpp"
#include "json.hpp"
#include "learn.hpp"

namespace proxforge {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  FamilyConfig family;
  std::size_t n_train = 20;
  std::size_t n_eval = 5;
  std::uint64_t seed = 0;
  std::filesystem::path out = ".";
  std::optional<std::filesystem::path> cache_dir;
  std::size_t reference_iters = kBenchReferenceIterations;
  std::optional<Mapping> mapping;
  std::size_t N = 2;
  std::size_t M = 2;
  std::size_t blocks = 1;
  std::optional<std::vector<double>> init;
  TrainConfig train;
  std::size_t depth = 10;
  std::size_t instance = 0;
};

namespace detail {

// Every key known to any command is accepted, so one file can drive the
// whole pipeline; keys a command does not use are ignored by it.
inline const std::set<std::string>& allowed_keys(const std::string& command) {
  static const std::set<std::string> commands{"make-data", "train", "eval", "diagnose"};
  static const std::set<std::string> keys{
      "family", "side",   "noise_frac", "lambda", "n_ellipses", "n_train", "n_eval", "seed",
      "out",    "cache_dir", "reference_iters", "mapping", "N", "M", "blocks", "init",
      "train",  "depth",  "instance"};
  if (!commands.count(command)) throw ConfigError("unknown command " + command);
  return keys;
}

template <class T>
T get_checked(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline TrainConfig parse_train_config(const nlohmann::json& j) {
  static const std::set<std::string> keys{
      "t_max",     "eta0",          "beta1",         "beta2",      "eps",
      "clip_norm", "depth_mean_shift", "depth_log_std", "depth_cap", "eval_depth",
      "batch_size", "validation_every", "seed"};
  if (!j.is_object()) throw ConfigError("'train' must be an object");
  TrainConfig c;
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError("unknown key 'train." + k + "'");
  }
  auto num = [&](const char* k, auto& field) {
    if (j.contains(k)) field = get_checked<std::decay_t<decltype(field)>>(j, k);
  };
  num("t_max", c.t_max);
  num("eta0", c.eta0);
  num("beta1", c.beta1);
  num("beta2", c.beta2);
  num("eps", c.eps);
  num("clip_norm", c.clip_norm);
  num("depth_mean_shift", c.depth_mean_shift);
  num("depth_log_std", c.depth_log_std);
  num("depth_cap", c.depth_cap);
  num("eval_depth", c.eval_depth);
  num("batch_size", c.batch_size);
  num("validation_every", c.validation_every);
  num("seed", c.seed);
  if (!(c.eta0 > 0.0) || !(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0) ||
      !(c.eps > 0.0) || !(c.clip_norm > 0.0) || c.depth_cap == 0 || c.eval_depth == 0 ||
      c.batch_size == 0)
    throw ConfigError("train: value out of range");
  return c;
}

}  // namespace detail

/// Strict parse: unknown keys and wrong types are configuration errors.
/// Relative paths resolve against the working directory.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::string& command) {
  using detail::get_checked;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto& allowed = detail::allowed_keys(command);
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown config key '" + k + "' for " + command);
  RunConfig c;
  if (!j.contains("family")) throw ConfigError("config key 'family' is required");
  try {
    c.family.family = family_from_string(get_checked<std::string>(j, "family"));
    if (j.contains("mapping")) c.mapping = mapping_from_string(get_checked<std::string>(j, "mapping"));
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (j.contains("side")) c.family.side = get_checked<std::size_t>(j, "side");
  if (j.contains("noise_frac")) c.family.noise_frac = get_checked<double>(j, "noise_frac");
  if (j.contains("lambda") && !j.at("lambda").is_null())
    c.family.lambda = get_checked<double>(j, "lambda");
  if (j.contains("n_ellipses")) c.family.n_ellipses = get_checked<std::size_t>(j, "n_ellipses");
  if (j.contains("n_train")) c.n_train = get_checked<std::size_t>(j, "n_train");
  if (j.contains("n_eval")) c.n_eval = get_checked<std::size_t>(j, "n_eval");
  if (j.contains("seed")) c.seed = get_checked<std::uint64_t>(j, "seed");
  if (j.contains("out")) c.out = get_checked<std::string>(j, "out");
  if (j.contains("cache_dir")) c.cache_dir = std::filesystem::path(get_checked<std::string>(j, "cache_dir"));
  if (j.contains("reference_iters")) c.reference_iters = get_checked<std::size_t>(j, "reference_iters");
  if (j.contains("N")) c.N = get_checked<std::size_t>(j, "N");
  if (j.contains("M")) c.M = get_checked<std::size_t>(j, "M");
  if (j.contains("blocks")) c.blocks = get_checked<std::size_t>(j, "blocks");
  if (j.contains("init")) c.init = get_checked<std::vector<double>>(j, "init");
  if (j.contains("train")) c.train = detail::parse_train_config(j.at("train"));
  if (j.contains("depth")) c.depth = get_checked<std::size_t>(j, "depth");
  else if (command == "diagnose") c.depth = 300;
  if (j.contains("instance")) c.instance = get_checked<std::size_t>(j, "instance");

  if (c.family.side < 16) throw ConfigError("side must be >= 16");
  if (c.family.family == Family::tomography && c.family.side > kRadonMaxSide)
    throw ConfigError("side above the tomography cap");
  if (!(c.family.noise_frac >= 0.0)) throw ConfigError("noise_frac must be >= 0");
  if (c.family.lambda && !(*c.family.lambda > 0.0)) throw ConfigError("lambda must be > 0");
  if (c.reference_iters == 0) throw ConfigError("reference_iters must be >= 1");
  if (command == "train" && !c.mapping) throw ConfigError("config key 'mapping' is required for train");
  if (command == "train" && c.n_train < 2) throw ConfigError("n_train must be >= 2");
  if ((command == "eval" || command == "diagnose") && c.n_eval == 0)
    throw ConfigError("empty evaluation instance set");
  if (command == "diagnose" && c.instance >= c.n_eval) throw ConfigError("instance index out of range");
  if (command == "eval" && c.depth == 0) throw ConfigError("depth must be >= 1");
  c.out = std::filesystem::absolute(c.out);
  if (!c.cache_dir) c.cache_dir = c.out / "cache";
  c.cache_dir = std::filesystem::absolute(*c.cache_dir);
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::string& command) {
  return parse_run_config(read_json_file(path), command);
}

// ---------------------------------------------------------------------------
// Data layout: instances 0 .. n_train-1 train, n_train .. n_train+n_eval-1 eval.
// The last ceil(n_train/10) training instances are held out for validation.

inline std::size_t validation_count(std::size_t n_train) {
  return std::max<std::size_t>(1, (n_train + 9) / 10);
}

inline Dataset dataset_for(const RunConfig& c) {
  return make_dataset(c.family, c.n_train + c.n_eval, c.seed);
}

inline std::vector<ProblemInstance> eval_instances(const RunConfig& c, const Dataset& d) {
  return {d.instances.begin() + static_cast<std::ptrdiff_t>(c.n_train), d.instances.end()};
}

// ---------------------------------------------------------------------------
// Weights files

inline std::string method_name(const ParamVector& pv) {
  switch (pv.mapping) {
    case Mapping::pdhg_constrained: return "pdhg_constrained";
    case Mapping::new_solver_constrained: return "new_solver";
    case Mapping::pdhg_free: return "pdhg_free";
    case Mapping::matrices_free: return "matrices_free_" + std::to_string(pv.N);
  }
  return "?";
}

struct WeightsFile {
  ParamVector pv;
  SchemeMatrices decoded;
  nlohmann::json metadata;
};

inline nlohmann::json weights_to_json(const ParamVector& pv, double L_norm,
                                      const nlohmann::json& metadata) {
  nlohmann::json j = to_json(pv);
  j["decoded"] = to_json(decode(pv, L_norm));
  nlohmann::json meta = metadata;
  meta["L_norm"] = L_norm;
  j["metadata"] = meta;
  return j;
}

inline WeightsFile load_weights(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  static const std::set<std::string> keys{"mapping", "N", "M", "blocks", "raw", "decoded", "metadata"};
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw ConfigError(path.string() + ": unknown key '" + k + "'");
  try {
    WeightsFile w{param_vector_from_json(j), scheme_from_json(j.at("decoded")),
                  j.value("metadata", nlohmann::json::object())};
    const double L = w.metadata.value("L_norm", 0.0);
    if (L > 0.0) {
      const auto again = decode(w.pv, L);
      if (to_json(again) != to_json(w.decoded))
        throw ConfigError(path.string() + ": decoded matrices do not match the raw values");
    }
    return w;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Commands

inline std::vector<ReferenceOptimum> references_for(const RunConfig& c, const Dataset& d,
                                                    const std::vector<ProblemInstance>& insts) {
  std::vector<ReferenceOptimum> refs(insts.size(), ReferenceOptimum{SpaceElement(image_space(c.family.side))});
  parallel_for(insts.size(), [&](std::size_t i) {
    refs[i] = reference_solve(insts[i], d.ops.stacked_norm, c.reference_iters, c.cache_dir,
                              to_string(c.family.family));
  });
  return refs;
}

inline int cmd_make_data(const RunConfig& c, std::ostream& log) {
  const Dataset d = dataset_for(c);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t k = 0; k < d.instances.size(); ++k) {
    const bool is_train = k < c.n_train;
    const std::string stem = (is_train ? "train_" : "eval_") +
                             std::to_string(is_train ? k : k - c.n_train);
    std::filesystem::create_directories(c.out / "instances");
    write_element(d.instances[k].truth, c.out / "instances" / (stem + "_truth"));
    write_element(d.instances[k].b, c.out / "instances" / (stem + "_b"));
    index.push_back(stem);
  }
  nlohmann::json meta{{"family", to_string(c.family.family)},
                      {"side", c.family.side},
                      {"noise_frac", c.family.noise_frac},
                      {"lambda", d.instances.empty() ? 0.0 : d.instances.front().lambda},
                      {"seed", c.seed},
                      {"stacked_norm", d.ops.stacked_norm},
                      {"instances", index}};
  write_text(c.out / "dataset.json", meta.dump(2) + "\n");
  log << "wrote " << d.instances.size() << " instances to " << (c.out / "instances").string() << "\n";
  return kExitOk;
}

inline void write_trace_csv(const std::vector<TraceRow>& rows, std::ostream& out) {
  out << "step,depth,lr,loss,grad_norm,validation,skipped\n";
  for (const auto& r : rows)
    out << r.step << ',' << r.depth << ',' << csv_number(r.lr) << ',' << csv_number(r.loss) << ','
        << csv_number(r.grad_norm) << ',' << csv_number(r.validation) << ','
        << (r.skipped ? 1 : 0) << '\n';
}

inline int cmd_train(const RunConfig& c, std::ostream& log) {
  const Dataset d = dataset_for(c);
  const std::size_t n_val = validation_count(c.n_train);
  const auto train_set = d.problems(0, c.n_train - n_val);
  const auto val_set = d.problems(c.n_train - n_val, n_val);
  const double L = d.ops.stacked_norm;
  ParamVector pv = initial_params(*c.mapping, L, c.N, c.M, c.blocks);
  if (c.init) {
    pv.raw = *c.init;
    try {
      check_shape(pv);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("init: ") + e.what());
    }
  }
  TrainConfig tc = c.train;
  const auto res = train(train_set, val_set, L, pv, tc);
  if (!std::isfinite(res.best_validation)) throw NumericalError("training diverged");
  nlohmann::json meta{{"seed", tc.seed},
                      {"data_seed", c.seed},
                      {"t_max", tc.t_max},
                      {"final_loss", res.final_loss},
                      {"best_step", res.best_step},
                      {"family", to_string(c.family.family)},
                      {"side", c.family.side},
                      {"method", method_name(res.best)}};
  write_text(c.out / "weights.json", weights_to_json(res.best, L, meta).dump(2) + "\n");
  std::ostringstream trace;
  write_trace_csv(res.trace, trace);
  write_text(c.out / "trace.csv", trace.str());
  log << "trained " << to_string(pv.mapping) << ": validation loss " << res.best_validation
      << " at step " << res.best_step << "\n";
  return kExitOk;
}

inline Method method_from_weights(const WeightsFile& w, double L_norm) {
  return {method_name(w.pv), decode(w.pv, L_norm)};
}

inline int cmd_eval(const RunConfig& c, const std::vector<std::filesystem::path>& weights,
                    std::ostream& log) {
  std::vector<WeightsFile> ws;
  for (const auto& p : weights) ws.push_back(load_weights(p));
  for (const auto& w : ws)
    if (c.mapping && w.pv.mapping != *c.mapping)
      throw ConfigError("weights mapping " + to_string(w.pv.mapping) + " does not match config");
  const Dataset d = dataset_for(c);
  const auto insts = eval_instances(c, d);
  const auto refs = references_for(c, d, insts);
  const double L = d.ops.stacked_norm;
  std::vector<Method> methods{{"pdhg_default", default_pdhg(L)}};
  for (const auto& w : ws) methods.push_back(method_from_weights(w, L));
  const auto& order = table_method_order();
  std::stable_sort(methods.begin(), methods.end(), [&](const Method& a, const Method& b) {
    auto rank = [&](const std::string& n) {
      return std::find(order.begin(), order.end(), n) - order.begin();
    };
    return rank(a.name) < rank(b.name);
  });
  const auto rows = run_table(insts, refs, methods, c.depth, c.seed);
  std::ostringstream csv;
  write_table_csv(rows, csv);
  write_text(c.out / "results.csv", csv.str());
  log << csv.str();
  return kExitOk;
}

inline int cmd_diagnose(const RunConfig& c, const std::optional<std::filesystem::path>& weights,
                        std::ostream& log) {
  const Dataset d = dataset_for(c);
  const double L = d.ops.stacked_norm;
  SchemeMatrices params = default_pdhg(L);
  if (weights) {
    const auto w = load_weights(*weights);
    if (c.mapping && w.pv.mapping != *c.mapping)
      throw ConfigError("weights mapping does not match config");
    params = decode(w.pv, L);
  }
  const ProblemInstance& inst = d.instances[c.n_train + c.instance];
  const Problem p = inst.problem();
  std::optional<SpaceElement> xbar;
  std::optional<DualVec> ybar;
  if (as_convergent(params)) {
    const auto sol = reference_solution(p, L, c.reference_iters);
    xbar = sol.x;
    ybar = sol.y;
  }
  const auto rows = diagnose_trace(p, params, c.depth, xbar, ybar);
  std::ostringstream csv;
  write_diagnose_csv(rows, csv);
  write_text(c.out / "diagnose.csv", csv.str());
  log << "wrote " << rows.size() << " rows to " << (c.out / "diagnose.csv").string() << "\n";
  return kExitOk;
}

/// Parses argv and runs one command; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& log = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"proxforge: learned primal-dual splitting schemes"};
  app.require_subcommand(1);
  std::string config;
  std::vector<std::string> weights;
  std::optional<std::size_t> depth;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON configuration file")->required();
    sub->add_option("--seed", seed, "override the data seed");
    sub->add_option("--out", out, "output directory");
  };
  auto* make_data = app.add_subcommand("make-data", "generate problem instances");
  add_common(make_data);
  auto* train_cmd = app.add_subcommand("train", "train scheme parameters");
  add_common(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate weights at a fixed depth");
  add_common(eval_cmd);
  eval_cmd->add_option("--weights", weights, "weights JSON (repeatable)");
  eval_cmd->add_option("--depth", depth, "evaluation depth");
  auto* diag_cmd = app.add_subcommand("diagnose", "per-iteration trace");
  add_common(diag_cmd);
  diag_cmd->add_option("--weights", weights, "weights JSON")->expected(0, 1);
  diag_cmd->add_option("--depth", depth, "number of iterations (default 300)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, log, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    RunConfig c = load_run_config(config, command);
    if (seed) c.seed = *seed;
    if (out) {
      c.out = std::filesystem::absolute(*out);
      if (!read_json_file(config).contains("cache_dir")) c.cache_dir = c.out / "cache";
    }
    if (depth) {
      if (*depth == 0) throw ConfigError("depth must be >= 1");
      c.depth = *depth;
    }
    std::vector<std::filesystem::path> wpaths(weights.begin(), weights.end());
    for (const auto& w : wpaths)
      if (!std::filesystem::exists(w)) throw ConfigError("missing weights file " + w.string());
    std::filesystem::create_directories(c.out);
    if (command == "make-data") return cmd_make_data(c, log);
    if (command == "train") return cmd_train(c, log);
    if (command == "eval") return cmd_eval(c, wpaths, log);
    return cmd_diagnose(c, wpaths.empty() ? std::nullopt
                                          : std::optional<std::filesystem::path>(wpaths.front()),
                        log);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "file error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace proxforge
