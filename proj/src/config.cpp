#include <cmath>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "colext/error.hpp"
#include "colext/file_util.hpp"
#include "colext/orchestrator.hpp"
#include "yaml_util.hpp"

namespace colext {

namespace fs = std::filesystem;

std::uint32_t ExperimentConfig::num_clients() const {
  std::uint64_t n = 0;
  for (const auto& d : devices) n += d.count;
  return static_cast<std::uint32_t>(n);
}

std::vector<std::string> ExperimentConfig::roster() const {
  std::vector<std::string> out;
  for (const auto& d : devices) out.insert(out.end(), d.count, d.dev_type);
  return out;
}

std::string substitute_env(const std::string& arg, const std::map<std::string, std::string>& env) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto open = arg.find("${", pos);
    if (open == std::string::npos) break;
    const auto close = arg.find('}', open + 2);
    if (close == std::string::npos) throw ConfigError("unterminated placeholder in argument '" + arg + "'");
    const auto name = arg.substr(open + 2, close - open - 2);
    auto it = env.find(name);
    if (it == env.end()) throw ConfigError("unresolved placeholder ${" + name + "} in argument '" + arg + "'");
    out.append(arg, pos, open - pos);
    out += it->second;
    pos = close + 1;
  }
  out.append(arg, pos);
  return out;
}

std::vector<std::string> substitute_env(const std::vector<std::string>& args,
                                        const std::map<std::string, std::string>& env) {
  std::vector<std::string> out;
  out.reserve(args.size());
  for (const auto& a : args) out.push_back(substitute_env(a, env));
  return out;
}

std::map<std::string, std::string> server_env(const std::string& address, std::uint32_t n_clients) {
  return {{kEnvServerAddress, address}, {kEnvNClients, std::to_string(n_clients)}};
}

std::map<std::string, std::string> client_env(const std::string& address, std::uint32_t n_clients,
                                              std::uint32_t client_id, const std::string& dev_type) {
  return {{kEnvServerAddress, address},
          {kEnvNClients, std::to_string(n_clients)},
          {kEnvClientId, std::to_string(client_id)},
          {kEnvClientDevType, dev_type}};
}

namespace {

class Parser {
 public:
  Parser(std::string source, fs::path base_dir) : src_(std::move(source)), base_(std::move(base_dir)) {}

  ExperimentConfig parse(const std::string& text, const ProfileTable* profiles) {
    const auto root = yaml::load(text, src_);
    if (!root || root.IsNull()) throw ConfigError("config is empty", src_);
    yaml::require_map(src_, root, "config");
    yaml::reject_unknown(src_, root, "config",
                         {"code", "devices", "monitoring", "profiles_file", "emulation", "data", "model", "strategy",
                          "training", "analysis"});
    ExperimentConfig cfg;
    cfg.base_dir = base_;
    cfg.document = text;

    parse_code(root["code"], cfg);
    parse_devices(root, cfg);
    parse_monitoring(root["monitoring"], cfg);
    resolve_profiles(root, cfg, profiles);
    parse_emulation(root["emulation"], cfg);
    parse_data(root["data"], cfg);
    parse_model(root["model"], cfg);
    parse_strategy(root["strategy"], cfg);
    parse_training(root["training"], cfg);
    parse_analysis(root["analysis"], cfg);
    return cfg;
  }

 private:
  std::string loc(const YAML::Node& n) const { return yaml::location(src_, n); }

  template <class T>
  T get(const YAML::Node& n, const std::string& what) const {
    return yaml::get<T>(src_, n, what);
  }

  double positive_real(const YAML::Node& n, const std::string& what) const {
    const auto v = get<double>(n, what);
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(what + " must be a positive number", loc(n));
    return v;
  }

  double non_negative_real(const YAML::Node& n, const std::string& what) const {
    const auto v = get<double>(n, what);
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(what + " must be a non-negative number", loc(n));
    return v;
  }

  std::uint32_t positive_int(const YAML::Node& n, const std::string& what) const {
    const auto v = get<long long>(n, what);
    if (v < 1 || v > 0xFFFFFFFFLL) throw ConfigError(what + " must be a positive integer", loc(n));
    return static_cast<std::uint32_t>(v);
  }

  std::uint64_t seed(const YAML::Node& n, const std::string& what) const {
    return get<std::uint64_t>(n, what);
  }

  std::vector<std::string> args(const YAML::Node& n, const std::string& what) const {
    if (!n || n.IsNull()) return {};
    std::vector<std::string> out;
    if (n.IsScalar()) {
      // a single string is split on whitespace, as a shell would
      std::istringstream in(n.as<std::string>());
      for (std::string tok; in >> tok;) out.push_back(tok);
      return out;
    }
    if (!n.IsSequence()) throw ConfigError(what + " must be a string or a list of strings", loc(n));
    for (const auto& item : n) {
      if (!item.IsScalar()) throw ConfigError(what + " entries must be strings", loc(item));
      out.push_back(item.as<std::string>());
    }
    return out;
  }

  void check_placeholders(const Entrypoint& e, const YAML::Node& node, const std::set<std::string>& allowed,
                          const std::string& role) const {
    std::map<std::string, std::string> probe;
    for (const auto& name : allowed) probe[name] = "x";
    for (const auto& a : e.args) {
      try {
        substitute_env(a, probe);
      } catch (const ConfigError& err) {
        throw ConfigError(std::string(err.what()) + " (" + role + " processes get " + fmt::format("{}", fmt::join(allowed, ", ")) + ")",
                          loc(node));
      }
    }
  }

  Entrypoint entrypoint(const YAML::Node& n, const std::string& section) const {
    yaml::require_map(src_, n, section);
    yaml::reject_unknown(src_, n, section, {"entrypoint", "args"});
    Entrypoint e;
    e.entrypoint = yaml::require<std::string>(src_, n, "entrypoint", section);
    if (e.entrypoint.empty()) throw ConfigError(section + ".entrypoint is empty", loc(n["entrypoint"]));
    e.args = args(n["args"], section + ".args");
    return e;
  }

  void parse_code(const YAML::Node& n, ExperimentConfig& cfg) const {
    cfg.client = {kBuiltinClient, {"--server_addr=${COLEXT_SERVER_ADDRESS}", "--client_id=${COLEXT_CLIENT_ID}"}};
    cfg.server = {kBuiltinServer, {"--n_clients=${COLEXT_N_CLIENTS}"}};
    if (!n) return;
    yaml::require_map(src_, n, "code");
    yaml::reject_unknown(src_, n, "code", {"client", "server"});
    if (n["client"]) {
      cfg.client = entrypoint(n["client"], "code.client");
      check_placeholders(cfg.client, n["client"], {kEnvServerAddress, kEnvNClients, kEnvClientId, kEnvClientDevType},
                         "client");
    }
    if (n["server"]) {
      cfg.server = entrypoint(n["server"], "code.server");
      check_placeholders(cfg.server, n["server"], {kEnvServerAddress, kEnvNClients}, "server");
    }
  }

  void parse_devices(const YAML::Node& root, ExperimentConfig& cfg) const {
    const auto n = root["devices"];
    if (!n) throw ConfigError("missing required key 'devices'", loc(root));
    if (!n.IsSequence() || n.size() == 0) throw ConfigError("devices must be a non-empty list", loc(n));
    std::uint64_t total = 0;
    for (const auto& d : n) {
      yaml::require_map(src_, d, "devices entry");
      yaml::reject_unknown(src_, d, "devices entry", {"dev_type", "count"});
      DeviceGroup g;
      g.dev_type = yaml::require<std::string>(src_, d, "dev_type", "devices entry");
      if (!d["count"]) throw ConfigError("missing required key 'count' in devices entry", loc(d));
      g.count = positive_int(d["count"], "devices.count");
      total += g.count;
      cfg.devices.push_back(g);
    }
    if (total > 100000) throw ConfigError("too many clients", loc(n));
  }

  void parse_monitoring(const YAML::Node& n, ExperimentConfig& cfg) const {
    if (!n) return;
    yaml::require_map(src_, n, "monitoring");
    yaml::reject_unknown(src_, n, "monitoring", {"scrapping_interval", "push_to_db_interval"});
    if (n["scrapping_interval"]) cfg.scrape_interval_s = positive_real(n["scrapping_interval"], "monitoring.scrapping_interval");
    if (n["push_to_db_interval"]) {
      cfg.push_interval_s = positive_real(n["push_to_db_interval"], "monitoring.push_to_db_interval");
    }
  }

  void resolve_profiles(const YAML::Node& root, ExperimentConfig& cfg, const ProfileTable* override_table) const {
    ProfileTable table;
    if (override_table != nullptr) {
      table = *override_table;
    } else if (const auto pf = root["profiles_file"]) {
      fs::path p = get<std::string>(pf, "profiles_file");
      if (p.is_relative()) p = base_ / p;
      if (!fs::exists(p)) throw ConfigError("profiles file not found: " + p.string(), loc(pf));
      table = load_profiles(p);
    } else {
      table = default_profiles();
    }
    const auto devices = root["devices"];
    std::size_t i = 0;
    for (const auto& d : devices) {
      const auto& name = cfg.devices[i++].dev_type;
      auto it = table.find(name);
      if (it == table.end()) throw ConfigError("unknown dev_type '" + name + "'", loc(d["dev_type"]));
      cfg.profiles[name] = it->second;
    }
  }

  void parse_emulation(const YAML::Node& n, ExperimentConfig& cfg) const {
    if (!n) return;
    yaml::require_map(src_, n, "emulation");
    yaml::reject_unknown(src_, n, "emulation", {"time_scale"});
    if (n["time_scale"]) cfg.time_scale = positive_real(n["time_scale"], "emulation.time_scale");
  }

  void parse_data(const YAML::Node& n, ExperimentConfig& cfg) const {
    auto& d = cfg.data;
    if (n) {
      yaml::require_map(src_, n, "data");
      yaml::reject_unknown(src_, n, "data",
                           {"num_classes", "dim", "per_class", "seed", "center_scale", "noise_sigma", "partition"});
      if (n["num_classes"]) d.num_classes = positive_int(n["num_classes"], "data.num_classes");
      if (d.num_classes < 2 || d.num_classes > 65535) {
        throw ConfigError("data.num_classes must be in [2, 65535]", loc(n["num_classes"]));
      }
      if (n["dim"]) d.dim = positive_int(n["dim"], "data.dim");
      if (n["per_class"]) d.per_class = positive_int(n["per_class"], "data.per_class");
      if (n["seed"]) d.seed = seed(n["seed"], "data.seed");
      if (n["center_scale"]) d.blobs.center_scale = positive_real(n["center_scale"], "data.center_scale");
      if (n["noise_sigma"]) d.blobs.noise_sigma = non_negative_real(n["noise_sigma"], "data.noise_sigma");
      if (const auto p = n["partition"]) {
        yaml::require_map(src_, p, "data.partition");
        yaml::reject_unknown(src_, p, "data.partition", {"alpha", "iid", "val_fraction"});
        const bool iid = p["iid"] && get<bool>(p["iid"], "data.partition.iid");
        if (iid && p["alpha"]) throw ConfigError("data.partition: set either alpha or iid, not both", loc(p));
        if (iid) d.alpha.reset();
        if (p["alpha"]) d.alpha = positive_real(p["alpha"], "data.partition.alpha");
        if (p["val_fraction"]) {
          d.val_fraction = get<double>(p["val_fraction"], "data.partition.val_fraction");
          if (!(d.val_fraction > 0.0 && d.val_fraction < 1.0)) {
            throw ConfigError("data.partition.val_fraction must be in (0, 1)", loc(p["val_fraction"]));
          }
        }
      }
    }
    const std::uint64_t total = static_cast<std::uint64_t>(d.num_classes) * d.per_class;
    if (total < min_client_rows(d.val_fraction) * cfg.num_clients()) {
      throw ConfigError(fmt::format("data has {} samples, too few for {} clients", total, cfg.num_clients()),
                        n ? loc(n) : src_);
    }
  }

  void parse_model(const YAML::Node& n, ExperimentConfig& cfg) const {
    std::vector<std::uint32_t> hidden;
    if (n) {
      yaml::require_map(src_, n, "model");
      yaml::reject_unknown(src_, n, "model", {"name", "hidden", "activation"});
      if (n["name"]) cfg.model_name = get<std::string>(n["name"], "model.name");
      if (const auto h = n["hidden"]) {
        if (!h.IsSequence()) throw ConfigError("model.hidden must be a list of widths", loc(h));
        for (const auto& w : h) hidden.push_back(positive_int(w, "model.hidden"));
      }
      if (n["activation"]) {
        try {
          cfg.model.activation = parse_activation(get<std::string>(n["activation"], "model.activation"));
        } catch (const InvalidArgument& e) {
          throw ConfigError(e.what(), loc(n["activation"]));
        }
      }
    }
    cfg.model.layer_widths.clear();
    cfg.model.layer_widths.push_back(cfg.data.dim);
    cfg.model.layer_widths.insert(cfg.model.layer_widths.end(), hidden.begin(), hidden.end());
    cfg.model.layer_widths.push_back(cfg.data.num_classes);
  }

  void parse_strategy(const YAML::Node& n, ExperimentConfig& cfg) const {
    auto& s = cfg.strategy;
    s.num_rounds = 3;
    if (n) {
      yaml::require_map(src_, n, "strategy");
      yaml::reject_unknown(src_, n, "strategy",
                           {"algorithm", "fraction_fit", "num_rounds", "target_accuracy", "round_deadline_s", "mu",
                            "seed", "width_ratios"});
      if (n["algorithm"]) {
        try {
          s.algorithm = parse_algorithm(get<std::string>(n["algorithm"], "strategy.algorithm"));
        } catch (const InvalidArgument& e) {
          throw ConfigError(e.what(), loc(n["algorithm"]));
        }
      }
      if (n["fraction_fit"]) s.fraction_fit = get<double>(n["fraction_fit"], "strategy.fraction_fit");
      if (n["num_rounds"]) s.num_rounds = positive_int(n["num_rounds"], "strategy.num_rounds");
      if (n["target_accuracy"]) s.target_accuracy = get<double>(n["target_accuracy"], "strategy.target_accuracy");
      if (n["round_deadline_s"]) s.round_deadline_s = positive_real(n["round_deadline_s"], "strategy.round_deadline_s");
      if (n["mu"]) s.mu = non_negative_real(n["mu"], "strategy.mu");
      if (n["seed"]) s.seed = seed(n["seed"], "strategy.seed");
      if (const auto w = n["width_ratios"]) {
        yaml::require_map(src_, w, "strategy.width_ratios");
        for (const auto& kv : w) {
          const auto name = kv.first.as<std::string>();
          if (!cfg.profiles.contains(name)) {
            throw ConfigError("width ratio for dev_type '" + name + "' which is not in devices", loc(kv.first));
          }
          try {
            cfg.width_ratios[name] = WidthRatio::parse(get<std::string>(kv.second, "strategy.width_ratios"));
          } catch (const InvalidArgument& e) {
            throw ConfigError(e.what(), loc(kv.second));
          }
        }
      }
    }
    try {
      s.validate(cfg.num_clients());
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("strategy: ") + e.what(), n ? loc(n) : src_);
    }
  }

  void parse_training(const YAML::Node& n, ExperimentConfig& cfg) const {
    if (!n) return;
    yaml::require_map(src_, n, "training");
    yaml::reject_unknown(src_, n, "training", {"local_epochs", "batch_size", "learning_rate"});
    if (n["local_epochs"]) cfg.local_epochs = positive_int(n["local_epochs"], "training.local_epochs");
    if (n["batch_size"]) cfg.batch_size = positive_int(n["batch_size"], "training.batch_size");
    if (n["learning_rate"]) cfg.learning_rate = positive_real(n["learning_rate"], "training.learning_rate");
  }

  void parse_analysis(const YAML::Node& n, ExperimentConfig& cfg) const {
    if (!n) return;
    yaml::require_map(src_, n, "analysis");
    yaml::reject_unknown(src_, n, "analysis", {"energy_mode"});
    if (n["energy_mode"]) {
      try {
        cfg.energy_mode = parse_active_stages(get<std::string>(n["energy_mode"], "analysis.energy_mode"));
      } catch (const InvalidArgument& e) {
        throw ConfigError(e.what(), loc(n["energy_mode"]));
      }
    }
  }

  std::string src_;
  fs::path base_;
};

}  // namespace

ExperimentConfig parse_config_text(const std::string& yaml_text, const std::string& source_name,
                                   const fs::path& base_dir, const ProfileTable* profiles) {
  return Parser(source_name, base_dir).parse(yaml_text, profiles);
}

ExperimentConfig parse_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found", path.string());
  const auto abs = fs::absolute(path);
  auto cfg = parse_config_text(read_file_text(abs), path.string(), abs.parent_path());
  cfg.source = abs;
  return cfg;
}

}  // namespace colext
