#include "cpfn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace cpfn {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                    const std::string& where) {
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key))
      throw InvalidConfig("unknown config key '" + key + "' in " + where);
}

std::vector<double> read_eps0(const json& v) {
  std::vector<double> eps;
  if (v.is_number()) {
    eps.push_back(v.get<double>());
  } else if (v.is_array()) {
    for (const auto& e : v) eps.push_back(e.get<double>());
  } else {
    throw InvalidConfig("train.eps0 must be a number or an array of numbers");
  }
  return eps;
}

std::uint64_t fnv1a64_str(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("config parse failure: ") + e.what());
  }
  if (!j.is_object()) throw InvalidConfig("config root must be a JSON object");

  RunConfig cfg;
  reject_unknown(j, {"seed", "threads", "model", "train", "data", "metrics", "simulate",
                     "eval_sim", "eval_nll"},
                 "config root");
  try {
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.threads = j.value("threads", 0);

    if (j.contains("model")) {
      const auto& m = j.at("model");
      reject_unknown(m, {"rank", "hidden_widths", "latent", "kernel"}, "model");
      cfg.model.rank = m.value("rank", cfg.model.rank);
      if (m.contains("hidden_widths"))
        cfg.model.hidden_widths = m.at("hidden_widths").get<std::vector<int>>();
      if (m.contains("latent"))
        cfg.model.latent = latent_from_string(m.at("latent").get<std::string>());
      if (m.contains("kernel"))
        cfg.model.kernel = kernel_family_from_string(m.at("kernel").get<std::string>());
    }

    if (j.contains("train")) {
      const auto& t = j.at("train");
      reject_unknown(t,
                     {"epochs", "collocation", "delta", "eps0", "learning_rate", "adam_beta1",
                      "adam_beta2", "adam_eps", "validation_fraction", "batch_size",
                      "train_bandwidth"},
                     "train");
      cfg.train.epochs = t.value("epochs", cfg.train.epochs);
      cfg.train.collocation = t.value("collocation", cfg.train.collocation);
      cfg.train.delta = t.value("delta", cfg.train.delta);
      if (t.contains("eps0")) cfg.train.eps0 = read_eps0(t.at("eps0"));
      cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
      cfg.train.adam_beta1 = t.value("adam_beta1", cfg.train.adam_beta1);
      cfg.train.adam_beta2 = t.value("adam_beta2", cfg.train.adam_beta2);
      cfg.train.adam_eps = t.value("adam_eps", cfg.train.adam_eps);
      cfg.train.validation_fraction =
          t.value("validation_fraction", cfg.train.validation_fraction);
      cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
      cfg.train.train_bandwidth = t.value("train_bandwidth", cfg.train.train_bandwidth);
    }

    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, {"path", "x_columns", "y_columns", "y_transform", "one_hot"}, "data");
      cfg.data_path = d.value("path", std::string{});
      if (d.contains("x_columns"))
        cfg.x_columns = d.at("x_columns").get<std::vector<std::string>>();
      if (d.contains("y_columns"))
        cfg.y_columns = d.at("y_columns").get<std::vector<std::string>>();
      if (d.contains("y_transform"))
        cfg.y_transform = transform_from_string(d.at("y_transform").get<std::string>());
      cfg.one_hot = d.value("one_hot", false);
    }

    if (j.contains("metrics")) {
      const auto& m = j.at("metrics");
      reject_unknown(m, {"r_x", "r_tau", "r_y", "r_y_assignment", "r_density"}, "metrics");
      cfg.r_x = m.value("r_x", cfg.r_x);
      cfg.r_tau = m.value("r_tau", cfg.r_tau);
      cfg.r_y = m.value("r_y", cfg.r_y);
      cfg.r_y_assignment = m.value("r_y_assignment", cfg.r_y_assignment);
      cfg.r_density = m.value("r_density", cfg.r_density);
    }

    if (j.contains("simulate")) {
      const auto& s = j.at("simulate");
      reject_unknown(s, {"process", "n"}, "simulate");
      if (s.contains("process"))
        cfg.sim_process = sim_process_from_string(s.at("process").get<std::string>());
      cfg.sim_n = s.value("n", cfg.sim_n);
    }

    if (j.contains("eval_sim")) {
      const auto& s = j.at("eval_sim");
      reject_unknown(s, {"process", "n_list", "replicates", "methods", "kcde_bandwidth"},
                     "eval_sim");
      if (s.contains("process"))
        cfg.study_process = sim_process_from_string(s.at("process").get<std::string>());
      if (s.contains("n_list"))
        cfg.study_n_list = s.at("n_list").get<std::vector<std::size_t>>();
      cfg.study_replicates = s.value("replicates", cfg.study_replicates);
      if (s.contains("methods")) {
        cfg.study_cpfn = false;
        cfg.study_kcde = false;
        for (const auto& m : s.at("methods")) {
          const auto name = m.get<std::string>();
          if (name == "cpfn")
            cfg.study_cpfn = true;
          else if (name == "kcde")
            cfg.study_kcde = true;
          else
            throw InvalidConfig("unknown method '" + name + "' in eval_sim.methods");
        }
      }
      if (s.contains("kcde_bandwidth")) {
        const auto rule = s.at("kcde_bandwidth").get<std::string>();
        if (rule == "silverman")
          cfg.kcde_rule = BandwidthRule::Silverman;
        else if (rule == "cv")
          cfg.kcde_rule = BandwidthRule::CV;
        else
          throw InvalidConfig("eval_sim.kcde_bandwidth must be 'silverman' or 'cv'");
      }
    }

    if (j.contains("eval_nll")) {
      const auto& s = j.at("eval_nll");
      reject_unknown(s, {"folds"}, "eval_nll");
      cfg.folds = s.value("folds", cfg.folds);
    }
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("config value failure: ") + e.what());
  }

  finalize_run_config(cfg);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& c) {
  json j{{"seed", c.seed},
         {"threads", c.threads},
         {"model",
          json{{"rank", c.model.rank},
               {"hidden_widths", c.model.hidden_widths},
               {"latent", to_string(c.model.latent)},
               {"kernel", to_string(c.model.kernel)}}},
         {"train",
          json{{"epochs", c.train.epochs},
               {"collocation", c.train.collocation},
               {"delta", c.train.delta},
               {"eps0", c.train.eps0},
               {"learning_rate", c.train.learning_rate},
               {"adam_beta1", c.train.adam_beta1},
               {"adam_beta2", c.train.adam_beta2},
               {"adam_eps", c.train.adam_eps},
               {"validation_fraction", c.train.validation_fraction},
               {"batch_size", c.train.batch_size},
               {"train_bandwidth", c.train.train_bandwidth}}},
         {"data",
          json{{"path", c.data_path},
               {"x_columns", c.x_columns},
               {"y_columns", c.y_columns},
               {"y_transform", to_string(c.y_transform)},
               {"one_hot", c.one_hot}}},
         {"metrics",
          json{{"r_x", c.r_x},
               {"r_tau", c.r_tau},
               {"r_y", c.r_y},
               {"r_y_assignment", c.r_y_assignment},
               {"r_density", c.r_density}}},
         {"simulate", json{{"process", to_string(c.sim_process)}, {"n", c.sim_n}}},
         {"eval_sim",
          json{{"process", to_string(c.study_process)},
               {"n_list", c.study_n_list},
               {"replicates", c.study_replicates},
               {"cpfn", c.study_cpfn},
               {"kcde", c.study_kcde},
               {"kcde_bandwidth", c.kcde_rule == BandwidthRule::CV ? "cv" : "silverman"}}},
         {"eval_nll", json{{"folds", c.folds}}}};
  return j.dump(2);
}

void finalize_run_config(RunConfig& config) {
  config.hash.clear();
  const std::string canonical = run_config_to_json(config);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64_str(canonical)));
  config.hash = buf;
}

}  // namespace cpfn
