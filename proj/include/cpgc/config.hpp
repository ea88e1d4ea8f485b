#pragma once

// Run configuration shared by the command-line tool and the acceptance suite.

#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include "cpgc/attack.hpp"
#include "cpgc/checkpoint.hpp"
#include "cpgc/defense.hpp"
#include "cpgc/dual_encoder.hpp"
#include "cpgc/eval.hpp"

namespace cpgc::config {

/// Environment variable that replaces `paths.root` when set and nonempty.
inline constexpr const char* kRunRootEnv = "CPGC_RUN_ROOT";

struct Paths {
  fs::path root = "runs";
  fs::path corpus = "corpus";
  fs::path zoo = "zoo";
  fs::path artifacts = "artifacts";
  fs::path reports = "reports";
};

struct CorpusSpec {
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t captions_per_image = 3;
  std::vector<corpus::Domain> domains = {corpus::Domain::A, corpus::Domain::B};
};

struct ZooSpec {
  std::vector<model::ArchKind> archs = {model::ArchKind::MeanPool, model::ArchKind::MaxPool};
  std::vector<std::uint64_t> seeds = {1, 2};
  std::string surrogate = "mean_pool-s1";
  double recall_floor = 0.8;
};

struct EvalSpec {
  std::vector<std::size_t> ks = {1, 5, 10};
  std::vector<defense::Defense> defenses = {defense::Defense::None};
  std::vector<corpus::Domain> domains = {corpus::Domain::A};
  eval::PerturbMode mode = eval::PerturbMode::Joint;
};

struct RunConfig {
  std::uint64_t seed = 0;
  Paths paths;
  CorpusSpec corpus;
  model::PretrainConfig pretrain;
  ZooSpec zoo;
  attack::AttackConfig attack = desk_attack();
  EvalSpec eval;

  /// Attack schedule used at desk scale: 2 epochs of 300 iterations.
  static attack::AttackConfig desk_attack() {
    attack::AttackConfig a;
    a.epochs = 2;
    a.iterations_per_epoch = 300;
    return a;
  }

  /// The global seed drives the corpus and the attack; zoo seeds stay as listed.
  void set_seed(std::uint64_t s) {
    seed = s;
    attack.seed = s;
  }

  fs::path corpus_dir(corpus::Domain d) const { return paths.root / paths.corpus / corpus::domain_name(d); }
  fs::path zoo_dir() const { return paths.root / paths.zoo; }
  fs::path artifact_dir() const { return paths.root / paths.artifacts; }
  fs::path report_dir() const { return paths.root / paths.reports; }

  void validate() const {
    if (corpus.n_train < 1 || corpus.n_test < 1 || corpus.captions_per_image < 1)
      throw ContractError("corpus sizes must be positive");
    if (corpus.domains.empty() || corpus.domains.front() != corpus::Domain::A)
      throw ContractError("corpus.domains must start with A");
    if (zoo.archs.empty() || zoo.seeds.empty()) throw ContractError("zoo needs at least one arch and one seed");
    if (!(zoo.recall_floor >= 0.0 && zoo.recall_floor <= 1.0)) throw ContractError("zoo.recall_floor must lie in [0, 1]");
    bool found = false;
    for (auto a : zoo.archs)
      for (auto s : zoo.seeds) found |= model::arch_name(a) + "-s" + std::to_string(s) == zoo.surrogate;
    if (!found) throw ContractError("zoo.surrogate '" + zoo.surrogate + "' is not a zoo member");
    if (eval.ks.empty()) throw ContractError("eval.ks must be nonempty");
    for (auto k : eval.ks)
      if (k < 1) throw ContractError("eval.ks entries must be at least 1");
    if (eval.defenses.empty() || eval.domains.empty()) throw ContractError("eval needs at least one defense and domain");
    for (auto d : eval.domains)
      if (std::find(corpus.domains.begin(), corpus.domains.end(), d) == corpus.domains.end())
        throw ContractError("eval domain " + corpus::domain_name(d) + " is not generated by corpus.domains");
    attack.validate();
  }
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ContractError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.contains(k)) throw ContractError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_path(const json& j, const char* key, fs::path& out) {
  if (j.contains(key)) out = j.at(key).get<std::string>();
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json domains = json::array(), eval_domains = json::array(), archs = json::array(), defenses = json::array();
  for (auto d : c.corpus.domains) domains.push_back(corpus::domain_name(d));
  for (auto d : c.eval.domains) eval_domains.push_back(corpus::domain_name(d));
  for (auto a : c.zoo.archs) archs.push_back(model::arch_name(a));
  for (auto d : c.eval.defenses) defenses.push_back(defense::defense_name(d));
  return {
      {"seed", c.seed},
      {"paths",
       {{"root", c.paths.root.string()},
        {"corpus", c.paths.corpus.string()},
        {"zoo", c.paths.zoo.string()},
        {"artifacts", c.paths.artifacts.string()},
        {"reports", c.paths.reports.string()}}},
      {"corpus",
       {{"n_train", c.corpus.n_train},
        {"n_test", c.corpus.n_test},
        {"captions_per_image", c.corpus.captions_per_image},
        {"domains", domains}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch", c.pretrain.batch},
        {"temperature", c.pretrain.temperature},
        {"learning_rate", c.pretrain.learning_rate}}},
      {"zoo", {{"archs", archs}, {"seeds", c.zoo.seeds}, {"surrogate", c.zoo.surrogate}, {"recall_floor", c.zoo.recall_floor}}},
      {"attack", attack::to_json(c.attack)},
      {"eval", {{"ks", c.eval.ks}, {"defenses", defenses}, {"domains", eval_domains}, {"mode", eval::mode_name(c.eval.mode)}}},
  };
}

/// Missing keys keep their defaults; unknown keys at any level are rejected.
inline RunConfig run_config_from_json(const json& j) {
  using detail::read;
  RunConfig c;
  detail::reject_unknown(j, {"seed", "paths", "corpus", "pretrain", "zoo", "attack", "eval"}, "");
  read(j, "seed", c.seed);
  if (j.contains("paths")) {
    const json& p = j.at("paths");
    detail::reject_unknown(p, {"root", "corpus", "zoo", "artifacts", "reports"}, "paths");
    detail::read_path(p, "root", c.paths.root);
    detail::read_path(p, "corpus", c.paths.corpus);
    detail::read_path(p, "zoo", c.paths.zoo);
    detail::read_path(p, "artifacts", c.paths.artifacts);
    detail::read_path(p, "reports", c.paths.reports);
  }
  if (j.contains("corpus")) {
    const json& p = j.at("corpus");
    detail::reject_unknown(p, {"n_train", "n_test", "captions_per_image", "domains"}, "corpus");
    read(p, "n_train", c.corpus.n_train);
    read(p, "n_test", c.corpus.n_test);
    read(p, "captions_per_image", c.corpus.captions_per_image);
    if (p.contains("domains")) {
      c.corpus.domains.clear();
      for (const auto& d : p.at("domains")) c.corpus.domains.push_back(corpus::parse_domain(d.get<std::string>()));
    }
  }
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    detail::reject_unknown(p, {"epochs", "batch", "temperature", "learning_rate"}, "pretrain");
    read(p, "epochs", c.pretrain.epochs);
    read(p, "batch", c.pretrain.batch);
    read(p, "temperature", c.pretrain.temperature);
    read(p, "learning_rate", c.pretrain.learning_rate);
  }
  if (j.contains("zoo")) {
    const json& p = j.at("zoo");
    detail::reject_unknown(p, {"archs", "seeds", "surrogate", "recall_floor"}, "zoo");
    if (p.contains("archs")) {
      c.zoo.archs.clear();
      for (const auto& a : p.at("archs")) c.zoo.archs.push_back(model::parse_arch(a.get<std::string>()));
    }
    read(p, "seeds", c.zoo.seeds);
    read(p, "surrogate", c.zoo.surrogate);
    read(p, "recall_floor", c.zoo.recall_floor);
  }
  if (j.contains("attack")) {
    json merged = attack::to_json(c.attack);
    for (const auto& [k, v] : j.at("attack").items()) merged[k] = v;
    c.attack = attack::attack_config_from_json(merged);
  }
  if (j.contains("eval")) {
    const json& p = j.at("eval");
    detail::reject_unknown(p, {"ks", "defenses", "domains", "mode"}, "eval");
    read(p, "ks", c.eval.ks);
    if (p.contains("defenses")) {
      c.eval.defenses.clear();
      for (const auto& d : p.at("defenses")) c.eval.defenses.push_back(defense::parse_defense(d.get<std::string>()));
    }
    if (p.contains("domains")) {
      c.eval.domains.clear();
      for (const auto& d : p.at("domains")) c.eval.domains.push_back(corpus::parse_domain(d.get<std::string>()));
    }
    if (p.contains("mode")) c.eval.mode = eval::parse_mode(p.at("mode").get<std::string>());
  }
  c.set_seed(c.seed);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  try {
    return run_config_from_json(io::read_json(path));
  } catch (const json::exception& e) {
    throw ContractError(path.string() + ": " + e.what());
  }
}

/// Applies the run-root environment override, then makes every path absolute.
inline void resolve_paths(RunConfig& c) {
  if (const char* env = std::getenv(kRunRootEnv); env && *env) c.paths.root = env;
  c.paths.root = fs::absolute(c.paths.root).lexically_normal();
}

}  // namespace cpgc::config
