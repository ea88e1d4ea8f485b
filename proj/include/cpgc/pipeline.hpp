#pragma once

// The five run stages behind the command-line tool: corpus generation, zoo
// pre-training, UAP training, evaluation and report merging. Each stage reads
// its inputs from the run root and writes its outputs below it.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cpgc/attack.hpp"
#include "cpgc/checkpoint.hpp"
#include "cpgc/config.hpp"
#include "cpgc/corpus.hpp"
#include "cpgc/dual_encoder.hpp"
#include "cpgc/eval.hpp"
#include "cpgc/generator.hpp"

namespace cpgc::pipeline {

using config::RunConfig;

struct StageOptions {
  bool force = false;
  /// Artifact name: a variant name, "gap", "random" or (eval only) "null".
  std::optional<std::string> variant;
  std::optional<defense::Defense> defense;
  std::optional<corpus::Domain> domain;
  /// Progress lines go here; nullptr silences them.
  std::ostream* log = &std::cerr;
};

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void say(const StageOptions& o, const std::string& line) {
  if (o.log) *o.log << line << '\n' << std::flush;
}

/// Creates `dir`, or clears it under --force; refuses to touch existing output otherwise.
inline void prepare_output(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec)) {
    if (!force) throw PipelineError(dir.string() + " already exists; rerun with --force to overwrite");
    fs::remove_all(dir, ec);
    if (ec) throw FileError("cannot clear " + dir.string() + ": " + ec.message());
  }
  fs::create_directories(dir, ec);
  if (ec) throw FileError("cannot create " + dir.string() + ": " + ec.message());
}

inline void archive_config(const RunConfig& c, const fs::path& dir, const std::string& command) {
  json j = config::to_json(c);
  j["command"] = command;
  io::write_json(dir / "run_config.json", j);
}

inline void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw PipelineError("missing " + what + ": " + p.string());
}

inline std::string artifact_name(const RunConfig& c, const StageOptions& o) {
  return o.variant.value_or(attack::variant_name(c.attack.variant));
}

inline fs::path artifact_manifest(const RunConfig& c, const std::string& name) { return c.artifact_dir() / name / "uap.json"; }

}  // namespace detail

inline corpus::Corpus load_corpus(const RunConfig& c, corpus::Domain d) {
  detail::require(c.corpus_dir(d) / "manifest.json", "corpus " + corpus::domain_name(d));
  return corpus::read_corpus(c.corpus_dir(d));
}

inline eval::ModelZoo load_zoo(const RunConfig& c) {
  detail::require(c.zoo_dir() / "zoo.json", "zoo");
  return eval::load_zoo(c.zoo_dir());
}

// gen-data ---------------------------------------------------------------------------

struct GenDataResult {
  std::vector<fs::path> dirs;
  std::vector<std::string> fingerprints;
};

inline GenDataResult gen_data(const RunConfig& c, const StageOptions& o = {}) {
  std::vector<corpus::Domain> domains = c.corpus.domains;
  if (o.domain) domains = {*o.domain};
  GenDataResult r;
  for (corpus::Domain d : domains) {
    const fs::path dir = c.corpus_dir(d);
    detail::prepare_output(dir, o.force);
    const corpus::Corpus data = corpus::generate_corpus(c.corpus.n_train, c.corpus.n_test, c.corpus.captions_per_image, d, c.seed);
    corpus::write_corpus(data, dir);
    detail::archive_config(c, dir, "gen-data");
    r.dirs.push_back(dir);
    r.fingerprints.push_back(corpus::fingerprint(data));
    detail::say(o, "corpus " + corpus::domain_name(d) + ": train " + std::to_string(data.train.size()) + " / test " +
                       std::to_string(data.test.size()) + " -> " + dir.string() + " (fingerprint " + r.fingerprints.back() + ")");
  }
  return r;
}

// pretrain ---------------------------------------------------------------------------

struct MemberRecall {
  std::string id;
  double text_retrieval = 0.0;
  double image_retrieval = 0.0;
  bool passes = false;
};

struct PretrainResult {
  std::vector<MemberRecall> members;
  bool all_pass() const {
    for (const auto& m : members)
      if (!m.passes) return false;
    return true;
  }
};

inline std::string recall_csv(const std::vector<MemberRecall>& members) {
  std::string out = "member,tr_r1,ir_r1,passes\n";
  for (const auto& m : members)
    out += m.id + "," + eval::format_double(m.text_retrieval) + "," + eval::format_double(m.image_retrieval) + "," +
           (m.passes ? "1" : "0") + "\n";
  return out;
}

/// Trains every zoo member on domain A. Checkpoints are written even when a
/// member misses the recall floor; the caller decides the exit status.
inline PretrainResult pretrain(const RunConfig& c, const StageOptions& o = {}) {
  const corpus::Corpus data = load_corpus(c, corpus::Domain::A);
  const fs::path dir = c.zoo_dir();
  detail::prepare_output(dir, o.force);
  eval::ModelZoo zoo;
  PretrainResult r;
  for (model::ArchKind arch : c.zoo.archs) {
    for (std::uint64_t seed : c.zoo.seeds) {
      const std::string id = model::arch_name(arch) + "-s" + std::to_string(seed);
      model::DualEncoderModel m;
      try {
        m = model::pretrain_dual_encoder(data, arch, seed, c.pretrain, [&](std::size_t e, double loss) {
          if ((e + 1) % 10 == 0 || e + 1 == c.pretrain.epochs) {
            char buf[96];
            std::snprintf(buf, sizeof buf, "  %s epoch %zu loss %.4f", id.c_str(), e + 1, loss);
            detail::say(o, buf);
          }
        });
      } catch (const TrainingFailure& e) {
        throw PipelineError("pretraining " + id + " failed at step " + std::to_string(e.iteration) + ": " + e.what());
      }
      const model::RetrievalRecall rec = model::recall_at_k(m, data.test, 1);
      const bool ok = rec.text_retrieval >= c.zoo.recall_floor && rec.image_retrieval >= c.zoo.recall_floor;
      r.members.push_back({id, rec.text_retrieval, rec.image_retrieval, ok});
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s held-out R@1 TR %.3f IR %.3f%s", id.c_str(), rec.text_retrieval, rec.image_retrieval,
                    ok ? "" : "  (below floor)");
      detail::say(o, buf);
      zoo.members.push_back(std::move(m));
    }
  }
  zoo.surrogate = zoo.index_of(c.zoo.surrogate);
  eval::save_zoo(zoo, dir, corpus::fingerprint(data));
  io::write_file(dir / "recall.csv", recall_csv(r.members));
  detail::archive_config(c, dir, "pretrain");
  return r;
}

// train-uap --------------------------------------------------------------------------

struct TrainUapResult {
  gen::UapArtifact artifact;
  fs::path manifest;
};

/// Trains (or, for "random", draws) one artifact and stores it under
/// artifacts/<name>/ with its loss traces and generator checkpoints.
inline TrainUapResult train_uap(const RunConfig& c, const StageOptions& o = {}) {
  const std::string name = detail::artifact_name(c, o);
  if (name == "null") throw PipelineError("the null artifact is built in; it needs no training");
  const corpus::Corpus data = load_corpus(c, corpus::Domain::A);
  eval::ModelZoo zoo = load_zoo(c);
  model::DualEncoderModel& surrogate = zoo.surrogate_model();
  const fs::path dir = c.artifact_dir() / name;
  detail::prepare_output(dir, o.force);

  TrainUapResult r;
  if (name == "random") {
    r.artifact = attack::random_noise_uap(c.seed, c.attack.epsilon_v, surrogate.id());
    r.artifact.surrogate_hash = model::model_hash(surrogate);
  } else {
    attack::AttackConfig cfg = c.attack;
    cfg.variant = attack::parse_variant(name);
    attack::UapTrainResult t;
    try {
      t = attack::train_uap(data, surrogate, cfg, [&](const char* side, std::size_t e, double loss) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "  %s epoch %zu mean loss %.5f", side, e + 1, loss);
        detail::say(o, buf);
      });
    } catch (const TrainingFailure& e) {
      throw PipelineError(std::string("UAP training failed at iteration ") + std::to_string(e.iteration) + ": " + e.what());
    }
    r.artifact = t.artifact;
    attack::write_trace_csv(t.image.trace, dir / "image_trace.csv");
    attack::write_trace_csv(t.text.trace, dir / "text_trace.csv");
    gen::save_generator(t.image.generator, t.image.noise, dir / "image_generator.json", {{"side", "image"}});
    gen::save_generator(t.text.generator, t.text.noise, dir / "text_generator.json", {{"side", "text"}});
  }
  r.manifest = dir / "uap.json";
  gen::save_artifact(r.artifact, r.manifest);
  detail::archive_config(c, dir, "train-uap");
  char buf[192];
  std::snprintf(buf, sizeof buf, "artifact %s: ||delta||_inf = %.6f (budget %.6f), word %s -> %s", name.c_str(), gen::linf(r.artifact.delta),
                r.artifact.epsilon_v, r.artifact.word ? corpus::vocabulary()[static_cast<std::size_t>(*r.artifact.word)].c_str() : "(none)",
                r.manifest.string().c_str());
  detail::say(o, buf);
  return r;
}

// eval -------------------------------------------------------------------------------

struct EvalStageResult {
  std::vector<eval::EvalReport> rows;
  fs::path dir;
  std::string summary;
};

inline gen::UapArtifact load_named_artifact(const RunConfig& c, const std::string& name, const std::string& surrogate_id) {
  if (name == "null") return gen::UapArtifact::null(surrogate_id);
  const fs::path manifest = detail::artifact_manifest(c, name);
  detail::require(manifest, "artifact '" + name + "'");
  return gen::load_artifact(manifest);
}

/// White-box and mean black-box ASR at k = 1 (or the smallest k evaluated).
inline std::string summary_line(const std::vector<eval::EvalReport>& rows) {
  std::size_t k = SIZE_MAX;
  for (const auto& r : rows) k = std::min(k, r.k);
  std::ostringstream out;
  out << "ASR@" << k << " white-box TR " << eval::percent(eval::white_box_row(rows, eval::Task::TR, k).asr) << "% IR "
      << eval::percent(eval::white_box_row(rows, eval::Task::IR, k).asr) << "%";
  try {
    out << " | mean black-box TR " << eval::percent(eval::mean_black_box_asr(rows, eval::Task::TR, k)) << "% IR "
        << eval::percent(eval::mean_black_box_asr(rows, eval::Task::IR, k)) << "%";
  } catch (const UndefinedMetricError&) {
    out << " | no black-box targets";
  }
  return out.str();
}

inline EvalStageResult evaluate(const RunConfig& c, const StageOptions& o = {}) {
  const std::string name = detail::artifact_name(c, o);
  eval::ModelZoo zoo = load_zoo(c);
  const gen::UapArtifact artifact = load_named_artifact(c, name, zoo.surrogate_model().id());
  if (!artifact.surrogate_id.empty() && artifact.surrogate_id != zoo.surrogate_model().id())
    throw PipelineError("artifact was trained on " + artifact.surrogate_id + " but the zoo surrogate is " + zoo.surrogate_model().id());

  std::vector<defense::Defense> defenses = c.eval.defenses;
  std::vector<corpus::Domain> domains = c.eval.domains;
  std::string dir_name = name;
  if (o.defense) defenses = {*o.defense}, dir_name += "@" + defense::defense_name(*o.defense);
  if (o.domain) domains = {*o.domain}, dir_name += "@" + corpus::domain_name(*o.domain);

  EvalStageResult r;
  r.dir = c.report_dir() / dir_name;
  detail::prepare_output(r.dir, o.force);
  for (corpus::Domain d : domains) {
    const corpus::Corpus data = load_corpus(c, d);
    for (defense::Defense def : defenses) {
      eval::EvalOptions opt{.ks = c.eval.ks, .mode = c.eval.mode, .defense = def, .domain = "A->A"};
      auto rows = eval::cross_domain_eval(artifact, data, zoo, "A", opt);
      r.rows.insert(r.rows.end(), rows.begin(), rows.end());
      detail::say(o, "evaluated " + name + " on domain " + corpus::domain_name(d) + " with defense " + defense::defense_name(def));
    }
  }
  eval::write_reports_csv(r.rows, r.dir / "report.csv");
  io::write_file(r.dir / "table.txt", eval::render_rows(r.rows));
  io::write_file(r.dir / "chart.svg", eval::render_svg(r.rows, *std::min_element(c.eval.ks.begin(), c.eval.ks.end())));
  detail::archive_config(c, r.dir, "eval");
  r.summary = name + ": " + summary_line(r.rows);
  return r;
}

// report -----------------------------------------------------------------------------

struct ReportResult {
  std::vector<eval::EvalReport> rows;
  fs::path dir;
  std::string document;
};

/// Every reports/<run>/report.csv below the run root, in path order.
inline std::vector<fs::path> discover_reports(const RunConfig& c) {
  std::vector<fs::path> found;
  if (!fs::exists(c.report_dir())) return found;
  for (const auto& e : fs::directory_iterator(c.report_dir()))
    if (e.is_directory() && fs::exists(e.path() / "report.csv")) found.push_back(e.path() / "report.csv");
  std::sort(found.begin(), found.end());
  return found;
}

/// Merges report CSVs into one comparison document under `out_dir`
/// (default: reports/summary).
inline ReportResult report(const RunConfig& c, std::vector<fs::path> inputs, const std::optional<fs::path>& out_dir,
                           const StageOptions& o = {}) {
  if (inputs.empty()) inputs = discover_reports(c);
  if (inputs.empty()) throw PipelineError("no report CSVs found under " + c.report_dir().string());
  std::vector<eval::SourcedReport> sourced;
  for (const auto& p : inputs) {
    detail::require(p, "report CSV");
    for (auto& row : eval::read_reports_csv(p)) sourced.push_back({std::move(row), p.string()});
  }
  ReportResult r;
  r.rows = eval::merge_reports(sourced);
  r.dir = out_dir.value_or(c.report_dir() / "summary");
  detail::prepare_output(r.dir, o.force);
  std::size_t k = SIZE_MAX;
  for (const auto& row : r.rows) k = std::min(k, row.k);
  std::ostringstream doc;
  doc << "Merged " << r.rows.size() << " rows from " << inputs.size() << " file(s).\n\n";
  doc << eval::render_comparison(r.rows, k) << "\n";
  doc << eval::render_rows(r.rows);
  r.document = doc.str();
  eval::write_reports_csv(r.rows, r.dir / "merged.csv");
  io::write_file(r.dir / "comparison.txt", r.document);
  io::write_file(r.dir / "chart.svg", eval::render_svg(r.rows, k));
  detail::archive_config(c, r.dir, "report");
  return r;
}

}  // namespace cpgc::pipeline
