#pragma once

// Retrieval attack evaluation: ASR@k, relative alignment distance, transfer
// over a model zoo, ablations, defenses, cross-domain runs and baselines.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cpgc/attack.hpp"
#include "cpgc/checkpoint.hpp"
#include "cpgc/corpus.hpp"
#include "cpgc/defense.hpp"
#include "cpgc/dual_encoder.hpp"
#include "cpgc/errors.hpp"
#include "cpgc/generator.hpp"

namespace cpgc::eval {

using corpus::Caption;
using corpus::PairedSample;
using defense::Defense;
using model::DualEncoderModel;

enum class Task : std::uint8_t { TR, IR };

/// Which modalities carry the perturbation. Joint perturbs both sides of every
/// similarity; QueryOnly perturbs images for TR and texts for IR.
enum class PerturbMode : std::uint8_t { Joint, QueryOnly, ImageOnly, TextOnly };

inline std::string task_name(Task t) { return t == Task::TR ? "TR" : "IR"; }

inline Task parse_task(const std::string& s) {
  if (s == "TR") return Task::TR;
  if (s == "IR") return Task::IR;
  throw ContractError("unknown task '" + s + "'");
}

inline std::string mode_name(PerturbMode m) {
  switch (m) {
    case PerturbMode::Joint: return "joint";
    case PerturbMode::QueryOnly: return "query_only";
    case PerturbMode::ImageOnly: return "image_only";
    case PerturbMode::TextOnly: return "text_only";
  }
  return "?";
}

inline PerturbMode parse_mode(const std::string& s) {
  for (PerturbMode m : {PerturbMode::Joint, PerturbMode::QueryOnly, PerturbMode::ImageOnly, PerturbMode::TextOnly})
    if (mode_name(m) == s) return m;
  throw ContractError("unknown perturbation mode '" + s + "'");
}

inline bool perturbs_images(PerturbMode m, Task t) {
  return m == PerturbMode::Joint || m == PerturbMode::ImageOnly || (m == PerturbMode::QueryOnly && t == Task::TR);
}
inline bool perturbs_texts(PerturbMode m, Task t) {
  return m == PerturbMode::Joint || m == PerturbMode::TextOnly || (m == PerturbMode::QueryOnly && t == Task::IR);
}

// Model zoo ----------------------------------------------------------------------------

struct ModelZoo {
  std::vector<DualEncoderModel> members;
  std::size_t surrogate = 0;

  DualEncoderModel& surrogate_model() { return members.at(surrogate); }

  std::size_t index_of(const std::string& id) const {
    for (std::size_t i = 0; i < members.size(); ++i)
      if (members[i].id() == id) return i;
    throw ContractError("zoo has no member '" + id + "'");
  }
};

/// Writes one checkpoint per member plus `zoo.json` listing them in order.
inline void save_zoo(ModelZoo& zoo, const fs::path& dir, const std::string& corpus_hash, const json& extra = json::object()) {
  json list = json::array();
  for (auto& m : zoo.members) {
    model::save_model(m, dir / (m.id() + ".json"), corpus_hash);
    list.push_back({{"id", m.id()}, {"checkpoint", m.id() + ".json"}, {"param_hash", model::model_hash(m)}});
  }
  json z = {{"members", list}, {"surrogate", zoo.members.at(zoo.surrogate).id()}, {"corpus_hash", corpus_hash}};
  for (const auto& [k, v] : extra.items()) z[k] = v;
  io::write_json(dir / "zoo.json", z);
}

inline ModelZoo load_zoo(const fs::path& dir) {
  const json z = io::read_json(dir / "zoo.json");
  ModelZoo zoo;
  for (const auto& e : z.at("members")) zoo.members.push_back(model::load_model(dir / e.at("checkpoint").get<std::string>()));
  if (zoo.members.empty()) throw FileError("empty zoo: " + (dir / "zoo.json").string());
  zoo.surrogate = zoo.index_of(z.at("surrogate").get<std::string>());
  return zoo;
}

// Perturbed evaluation split ---------------------------------------------------------------

/// Clean and adversarial inputs of a split. Word positions are chosen with the
/// attacker's surrogate, so black-box targets see the same adversarial text.
struct PerturbedSplit {
  std::vector<Tensor> clean_images, adv_images;
  std::vector<Caption> clean_captions, adv_captions;
  std::vector<std::size_t> image_class, caption_class, caption_owner;
  std::size_t degenerate_texts = 0;

  std::size_t max_token_changes() const {
    std::size_t worst = 0;
    for (std::size_t j = 0; j < clean_captions.size(); ++j) {
      std::size_t diff = clean_captions[j].size() != adv_captions[j].size() ? SIZE_MAX : 0;
      if (diff == 0)
        for (std::size_t p = 0; p < clean_captions[j].size(); ++p) diff += clean_captions[j][p] != adv_captions[j][p];
      worst = std::max(worst, diff);
    }
    return worst;
  }
};

inline PerturbedSplit perturb_split(const std::vector<PairedSample>& split, const gen::UapArtifact& artifact,
                                    DualEncoderModel& surrogate) {
  if (split.empty()) throw ContractError("evaluation split is empty");
  gen::check_budget(artifact);
  PerturbedSplit p;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& s = split[i];
    p.clean_images.push_back(s.image);
    p.adv_images.push_back(attack::apply_image(s.image, artifact.delta));
    p.image_class.push_back(s.attributes.class_index());
    for (const auto& c : s.captions) {
      p.clean_captions.push_back(c);
      p.caption_class.push_back(s.attributes.class_index());
      p.caption_owner.push_back(i);
      if (artifact.word) {
        const auto adv = attack::apply_text(c, *artifact.word, surrogate);
        p.degenerate_texts += adv.degenerate;
        p.adv_captions.push_back(adv.tokens);
      } else {
        p.adv_captions.push_back(c);
      }
    }
  }
  return p;
}

/// Embeddings of one target model, with the defense applied to every image.
struct EmbeddedSplit {
  Tensor clean_images, adv_images, clean_texts, adv_texts;
};

inline Tensor embed_image_list(DualEncoderModel& m, const std::vector<Tensor>& images, Defense d) {
  std::vector<Tensor> defended;
  defended.reserve(images.size());
  for (const auto& im : images) defended.push_back(defense::apply_defense(im, d));
  std::vector<const Tensor*> ptrs;
  for (const auto& im : defended) ptrs.push_back(&im);
  return model::embed_images(m, ptrs);
}

inline EmbeddedSplit embed_split(DualEncoderModel& m, const PerturbedSplit& p, Defense d = Defense::None) {
  EmbeddedSplit e;
  e.clean_images = embed_image_list(m, p.clean_images, d);
  e.adv_images = embed_image_list(m, p.adv_images, d);
  e.clean_texts = model::embed_texts(m, p.clean_captions);
  e.adv_texts = model::embed_texts(m, p.adv_captions);
  return e;
}

// Ranking -----------------------------------------------------------------------------

/// For each query row, the 0-based rank of the best same-class gallery item
/// under descending cosine similarity with ties broken by ascending index.
inline std::vector<std::size_t> first_match_ranks(const Tensor& queries, const std::vector<std::size_t>& query_class,
                                                  const Tensor& gallery, const std::vector<std::size_t>& gallery_class) {
  const std::size_t d = queries.shape.at(1);
  if (gallery.shape.at(1) != d) throw ShapeError("query and gallery widths differ");
  const std::size_t nq = queries.shape[0], ng = gallery.shape[0];
  std::vector<double> gnorm(ng);
  for (std::size_t j = 0; j < ng; ++j) {
    double gn = 0.0;
    for (std::size_t c = 0; c < d; ++c) gn += gallery[j * d + c] * gallery[j * d + c];
    gnorm[j] = std::sqrt(gn);
  }
  std::vector<std::size_t> ranks(nq);
  std::vector<double> sim(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    double qn = 0.0;
    for (std::size_t c = 0; c < d; ++c) qn += queries[q * d + c] * queries[q * d + c];
    qn = std::sqrt(qn);
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < ng; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += queries[q * d + c] * gallery[j * d + c];
      sim[j] = s / (qn * gnorm[j]);
      if (gallery_class[j] == query_class[q] && (!best || sim[j] > sim[*best])) best = j;
    }
    if (!best) {
      ranks[q] = ng;
      continue;
    }
    std::size_t r = 0;
    for (std::size_t j = 0; j < ng; ++j) r += sim[j] > sim[*best] || (sim[j] == sim[*best] && j < *best);
    ranks[q] = r;
  }
  return ranks;
}

struct TaskRanks {
  std::vector<std::size_t> clean, adversarial;
};

inline TaskRanks task_ranks(const EmbeddedSplit& e, const PerturbedSplit& p, Task task, PerturbMode mode) {
  const Tensor& img = perturbs_images(mode, task) ? e.adv_images : e.clean_images;
  const Tensor& txt = perturbs_texts(mode, task) ? e.adv_texts : e.clean_texts;
  TaskRanks r;
  if (task == Task::TR) {
    r.clean = first_match_ranks(e.clean_images, p.image_class, e.clean_texts, p.caption_class);
    r.adversarial = first_match_ranks(img, p.image_class, txt, p.caption_class);
  } else {
    r.clean = first_match_ranks(e.clean_texts, p.caption_class, e.clean_images, p.image_class);
    r.adversarial = first_match_ranks(txt, p.caption_class, img, p.image_class);
  }
  return r;
}

struct AsrResult {
  double clean_recall = 0.0;
  double adversarial_recall = 0.0;
  double asr = 0.0;
  std::size_t initially_correct = 0;
  std::size_t queries = 0;
};

/// ASR@k over the queries whose clean retrieval was correct at k.
inline AsrResult asr_from_ranks(const TaskRanks& r, std::size_t k) {
  AsrResult a;
  a.queries = r.clean.size();
  std::size_t adv_hits = 0, flipped = 0;
  for (std::size_t q = 0; q < a.queries; ++q) {
    const bool before = r.clean[q] < k, after = r.adversarial[q] < k;
    a.initially_correct += before;
    adv_hits += after;
    flipped += before && !after;
  }
  if (a.initially_correct == 0) throw UndefinedMetricError("ASR@" + std::to_string(k) + " is undefined: no query was initially correct");
  a.clean_recall = static_cast<double>(a.initially_correct) / static_cast<double>(a.queries);
  a.adversarial_recall = static_cast<double>(adv_hits) / static_cast<double>(a.queries);
  a.asr = static_cast<double>(flipped) / static_cast<double>(a.initially_correct);
  return a;
}

/// One-shot ASR of `artifact` against `target`. Word positions come from
/// `position_model` (the surrogate) when given, else from the target itself.
inline AsrResult attack_success_rate(DualEncoderModel& target, const std::vector<PairedSample>& split,
                                     const gen::UapArtifact& artifact, std::size_t k, Task task,
                                     PerturbMode mode = PerturbMode::Joint, Defense d = Defense::None,
                                     DualEncoderModel* position_model = nullptr) {
  if (k == 0) throw ContractError("k must be positive");
  const PerturbedSplit p = perturb_split(split, artifact, position_model ? *position_model : target);
  return asr_from_ranks(task_ranks(embed_split(target, p, d), p, task, mode), k);
}

// Relative distance ----------------------------------------------------------------------

struct RelativeDistance {
  double mean = 0.0;
  std::size_t pairs = 0;
  std::size_t skipped = 0;  // clean distance below 1e-8
};

/// Mean over matched (image, caption) pairs of (adv distance - clean distance) / clean distance.
inline RelativeDistance relative_distance(const EmbeddedSplit& e, const PerturbedSplit& p, PerturbMode mode = PerturbMode::Joint) {
  const bool pi = mode != PerturbMode::TextOnly, pt = mode != PerturbMode::ImageOnly;
  const Tensor& img = pi ? e.adv_images : e.clean_images;
  const Tensor& txt = pt ? e.adv_texts : e.clean_texts;
  const std::size_t d = e.clean_images.shape.at(1);
  auto dist = [d](const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = a[i * d + k] - b[j * d + k];
      s += diff * diff;
    }
    return std::sqrt(s);
  };
  RelativeDistance r;
  double total = 0.0;
  for (std::size_t j = 0; j < p.clean_captions.size(); ++j) {
    const std::size_t i = p.caption_owner[j];
    const double clean = dist(e.clean_images, i, e.clean_texts, j);
    if (clean <= 1e-8) {
      ++r.skipped;
      continue;
    }
    total += (dist(img, i, txt, j) - clean) / clean;
    ++r.pairs;
  }
  r.mean = r.pairs ? total / static_cast<double>(r.pairs) : 0.0;
  return r;
}

inline RelativeDistance relative_distance(DualEncoderModel& m, const std::vector<PairedSample>& split, const gen::UapArtifact& artifact,
                                          DualEncoderModel* position_model = nullptr) {
  const PerturbedSplit p = perturb_split(split, artifact, position_model ? *position_model : m);
  return relative_distance(embed_split(m, p), p);
}

// Reports -------------------------------------------------------------------------------

struct EvalReport {
  std::string method;   // cpgc, gap, random, null
  std::string variant;  // full or an ablation flag
  std::string surrogate;
  std::string target;
  bool white_box = false;
  Task task = Task::TR;
  std::size_t k = 1;
  std::string mode = "joint";
  std::string defense = "none";
  std::string domain = "A->A";
  double clean_recall = 0.0;
  double adversarial_recall = 0.0;
  double asr = 0.0;
  double d_rel = 0.0;
  std::size_t initially_correct = 0;
  std::size_t samples = 0;
  double runtime_seconds = 0.0;  // shown in tables, kept out of CSVs
};

struct EvalOptions {
  std::vector<std::size_t> ks = {1, 5, 10};
  PerturbMode mode = PerturbMode::Joint;
  Defense defense = Defense::None;
  std::string domain = "A->A";
};

inline std::string variant_of(const gen::UapArtifact& a) {
  const std::string prefix = "cpgc_";
  if (a.method.rfind(prefix, 0) == 0) return a.method.substr(prefix.size());
  return "full";
}

inline std::string method_of(const gen::UapArtifact& a) { return a.method.rfind("cpgc", 0) == 0 ? "cpgc" : a.method; }

/// Sorts by target id, then task (TR first), then k.
inline void sort_reports(std::vector<EvalReport>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const EvalReport& a, const EvalReport& b) {
    return std::tie(a.target, a.task, a.k) < std::tie(b.target, b.task, b.k);
  });
}

/// One report per (target, task, k); the surrogate row is flagged white-box.
inline std::vector<EvalReport> evaluate_transfer(ModelZoo& zoo, const gen::UapArtifact& artifact,
                                                 const std::vector<PairedSample>& split, const EvalOptions& opt = {}) {
  if (opt.ks.empty()) throw ContractError("at least one k is required");
  DualEncoderModel& surrogate = zoo.surrogate_model();
  const PerturbedSplit p = perturb_split(split, artifact, surrogate);
  std::vector<EvalReport> rows;
  for (std::size_t t = 0; t < zoo.members.size(); ++t) {
    const auto start = std::chrono::steady_clock::now();
    DualEncoderModel& target = zoo.members[t];
    const EmbeddedSplit e = embed_split(target, p, opt.defense);
    const double drel = relative_distance(e, p, opt.mode == PerturbMode::QueryOnly ? PerturbMode::Joint : opt.mode).mean;
    std::vector<EvalReport> target_rows;
    for (Task task : {Task::TR, Task::IR}) {
      const TaskRanks ranks = task_ranks(e, p, task, opt.mode);
      for (std::size_t k : opt.ks) {
        const AsrResult a = asr_from_ranks(ranks, k);
        EvalReport r;
        r.method = method_of(artifact);
        r.variant = variant_of(artifact);
        r.surrogate = surrogate.id();
        r.target = target.id();
        r.white_box = t == zoo.surrogate;
        r.task = task;
        r.k = k;
        r.mode = mode_name(opt.mode);
        r.defense = defense::defense_name(opt.defense);
        r.domain = opt.domain;
        r.clean_recall = a.clean_recall;
        r.adversarial_recall = a.adversarial_recall;
        r.asr = a.asr;
        r.d_rel = drel;
        r.initially_correct = a.initially_correct;
        r.samples = a.queries;
        target_rows.push_back(r);
      }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (auto& r : target_rows) r.runtime_seconds = secs;
    rows.insert(rows.end(), target_rows.begin(), target_rows.end());
  }
  sort_reports(rows);
  return rows;
}

/// Retrains the UAP under an ablation variant, then evaluates it like the full method.
inline std::vector<EvalReport> run_ablation(const attack::AttackConfig& base, attack::Variant variant, ModelZoo& zoo,
                                            const corpus::Corpus& data, const EvalOptions& opt = {},
                                            gen::UapArtifact* artifact_out = nullptr) {
  if (variant == attack::Variant::Gap) throw ContractError("the GAP baseline is not an ablation variant");
  attack::AttackConfig cfg = base;
  cfg.variant = variant;
  const auto trained = attack::train_uap(data, zoo.surrogate_model(), cfg);
  if (artifact_out) *artifact_out = trained.artifact;
  return evaluate_transfer(zoo, trained.artifact, data.test, opt);
}

/// GAP-style baseline: no attention, no augmentation, no positives; maximizes
/// embedding distance to the matched items on both modalities.
inline attack::UapTrainResult baseline_gap_train(const corpus::Corpus& data, DualEncoderModel& surrogate,
                                                 const attack::AttackConfig& base) {
  attack::AttackConfig cfg = base;
  cfg.variant = attack::Variant::Gap;
  return attack::train_uap(data, surrogate, cfg);
}

/// Evaluates an artifact trained on one domain against another domain's test split.
inline std::vector<EvalReport> cross_domain_eval(const gen::UapArtifact& artifact, const corpus::Corpus& target_domain,
                                                 ModelZoo& zoo, const std::string& source_domain, EvalOptions opt = {}) {
  opt.domain = source_domain + "->" + corpus::domain_name(target_domain.manifest.domain);
  return evaluate_transfer(zoo, artifact, target_domain.test, opt);
}

/// Mean ASR over the non-surrogate rows with the given task and k.
inline double mean_black_box_asr(const std::vector<EvalReport>& rows, Task task, std::size_t k) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (!r.white_box && r.task == task && r.k == k) total += r.asr, ++n;
  if (n == 0) throw UndefinedMetricError("no black-box rows for " + task_name(task) + "@" + std::to_string(k));
  return total / static_cast<double>(n);
}

inline const EvalReport& white_box_row(const std::vector<EvalReport>& rows, Task task, std::size_t k) {
  for (const auto& r : rows)
    if (r.white_box && r.task == task && r.k == k) return r;
  throw ContractError("no white-box row for " + task_name(task) + "@" + std::to_string(k));
}

// CSV ---------------------------------------------------------------------------------

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {"method", "variant", "surrogate", "target", "white_box", "task", "k", "mode",
                                                "defense", "domain", "clean_recall", "adv_recall", "asr", "d_rel",
                                                "initially_correct", "samples"};
  return cols;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string to_csv(const std::vector<EvalReport>& rows) {
  std::ostringstream out;
  for (std::size_t c = 0; c < csv_columns().size(); ++c) out << (c ? "," : "") << csv_columns()[c];
  out << "\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.variant << ',' << r.surrogate << ',' << r.target << ',' << (r.white_box ? 1 : 0) << ','
        << task_name(r.task) << ',' << r.k << ',' << r.mode << ',' << r.defense << ',' << r.domain << ','
        << format_double(r.clean_recall) << ',' << format_double(r.adversarial_recall) << ',' << format_double(r.asr) << ','
        << format_double(r.d_rel) << ',' << r.initially_correct << ',' << r.samples << "\n";
  }
  return out.str();
}

inline void write_reports_csv(const std::vector<EvalReport>& rows, const fs::path& path) { io::write_file(path, to_csv(rows)); }

/// Parses a report CSV. Malformed input raises FileError naming the 1-based line.
inline std::vector<EvalReport> parse_reports_csv(const std::string& text, const std::string& source = "<csv>") {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) { throw FileError(source + ":" + std::to_string(line_no) + ": " + why); };
  if (!std::getline(in, line)) {
    line_no = 1;
    fail("empty report");
  }
  ++line_no;
  std::string expected;
  for (std::size_t c = 0; c < csv_columns().size(); ++c) expected += (c ? "," : "") + csv_columns()[c];
  if (line != expected) fail("unexpected header");
  std::vector<EvalReport> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != csv_columns().size()) fail("expected " + std::to_string(csv_columns().size()) + " fields, got " + std::to_string(f.size()));
    EvalReport r;
    try {
      r.method = f[0];
      r.variant = f[1];
      r.surrogate = f[2];
      r.target = f[3];
      if (f[4] != "0" && f[4] != "1") fail("white_box must be 0 or 1");
      r.white_box = f[4] == "1";
      r.task = parse_task(f[5]);
      r.k = std::stoul(f[6]);
      r.mode = f[7];
      r.defense = f[8];
      r.domain = f[9];
      r.clean_recall = std::stod(f[10]);
      r.adversarial_recall = std::stod(f[11]);
      r.asr = std::stod(f[12]);
      r.d_rel = std::stod(f[13]);
      r.initially_correct = std::stoul(f[14]);
      r.samples = std::stoul(f[15]);
    } catch (const FileError&) {
      throw;
    } catch (const std::exception& e) {
      fail(std::string("bad field: ") + e.what());
    }
    if (!(r.asr >= 0.0 && r.asr <= 1.0)) fail("asr outside [0,1]");
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<EvalReport> read_reports_csv(const fs::path& path) { return parse_reports_csv(io::read_file(path), path.string()); }

// Aggregation and rendering ---------------------------------------------------------------

/// Published reference ASRs (percent) for the analogous settings, used only as
/// annotations next to measured values.
struct ReferenceAsr {
  double white_tr, white_ir, black_tr, black_ir;
};

inline std::optional<ReferenceAsr> reference_asr(const std::string& method, const std::string& variant) {
  static const std::map<std::pair<std::string, std::string>, ReferenceAsr> table = {
      {{"cpgc", "full"}, {90.13, 88.82, 44.986, 59.732}},
      {{"gap", "full"}, {69.78, 81.59, 19.634, 31.658}},
      {{"cpgc", "no_CL"}, {76.46, 77.58, 33.108, 51.198}},
      {{"cpgc", "no_Dis"}, {79.54, 82.46, 42.234, 58.42}},
      {{"cpgc", "random_positives"}, {61.87, 65.17, 39.422, 55.398}},
      {{"cpgc", "no_cross_attention"}, {85.18, 83.07, 35.966, 47.458}}};
  const auto it = table.find({method, variant});
  if (it == table.end()) return std::nullopt;
  return it->second;
}

using RowKey = std::tuple<std::string, std::string, std::string, std::string, std::string, std::size_t, std::string, std::string, std::string>;

inline RowKey row_key(const EvalReport& r) {
  return {r.method, r.variant, r.surrogate, r.target, task_name(r.task), r.k, r.mode, r.defense, r.domain};
}

inline std::string describe(const RowKey& k) {
  const auto& [method, variant, surrogate, target, task, kk, mode, def, domain] = k;
  return method + "/" + variant + " " + surrogate + "->" + target + " " + task + "@" + std::to_string(kk) + " " + mode + " " + def + " " + domain;
}

struct SourcedReport {
  EvalReport row;
  std::string source;
};

/// Merges report sets. Identical duplicates collapse; conflicting ones raise a
/// ContractError naming both sources.
inline std::vector<EvalReport> merge_reports(const std::vector<SourcedReport>& inputs) {
  std::map<RowKey, SourcedReport> merged;
  for (const auto& in : inputs) {
    const RowKey key = row_key(in.row);
    auto [it, fresh] = merged.emplace(key, in);
    if (fresh) continue;
    const EvalReport& a = it->second.row;
    const EvalReport& b = in.row;
    if (a.asr != b.asr || a.clean_recall != b.clean_recall || a.adversarial_recall != b.adversarial_recall || a.d_rel != b.d_rel ||
        a.initially_correct != b.initially_correct || a.samples != b.samples) {
      throw ContractError("conflicting rows for " + describe(key) + ": " + it->second.source + " vs " + in.source);
    }
  }
  std::vector<EvalReport> out;
  for (auto& [k, v] : merged) out.push_back(v.row);
  return out;
}

inline std::string percent(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

/// Plain-text table: one line per report row.
inline std::string render_rows(const std::vector<EvalReport>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %-18s %-14s %-3s %-4s %-3s %-15s %-9s %9s %9s %8s %8s %6s\n", "method", "variant", "target",
                "box", "task", "k", "defense", "domain", "clean_R", "adv_R", "ASR%", "d_rel", "sec");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-10s %-18s %-14s %-3s %-4s %-3zu %-15s %-9s %9.4f %9.4f %8s %8.4f %6.1f\n", r.method.c_str(),
                  r.variant.c_str(), r.target.c_str(), r.white_box ? "W" : "B", task_name(r.task).c_str(), r.k, r.defense.c_str(),
                  r.domain.c_str(), r.clean_recall, r.adversarial_recall, percent(r.asr).c_str(), r.d_rel, r.runtime_seconds);
    out << line;
  }
  return out.str();
}

/// Comparison table at one k: method/variant rows, target x task columns of
/// ASR percentages, followed by white-box and black-box means and the
/// published reference values for the analogous setting.
inline std::string render_comparison(const std::vector<EvalReport>& rows, std::size_t k = 1) {
  std::vector<std::string> targets;
  std::vector<std::pair<std::string, std::string>> methods;
  std::map<std::tuple<std::string, std::string, std::string, Task>, std::vector<const EvalReport*>> cells;
  std::map<std::string, bool> white;
  for (const auto& r : rows) {
    if (r.k != k) continue;
    if (std::find(targets.begin(), targets.end(), r.target) == targets.end()) targets.push_back(r.target);
    const std::pair<std::string, std::string> mv = {r.method + (r.defense == "none" ? "" : "+" + r.defense) +
                                                        (r.domain == "A->A" ? "" : "@" + r.domain),
                                                    r.variant};
    if (std::find(methods.begin(), methods.end(), mv) == methods.end()) methods.push_back(mv);
    cells[{mv.first, mv.second, r.target, r.task}].push_back(&r);
    white[mv.first + "|" + mv.second + "|" + r.target] = r.white_box;
  }
  std::sort(targets.begin(), targets.end());
  std::ostringstream out;
  out << "ASR@" << k << " (%)\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-34s", "method / variant");
  out << buf;
  for (const auto& t : targets) {
    std::snprintf(buf, sizeof buf, " | %-15s", t.c_str());
    out << buf;
  }
  out << " | white TR/IR     | black TR/IR     | reference white TR/IR, black TR/IR\n";
  for (const auto& [method, variant] : methods) {
    std::snprintf(buf, sizeof buf, "%-34s", (method + " / " + variant).c_str());
    out << buf;
    double wsum[2] = {0, 0}, bsum[2] = {0, 0};
    std::size_t wn[2] = {0, 0}, bn[2] = {0, 0};
    for (const auto& t : targets) {
      std::string cell;
      for (Task task : {Task::TR, Task::IR}) {
        const auto it = cells.find({method, variant, t, task});
        std::string v = "-";
        if (it != cells.end()) {
          double s = 0.0;
          for (const auto* r : it->second) s += r->asr;
          const double mean = s / static_cast<double>(it->second.size());
          v = percent(mean);
          const int ti = task == Task::TR ? 0 : 1;
          if (white[method + "|" + variant + "|" + t]) wsum[ti] += mean, ++wn[ti];
          else bsum[ti] += mean, ++bn[ti];
        }
        cell += (task == Task::TR ? "" : "/") + v;
      }
      std::snprintf(buf, sizeof buf, " | %-15s", cell.c_str());
      out << buf;
    }
    auto avg = [](double s, std::size_t n) { return n ? percent(s / static_cast<double>(n)) : std::string("-"); };
    std::snprintf(buf, sizeof buf, " | %-15s", (avg(wsum[0], wn[0]) + "/" + avg(wsum[1], wn[1])).c_str());
    out << buf;
    std::snprintf(buf, sizeof buf, " | %-15s", (avg(bsum[0], bn[0]) + "/" + avg(bsum[1], bn[1])).c_str());
    out << buf;
    const std::string base_method = method.substr(0, method.find_first_of("+@"));
    if (const auto ref = reference_asr(base_method, variant); ref && k == 1 && base_method == method) {
      std::snprintf(buf, sizeof buf, " | %.2f/%.2f, %.2f/%.2f", ref->white_tr, ref->white_ir, ref->black_tr, ref->black_ir);
      out << buf;
    } else {
      out << " | -";
    }
    out << "\n";
  }
  out << "Reference values come from full-scale pretrained vision-language models and real\n"
         "image-text datasets; this toy setting is not expected to match them.\n";
  return out.str();
}

/// Standalone SVG bar chart of ASR@k per target, TR and IR bars side by side.
inline std::string render_svg(const std::vector<EvalReport>& rows, std::size_t k = 1) {
  std::vector<const EvalReport*> sel;
  for (const auto& r : rows)
    if (r.k == k) sel.push_back(&r);
  std::vector<std::string> targets;
  for (const auto* r : sel)
    if (std::find(targets.begin(), targets.end(), r->target) == targets.end()) targets.push_back(r->target);
  const int group_w = 120, bar_w = 40, height = 240, base_y = 200, left = 50;
  const int width = left + static_cast<int>(targets.size()) * group_w + 20;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height + 20 << "\">\n";
  out << "<text x=\"" << left << "\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\">ASR@" << k
      << " per target (blue TR, orange IR)</text>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << base_y << "\" x2=\"" << width - 10 << "\" y2=\"" << base_y << "\" stroke=\"black\"/>\n";
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const int gx = left + static_cast<int>(t) * group_w + 10;
    for (Task task : {Task::TR, Task::IR}) {
      double s = 0.0;
      std::size_t n = 0;
      bool wb = false;
      for (const auto* r : sel)
        if (r->target == targets[t] && r->task == task) s += r->asr, ++n, wb = r->white_box;
      if (n == 0) continue;
      const double v = s / static_cast<double>(n);
      const int h = static_cast<int>(std::lround(v * 170.0));
      const int x = gx + (task == Task::TR ? 0 : bar_w + 5);
      out << "<rect x=\"" << x << "\" y=\"" << base_y - h << "\" width=\"" << bar_w << "\" height=\"" << h << "\" fill=\""
          << (task == Task::TR ? "#4477aa" : "#ee7733") << "\"" << (wb ? " stroke=\"black\"" : "") << "/>\n";
      out << "<text x=\"" << x << "\" y=\"" << base_y - h - 4 << "\" font-family=\"sans-serif\" font-size=\"10\">" << percent(v)
          << "</text>\n";
    }
    out << "<text x=\"" << gx << "\" y=\"" << base_y + 16 << "\" font-family=\"sans-serif\" font-size=\"10\">" << targets[t]
        << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace cpgc::eval
