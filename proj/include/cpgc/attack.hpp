#pragma once

// Universal perturbation training against a frozen surrogate dual encoder.
//
// Image side, per iteration on one training pair (v, captions):
//   delta = G(z_v; caption embeddings)          bounded by eps * tanh
//   adv views  = augment(v + delta)             N scales, shared noise
//   clean views = augment(v)
//   loss = L_contrastive(adv views; matched captions as negatives,
//                        farthest candidate's captions as positives)
//        + lambda * L_distance(adv views, clean views)
// Text side mirrors it with one substituted word per caption, the matched
// image's views as negatives and the farthest image's views as positives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cpgc/checkpoint.hpp"
#include "cpgc/corpus.hpp"
#include "cpgc/dual_encoder.hpp"
#include "cpgc/errors.hpp"
#include "cpgc/generator.hpp"
#include "cpgc/optim.hpp"
#include "cpgc/rng.hpp"
#include "cpgc/tensor.hpp"

namespace cpgc::attack {

using corpus::Caption;
using model::DualEncoderModel;

// Configuration --------------------------------------------------------------------

enum class Variant : std::uint8_t { Full, NoContrastive, NoDistance, RandomPositives, NoCrossAttention, Gap };
enum class LossMode : std::uint8_t { Contrastive, Mse, Cosine };
enum class AugmentOrder : std::uint8_t { AddThenAugment, AugmentThenAdd };

inline const std::map<Variant, std::string>& variant_names() {
  static const std::map<Variant, std::string> names = {
      {Variant::Full, "full"},
      {Variant::NoContrastive, "no_CL"},
      {Variant::NoDistance, "no_Dis"},
      {Variant::RandomPositives, "random_positives"},
      {Variant::NoCrossAttention, "no_cross_attention"},
      {Variant::Gap, "gap"}};
  return names;
}

inline std::string variant_name(Variant v) { return variant_names().at(v); }

inline Variant parse_variant(const std::string& s) {
  for (const auto& [v, name] : variant_names())
    if (name == s) return v;
  throw ContractError("unknown variant '" + s + "'");
}

inline std::string loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::Contrastive: return "contrastive";
    case LossMode::Mse: return "mse";
    case LossMode::Cosine: return "cosine";
  }
  return "?";
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "contrastive") return LossMode::Contrastive;
  if (s == "mse") return LossMode::Mse;
  if (s == "cosine") return LossMode::Cosine;
  throw ContractError("unknown loss mode '" + s + "'");
}

struct AttackConfig {
  double epsilon_v = gen::kDefaultEpsilonV;
  int epsilon_t = 1;
  std::vector<double> scales = {0.5, 0.75, 1.0, 1.25, 1.5};
  double noise_sigma = 0.5;
  double tau = 0.1;
  double lambda = 0.1;
  std::size_t positives = 3;        // K
  std::size_t candidate_batch = 8;  // B
  std::size_t epochs = 40;
  double learning_rate = 2e-4;
  std::uint64_t seed = 0;
  /// Held-out train samples whose embeddings condition the emitted artifact.
  std::size_t reference_size = 32;
  /// Temperature of the relaxed word projection used while training the text
  /// generator; 0 substitutes the raw generator output instead.
  double vocab_temperature = 0.05;
  /// Caps iterations per epoch; 0 means one full pass over the train split.
  std::size_t iterations_per_epoch = 0;
  Variant variant = Variant::Full;
  LossMode loss = LossMode::Contrastive;
  AugmentOrder order = AugmentOrder::AddThenAugment;

  void validate() const {
    if (!(epsilon_v > 0.0)) throw ContractError("epsilon_v must be positive");
    if (epsilon_t != 1) throw ContractError("epsilon_t must be 1");
    if (scales.size() != 5) throw ContractError("exactly 5 augmentation scales are required");
    for (double s : scales)
      if (!(s > 0.0)) throw ContractError("augmentation scales must be positive");
    if (!(noise_sigma >= 0.0)) throw ContractError("noise_sigma must be non-negative");
    if (!(tau > 0.0)) throw ContractError("tau must be positive");
    if (!(lambda >= 0.0)) throw ContractError("lambda must be non-negative");
    if (positives < 1) throw ContractError("K must be at least 1");
    if (candidate_batch < 2) throw ContractError("B must be at least 2");
    if (!(learning_rate > 0.0)) throw ContractError("learning rate must be positive");
    if (reference_size < 1) throw ContractError("reference_size must be at least 1");
    if (!(vocab_temperature >= 0.0)) throw ContractError("vocab_temperature must be non-negative");
  }
};

inline json to_json(const AttackConfig& c) {
  return {{"epsilon_v", c.epsilon_v},
          {"epsilon_t", c.epsilon_t},
          {"scales", c.scales},
          {"noise_sigma", c.noise_sigma},
          {"tau", c.tau},
          {"lambda", c.lambda},
          {"K", c.positives},
          {"B", c.candidate_batch},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"reference_size", c.reference_size},
          {"vocab_temperature", c.vocab_temperature},
          {"iterations_per_epoch", c.iterations_per_epoch},
          {"variant", variant_name(c.variant)},
          {"loss", loss_mode_name(c.loss)},
          {"augment_order", c.order == AugmentOrder::AddThenAugment ? "add_then_augment" : "augment_then_add"}};
}

/// Overlays keys from `j` onto `base`. Unknown keys are rejected.
inline AttackConfig attack_config_from_json(const json& j, AttackConfig base = {}) {
  for (const auto& [key, value] : j.items()) {
    if (key == "epsilon_v") base.epsilon_v = value;
    else if (key == "epsilon_t") base.epsilon_t = value;
    else if (key == "scales") base.scales = value.get<std::vector<double>>();
    else if (key == "noise_sigma") base.noise_sigma = value;
    else if (key == "tau") base.tau = value;
    else if (key == "lambda") base.lambda = value;
    else if (key == "K") base.positives = value;
    else if (key == "B") base.candidate_batch = value;
    else if (key == "epochs") base.epochs = value;
    else if (key == "learning_rate") base.learning_rate = value;
    else if (key == "seed") base.seed = value;
    else if (key == "reference_size") base.reference_size = value;
    else if (key == "vocab_temperature") base.vocab_temperature = value;
    else if (key == "iterations_per_epoch") base.iterations_per_epoch = value;
    else if (key == "variant") base.variant = parse_variant(value);
    else if (key == "loss") base.loss = parse_loss_mode(value);
    else if (key == "augment_order") {
      const std::string s = value;
      if (s == "add_then_augment") base.order = AugmentOrder::AddThenAugment;
      else if (s == "augment_then_add") base.order = AugmentOrder::AugmentThenAdd;
      else throw ContractError("unknown augment_order '" + s + "'");
    } else {
      throw ContractError("unknown attack config key '" + key + "'");
    }
  }
  base.validate();
  return base;
}

// Augmentation ---------------------------------------------------------------------

namespace detail {

/// 1-D bilinear interpolation matrix (out x in) with half-pixel centers.
inline std::vector<Eigen::Triplet<double>> bilinear_1d(std::size_t out, std::size_t in) {
  std::vector<Eigen::Triplet<double>> t;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double w = src - static_cast<double>(lo);
    if (w == 0.0 || hi == lo) {
      t.emplace_back(static_cast<int>(o), static_cast<int>(lo), 1.0);
    } else {
      t.emplace_back(static_cast<int>(o), static_cast<int>(lo), 1.0 - w);
      t.emplace_back(static_cast<int>(o), static_cast<int>(hi), w);
    }
  }
  return t;
}

/// Pixel-space operator (out^2 x in^2) for a square bilinear resize.
inline SparseOperator bilinear_2d(std::size_t out, std::size_t in) {
  SparseOperator r1(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  const auto t = bilinear_1d(out, in);
  r1.setFromTriplets(t.begin(), t.end());
  std::vector<Eigen::Triplet<double>> t2;
  for (int oy = 0; oy < r1.outerSize(); ++oy)
    for (SparseOperator::InnerIterator ey(r1, oy); ey; ++ey)
      for (int ox = 0; ox < r1.outerSize(); ++ox)
        for (SparseOperator::InnerIterator ex(r1, ox); ex; ++ex)
          t2.emplace_back(oy * static_cast<int>(out) + ox, static_cast<int>(ey.col()) * static_cast<int>(in) + static_cast<int>(ex.col()),
                          ey.value() * ex.value());
  SparseOperator r2(static_cast<Eigen::Index>(out * out), static_cast<Eigen::Index>(in * in));
  r2.setFromTriplets(t2.begin(), t2.end());
  r2.makeCompressed();
  return r2;
}

}  // namespace detail

inline std::size_t scaled_side(double scale) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * static_cast<double>(corpus::kImageSide))));
}

/// Down-then-up resize as one [1024 x 1024] pixel operator; cached per side.
inline std::shared_ptr<const SparseOperator> resize_round_trip(double scale) {
  static std::map<std::size_t, std::shared_ptr<const SparseOperator>> cache;
  const std::size_t side = scaled_side(scale);
  auto it = cache.find(side);
  if (it != cache.end()) return it->second;
  SparseOperator down = detail::bilinear_2d(side, corpus::kImageSide);
  SparseOperator up = detail::bilinear_2d(corpus::kImageSide, side);
  SparseOperator both = (up * down).pruned();
  both.makeCompressed();
  auto op = std::make_shared<const SparseOperator>(std::move(both));
  cache.emplace(side, op);
  return op;
}

/// Per-view Gaussian noise fields, one per scale.
inline std::vector<std::vector<double>> draw_view_noise(Rng& rng, std::size_t views, double sigma) {
  std::vector<std::vector<double>> noise(views, std::vector<double>(corpus::kImageValues, 0.0));
  if (sigma == 0.0) return noise;
  for (auto& field : noise)
    for (auto& x : field) x = rng.normal(0.0, sigma);
  return noise;
}

/// Differentiable augmentation of one image into N views [N, 32, 32, 3].
inline Var augment_views(Tape& tape, Var image, const std::vector<double>& scales,
                         const std::vector<std::vector<double>>& noise, std::optional<Var> added_after = std::nullopt) {
  std::vector<Var> views;
  Var flat = reshape(image, {corpus::kImageSide * corpus::kImageSide, corpus::kChannels});
  for (std::size_t i = 0; i < scales.size(); ++i) {
    Var r = sparse_apply(resize_round_trip(scales[i]), flat);
    Var v = reshape(r, {1, corpus::kImageSide, corpus::kImageSide, corpus::kChannels});
    v = v + tape.constant({1, corpus::kImageSide, corpus::kImageSide, corpus::kChannels}, noise[i]);
    v = clamp_passthrough(v, 0.0, 1.0);
    if (added_after) v = v + *added_after;
    views.push_back(v);
  }
  return concat_rows(views);
}

/// Plain augmentation: N images, each resized down and back, noised and clamped.
inline std::vector<Tensor> augment_image_set(const Tensor& image, const std::vector<double>& scales, double noise_sigma,
                                             std::uint64_t seed) {
  Rng rng(derive_seed(seed, "augment"));
  const auto noise = draw_view_noise(rng, scales.size(), noise_sigma);
  Tape tape;
  const Tensor all = detach(augment_views(tape, tape.constant(image), scales, noise));
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    std::vector<double> v(all.values.begin() + static_cast<std::ptrdiff_t>(i * corpus::kImageValues),
                          all.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * corpus::kImageValues));
    for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
    out.emplace_back(Shape{corpus::kImageSide, corpus::kImageSide, corpus::kChannels}, std::move(v));
  }
  return out;
}

// Farthest selection -----------------------------------------------------------------

/// Mean Euclidean distance over all row pairs of a [a, d] and b [b, d].
inline double mean_pair_distance(const Tensor& a, const Tensor& b) {
  const std::size_t d = a.shape.back();
  if (b.shape.back() != d) throw ShapeError("embedding widths differ");
  const std::size_t na = a.values.size() / d, nb = b.values.size() / d;
  double total = 0.0;
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a[i * d + k] - b[j * d + k];
        s += diff * diff;
      }
      total += std::sqrt(s);
    }
  return total / static_cast<double>(na * nb);
}

struct Candidate {
  std::size_t sample_id;
  Tensor embeddings;  // [rows, d]
};

/// Index of the candidate farthest (mean pair distance) from `anchor`; ties go
/// to the lower index. A candidate from the anchor's own sample is an error.
inline std::size_t select_farthest(const Tensor& anchor, std::size_t anchor_id, const std::vector<Candidate>& candidates) {
  if (candidates.empty()) throw ContractError("farthest selection needs candidates");
  std::size_t best = 0;
  double best_d = -1.0;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    if (candidates[c].sample_id == anchor_id) throw ContractError("candidate pool contains the matched sample");
    const double d = mean_pair_distance(anchor, candidates[c].embeddings);
    if (d > best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

struct PositiveSet {
  std::size_t candidate = 0;
  Tensor embeddings;       // first min(K, available) rows of the winner
  bool truncated = false;  // fewer than K rows were available
};

/// Image-side positives: the K first captions of the candidate caption set
/// farthest from the clean image embedding.
inline PositiveSet select_farthest_texts(const Tensor& image_embedding, std::size_t image_id,
                                         const std::vector<Candidate>& caption_sets, std::size_t k) {
  PositiveSet p;
  p.candidate = select_farthest(image_embedding, image_id, caption_sets);
  const Tensor& win = caption_sets[p.candidate].embeddings;
  const std::size_t d = win.shape.back();
  const std::size_t rows = win.values.size() / d;
  const std::size_t take_rows = std::min(k, rows);
  p.truncated = take_rows < k;
  p.embeddings = Tensor({take_rows, d}, std::vector<double>(win.values.begin(), win.values.begin() + static_cast<std::ptrdiff_t>(take_rows * d)));
  return p;
}

// Losses ----------------------------------------------------------------------------

/// log( sum exp(sim(a, neg)/tau) / (sum exp(sim(a, neg)/tau) + sum exp(sim(a, pos)/tau)) ),
/// summed over every anchor row. Inputs are unit-norm rows.
inline Var contrastive_loss(Var anchors, Var negatives, Var positives, double tau) {
  if (negatives.shape()[0] == 0 || positives.shape()[0] == 0) throw ContractError("empty contrastive set");
  if (!(tau > 0.0)) throw ContractError("tau must be positive");
  Var neg = scale(matmul(anchors, transpose(negatives)), 1.0 / tau);
  Var pos = scale(matmul(anchors, transpose(positives)), 1.0 / tau);
  Var neg_col = reshape(neg, {neg.size(), 1});
  Var all = concat_rows({neg_col, reshape(pos, {pos.size(), 1})});
  return reshape(logsumexp(neg_col, 0) - logsumexp(all, 0), {1});
}

/// -sum over all (i, j) of ||adv_i - clean_j||.
inline Var distance_loss(Var adv, Var clean) {
  const std::size_t n = adv.shape()[0];
  if (clean.shape()[0] != n || adv.shape() != clean.shape()) {
    throw ContractError("distance loss needs equal-size sets, got " + to_string(adv.shape()) + " and " + to_string(clean.shape()));
  }
  const std::size_t d = adv.shape()[1];
  std::vector<std::size_t> ia, ic;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < d; ++k) {
        ia.push_back(i * d + k);
        ic.push_back(j * d + k);
      }
  Var diff = take(adv, std::move(ia), {n * n, d}) - take(clean, std::move(ic), {n * n, d});
  return -sum(norm(diff, 1));
}

/// Negative sum of distances between anchors and the matched items (the
/// untargeted objective used by the GAP-style baseline).
inline Var matched_distance_loss(Var anchors, Var matched) {
  const std::size_t na = anchors.shape()[0], nm = matched.shape()[0], d = anchors.shape()[1];
  std::vector<std::size_t> ia, im;
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nm; ++j)
      for (std::size_t k = 0; k < d; ++k) {
        ia.push_back(i * d + k);
        im.push_back(j * d + k);
      }
  Var diff = take(anchors, std::move(ia), {na * nm, d}) - take(matched, std::move(im), {na * nm, d});
  return -sum(norm(diff, 1));
}

/// Alternative alignment objectives that replace the contrastive term.
inline Var alignment_loss(LossMode mode, Var anchors, Var negatives, Var positives, double tau) {
  switch (mode) {
    case LossMode::Contrastive: return contrastive_loss(anchors, negatives, positives, tau);
    case LossMode::Mse: {
      const std::size_t na = anchors.shape()[0], nm = negatives.shape()[0], d = anchors.shape()[1];
      std::vector<std::size_t> ia, im;
      for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nm; ++j)
          for (std::size_t k = 0; k < d; ++k) {
            ia.push_back(i * d + k);
            im.push_back(j * d + k);
          }
      Var diff = take(anchors, std::move(ia), {na * nm, d}) - take(negatives, std::move(im), {na * nm, d});
      return -mean(square(diff));
    }
    case LossMode::Cosine: return mean(matmul(anchors, transpose(negatives)));
  }
  throw ContractError("unknown loss mode");
}

// Word importance and application ------------------------------------------------------

struct WordImportance {
  std::vector<double> scores;
  std::size_t position = 0;
};

/// score_i = ||f_T(s) - f_T(s with word i masked)||; argmax with leftmost ties.
inline WordImportance word_importance(const Caption& sentence, DualEncoderModel& m) {
  if (sentence.empty()) throw ContractError("word importance needs a nonempty sentence");
  std::vector<Caption> batch = {sentence};
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    Caption masked = sentence;
    masked[i] = corpus::kMaskToken;
    batch.push_back(std::move(masked));
  }
  const Tensor e = model::embed_texts(m, batch);
  const std::size_t d = m.dim;
  WordImportance w;
  double best = -1.0;
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = e[k] - e[(i + 1) * d + k];
      s += diff * diff;
    }
    w.scores.push_back(std::sqrt(s));
    if (w.scores.back() > best) {
      best = w.scores.back();
      w.position = i;
    }
  }
  return w;
}

inline Tensor apply_image(const Tensor& image, const Tensor& delta) {
  if (image.shape != delta.shape) throw ShapeError("image " + to_string(image.shape) + " vs delta " + to_string(delta.shape));
  Tensor out = image;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = std::clamp(image.values[i] + delta.values[i], 0.0, 1.0);
  return out;
}

struct AdversarialText {
  Caption tokens;
  std::size_t position = 0;
  bool degenerate = false;  // the chosen position already held the word
};

inline AdversarialText apply_text(const Caption& caption, int word, DualEncoderModel& m) {
  AdversarialText out;
  out.position = word_importance(caption, m).position;
  out.tokens = caption;
  out.degenerate = caption[out.position] == word;
  out.tokens[out.position] = word;
  return out;
}

struct AdversarialPair {
  Tensor image;
  AdversarialText text;
};

/// Perturbs both modalities. Without a word the caption is returned unchanged.
inline AdversarialPair apply_uap(const Tensor& image, const Caption& caption, const gen::UapArtifact& a, DualEncoderModel& m) {
  AdversarialPair p{apply_image(image, a.delta), {caption, 0, true}};
  if (a.word) p.text = apply_text(caption, *a.word, m);
  return p;
}

// Training ---------------------------------------------------------------------------

struct TraceRow {
  std::size_t epoch = 0;
  std::size_t iteration = 0;
  double contrastive = 0.0;
  double distance = 0.0;
  double total = 0.0;
};

struct LossTrace {
  std::vector<TraceRow> rows;

  std::vector<double> epoch_means() const {
    std::vector<double> sums, counts;
    for (const auto& r : rows) {
      if (r.epoch >= sums.size()) {
        sums.resize(r.epoch + 1, 0.0);
        counts.resize(r.epoch + 1, 0.0);
      }
      sums[r.epoch] += r.total;
      counts[r.epoch] += 1.0;
    }
    for (std::size_t e = 0; e < sums.size(); ++e) sums[e] /= std::max(1.0, counts[e]);
    return sums;
  }
};

inline void write_trace_csv(const LossTrace& trace, const fs::path& path) {
  std::string out = "epoch,iteration,L_CL,L_Dis,total\n";
  char line[160];
  for (const auto& r : trace.rows) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g,%.17g\n", r.epoch, r.iteration, r.contrastive, r.distance, r.total);
    out += line;
  }
  io::write_file(path, out);
}

/// Frozen-surrogate embeddings of the train split, computed once per run.
struct SurrogateCache {
  std::size_t captions_per_image = 0;
  Tensor image_embeddings;    // [n, d]
  Tensor caption_embeddings;  // [n * M, d]

  static SurrogateCache build(DualEncoderModel& m, const std::vector<corpus::PairedSample>& split) {
    SurrogateCache c;
    c.captions_per_image = split.front().captions.size();
    std::vector<const Tensor*> ims;
    std::vector<Caption> caps;
    for (const auto& s : split) {
      if (s.captions.size() != c.captions_per_image) throw ContractError("every sample needs the same caption count");
      ims.push_back(&s.image);
      caps.insert(caps.end(), s.captions.begin(), s.captions.end());
    }
    c.image_embeddings = model::embed_images(m, ims);
    c.caption_embeddings = model::embed_texts(m, caps);
    return c;
  }

  Tensor image(std::size_t i) const { return rows(image_embeddings, i, 1); }
  Tensor captions(std::size_t i) const { return rows(caption_embeddings, i * captions_per_image, captions_per_image); }

 private:
  static Tensor rows(const Tensor& t, std::size_t begin, std::size_t count) {
    const std::size_t d = t.shape[1];
    return Tensor({count, d}, std::vector<double>(t.values.begin() + static_cast<std::ptrdiff_t>(begin * d),
                                                  t.values.begin() + static_cast<std::ptrdiff_t>((begin + count) * d)));
  }
};

/// Unit-norm mean of the rows of `rows` ([n, d]) as a [1, d] tensor.
inline Tensor mean_direction(const Tensor& rows) {
  const std::size_t d = rows.shape.back();
  const std::size_t n = rows.values.size() / d;
  std::vector<double> m(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) m[k] += rows[i * d + k];
  double len = 0.0;
  for (double x : m) len += x * x;
  len = std::sqrt(len);
  if (!(len > 1e-12)) throw DegenerateNormError("reference embeddings cancel out");
  for (auto& x : m) x /= len;
  return Tensor({1, d}, std::move(m));
}

namespace detail {

struct Split {
  std::vector<std::size_t> train;      // iteration pool (indices into corpus train)
  std::vector<std::size_t> reference;  // held-out conditioning samples
};

inline Split split_reference(std::size_t n, std::size_t reference_size) {
  if (n < reference_size + 2) {
    throw ContractError("train split of " + std::to_string(n) + " is too small for a reference set of " +
                        std::to_string(reference_size));
  }
  Split s;
  for (std::size_t i = 0; i < n - reference_size; ++i) s.train.push_back(i);
  for (std::size_t i = n - reference_size; i < n; ++i) s.reference.push_back(i);
  return s;
}

/// B distinct pool members other than `self`, uniformly sampled.
inline std::vector<std::size_t> sample_candidates(Rng& rng, const std::vector<std::size_t>& pool, std::size_t self,
                                                  std::size_t count) {
  count = std::min(count, pool.size() - 1);
  std::vector<std::size_t> out;
  while (out.size() < count) {
    const std::size_t c = pool[rng.below(pool.size())];
    if (c == self || std::find(out.begin(), out.end(), c) != out.end()) continue;
    out.push_back(c);
  }
  return out;
}

inline Tensor stack_views_of(const Tensor& image, const std::vector<double>& scales, const std::vector<std::vector<double>>& noise,
                             DualEncoderModel& m) {
  Tape tape;
  Var views = augment_views(tape, tape.constant(image), scales, noise);
  return detach(encode_images(tape, m, views));
}

inline void check_finite(double loss, std::size_t iteration, const char* side) {
  if (!std::isfinite(loss)) {
    throw TrainingFailure(std::string(side) + " UAP loss is not finite at iteration " + std::to_string(iteration),
                          static_cast<long>(iteration));
  }
}

inline std::size_t iterations_for(const AttackConfig& cfg, std::size_t pool) {
  return cfg.iterations_per_epoch == 0 ? pool : std::min(cfg.iterations_per_epoch, pool);
}

}  // namespace detail

struct ImageTrainResult {
  gen::UapArtifact artifact;
  gen::ImageGenerator generator;
  gen::NoiseSeed noise;
  LossTrace trace;
};

struct TextTrainResult {
  int word = corpus::kFirstWordToken;
  Tensor embedding;  // final [1, 64] adversarial row before projection
  gen::TextGenerator generator;
  gen::NoiseSeed noise;
  LossTrace trace;
};

/// Trains the image-side generator and emits its universal perturbation.
inline ImageTrainResult train_image_uap(const corpus::Corpus& data, DualEncoderModel& surrogate, const AttackConfig& cfg,
                                        const std::function<void(std::size_t, double)>& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty()) throw ContractError("UAP training needs a nonempty train split");
  const bool gap = cfg.variant == Variant::Gap;
  const bool attention = !(gap || cfg.variant == Variant::NoCrossAttention);
  const SurrogateCache cache = SurrogateCache::build(surrogate, data.train);
  const auto split = detail::split_reference(data.train.size(), cfg.reference_size);

  ImageTrainResult r;
  r.noise = gen::NoiseSeed::draw(cfg.seed);
  r.generator = gen::init_image_generator(cfg.seed, attention);
  Adam opt(gen::parameters(r.generator), {.learning_rate = cfg.learning_rate});
  std::vector<std::size_t> order = split.train;
  std::size_t global = 0;
  const std::size_t per_epoch = detail::iterations_for(cfg, order.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "uap/image/epoch", epoch));
    order = split.train;
    rng.shuffle(std::span(order));
    double epoch_total = 0.0;
    for (std::size_t it = 0; it < per_epoch; ++it, ++global) {
      const std::size_t idx = order[it];
      const auto& sample = data.train[idx];
      const Tensor matched = cache.captions(idx);

      opt.zero_grad();
      Tape tape;
      Var negatives = tape.constant(matched);
      Var delta = gen::generate_image_uap(tape, r.generator, r.noise, negatives, cfg.epsilon_v);
      Var clean = tape.constant(sample.image);
      TraceRow row{epoch, global, 0.0, 0.0, 0.0};
      Var total = tape.scalar(0.0);
      if (gap) {
        Var adv = encode_images(tape, surrogate, clean + delta);
        total = reshape(matched_distance_loss(adv, negatives), {1});
        row.distance = total.item();
      } else {
        const auto noise = draw_view_noise(rng, cfg.scales.size(), cfg.noise_sigma);
        Var adv_views = cfg.order == AugmentOrder::AddThenAugment
                            ? augment_views(tape, clean + delta, cfg.scales, noise)
                            : augment_views(tape, clean, cfg.scales, noise, reshape(delta, {1, 32, 32, 3}));
        Var adv = encode_images(tape, surrogate, adv_views);
        if (cfg.variant != Variant::NoContrastive) {
          const auto cands = detail::sample_candidates(rng, split.train, idx, cfg.candidate_batch);
          std::vector<Candidate> sets;
          for (std::size_t c : cands) sets.push_back({data.train[c].sample_id, cache.captions(c)});
          PositiveSet pos;
          if (cfg.variant == Variant::RandomPositives) {
            pos = select_farthest_texts(cache.image(idx), sample.sample_id, {sets[rng.below(sets.size())]}, cfg.positives);
          } else {
            pos = select_farthest_texts(cache.image(idx), sample.sample_id, sets, cfg.positives);
          }
          Var cl = alignment_loss(cfg.loss, adv, negatives, tape.constant(pos.embeddings), cfg.tau);
          row.contrastive = cl.item();
          total = reshape(cl, {1});
        }
        if (cfg.variant != Variant::NoDistance && cfg.lambda > 0.0) {
          const Tensor clean_emb = detail::stack_views_of(sample.image, cfg.scales, noise, surrogate);
          Var dis = distance_loss(adv, tape.constant(clean_emb));
          row.distance = dis.item();
          total = total + scale(reshape(dis, {1}), cfg.lambda);
        }
      }
      row.total = total.item();
      detail::check_finite(row.total, global, "image");
      tape.backward(total);
      opt.step();
      r.trace.rows.push_back(row);
      epoch_total += row.total;
    }
    if (on_epoch) on_epoch(epoch, epoch_total / static_cast<double>(std::max<std::size_t>(1, per_epoch)));
  }

  std::vector<double> ref;
  for (std::size_t i : split.reference) {
    const Tensor caps = cache.captions(i);
    ref.insert(ref.end(), caps.values.begin(), caps.values.begin() + static_cast<std::ptrdiff_t>(surrogate.dim));
  }
  const Tensor condition = mean_direction(Tensor({split.reference.size(), surrogate.dim}, std::move(ref)));
  Tape tape;
  r.artifact.delta = detach(gen::generate_image_uap(tape, r.generator, r.noise, tape.constant(condition), cfg.epsilon_v));
  r.artifact.epsilon_v = cfg.epsilon_v;
  r.artifact.method = gap ? "gap" : cfg.variant == Variant::Full ? "cpgc" : "cpgc_" + variant_name(cfg.variant);
  r.artifact.surrogate_id = surrogate.id();
  r.artifact.surrogate_hash = model::model_hash(surrogate);
  r.artifact.config = to_json(cfg);
  gen::check_budget(r.artifact);
  for (Tensor* p : gen::parameters(r.generator)) p->grad.clear();
  return r;
}

/// Trains the text-side generator and projects its output to one word.
inline TextTrainResult train_text_uap(const corpus::Corpus& data, DualEncoderModel& surrogate, const AttackConfig& cfg,
                                      const std::function<void(std::size_t, double)>& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty()) throw ContractError("UAP training needs a nonempty train split");
  const bool gap = cfg.variant == Variant::Gap;
  const bool attention = !(gap || cfg.variant == Variant::NoCrossAttention);
  const SurrogateCache cache = SurrogateCache::build(surrogate, data.train);
  const auto split = detail::split_reference(data.train.size(), cfg.reference_size);
  const std::size_t m_caps = cache.captions_per_image;

  // Substitution position of every caption, fixed by the surrogate.
  std::vector<std::vector<std::size_t>> positions(data.train.size());
  for (std::size_t i : split.train)
    for (const auto& c : data.train[i].captions) positions[i].push_back(word_importance(c, surrogate).position);

  TextTrainResult r;
  r.noise = gen::NoiseSeed::draw(cfg.seed);
  r.generator = gen::init_text_generator(cfg.seed, attention);
  Adam opt(gen::parameters(r.generator), {.learning_rate = cfg.learning_rate});
  std::size_t global = 0;
  const std::size_t per_epoch = detail::iterations_for(cfg, split.train.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "uap/text/epoch", epoch));
    std::vector<std::size_t> order = split.train;
    rng.shuffle(std::span(order));
    double epoch_total = 0.0;
    for (std::size_t it = 0; it < per_epoch; ++it, ++global) {
      const std::size_t idx = order[it];
      const auto& sample = data.train[idx];
      std::vector<Caption> adv_caps = sample.captions;
      for (std::size_t j = 0; j < m_caps; ++j) adv_caps[j][positions[idx][j]] = model::kAdversarialSlot;

      opt.zero_grad();
      Tape tape;
      Var image_cond = tape.constant(cache.image(idx));
      Var row_emb = gen::generate_text_uap(tape, r.generator, r.noise, image_cond);
      if (cfg.vocab_temperature > 0.0) row_emb = gen::soft_project_to_vocab(row_emb, surrogate, cfg.vocab_temperature);
      Var adv = encode_texts(tape, surrogate, adv_caps, row_emb);
      TraceRow row{epoch, global, 0.0, 0.0, 0.0};
      Var total = tape.scalar(0.0);
      if (gap) {
        total = reshape(matched_distance_loss(adv, image_cond), {1});
        row.distance = total.item();
      } else {
        if (cfg.variant != Variant::NoContrastive) {
          const auto noise = draw_view_noise(rng, cfg.scales.size(), cfg.noise_sigma);
          const Tensor neg = detail::stack_views_of(sample.image, cfg.scales, noise, surrogate);
          const auto cands = detail::sample_candidates(rng, split.train, idx, cfg.candidate_batch);
          std::vector<Candidate> imgs;
          for (std::size_t c : cands) imgs.push_back({data.train[c].sample_id, cache.image(c)});
          std::size_t win = cfg.variant == Variant::RandomPositives ? rng.below(imgs.size())
                                                                    : select_farthest(cache.captions(idx), sample.sample_id, imgs);
          const Tensor pos = detail::stack_views_of(data.train[cands[win]].image, cfg.scales, noise, surrogate);
          Var cl = alignment_loss(cfg.loss, adv, tape.constant(neg), tape.constant(pos), cfg.tau);
          row.contrastive = cl.item();
          total = reshape(cl, {1});
        }
        if (cfg.variant != Variant::NoDistance && cfg.lambda > 0.0) {
          Var dis = distance_loss(adv, tape.constant(cache.captions(idx)));
          row.distance = dis.item();
          total = total + scale(reshape(dis, {1}), cfg.lambda);
        }
      }
      row.total = total.item();
      detail::check_finite(row.total, global, "text");
      tape.backward(total);
      opt.step();
      r.trace.rows.push_back(row);
      epoch_total += row.total;
    }
    if (on_epoch) on_epoch(epoch, epoch_total / static_cast<double>(std::max<std::size_t>(1, per_epoch)));
  }

  std::vector<double> ref;
  for (std::size_t i : split.reference) {
    const Tensor e = cache.image(i);
    ref.insert(ref.end(), e.values.begin(), e.values.end());
  }
  const Tensor condition = mean_direction(Tensor({split.reference.size(), surrogate.dim}, std::move(ref)));
  Tape tape;
  r.embedding = detach(gen::generate_text_uap(tape, r.generator, r.noise, tape.constant(condition)));
  r.word = gen::project_to_vocab(r.embedding.values, surrogate);
  for (Tensor* p : gen::parameters(r.generator)) p->grad.clear();
  return r;
}

struct UapTrainResult {
  gen::UapArtifact artifact;
  ImageTrainResult image;
  TextTrainResult text;
};

/// Both sides with one config; the artifact carries delta_v and the word.
inline UapTrainResult train_uap(const corpus::Corpus& data, DualEncoderModel& surrogate, const AttackConfig& cfg,
                                const std::function<void(const char*, std::size_t, double)>& on_epoch = {}) {
  UapTrainResult r;
  r.image = train_image_uap(data, surrogate, cfg, [&](std::size_t e, double l) {
    if (on_epoch) on_epoch("image", e, l);
  });
  r.text = train_text_uap(data, surrogate, cfg, [&](std::size_t e, double l) {
    if (on_epoch) on_epoch("text", e, l);
  });
  r.artifact = r.image.artifact;
  r.artifact.word = r.text.word;
  gen::check_budget(r.artifact);
  return r;
}

/// Uniform image noise in [-eps, eps]. The text side stays clean unless
/// `with_word` is set, in which case a uniformly drawn word is also inserted.
inline gen::UapArtifact random_noise_uap(std::uint64_t seed, double epsilon_v, const std::string& surrogate_id = {},
                                         bool with_word = false) {
  Rng rng(derive_seed(seed, "baseline/random"));
  gen::UapArtifact a = gen::UapArtifact::null(surrogate_id);
  for (auto& v : a.delta.values) v = rng.uniform(-epsilon_v, epsilon_v);
  if (with_word) a.word = static_cast<int>(corpus::kFirstWordToken + rng.below(corpus::kVocabSize - corpus::kFirstWordToken));
  a.epsilon_v = epsilon_v;
  a.method = "random";
  a.config = {{"seed", seed}, {"epsilon_v", epsilon_v}, {"with_word", with_word}};
  gen::check_budget(a);
  return a;
}

}  // namespace cpgc::attack
