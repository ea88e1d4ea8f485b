#pragma once

// Conditional perturbation generators.
//
// Image branch: fixed 3x3 noise -> 256 (tanh) -> cross-attention over caption
// embeddings (residual) -> 1024 (tanh) -> 3072 -> eps * tanh, reshaped 32x32x3.
// Text branch: fixed 1x3 noise -> 64 (tanh) -> cross-attention over the
// matched image embedding (residual) -> 64 (linear), a token-embedding row.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpgc/checkpoint.hpp"
#include "cpgc/dual_encoder.hpp"
#include "cpgc/errors.hpp"
#include "cpgc/rng.hpp"
#include "cpgc/tensor.hpp"

namespace cpgc::gen {

inline constexpr double kDefaultEpsilonV = 12.0 / 255.0;

/// Fixed generator input, drawn once per run and never trained.
struct NoiseSeed {
  Tensor z_image;  // [1, 9], a flattened 3x3 matrix
  Tensor z_text;   // [1, 3]
  std::uint64_t seed = 0;

  static NoiseSeed draw(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "generator/noise"));
    NoiseSeed n;
    n.seed = seed;
    std::vector<double> zi(9), zt(3);
    for (auto& x : zi) x = rng.normal();
    for (auto& x : zt) x = rng.normal();
    n.z_image = Tensor({1, 9}, std::move(zi));
    n.z_text = Tensor({1, 3}, std::move(zt));
    return n;
  }
};

struct AttentionParams {
  Tensor w_query;  // [width, attn]
  Tensor w_key;    // [cond, attn]
  Tensor w_value;  // [cond, attn]
  Tensor w_out;    // [attn, width]
};

struct Dims {
  std::size_t condition = model::kEmbedDim;
  std::size_t attention = 16;
  std::size_t image_hidden = 256;
  std::size_t image_expand = 1024;
  std::size_t text_hidden = 64;
};

struct ImageGenerator {
  Dims dims;
  bool use_attention = true;
  Tensor w1, b1, w2, b2, w3, b3;
  AttentionParams attn;

  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> p = {{"w1", &w1}, {"b1", &b1}, {"w2", &w2},
                                                      {"b2", &b2}, {"w3", &w3}, {"b3", &b3}};
    if (use_attention) {
      p.insert(p.end(), {{"attn.query", &attn.w_query}, {"attn.key", &attn.w_key},
                         {"attn.value", &attn.w_value}, {"attn.out", &attn.w_out}});
    }
    return p;
  }
};

struct TextGenerator {
  Dims dims;
  bool use_attention = true;
  Tensor w1, b1, w2, b2;
  AttentionParams attn;

  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> p = {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}};
    if (use_attention) {
      p.insert(p.end(), {{"attn.query", &attn.w_query}, {"attn.key", &attn.w_key},
                         {"attn.value", &attn.w_value}, {"attn.out", &attn.w_out}});
    }
    return p;
  }
};

template <class G>
std::vector<Tensor*> parameters(G& g) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : g.named_parameters()) out.push_back(t);
  return out;
}

namespace detail {

inline Tensor uniform_init(std::size_t rows, std::size_t cols, std::uint64_t seed, bool trainable) {
  Rng rng(seed);
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor({rows, cols}, std::move(v), trainable);
}

inline Tensor zero_bias(std::size_t cols) { return Tensor({1, cols}, std::vector<double>(cols, 0.0), true); }

inline AttentionParams init_attention(std::size_t width, const Dims& d, std::uint64_t root) {
  return {uniform_init(width, d.attention, derive_seed(root, "attn.query"), true),
          uniform_init(d.condition, d.attention, derive_seed(root, "attn.key"), true),
          uniform_init(d.condition, d.attention, derive_seed(root, "attn.value"), true),
          uniform_init(d.attention, width, derive_seed(root, "attn.out"), true)};
}

}  // namespace detail

inline ImageGenerator init_image_generator(std::uint64_t seed, bool use_attention = true, Dims dims = {}) {
  const std::uint64_t root = derive_seed(seed, "generator/image");
  ImageGenerator g;
  g.dims = dims;
  g.use_attention = use_attention;
  g.w1 = detail::uniform_init(9, dims.image_hidden, derive_seed(root, "w1"), true);
  g.b1 = detail::zero_bias(dims.image_hidden);
  g.w2 = detail::uniform_init(dims.image_hidden, dims.image_expand, derive_seed(root, "w2"), true);
  g.b2 = detail::zero_bias(dims.image_expand);
  g.w3 = detail::uniform_init(dims.image_expand, corpus::kImageValues, derive_seed(root, "w3"), true);
  g.b3 = detail::zero_bias(corpus::kImageValues);
  if (use_attention) g.attn = detail::init_attention(dims.image_hidden, dims, root);
  return g;
}

inline TextGenerator init_text_generator(std::uint64_t seed, bool use_attention = true, Dims dims = {}) {
  const std::uint64_t root = derive_seed(seed, "generator/text");
  TextGenerator g;
  g.dims = dims;
  g.use_attention = use_attention;
  g.w1 = detail::uniform_init(3, dims.text_hidden, derive_seed(root, "w1"), true);
  g.b1 = detail::zero_bias(dims.text_hidden);
  g.w2 = detail::uniform_init(dims.text_hidden, model::kWidth, derive_seed(root, "w2"), true);
  g.b2 = detail::zero_bias(model::kWidth);
  if (use_attention) g.attn = detail::init_attention(dims.text_hidden, dims, root);
  return g;
}

/// h + softmax((h Wq)(C Wk)^T / sqrt(d_attn)) (C Wv) Wo for one query row h.
inline Var cross_attention(Var h, Var condition, AttentionParams& p) {
  Tape& tape = *h.tape();
  const Shape& sh = h.shape();
  const Shape& sc = condition.shape();
  if (sh.size() != 2 || sh[0] != 1 || sh[1] != p.w_query.shape[0]) {
    throw ShapeError("attention query must be [1," + std::to_string(p.w_query.shape[0]) + "], got " + to_string(sh));
  }
  if (sc.size() != 2 || sc[0] == 0 || sc[1] != p.w_key.shape[0]) {
    throw ShapeError("attention condition must be [M," + std::to_string(p.w_key.shape[0]) + "], got " + to_string(sc));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.w_query.shape[1]));
  Var q = matmul(h, tape.leaf(p.w_query));
  Var k = matmul(condition, tape.leaf(p.w_key));
  Var v = matmul(condition, tape.leaf(p.w_value));
  Var weights = softmax(scale(matmul(q, transpose(k)), inv_sqrt), 1);  // [1, M]
  return h + matmul(matmul(weights, v), tape.leaf(p.w_out));
}

/// Bounded image perturbation [32,32,3] with every |value| <= epsilon.
/// `condition` ([M, d] caption embeddings) is ignored without attention.
inline Var generate_image_uap(Tape& tape, ImageGenerator& g, const NoiseSeed& noise, Var condition, double epsilon) {
  if (!(epsilon > 0.0)) throw ContractError("epsilon_v must be positive");
  Var h = tanh(linear(tape.constant(noise.z_image), tape.leaf(g.w1), tape.leaf(g.b1)));
  if (g.use_attention) h = cross_attention(h, condition, g.attn);
  Var e = tanh(linear(h, tape.leaf(g.w2), tape.leaf(g.b2)));
  Var raw = linear(e, tape.leaf(g.w3), tape.leaf(g.b3));
  return reshape(scale(tanh(raw), epsilon), {corpus::kImageSide, corpus::kImageSide, corpus::kChannels});
}

/// Adversarial token-embedding row [1, 64]. `condition` is [1, d].
inline Var generate_text_uap(Tape& tape, TextGenerator& g, const NoiseSeed& noise, Var condition) {
  Var h = tanh(linear(tape.constant(noise.z_text), tape.leaf(g.w1), tape.leaf(g.b1)));
  if (g.use_attention) h = cross_attention(h, condition, g.attn);
  return linear(h, tape.leaf(g.w2), tape.leaf(g.b2));
}

/// Nearest vocabulary word by cosine similarity; the reserved mask token is
/// never a candidate. Ties go to the smaller token id.
inline int project_to_vocab(std::span<const double> embedding, const model::DualEncoderModel& m) {
  const std::size_t w = m.token_table.shape[1];
  if (embedding.size() != w) throw ShapeError("embedding width " + std::to_string(embedding.size()) + " != " + std::to_string(w));
  double en = 0.0;
  for (double x : embedding) en += x * x;
  en = std::sqrt(en);
  if (!(en > 1e-12)) throw DegenerateNormError("cannot project a zero embedding");
  int best = -1;
  double best_sim = -2.0;
  for (std::size_t tok = corpus::kFirstWordToken; tok < m.token_table.shape[0]; ++tok) {
    double dot = 0.0, rn = 0.0;
    for (std::size_t k = 0; k < w; ++k) {
      const double r = m.token_table[tok * w + k];
      dot += r * embedding[k];
      rn += r * r;
    }
    const double sim = dot / (en * std::sqrt(rn));
    if (sim > best_sim) {
      best_sim = sim;
      best = static_cast<int>(tok);
    }
  }
  return best;
}

/// Differentiable stand-in for project_to_vocab: a softmax over cosine
/// similarities to every word row (temperature `t`) mixing those rows.
/// As t -> 0 the result approaches the row project_to_vocab returns.
inline Var soft_project_to_vocab(Var embedding, const model::DualEncoderModel& m, double t) {
  if (!(t > 0.0)) throw ContractError("projection temperature must be positive");
  Tape& tape = *embedding.tape();
  const std::size_t w = m.token_table.shape[1];
  const std::size_t words = m.token_table.shape[0] - corpus::kFirstWordToken;
  if (embedding.shape() != Shape{1, w}) throw ShapeError("embedding must be [1," + std::to_string(w) + "], got " + to_string(embedding.shape()));
  std::vector<double> rows(m.token_table.values.begin() + static_cast<std::ptrdiff_t>(corpus::kFirstWordToken * w), m.token_table.values.end());
  std::vector<double> unit = rows;
  for (std::size_t r = 0; r < words; ++r) {
    double n = 0.0;
    for (std::size_t k = 0; k < w; ++k) n += unit[r * w + k] * unit[r * w + k];
    n = std::sqrt(n);
    for (std::size_t k = 0; k < w; ++k) unit[r * w + k] /= n;
  }
  Var sims = matmul(l2_normalize(embedding, 1), transpose(tape.constant({words, w}, std::move(unit))));
  Var weights = softmax(scale(sims, 1.0 / t), 1);
  return matmul(weights, tape.constant({words, w}, std::move(rows)));
}

// Artifacts ---------------------------------------------------------------------------

/// A trained universal perturbation pair. `word` is absent for image-only runs.
struct UapArtifact {
  Tensor delta;  // [32, 32, 3]
  std::optional<int> word;
  double epsilon_v = kDefaultEpsilonV;
  int epsilon_t = 1;
  std::string method = "cpgc";  // cpgc, gap, random, or an ablation tag
  std::string surrogate_id;
  std::string surrogate_hash;
  std::string generator_ref;
  json config = json::object();

  static UapArtifact null(std::string surrogate_id = {}) {
    UapArtifact a;
    a.delta = Tensor::zeros({corpus::kImageSide, corpus::kImageSide, corpus::kChannels});
    a.method = "null";
    a.surrogate_id = std::move(surrogate_id);
    return a;
  }
};

inline double linf(const Tensor& t) {
  double m = 0.0;
  for (double v : t.values) m = std::max(m, std::abs(v));
  return m;
}

/// Throws ContractError unless the artifact satisfies its budgets.
inline void check_budget(const UapArtifact& a) {
  if (a.delta.shape != Shape{corpus::kImageSide, corpus::kImageSide, corpus::kChannels}) {
    throw ContractError("delta_v has shape " + to_string(a.delta.shape));
  }
  for (double v : a.delta.values) {
    if (!std::isfinite(v)) throw ContractError("delta_v contains a non-finite value");
  }
  if (linf(a.delta) > a.epsilon_v) {
    throw ContractError("delta_v exceeds its budget: " + std::to_string(linf(a.delta)) + " > " + std::to_string(a.epsilon_v));
  }
  if (a.epsilon_t != 1) throw ContractError("epsilon_t must be 1");
  if (a.word && (*a.word < corpus::kFirstWordToken || *a.word >= static_cast<int>(corpus::kVocabSize))) {
    throw ContractError("adversarial word " + std::to_string(*a.word) + " is not a vocabulary word");
  }
}

inline void save_artifact(const UapArtifact& a, const fs::path& manifest) {
  check_budget(a);
  json meta = {{"epsilon_v", a.epsilon_v}, {"epsilon_t", a.epsilon_t},  {"method", a.method},
               {"surrogate_id", a.surrogate_id}, {"surrogate_hash", a.surrogate_hash},
               {"generator_ref", a.generator_ref}, {"config", a.config}, {"linf", linf(a.delta)}};
  meta["adversarial_word"] = a.word ? json(*a.word) : json(nullptr);
  save_tensors(manifest, {{"delta_v", &a.delta}}, {{"uap", meta}});
}

inline UapArtifact load_artifact(const fs::path& manifest) {
  const TensorBundle b = load_tensors(manifest);
  const json& meta = b.meta.at("uap");
  UapArtifact a;
  a.delta = b.at("delta_v");
  a.epsilon_v = meta.at("epsilon_v");
  a.epsilon_t = meta.at("epsilon_t");
  a.method = meta.at("method");
  a.surrogate_id = meta.at("surrogate_id");
  a.surrogate_hash = meta.at("surrogate_hash");
  a.generator_ref = meta.at("generator_ref");
  a.config = meta.at("config");
  if (!meta.at("adversarial_word").is_null()) a.word = meta.at("adversarial_word").get<int>();
  check_budget(a);
  return a;
}

template <class G>
void save_generator(G& g, const NoiseSeed& noise, const fs::path& manifest, const json& meta) {
  std::vector<std::pair<std::string, const Tensor*>> named;
  for (auto& [name, t] : g.named_parameters()) named.emplace_back(name, t);
  named.emplace_back("noise.image", &noise.z_image);
  named.emplace_back("noise.text", &noise.z_text);
  json m = meta;
  m["use_attention"] = g.use_attention;
  m["noise_seed"] = noise.seed;
  save_tensors(manifest, named, {{"generator", m}});
}

}  // namespace cpgc::gen
