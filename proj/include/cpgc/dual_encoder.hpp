#pragma once

// Toy dual-stream vision-language encoders.
//
// Image stream: 4x4 patches (64 patches x 48 values) -> linear patch embedding
// plus a learned per-patch position embedding -> two tanh layers applied per
// patch -> mean or max pooling over patches -> projection to d=32 -> unit norm.
// Text stream: token embedding rows averaged over the caption -> two tanh
// layers -> projection to d=32 -> unit norm.
//
// Pixels are clamped to [0, 1] on entry with a straight-through gradient.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpgc/checkpoint.hpp"
#include "cpgc/corpus.hpp"
#include "cpgc/errors.hpp"
#include "cpgc/optim.hpp"
#include "cpgc/rng.hpp"
#include "cpgc/tensor.hpp"

namespace cpgc::model {

inline constexpr std::size_t kEmbedDim = 32;
inline constexpr std::size_t kWidth = 64;
inline constexpr std::size_t kPatchSide = 4;
inline constexpr std::size_t kPatchValues = kPatchSide * kPatchSide * corpus::kChannels;  // 48
inline constexpr std::size_t kPatchCount = (corpus::kImageSide / kPatchSide) * (corpus::kImageSide / kPatchSide);
/// Extra embedding row id that encode_texts() maps to a caller-supplied vector.
inline constexpr int kAdversarialSlot = static_cast<int>(corpus::kVocabSize);

enum class ArchKind : std::uint8_t { MeanPool, MaxPool };

inline std::string arch_name(ArchKind a) { return a == ArchKind::MeanPool ? "mean_pool" : "max_pool"; }
inline ArchKind parse_arch(const std::string& s) {
  if (s == "mean_pool") return ArchKind::MeanPool;
  if (s == "max_pool") return ArchKind::MaxPool;
  throw ContractError("unknown arch kind '" + s + "'");
}

struct DualEncoderModel {
  ArchKind arch = ArchKind::MeanPool;
  std::uint64_t seed = 0;
  std::size_t dim = kEmbedDim;

  Tensor patch_w, patch_b, position, img_w1, img_b1, img_w2, img_b2, img_proj;
  Tensor token_table, txt_w1, txt_b1, txt_w2, txt_b2, txt_proj;

  std::string id() const { return arch_name(arch) + "-s" + std::to_string(seed); }

  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    return {{"image.patch_w", &patch_w}, {"image.patch_b", &patch_b}, {"image.position", &position},
            {"image.w1", &img_w1},       {"image.b1", &img_b1},       {"image.w2", &img_w2},
            {"image.b2", &img_b2},       {"image.proj", &img_proj},   {"text.token_table", &token_table},
            {"text.w1", &txt_w1},        {"text.b1", &txt_b1},        {"text.w2", &txt_w2},
            {"text.b2", &txt_b2},        {"text.proj", &txt_proj}};
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool on) {
    for (Tensor* t : parameters()) t->requires_grad = on;
  }
};

namespace detail {

inline Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor({rows, cols}, std::move(v));
}

inline Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

/// Flat index map from one HWC image to its [64, 48] patch matrix.
inline const std::vector<std::size_t>& patch_index() {
  static const std::vector<std::size_t> index = [] {
    std::vector<std::size_t> idx;
    const std::size_t per_row = corpus::kImageSide / kPatchSide;
    for (std::size_t py = 0; py < per_row; ++py)
      for (std::size_t px = 0; px < per_row; ++px)
        for (std::size_t y = 0; y < kPatchSide; ++y)
          for (std::size_t x = 0; x < kPatchSide; ++x)
            for (std::size_t c = 0; c < corpus::kChannels; ++c)
              idx.push_back(((py * kPatchSide + y) * corpus::kImageSide + px * kPatchSide + x) * corpus::kChannels + c);
    return idx;
  }();
  return index;
}

}  // namespace detail

/// Fresh parameters. Streams are keyed by (arch, seed, parameter name), so
/// models that differ in either share no parameter values.
inline DualEncoderModel init_model(ArchKind arch, std::uint64_t seed) {
  DualEncoderModel m;
  m.arch = arch;
  m.seed = seed;
  const std::uint64_t root = derive_seed(seed, "model/" + arch_name(arch));
  auto rng_for = [&](const char* name) { return Rng(derive_seed(root, name)); };
  {
    auto r = rng_for("patch_w");
    m.patch_w = detail::glorot(kPatchValues, kWidth, r);
  }
  {
    auto r = rng_for("position");
    m.position = detail::gaussian({kPatchCount, kWidth}, 1.0, r);
  }
  {
    auto r = rng_for("img_w1");
    m.img_w1 = detail::glorot(kWidth, kWidth, r);
  }
  {
    auto r = rng_for("img_w2");
    m.img_w2 = detail::glorot(kWidth, kWidth, r);
  }
  {
    auto r = rng_for("img_proj");
    m.img_proj = detail::glorot(kWidth, kEmbedDim, r);
  }
  {
    auto r = rng_for("token_table");
    m.token_table = detail::gaussian({corpus::kVocabSize, kWidth}, 0.5, r);
  }
  {
    auto r = rng_for("txt_w1");
    m.txt_w1 = detail::glorot(kWidth, kWidth, r);
  }
  {
    auto r = rng_for("txt_w2");
    m.txt_w2 = detail::glorot(kWidth, kWidth, r);
  }
  {
    auto r = rng_for("txt_proj");
    m.txt_proj = detail::glorot(kWidth, kEmbedDim, r);
  }
  // Small seeded biases keep every parameter distinct across models.
  for (auto [name, t] : {std::pair{"patch_b", &m.patch_b}, {"img_b1", &m.img_b1}, {"img_b2", &m.img_b2},
                         {"txt_b1", &m.txt_b1}, {"txt_b2", &m.txt_b2}}) {
    auto r = rng_for(name);
    *t = detail::gaussian({1, kWidth}, 0.01, r);
  }
  return m;
}

// Encoders ----------------------------------------------------------------------

/// images: [B, 32, 32, 3] or [32, 32, 3]. Returns unit-norm embeddings [B, d].
inline Var encode_images(Tape& tape, DualEncoderModel& m, Var images) {
  const Shape& s = images.shape();
  const bool single = s.size() == 3;
  if (!((single && s == Shape{corpus::kImageSide, corpus::kImageSide, corpus::kChannels}) ||
        (s.size() == 4 && s[1] == corpus::kImageSide && s[2] == corpus::kImageSide && s[3] == corpus::kChannels))) {
    throw ShapeError("encode_images expects [B,32,32,3] or [32,32,3], got " + to_string(s));
  }
  const std::size_t batch = single ? 1 : s[0];
  const auto& one = detail::patch_index();
  std::vector<std::size_t> idx;
  idx.reserve(batch * one.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k : one) idx.push_back(b * corpus::kImageValues + k);

  Var x = add_scalar(clamp_passthrough(images, 0.0, 1.0), -0.5);
  Var patches = take(x, std::move(idx), {batch * kPatchCount, kPatchValues});
  Var h0 = linear(patches, tape.leaf(m.patch_w), tape.leaf(m.patch_b));
  h0 = reshape(reshape(h0, {batch, kPatchCount, kWidth}) + tape.leaf(m.position), {batch * kPatchCount, kWidth});
  Var h1 = tanh(linear(h0, tape.leaf(m.img_w1), tape.leaf(m.img_b1)));
  Var h2 = tanh(linear(h1, tape.leaf(m.img_w2), tape.leaf(m.img_b2)));
  Var grouped = reshape(h2, {batch, kPatchCount, kWidth});
  Var pooled = m.arch == ArchKind::MeanPool ? mean(grouped, 1) : max(grouped, 1);
  Var proj = matmul(reshape(pooled, {batch, kWidth}), tape.leaf(m.img_proj));
  return l2_normalize(proj, 1);
}

/// Mean-pooled text encoder over a batch of captions. Token id kAdversarialSlot
/// selects `adversarial_row` ([1, 64]) in place of a vocabulary row.
inline Var encode_texts(Tape& tape, DualEncoderModel& m, std::span<const corpus::Caption> captions,
                        std::optional<Var> adversarial_row = std::nullopt) {
  if (captions.empty()) throw ContractError("encode_texts needs at least one caption");
  const int limit = adversarial_row ? kAdversarialSlot : kAdversarialSlot - 1;
  std::vector<std::size_t> tokens;
  auto pool = std::make_shared<SparseOperator>(static_cast<Eigen::Index>(captions.size()), 0);
  std::vector<Eigen::Triplet<double>> triplets;
  for (std::size_t b = 0; b < captions.size(); ++b) {
    const auto& c = captions[b];
    if (c.empty() || c.size() > corpus::kMaxCaptionLength) {
      throw ContractError("caption length must be in [1, 8], got " + std::to_string(c.size()));
    }
    for (int tok : c) {
      if (tok < 0 || tok > limit) throw DomainError("token id " + std::to_string(tok) + " outside the vocabulary");
      triplets.emplace_back(static_cast<int>(b), static_cast<int>(tokens.size()), 1.0 / static_cast<double>(c.size()));
      tokens.push_back(static_cast<std::size_t>(tok));
    }
  }
  pool->resize(static_cast<Eigen::Index>(captions.size()), static_cast<Eigen::Index>(tokens.size()));
  pool->setFromTriplets(triplets.begin(), triplets.end());
  pool->makeCompressed();

  Var table = tape.leaf(m.token_table);
  if (adversarial_row) {
    if (adversarial_row->shape() != Shape{1, kWidth}) {
      throw ShapeError("adversarial row must be [1,64], got " + to_string(adversarial_row->shape()));
    }
    table = concat_rows({table, *adversarial_row});
  }
  Var rows = gather_rows(table, tokens);
  Var pooled = sparse_apply(std::move(pool), rows);
  Var h1 = tanh(linear(pooled, tape.leaf(m.txt_w1), tape.leaf(m.txt_b1)));
  Var h2 = tanh(linear(h1, tape.leaf(m.txt_w2), tape.leaf(m.txt_b2)));
  return l2_normalize(matmul(h2, tape.leaf(m.txt_proj)), 1);
}

/// Single-image convenience wrapper: embedding [d].
inline Tensor encode_image(DualEncoderModel& m, const Tensor& image) {
  if (image.shape != Shape{corpus::kImageSide, corpus::kImageSide, corpus::kChannels}) {
    throw ShapeError("encode_image expects [32,32,3], got " + to_string(image.shape));
  }
  Tape tape;
  Tensor e = detach(encode_images(tape, m, tape.constant(image)));
  e.shape = {m.dim};
  return e;
}

inline Tensor encode_text(DualEncoderModel& m, const corpus::Caption& caption) {
  Tape tape;
  Tensor e = detach(encode_texts(tape, m, std::span(&caption, 1)));
  e.shape = {m.dim};
  return e;
}

/// Embeds many images in fixed-size chunks; result [n, d].
inline Tensor embed_images(DualEncoderModel& m, std::span<const Tensor* const> images, std::size_t chunk = 64) {
  std::vector<double> out;
  out.reserve(images.size() * m.dim);
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t end = std::min(images.size(), begin + chunk);
    std::vector<double> px;
    px.reserve((end - begin) * corpus::kImageValues);
    for (std::size_t i = begin; i < end; ++i) px.insert(px.end(), images[i]->values.begin(), images[i]->values.end());
    Tape tape;
    Var e = encode_images(tape, m, tape.constant({end - begin, corpus::kImageSide, corpus::kImageSide, corpus::kChannels}, std::move(px)));
    out.insert(out.end(), e.values().begin(), e.values().end());
  }
  return Tensor({images.size(), m.dim}, std::move(out));
}

inline Tensor embed_texts(DualEncoderModel& m, std::span<const corpus::Caption> captions, std::size_t chunk = 256) {
  std::vector<double> out;
  out.reserve(captions.size() * m.dim);
  for (std::size_t begin = 0; begin < captions.size(); begin += chunk) {
    const std::size_t end = std::min(captions.size(), begin + chunk);
    Tape tape;
    Var e = encode_texts(tape, m, captions.subspan(begin, end - begin));
    out.insert(out.end(), e.values().begin(), e.values().end());
  }
  return Tensor({captions.size(), m.dim}, std::move(out));
}

// Retrieval -------------------------------------------------------------------------

inline double dot_row(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.shape.back();
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[j * d + k];
  return s;
}

/// Top-k gallery indices by descending cosine similarity to `query`; ties go to
/// the smaller index.
inline std::vector<std::size_t> rank_retrieval(std::span<const double> query, const Tensor& gallery, std::size_t k) {
  if (gallery.shape.size() != 2 || gallery.shape[1] != query.size()) {
    throw ShapeError("gallery " + to_string(gallery.shape) + " does not match query dimension " + std::to_string(query.size()));
  }
  const std::size_t n = gallery.shape[0];
  const std::size_t d = query.size();
  double qn = 0.0;
  for (double q : query) qn += q * q;
  qn = std::sqrt(qn);
  std::vector<double> sim(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0, gn = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      s += query[c] * gallery[j * d + c];
      gn += gallery[j * d + c] * gallery[j * d + c];
    }
    sim[j] = s / (qn * std::sqrt(gn));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < n; ++j) order[j] = j;
  k = std::min(k, n);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return sim[a] != sim[b] ? sim[a] > sim[b] : a < b; });
  order.resize(k);
  return order;
}

/// Class-level recall@k on a split: an image query succeeds when one of its
/// top-k captions names the same attributes, and vice versa.
struct RetrievalRecall {
  double text_retrieval = 0.0;   // TR: image -> text
  double image_retrieval = 0.0;  // IR: text -> image
};

inline RetrievalRecall recall_at_k(DualEncoderModel& m, const std::vector<corpus::PairedSample>& split, std::size_t k) {
  std::vector<const Tensor*> images;
  std::vector<corpus::Caption> captions;
  std::vector<std::size_t> image_class, caption_class;
  for (const auto& s : split) {
    images.push_back(&s.image);
    image_class.push_back(s.attributes.class_index());
    for (const auto& c : s.captions) {
      captions.push_back(c);
      caption_class.push_back(s.attributes.class_index());
    }
  }
  const Tensor ie = embed_images(m, images);
  const Tensor te = embed_texts(m, captions);
  const std::size_t d = m.dim;
  std::size_t tr = 0, ir = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j : rank_retrieval(std::span(ie.values).subspan(i * d, d), te, k)) {
      if (caption_class[j] == image_class[i]) {
        ++tr;
        break;
      }
    }
  }
  for (std::size_t j = 0; j < captions.size(); ++j) {
    for (std::size_t i : rank_retrieval(std::span(te.values).subspan(j * d, d), ie, k)) {
      if (image_class[i] == caption_class[j]) {
        ++ir;
        break;
      }
    }
  }
  return {static_cast<double>(tr) / static_cast<double>(images.size()),
          static_cast<double>(ir) / static_cast<double>(captions.size())};
}

// Pre-training ------------------------------------------------------------------------

struct PretrainConfig {
  std::size_t epochs = 50;
  std::size_t batch = 64;
  double temperature = 0.07;
  double learning_rate = 2e-3;
};

/// Symmetric in-batch contrastive loss over cosine similarities / temperature.
/// Items carry group labels; every caption sharing an image's label is a
/// correct match, so each row's target is the total probability on its matches.
inline Var symmetric_infonce(Var image_emb, Var text_emb, double temperature, std::span<const std::size_t> image_groups,
                             std::span<const std::size_t> text_groups) {
  const std::size_t ni = image_emb.shape()[0], nt = text_emb.shape()[0];
  if (image_groups.size() != ni || text_groups.size() != nt) throw ContractError("one group label per batch item required");
  Var logits = scale(matmul(image_emb, transpose(text_emb)), 1.0 / temperature);
  std::vector<double> off(ni * nt);
  for (std::size_t i = 0; i < ni; ++i)
    for (std::size_t j = 0; j < nt; ++j) off[i * nt + j] = image_groups[i] == text_groups[j] ? 0.0 : -1e4;
  Var matches = logits + logits.tape()->constant({ni, nt}, std::move(off));
  Var image_to_text = sum(logsumexp(logits, 1)) - sum(logsumexp(matches, 1));
  Var text_to_image = sum(logsumexp(logits, 0)) - sum(logsumexp(matches, 0));
  return scale(image_to_text, 0.5 / static_cast<double>(ni)) + scale(text_to_image, 0.5 / static_cast<double>(nt));
}

/// Trains a fresh model of the given arch on the corpus train split.
/// `on_epoch(epoch, mean_loss)` is called after every epoch when provided.
inline DualEncoderModel pretrain_dual_encoder(const corpus::Corpus& data, ArchKind arch, std::uint64_t seed,
                                              const PretrainConfig& cfg,
                                              const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (data.train.empty()) throw ContractError("pretraining needs a nonempty train split");
  DualEncoderModel m = init_model(arch, seed);
  m.set_requires_grad(true);
  Adam opt(m.parameters(), {.learning_rate = cfg.learning_rate});
  const std::size_t n = data.train.size();
  const std::size_t batch = std::min(cfg.batch, n);
  std::vector<std::size_t> order(n);
  long step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, "pretrain/" + arch_name(arch) + "/epoch", epoch));
    rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin + batch <= n; begin += batch, ++step) {
      std::vector<double> px;
      px.reserve(batch * corpus::kImageValues);
      std::vector<corpus::Caption> caps;
      std::vector<std::size_t> image_groups, text_groups;
      for (std::size_t k = begin; k < begin + batch; ++k) {
        const auto& s = data.train[order[k]];
        px.insert(px.end(), s.image.values.begin(), s.image.values.end());
        image_groups.push_back(s.attributes.class_index());
        for (const auto& c : s.captions) {
          caps.push_back(c);
          text_groups.push_back(s.attributes.class_index());
        }
      }
      opt.zero_grad();
      Tape tape;
      Var ie = encode_images(tape, m, tape.constant({batch, corpus::kImageSide, corpus::kImageSide, corpus::kChannels}, std::move(px)));
      Var te = encode_texts(tape, m, caps);
      Var loss = symmetric_infonce(ie, te, cfg.temperature, image_groups, text_groups);
      if (!std::isfinite(loss.item())) throw TrainingFailure("pretraining loss diverged for " + m.id(), step);
      tape.backward(loss);
      opt.step();
      loss_sum += loss.item();
      ++batches;
    }
    if (on_epoch) on_epoch(epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0);
  }
  m.set_requires_grad(false);
  for (Tensor* t : m.parameters()) t->grad.clear();
  return m;
}

// Persistence ------------------------------------------------------------------------

/// FNV-1a over every parameter's bit pattern, as 16 hex digits.
inline std::string model_hash(DualEncoderModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto& [name, t] : m.named_parameters()) {
    for (double v : t->values) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void save_model(DualEncoderModel& m, const fs::path& manifest, const std::string& corpus_hash) {
  std::vector<std::pair<std::string, const Tensor*>> named;
  for (auto& [name, t] : m.named_parameters()) named.emplace_back(name, t);
  save_tensors(manifest, named,
               {{"model", {{"arch_kind", arch_name(m.arch)}, {"d", m.dim}, {"seed", m.seed}, {"corpus_hash", corpus_hash},
                           {"id", m.id()}, {"param_hash", model_hash(m)}}}});
}

inline DualEncoderModel load_model(const fs::path& manifest) {
  const TensorBundle bundle = load_tensors(manifest);
  const json& meta = bundle.meta.at("model");
  DualEncoderModel m;
  m.arch = parse_arch(meta.at("arch_kind").get<std::string>());
  m.seed = meta.at("seed");
  m.dim = meta.at("d");
  for (auto& [name, t] : m.named_parameters()) *t = bundle.at(name);
  return m;
}

}  // namespace cpgc::model
