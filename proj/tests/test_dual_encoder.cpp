#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cpgc/dual_encoder.hpp"
#include "cpgc/gradcheck.hpp"

using namespace cpgc;
using namespace cpgc::model;

namespace {

const corpus::Corpus& tiny_corpus() {
  static const corpus::Corpus c = corpus::generate_corpus(96, 40, 3, corpus::Domain::A, 3);
  return c;
}

Tensor stack_images(const std::vector<corpus::PairedSample>& split, std::size_t n) {
  std::vector<double> v;
  for (std::size_t i = 0; i < n; ++i) v.insert(v.end(), split[i].image.values.begin(), split[i].image.values.end());
  return Tensor({n, 32, 32, 3}, std::move(v));
}

double row_norm(const Tensor& t, std::size_t row) {
  const std::size_t d = t.shape.back();
  double s = 0;
  for (std::size_t k = 0; k < d; ++k) s += t[row * d + k] * t[row * d + k];
  return std::sqrt(s);
}

}  // namespace

TEST(Encoders, UnitNormEmbeddingsOfFixedDimension) {
  auto m = init_model(ArchKind::MeanPool, 1);
  const auto& c = tiny_corpus();
  const Tensor e = encode_image(m, c.test[0].image);
  EXPECT_EQ(e.shape, Shape{32});
  EXPECT_NEAR(row_norm(e, 0), 1.0, 1e-12);
  const Tensor t = encode_text(m, c.test[0].captions[0]);
  EXPECT_NEAR(row_norm(t, 0), 1.0, 1e-12);

  std::vector<const Tensor*> ims;
  for (std::size_t i = 0; i < 5; ++i) ims.push_back(&c.test[i].image);
  const Tensor batch = embed_images(m, ims, 2);
  ASSERT_EQ(batch.shape, (Shape{5, 32}));
  // Chunked batching does not change the single-image result.
  for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(batch[k], e[k], 1e-12);
}

TEST(Encoders, RejectBadInputs) {
  auto m = init_model(ArchKind::MaxPool, 1);
  EXPECT_THROW(encode_image(m, Tensor::zeros({16, 16, 3})), ShapeError);
  EXPECT_THROW(encode_text(m, corpus::Caption{1, 2, 64}), DomainError);
  EXPECT_THROW(encode_text(m, corpus::Caption{}), ContractError);
  EXPECT_THROW(encode_text(m, corpus::Caption(9, 1)), ContractError);
}

TEST(Encoders, PixelsClampedOnEntry) {
  auto m = init_model(ArchKind::MeanPool, 2);
  Tensor img = tiny_corpus().test[1].image;
  Tensor pushed = img;
  for (auto& v : pushed.values) v = v > 0.5 ? v + 3.0 : v - 3.0;
  Tensor saturated = img;
  for (auto& v : saturated.values) v = v > 0.5 ? 1.0 : 0.0;
  EXPECT_EQ(encode_image(m, pushed).values, encode_image(m, saturated).values);
}

TEST(Encoders, AdversarialSlotActsAsExtraRow) {
  auto m = init_model(ArchKind::MeanPool, 4);
  const corpus::Caption clean = tiny_corpus().test[2].captions[0];
  corpus::Caption swapped = clean;
  swapped[3] = kAdversarialSlot;
  // Feeding the replaced word's own row through the slot reproduces the clean embedding.
  Tensor row({1, kWidth}, std::vector<double>(m.token_table.values.begin() + clean[3] * 64,
                                              m.token_table.values.begin() + (clean[3] + 1) * 64));
  Tape tape;
  Var e = encode_texts(tape, m, std::span(&swapped, 1), tape.constant(row));
  const Tensor ref = encode_text(m, clean);
  for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(e.values()[k], ref[k], 1e-12);
}

TEST(Encoders, GradientsMatchFiniteDifferences) {
  for (ArchKind arch : {ArchKind::MeanPool, ArchKind::MaxPool}) {
    auto m = init_model(arch, 9);
    m.set_requires_grad(true);
    const auto& c = tiny_corpus();
    Tensor imgs = stack_images(c.test, 3);
    std::vector<corpus::Caption> caps = {c.test[0].captions[0], c.test[1].captions[1], c.test[2].captions[2]};
    const std::vector<std::size_t> g = {0, 1, 2};
    auto loss = [&](Tape& t) {
      return symmetric_infonce(encode_images(t, m, t.constant(imgs)), encode_texts(t, m, caps), 0.5, g, g);
    };
    const double err = finite_diff_check(loss, m.parameters(), {.eps = 1e-5, .coords_per_tensor = 6, .seed = 1});
    EXPECT_LT(err, 1e-4) << arch_name(arch);
  }
}

TEST(Encoders, GradientReachesPixels) {
  auto m = init_model(ArchKind::MeanPool, 5);
  Tensor img = tiny_corpus().test[3].image;
  img.requires_grad = true;
  const Tensor target = encode_text(m, tiny_corpus().test[3].captions[0]);
  auto loss = [&](Tape& t) {
    Var e = encode_images(t, m, t.leaf(img));
    return sum(e * t.constant({1, 32}, target.values));
  };
  EXPECT_LT(finite_diff_check(loss, {&img}, {.eps = 1e-6, .coords_per_tensor = 40, .seed = 2}), 1e-4);
}

TEST(ContrastiveLoss, MatchesScalarOracle) {
  Rng rng(12);
  const std::size_t ni = 4, nt = 6, d = 5;
  auto unit_rows = [&](std::size_t n) {
    std::vector<double> v(n * d);
    for (auto& x : v) x = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += v[i * d + k] * v[i * d + k];
      for (std::size_t k = 0; k < d; ++k) v[i * d + k] /= std::sqrt(s);
    }
    return v;
  };
  const auto iv = unit_rows(ni), tv = unit_rows(nt);
  const std::vector<std::size_t> ig = {0, 1, 2, 0}, tg = {0, 1, 2, 0, 1, 2};
  const double temp = 0.07;
  Tape tape;
  const double got = symmetric_infonce(tape.constant({ni, d}, iv), tape.constant({nt, d}, tv), temp, ig, tg).item();

  auto sim = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += iv[i * d + k] * tv[j * d + k];
    return s / temp;
  };
  double i2t = 0, t2i = 0;
  for (std::size_t i = 0; i < ni; ++i) {
    double all = 0, pos = 0;
    for (std::size_t j = 0; j < nt; ++j) {
      all += std::exp(sim(i, j));
      if (ig[i] == tg[j]) pos += std::exp(sim(i, j));
    }
    i2t -= std::log(pos / all);
  }
  for (std::size_t j = 0; j < nt; ++j) {
    double all = 0, pos = 0;
    for (std::size_t i = 0; i < ni; ++i) {
      all += std::exp(sim(i, j));
      if (ig[i] == tg[j]) pos += std::exp(sim(i, j));
    }
    t2i -= std::log(pos / all);
  }
  EXPECT_NEAR(got, 0.5 * i2t / ni + 0.5 * t2i / nt, 1e-10);
}

TEST(ContrastiveLoss, OneToOneReducesToDiagonalCrossEntropy) {
  // With distinct labels the target is the diagonal: perfectly aligned,
  // well-separated embeddings give a near-zero loss.
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Tape tape;
  const std::vector<std::size_t> g = {0, 1, 2};
  const double l = symmetric_infonce(tape.constant({3, 3}, eye), tape.constant({3, 3}, eye), 0.01, g, g).item();
  EXPECT_NEAR(l, 0.0, 1e-12);
}

TEST(RankRetrieval, MatchesBruteForceWithTies) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng.below(30), d = 1 + rng.below(4);
    std::vector<double> g(n * d), q(d);
    // Coarse integer coordinates produce exact ties.
    for (auto& x : g) x = static_cast<double>(rng.below(3)) - 1.0;
    for (std::size_t j = 0; j < n; ++j) g[j * d] += 0.5;  // no zero rows
    for (auto& x : q) x = static_cast<double>(rng.below(3)) - 1.0;
    q[0] += 0.5;
    const Tensor gallery({n, d}, g);
    const std::size_t k = 1 + rng.below(n);
    const auto got = rank_retrieval(q, gallery, k);

    std::vector<std::pair<double, std::size_t>> all;
    double qn = 0;
    for (double x : q) qn += x * x;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0, gn = 0;
      for (std::size_t c = 0; c < d; ++c) {
        s += q[c] * g[j * d + c];
        gn += g[j * d + c] * g[j * d + c];
      }
      all.emplace_back(s / (std::sqrt(qn) * std::sqrt(gn)), j);
    }
    // Stable sort by similarity keeps equal scores in index order.
    std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return a.first > b.first; });
    ASSERT_EQ(got.size(), k);
    for (std::size_t r = 0; r < k; ++r) EXPECT_EQ(got[r], all[r].second) << "trial " << trial;
  }
  EXPECT_THROW(rank_retrieval(std::vector<double>{1.0, 0.0}, Tensor::zeros({3, 3}), 1), ShapeError);
}

TEST(Init, DistinctAcrossArchAndSeedAndReproducible) {
  auto a = init_model(ArchKind::MeanPool, 1);
  auto b = init_model(ArchKind::MeanPool, 2);
  auto c = init_model(ArchKind::MaxPool, 1);
  auto a2 = init_model(ArchKind::MeanPool, 1);
  EXPECT_EQ(model_hash(a), model_hash(a2));
  const auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    std::set<double> va(pa[i].second->values.begin(), pa[i].second->values.end());
    std::size_t shared_b = 0, shared_c = 0;
    for (double v : pb[i].second->values) shared_b += va.count(v);
    for (double v : pc[i].second->values) shared_c += va.count(v);
    EXPECT_EQ(shared_b, 0u) << pa[i].first;
    EXPECT_EQ(shared_c, 0u) << pa[i].first;
  }
}

TEST(Pretrain, UntrainedIsNearChanceAndTrainingLowersLoss) {
  const auto& c = tiny_corpus();
  auto fresh = init_model(ArchKind::MeanPool, 7);
  const auto r0 = recall_at_k(fresh, c.test, 1);
  EXPECT_LT(r0.text_retrieval, 0.2);
  EXPECT_LT(r0.image_retrieval, 0.2);

  std::vector<double> losses;
  PretrainConfig cfg{.epochs = 6, .batch = 32};
  auto m = pretrain_dual_encoder(c, ArchKind::MeanPool, 7, cfg, [&](std::size_t, double l) { losses.push_back(l); });
  ASSERT_EQ(losses.size(), 6u);
  EXPECT_LT(losses.back(), losses.front());
  EXPECT_FALSE(m.patch_w.requires_grad);
  auto again = pretrain_dual_encoder(c, ArchKind::MeanPool, 7, cfg);
  EXPECT_EQ(model_hash(m), model_hash(again));
}

TEST(Pretrain, DivergenceRaisesTrainingFailure) {
  PretrainConfig cfg{.epochs = 2, .batch = 32, .learning_rate = std::nan("")};
  try {
    pretrain_dual_encoder(tiny_corpus(), ArchKind::MaxPool, 1, cfg);
    FAIL() << "expected TrainingFailure";
  } catch (const TrainingFailure& e) {
    EXPECT_GE(e.iteration, 1);
  }
}

TEST(Checkpoint, ModelRoundTripGivesIdenticalRecall) {
  const auto& c = tiny_corpus();
  auto m = pretrain_dual_encoder(c, ArchKind::MaxPool, 3, {.epochs = 1, .batch = 32});
  const auto dir = fs::temp_directory_path() / "cpgc_model_test";
  fs::remove_all(dir);
  save_model(m, dir / "model.json", corpus::fingerprint(c));
  auto back = load_model(dir / "model.json");
  EXPECT_EQ(back.arch, ArchKind::MaxPool);
  EXPECT_EQ(back.seed, 3u);
  EXPECT_EQ(model_hash(back), model_hash(m));
  const auto r1 = recall_at_k(m, c.test, 5), r2 = recall_at_k(back, c.test, 5);
  EXPECT_EQ(r1.text_retrieval, r2.text_retrieval);
  EXPECT_EQ(r1.image_retrieval, r2.image_retrieval);
  EXPECT_EQ(io::read_json(dir / "model.json").at("meta").at("model").at("corpus_hash"), corpus::fingerprint(c));
  fs::remove_all(dir);
}
