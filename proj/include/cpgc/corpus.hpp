#pragma once

// Procedural image-caption corpus.
//
// Every sample is drawn from a closed attribute space (shape, color, quadrant,
// size, background: 4*4*4*2*2 = 256 classes). Images are 32x32x3 renderings of
// one anti-aliased shape; captions are short token sequences that name every
// attribute through interchangeable synonyms, so a rule-based parser recovers
// the attribute record from any caption.
//
// Files written by write_corpus():
//   manifest.json  sizes, domain, seed, vocabulary, per-sample class indices
//   images.f32     little-endian float32 pixels, HWC row-major, sample-major
//   captions.txt   "<sample_id> <caption_index> <token> <token> ..." per line

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpgc/checkpoint.hpp"
#include "cpgc/errors.hpp"
#include "cpgc/rng.hpp"
#include "cpgc/tensor.hpp"

namespace cpgc::corpus {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kImageValues = kImageSide * kImageSide * kChannels;
inline constexpr std::size_t kVocabSize = 64;
inline constexpr std::size_t kMaxCaptionLength = 8;
inline constexpr std::size_t kClassCount = 256;
inline constexpr int kMaskToken = 0;
inline constexpr int kFirstWordToken = 1;

enum class ShapeKind : std::uint8_t { Circle, Square, Triangle, Cross };
enum class Color : std::uint8_t { Red, Green, Blue, Yellow };
enum class Quadrant : std::uint8_t { TopLeft, TopRight, BottomLeft, BottomRight };
enum class SizeKind : std::uint8_t { Small, Large };
enum class Background : std::uint8_t { Dark, Light };
enum class Domain : std::uint8_t { A, B };

inline std::string domain_name(Domain d) { return d == Domain::A ? "A" : "B"; }
inline Domain parse_domain(std::string_view s) {
  if (s == "A") return Domain::A;
  if (s == "B") return Domain::B;
  throw ContractError("unknown domain '" + std::string(s) + "' (expected A or B)");
}

struct AttributeRecord {
  ShapeKind shape = ShapeKind::Circle;
  Color color = Color::Red;
  Quadrant position = Quadrant::TopLeft;
  SizeKind size = SizeKind::Small;
  Background background = Background::Dark;

  /// Mixed-radix index in [0, 256).
  std::size_t class_index() const {
    return (((static_cast<std::size_t>(shape) * 4 + static_cast<std::size_t>(color)) * 4 +
             static_cast<std::size_t>(position)) * 2 + static_cast<std::size_t>(size)) * 2 +
           static_cast<std::size_t>(background);
  }

  static AttributeRecord from_index(std::size_t index) {
    if (index >= kClassCount) throw ContractError("class index out of range");
    AttributeRecord r;
    r.background = static_cast<Background>(index % 2);
    index /= 2;
    r.size = static_cast<SizeKind>(index % 2);
    index /= 2;
    r.position = static_cast<Quadrant>(index % 4);
    index /= 4;
    r.color = static_cast<Color>(index % 4);
    index /= 4;
    r.shape = static_cast<ShapeKind>(index);
    return r;
  }

  bool operator==(const AttributeRecord&) const = default;
};

using Caption = std::vector<int>;

// Vocabulary ----------------------------------------------------------------------

enum class Slot : std::uint8_t { Determiner, PositionPrep, BackgroundPrep, Shape, Color, Position, Size, Background };

struct TokenGroup {
  Slot slot;
  int value;  // enumerator of the attribute, or 0 for function words
  std::vector<std::string_view> words;
};

/// Token ids are assigned in table order starting at kFirstWordToken.
inline const std::vector<TokenGroup>& token_groups() {
  static const std::vector<TokenGroup> groups = {
      {Slot::Determiner, 0, {"a", "one", "the", "some"}},
      {Slot::PositionPrep, 0, {"at", "in", "near", "toward"}},
      {Slot::BackgroundPrep, 0, {"on", "over", "against"}},
      {Slot::Shape, 0, {"circle", "ring", "disc"}},
      {Slot::Shape, 1, {"square", "box", "block"}},
      {Slot::Shape, 2, {"triangle", "wedge", "pyramid"}},
      {Slot::Shape, 3, {"cross", "plus", "x"}},
      {Slot::Color, 0, {"red", "crimson", "scarlet"}},
      {Slot::Color, 1, {"green", "emerald", "lime"}},
      {Slot::Color, 2, {"blue", "azure", "navy"}},
      {Slot::Color, 3, {"yellow", "gold", "amber"}},
      {Slot::Position, 0, {"topleft", "upperleft", "northwest"}},
      {Slot::Position, 1, {"topright", "upperright", "northeast"}},
      {Slot::Position, 2, {"bottomleft", "lowerleft", "southwest"}},
      {Slot::Position, 3, {"bottomright", "lowerright", "southeast"}},
      {Slot::Size, 0, {"small", "tiny", "little", "mini"}},
      {Slot::Size, 1, {"large", "big", "huge", "giant"}},
      {Slot::Background, 0, {"dark", "black", "dim", "shadowy"}},
      {Slot::Background, 1, {"light", "white", "pale", "bright"}},
  };
  return groups;
}

struct TokenInfo {
  std::string word;
  Slot slot;
  int value;
  std::size_t group;
};

inline const std::vector<TokenInfo>& token_table() {
  static const std::vector<TokenInfo> table = [] {
    std::vector<TokenInfo> t;
    t.push_back({"<mask>", Slot::Determiner, -1, SIZE_MAX});
    const auto& groups = token_groups();
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (auto w : groups[g].words) t.push_back({std::string(w), groups[g].slot, groups[g].value, g});
    }
    if (t.size() != kVocabSize) throw std::logic_error("vocabulary must have exactly 64 tokens");
    return t;
  }();
  return table;
}

inline std::vector<std::string> vocabulary() {
  std::vector<std::string> words;
  for (const auto& t : token_table()) words.push_back(t.word);
  return words;
}

/// First token id of the synonym group for (slot, value).
inline std::pair<int, std::size_t> synonym_range(Slot slot, int value) {
  int id = kFirstWordToken;
  for (const auto& g : token_groups()) {
    if (g.slot == slot && g.value == value) return {id, g.words.size()};
    id += static_cast<int>(g.words.size());
  }
  throw std::logic_error("no synonym group");
}

inline std::string decode(const Caption& c) {
  std::string out;
  for (int tok : c) {
    if (!out.empty()) out += ' ';
    out += (tok >= 0 && static_cast<std::size_t>(tok) < kVocabSize) ? token_table()[static_cast<std::size_t>(tok)].word : "<?>";
  }
  return out;
}

/// Rule-based parser: every attribute slot must appear exactly once.
inline std::optional<AttributeRecord> parse_caption(const Caption& caption) {
  std::array<int, 8> seen{};
  std::array<int, 8> value{};
  for (int tok : caption) {
    if (tok <= kMaskToken || static_cast<std::size_t>(tok) >= kVocabSize) return std::nullopt;
    const auto& info = token_table()[static_cast<std::size_t>(tok)];
    const auto s = static_cast<std::size_t>(info.slot);
    seen[s] += 1;
    value[s] = info.value;
  }
  for (Slot s : {Slot::Shape, Slot::Color, Slot::Position, Slot::Size, Slot::Background}) {
    if (seen[static_cast<std::size_t>(s)] != 1) return std::nullopt;
  }
  AttributeRecord r;
  r.shape = static_cast<ShapeKind>(value[static_cast<std::size_t>(Slot::Shape)]);
  r.color = static_cast<Color>(value[static_cast<std::size_t>(Slot::Color)]);
  r.position = static_cast<Quadrant>(value[static_cast<std::size_t>(Slot::Position)]);
  r.size = static_cast<SizeKind>(value[static_cast<std::size_t>(Slot::Size)]);
  r.background = static_cast<Background>(value[static_cast<std::size_t>(Slot::Background)]);
  return r;
}

// Rendering -----------------------------------------------------------------------

struct RenderStyle {
  std::array<double, 2> background_levels;  // gray level for Dark, Light
  double stroke_width;                      // darker outline band; 0 disables
  double stroke_shade;                      // outline color = fill * shade
};

inline RenderStyle style_for(Domain d) {
  if (d == Domain::A) return {{0.15, 0.75}, 0.0, 1.0};
  return {{0.30, 0.60}, 1.25, 0.55};
}

inline std::array<double, 3> rgb(Color c) {
  switch (c) {
    case Color::Red: return {0.85, 0.15, 0.15};
    case Color::Green: return {0.15, 0.75, 0.20};
    case Color::Blue: return {0.15, 0.30, 0.90};
    case Color::Yellow: return {0.90, 0.85, 0.15};
  }
  return {0, 0, 0};
}

namespace detail {

inline bool inside(ShapeKind kind, double dx, double dy, double r) {
  if (r <= 0.0) return false;
  switch (kind) {
    case ShapeKind::Circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square: return std::max(std::abs(dx), std::abs(dy)) <= 0.7 * r;
    case ShapeKind::Triangle: {
      if (dy < -r || dy > 0.8 * r) return false;
      return std::abs(dx) <= (dy + r) / 1.8;
    }
    case ShapeKind::Cross:
      return (std::abs(dx) <= 0.33 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.33 * r && std::abs(dx) <= r);
  }
  return false;
}

}  // namespace detail

/// Deterministic in (attrs, seed, style). The seed jitters center and radius.
inline Tensor render_image(const AttributeRecord& attrs, std::uint64_t seed, const RenderStyle& style = style_for(Domain::A)) {
  Rng rng(derive_seed(seed, "corpus/render"));
  const double qx = (attrs.position == Quadrant::TopLeft || attrs.position == Quadrant::BottomLeft) ? 8.0 : 24.0;
  const double qy = (attrs.position == Quadrant::TopLeft || attrs.position == Quadrant::TopRight) ? 8.0 : 24.0;
  const double cx = qx + rng.uniform(-0.5, 0.5);
  const double cy = qy + rng.uniform(-0.5, 0.5);
  const double r = (attrs.size == SizeKind::Small ? 4.5 : 7.0) * (1.0 + rng.uniform(-0.1, 0.1));
  const double bg = style.background_levels[static_cast<std::size_t>(attrs.background)];
  const auto fill = rgb(attrs.color);
  constexpr int kSub = 4;
  std::vector<double> px(kImageValues);
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      int n_fill = 0, n_stroke = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double dx = static_cast<double>(x) + (sx + 0.5) / kSub - cx;
          const double dy = static_cast<double>(y) + (sy + 0.5) / kSub - cy;
          if (!detail::inside(attrs.shape, dx, dy, r)) continue;
          if (style.stroke_width > 0.0 && !detail::inside(attrs.shape, dx, dy, r - style.stroke_width)) {
            ++n_stroke;
          } else {
            ++n_fill;
          }
        }
      }
      const double c_fill = n_fill / double(kSub * kSub);
      const double c_stroke = n_stroke / double(kSub * kSub);
      for (std::size_t ch = 0; ch < kChannels; ++ch) {
        const double v = bg * (1.0 - c_fill - c_stroke) + fill[ch] * c_fill + fill[ch] * style.stroke_shade * c_stroke;
        // Stored as float32 on disk; keep memory and disk bit-identical.
        px[(y * kImageSide + x) * kChannels + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return Tensor({kImageSide, kImageSide, kChannels}, std::move(px));
}

// Captions ------------------------------------------------------------------------

/// Relative synonym preferences: domain A uniform, domain B skewed toward later synonyms.
inline std::size_t pick_synonym(Rng& rng, std::size_t count, Domain domain) {
  if (domain == Domain::A) return rng.below(count);
  std::vector<double> w(count);
  for (std::size_t i = 0; i < count; ++i) w[i] = static_cast<double>(i + 1) * static_cast<double>(i + 1);
  double total = 0;
  for (double x : w) total += x;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < count; ++i) {
    if (u < w[i]) return i;
    u -= w[i];
  }
  return count - 1;
}

inline const std::vector<std::vector<Slot>>& caption_templates() {
  using S = Slot;
  static const std::vector<std::vector<Slot>> t = {
      {S::Determiner, S::Size, S::Color, S::Shape, S::PositionPrep, S::Position, S::BackgroundPrep, S::Background},
      {S::Determiner, S::Color, S::Size, S::Shape, S::PositionPrep, S::Position, S::BackgroundPrep, S::Background},
      {S::PositionPrep, S::Position, S::Determiner, S::Size, S::Color, S::Shape, S::BackgroundPrep, S::Background},
      {S::Size, S::Color, S::Shape, S::PositionPrep, S::Position, S::BackgroundPrep, S::Background},
      {S::Determiner, S::Size, S::Color, S::Shape, S::BackgroundPrep, S::Background, S::PositionPrep, S::Position},
      {S::Color, S::Size, S::Shape, S::BackgroundPrep, S::Background, S::PositionPrep, S::Position},
  };
  return t;
}

inline int slot_value(const AttributeRecord& a, Slot s) {
  switch (s) {
    case Slot::Shape: return static_cast<int>(a.shape);
    case Slot::Color: return static_cast<int>(a.color);
    case Slot::Position: return static_cast<int>(a.position);
    case Slot::Size: return static_cast<int>(a.size);
    case Slot::Background: return static_cast<int>(a.background);
    default: return 0;
  }
}

/// `m` distinct captions naming exactly `attrs`.
inline std::vector<Caption> render_captions(const AttributeRecord& attrs, std::size_t m, std::uint64_t seed,
                                            Domain domain = Domain::A) {
  if (m < 2) throw ContractError("need at least two captions per image");
  Rng rng(derive_seed(seed, "corpus/captions"));
  std::vector<Caption> out;
  for (std::size_t attempts = 0; out.size() < m; ++attempts) {
    if (attempts > 1000 * m) throw ContractError("cannot draw enough distinct captions");
    const auto& tmpl = caption_templates()[rng.below(caption_templates().size())];
    Caption c;
    for (Slot s : tmpl) {
      auto [first, count] = synonym_range(s, slot_value(attrs, s));
      c.push_back(first + static_cast<int>(pick_synonym(rng, count, domain)));
    }
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(std::move(c));
  }
  return out;
}

// Corpus --------------------------------------------------------------------------

struct PairedSample {
  std::size_t sample_id = 0;
  AttributeRecord attributes;
  Tensor image;
  std::vector<Caption> captions;
};

struct CorpusManifest {
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t captions_per_image = 0;
  Domain domain = Domain::A;
  std::uint64_t seed = 0;
  std::vector<std::string> vocabulary;
  std::string images_file = "images.f32";
  std::string captions_file = "captions.txt";
};

struct Corpus {
  CorpusManifest manifest;
  std::vector<PairedSample> train;
  std::vector<PairedSample> test;
};

/// Pure function of its arguments. Train ids are [0, n_train); test ids follow.
/// Attribute draws depend only on (seed, sample_id), so both domains share them.
inline Corpus generate_corpus(std::size_t n_train, std::size_t n_test, std::size_t m, Domain domain, std::uint64_t seed) {
  if (n_train < 1 || n_test < 1) throw ContractError("corpus splits must be nonempty");
  Corpus c;
  c.manifest = {n_train, n_test, m, domain, seed, vocabulary()};
  const RenderStyle style = style_for(domain);
  for (std::size_t id = 0; id < n_train + n_test; ++id) {
    const std::uint64_t s = derive_seed(seed, "corpus/sample", id);
    Rng rng(derive_seed(s, "corpus/attributes"));
    PairedSample p;
    p.sample_id = id;
    p.attributes = AttributeRecord::from_index(rng.below(kClassCount));
    p.image = render_image(p.attributes, s, style);
    p.captions = render_captions(p.attributes, m, derive_seed(s, domain_name(domain)), domain);
    (id < n_train ? c.train : c.test).push_back(std::move(p));
  }
  return c;
}

namespace detail {

inline std::string serialize_images(const Corpus& c) {
  std::string blob;
  blob.reserve((c.train.size() + c.test.size()) * kImageValues * 4);
  for (const auto* split : {&c.train, &c.test})
    for (const auto& s : *split)
      for (double v : s.image.values) io::append_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return blob;
}

inline std::string serialize_captions(const Corpus& c) {
  std::ostringstream out;
  for (const auto* split : {&c.train, &c.test})
    for (const auto& s : *split)
      for (std::size_t j = 0; j < s.captions.size(); ++j) {
        out << s.sample_id << ' ' << j;
        for (int tok : s.captions[j]) out << ' ' << tok;
        out << '\n';
      }
  return out.str();
}

}  // namespace detail

/// FNV-1a over the serialized images and captions, as 16 hex digits.
inline std::string fingerprint(const Corpus& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const std::string& part : {detail::serialize_images(c), detail::serialize_captions(c)}) {
    for (unsigned char ch : part) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void write_corpus(const Corpus& c, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FileError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  std::vector<std::size_t> classes;
  for (const auto* split : {&c.train, &c.test})
    for (const auto& s : *split) classes.push_back(s.attributes.class_index());
  const auto& m = c.manifest;
  json manifest = {{"format", "cpgc-corpus-v1"},
                   {"n_train", m.n_train},
                   {"n_test", m.n_test},
                   {"captions_per_image", m.captions_per_image},
                   {"domain", domain_name(m.domain)},
                   {"seed", m.seed},
                   {"train_ids", {0, m.n_train}},
                   {"test_ids", {m.n_train, m.n_train + m.n_test}},
                   {"vocabulary", m.vocabulary},
                   {"image_shape", {kImageSide, kImageSide, kChannels}},
                   {"images_file", m.images_file},
                   {"captions_file", m.captions_file},
                   {"fingerprint", fingerprint(c)},
                   {"class_index", classes}};
  io::write_file(dir / m.images_file, detail::serialize_images(c));
  io::write_file(dir / m.captions_file, detail::serialize_captions(c));
  io::write_json(dir / "manifest.json", manifest);
}

inline Corpus read_corpus(const fs::path& dir) {
  const json j = io::read_json(dir / "manifest.json");
  if (j.value("format", "") != "cpgc-corpus-v1") throw FileError("not a corpus manifest: " + (dir / "manifest.json").string());
  Corpus c;
  auto& m = c.manifest;
  m.n_train = j.at("n_train");
  m.n_test = j.at("n_test");
  m.captions_per_image = j.at("captions_per_image");
  m.domain = parse_domain(j.at("domain").get<std::string>());
  m.seed = j.at("seed");
  m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  m.images_file = j.at("images_file");
  m.captions_file = j.at("captions_file");
  const auto classes = j.at("class_index").get<std::vector<std::size_t>>();
  const std::size_t total = m.n_train + m.n_test;
  if (classes.size() != total) throw FileError("class_index length mismatch in " + dir.string());

  const std::string blob = io::read_file(dir / m.images_file);
  if (blob.size() != total * kImageValues * 4) throw FileError("image blob size mismatch: " + (dir / m.images_file).string());
  std::vector<PairedSample> all(total);
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  for (std::size_t id = 0; id < total; ++id) {
    std::vector<double> px(kImageValues);
    for (std::size_t k = 0; k < kImageValues; ++k) {
      px[k] = std::bit_cast<float>(io::read_le<std::uint32_t>(p + 4 * (id * kImageValues + k)));
    }
    all[id].sample_id = id;
    all[id].attributes = AttributeRecord::from_index(classes[id]);
    all[id].image = Tensor({kImageSide, kImageSide, kChannels}, std::move(px));
  }
  std::istringstream lines(io::read_file(dir / m.captions_file));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::size_t id = 0, index = 0;
    if (!(ls >> id >> index) || id >= total || index != all[id].captions.size()) {
      throw FileError("bad caption line " + std::to_string(line_no) + " in " + (dir / m.captions_file).string());
    }
    Caption cap;
    int tok;
    while (ls >> tok) cap.push_back(tok);
    const auto parsed = parse_caption(cap);
    if (!parsed || *parsed != all[id].attributes) {
      throw FileError("caption on line " + std::to_string(line_no) + " does not match its sample's attributes");
    }
    all[id].captions.push_back(std::move(cap));
  }
  for (std::size_t id = 0; id < total; ++id) {
    (id < m.n_train ? c.train : c.test).push_back(std::move(all[id]));
  }
  return c;
}

}  // namespace cpgc::corpus
