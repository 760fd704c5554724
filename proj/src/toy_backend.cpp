#include "carseg/toy_backend.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "carseg/background.hpp"

namespace carseg::toy {
namespace {

constexpr std::array<double, 3> kLevels{0.15, 0.5, 0.85};

std::array<std::array<double, 3>, kChannels> build_palette() {
  std::array<std::array<double, 3>, kChannels> out{};
  int n = 0;
  for (int r = 0; r < 3; ++r)
    for (int g = 0; g < 3; ++g)
      for (int b = 0; b < 3; ++b) {
        if (r == g && g == b) continue;
        out[static_cast<size_t>(n++)] = {kLevels[r], kLevels[g], kLevels[b]};
      }
  return out;
}

const std::array<std::array<double, 3>, kChannels>& palette_table() {
  static const auto table = build_palette();
  return table;
}

uint64_t splitmix(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t fnv1a(uint64_t seed, std::string_view text) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](uint8_t byte) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  };
  for (int i = 0; i < 8; ++i) mix(static_cast<uint8_t>(seed >> (8 * i)));
  for (char c : text) mix(static_cast<uint8_t>(c));
  return h;
}

struct CellRange {
  int x0, x1, y0, y1;  // half-open pixel ranges
};

CellRange cell_range(int gx, int gy, int grid, int width, int height) {
  auto span = [grid](int g, int extent, int& a, int& b) {
    a = std::min(extent - 1, static_cast<int>(static_cast<long>(g) * extent / grid));
    b = std::max(a + 1, static_cast<int>(static_cast<long>(g + 1) * extent / grid));
  };
  CellRange r{};
  span(gx, width, r.x0, r.x1);
  span(gy, height, r.y0, r.y1);
  return r;
}

}  // namespace

std::array<double, 3> palette(int channel) {
  if (channel < 0 || channel >= kChannels) throw InvalidArgument("palette channel out of range");
  return palette_table()[static_cast<size_t>(channel)];
}

Rgb palette_rgb(int channel) {
  const auto c = palette(channel);
  auto q = [](double v) { return static_cast<uint8_t>(std::lround(255.0 * v)); };
  return {q(c[0]), q(c[1]), q(c[2])};
}

Lexeme Lexicon::lookup(std::string_view text) const {
  if (auto it = overrides_.find(text); it != overrides_.end()) return it->second;
  uint64_t state = fnv1a(seed_, text);
  const uint64_t h1 = splitmix(state);
  const uint64_t h2 = splitmix(state);
  const uint64_t h3 = splitmix(state);
  const bool stuff = is_builtin_background(text);
  const int base = stuff ? kObjectChannels : 0;
  const int range = stuff ? kChannels - kObjectChannels : kObjectChannels;
  Lexeme lx;
  lx.primary = base + static_cast<int>(h1 % static_cast<uint64_t>(range));
  lx.secondary = base + (lx.primary - base + 1 + static_cast<int>(h2 % static_cast<uint64_t>(range - 1))) % range;
  lx.beta = 0.3 * static_cast<double>(h3 % 1001) / 1000.0;
  return lx;
}

void Lexicon::set(std::string text, Lexeme lexeme) {
  if (lexeme.primary < 0 || lexeme.primary >= kChannels || lexeme.secondary < 0 || lexeme.secondary >= kChannels)
    throw InvalidArgument("lexeme channel out of range");
  overrides_[std::move(text)] = lexeme;
}

std::array<double, kChannels> Lexicon::template_vector(std::string_view text) const {
  const Lexeme lx = lookup(text);
  std::array<double, kChannels> t{};
  t[static_cast<size_t>(lx.primary)] += 1.0;
  t[static_cast<size_t>(lx.secondary)] += lx.beta;
  return t;
}

ToyBackend::ToyBackend(Lexicon lexicon, Params params) : lexicon_(std::move(lexicon)), params_(params) {
  if (params_.grid < 1) throw InvalidArgument("toy grid must be positive");
  if (params_.attn_layers < 1) throw InvalidArgument("toy backend needs at least one attention layer");
}

std::string ToyBackend::describe() const {
  return "toy:seed=" + std::to_string(lexicon_.seed()) + ",grid=" + std::to_string(params_.grid);
}

std::vector<double> ToyBackend::features(const ImageBuf& image) const {
  const int g = params_.grid;
  const int w = image.width();
  const int h = image.height();
  const auto& pal = palette_table();
  const size_t cells = static_cast<size_t>(g) * g;
  std::vector<double> out(kChannels * cells, 0.0);
  std::vector<double> resp(kChannels);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const CellRange r = cell_range(gx, gy, g, w, h);
      std::fill(resp.begin(), resp.end(), 0.0);
      for (int y = r.y0; y < r.y1; ++y) {
        for (int x = r.x0; x < r.x1; ++x) {
          const Rgb px = image.pixel(x, y);
          const double c[3] = {px.r / 255.0, px.g / 255.0, px.b / 255.0};
          for (int k = 0; k < kChannels; ++k) {
            const auto& p = pal[static_cast<size_t>(k)];
            const double d = std::sqrt((c[0] - p[0]) * (c[0] - p[0]) + (c[1] - p[1]) * (c[1] - p[1]) +
                                       (c[2] - p[2]) * (c[2] - p[2]));
            resp[static_cast<size_t>(k)] += std::max(0.0, 1.0 - d / params_.radius);
          }
        }
      }
      const double n = static_cast<double>(r.x1 - r.x0) * (r.y1 - r.y0);
      const size_t cell = static_cast<size_t>(gy) * g + gx;
      for (int k = 0; k < kChannels; ++k) out[static_cast<size_t>(k) * cells + cell] = resp[static_cast<size_t>(k)] / n;
    }
  }
  return out;
}

std::vector<double> ToyBackend::pooling_weights(const ImageBuf& image) const {
  const int g = params_.grid;
  std::vector<double> wts(static_cast<size_t>(g) * g, 1.0);
  BBox box{image.width(), image.height(), -1, -1};
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      if (image.pixel(x, y) == Rgb{255, 0, 0}) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x);
        box.y1 = std::max(box.y1, y);
      }
  if (box.x1 < 0) return wts;
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      const CellRange r = cell_range(gx, gy, g, image.width(), image.height());
      const bool hit = r.x0 <= box.x1 && r.x1 - 1 >= box.x0 && r.y0 <= box.y1 && r.y1 - 1 >= box.y0;
      wts[static_cast<size_t>(gy) * g + gx] = hit ? 1.0 : params_.focus_outside;
    }
  return wts;
}

std::vector<double> ToyBackend::logits(std::span<const double> feats, std::span<const double> weights,
                                       std::span<const std::string> texts) const {
  const size_t cells = weights.size();
  if (feats.size() != kChannels * cells) throw InvalidArgument("toy logits: feature size mismatch");
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::array<double, kChannels> energy{};
  for (int k = 0; k < kChannels; ++k) {
    double e = 0.0;
    for (size_t p = 0; p < cells; ++p) {
      const double a = feats[static_cast<size_t>(k) * cells + p];
      e += weights[p] * a * a;
    }
    energy[static_cast<size_t>(k)] = e / wsum;
  }
  std::vector<double> out(texts.size());
  for (size_t j = 0; j < texts.size(); ++j) {
    const auto t = lexicon_.template_vector(texts[j]);
    double l = 0.0;
    for (int k = 0; k < kChannels; ++k) l += t[static_cast<size_t>(k)] * energy[static_cast<size_t>(k)];
    out[j] = params_.logit_scale * l;
  }
  return out;
}

std::vector<double> ToyBackend::softmax_scores(std::span<const double> feats, std::span<const double> weights,
                                               std::span<const std::string> texts) const {
  std::vector<double> l = logits(feats, weights, texts);
  const double m = *std::max_element(l.begin(), l.end());
  double z = 0.0;
  for (double& v : l) z += (v = std::exp(v - m));
  for (double& v : l) v /= z;
  return l;
}

std::vector<double> ToyBackend::analytic_grads(std::span<const double> feats, std::span<const double> weights,
                                               std::span<const std::string> texts, int num_fg) const {
  const size_t cells = weights.size();
  const std::vector<double> s = softmax_scores(feats, weights, texts);
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::array<double, kChannels>> tmpl(texts.size());
  std::array<double, kChannels> tbar{};
  for (size_t j = 0; j < texts.size(); ++j) {
    tmpl[j] = lexicon_.template_vector(texts[j]);
    for (int k = 0; k < kChannels; ++k) tbar[static_cast<size_t>(k)] += s[j] * tmpl[j][static_cast<size_t>(k)];
  }
  std::vector<double> out(static_cast<size_t>(num_fg) * kChannels * cells);
  for (int i = 0; i < num_fg; ++i) {
    for (int k = 0; k < kChannels; ++k) {
      const double coeff = s[static_cast<size_t>(i)] * 2.0 * params_.logit_scale / wsum *
                           (tmpl[static_cast<size_t>(i)][static_cast<size_t>(k)] - tbar[static_cast<size_t>(k)]);
      const size_t base = (static_cast<size_t>(i) * kChannels + k) * cells;
      for (size_t p = 0; p < cells; ++p)
        out[base + p] = coeff * weights[p] * feats[static_cast<size_t>(k) * cells + p];
    }
  }
  return out;
}

std::vector<double> ToyBackend::attention(std::span<const double> feats) const {
  const int g = params_.grid;
  const size_t n = static_cast<size_t>(g) * g;
  std::vector<double> affinity(n * n);
  for (size_t p = 0; p < n; ++p)
    for (size_t q = 0; q < n; ++q) {
      double d2 = 0.0;
      for (int k = 0; k < kChannels; ++k) {
        const double diff = feats[static_cast<size_t>(k) * n + p] - feats[static_cast<size_t>(k) * n + q];
        d2 += diff * diff;
      }
      affinity[p * n + q] = 0.05 + std::exp(-d2 / 0.1);
    }
  std::vector<double> out(static_cast<size_t>(params_.attn_layers) * n * n);
  for (int l = 0; l < params_.attn_layers; ++l) {
    const double rho = 0.8 + 0.1 * l;
    // Spatial falloff indexed by (dy + g - 1) * (2g - 1) + dx + g - 1.
    const int span = 2 * g - 1;
    std::vector<double> falloff(static_cast<size_t>(span) * span);
    for (int dy = -(g - 1); dy < g; ++dy)
      for (int dx = -(g - 1); dx < g; ++dx)
        falloff[static_cast<size_t>(dy + g - 1) * span + dx + g - 1] =
            std::exp(-static_cast<double>(dx * dx + dy * dy) / (2.0 * rho * rho));
    double* layer = out.data() + static_cast<size_t>(l) * n * n;
    for (size_t p = 0; p < n; ++p) {
      const int px = static_cast<int>(p % g), py = static_cast<int>(p / g);
      double row = 0.0;
      for (size_t q = 0; q < n; ++q) {
        const int qx = static_cast<int>(q % g), qy = static_cast<int>(q / g);
        const double f = falloff[static_cast<size_t>(py - qy + g - 1) * span + px - qx + g - 1];
        row += layer[p * n + q] = f * affinity[p * n + q];
      }
      for (size_t q = 0; q < n; ++q) layer[p * n + q] /= row;
    }
  }
  return out;
}

Eigen::MatrixXd ToyBackend::score(std::span<const ImageBuf> images, std::span<const std::string> texts) {
  require_score_inputs(images, texts);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(texts.size()));
  for (size_t i = 0; i < images.size(); ++i) {
    const std::vector<double> l = logits(features(images[i]), pooling_weights(images[i]), texts);
    for (size_t j = 0; j < l.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = l[j];
  }
  return out;
}

CamBundle ToyBackend::activations(const ImageBuf& image, std::span<const std::string> fg_texts,
                                  std::span<const std::string> bg_texts) {
  if (fg_texts.empty()) throw InvalidArgument("activations: no foreground texts");
  if (image.empty()) throw InvalidArgument("activations: empty image");
  std::vector<std::string> texts(fg_texts.begin(), fg_texts.end());
  texts.insert(texts.end(), bg_texts.begin(), bg_texts.end());
  const std::vector<double> feats = features(image);
  const std::vector<double> wts = pooling_weights(image);
  auto to_float = [](const std::vector<double>& v) { return std::vector<float>(v.begin(), v.end()); };
  CamBundle b;
  b.channels = kChannels;
  b.height = b.width = params_.grid;
  b.num_fg = static_cast<int>(fg_texts.size());
  b.attn_layers = params_.attn_layers;
  b.features = to_float(feats);
  b.grads = to_float(analytic_grads(feats, wts, texts, b.num_fg));
  b.attention = to_float(attention(feats));
  b.scores = to_float(softmax_scores(feats, wts, texts));
  return b;
}

std::vector<double> finite_diff_grads(const std::function<std::vector<double>(std::span<const double>)>& scores,
                                      std::span<const double> feats, int num_fg, double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("finite differences need eps > 0");
  const size_t n = feats.size();
  std::vector<double> work(feats.begin(), feats.end());
  std::vector<double> out(static_cast<size_t>(num_fg) * n);
  for (size_t e = 0; e < n; ++e) {
    work[e] = feats[e] + eps;
    const std::vector<double> up = scores(work);
    work[e] = feats[e] - eps;
    const std::vector<double> down = scores(work);
    work[e] = feats[e];
    for (int i = 0; i < num_fg; ++i)
      out[static_cast<size_t>(i) * n + e] = (up[static_cast<size_t>(i)] - down[static_cast<size_t>(i)]) / (2.0 * eps);
  }
  return out;
}

std::vector<double> toy_finite_diff_grads(const ToyBackend& backend, const ImageBuf& image,
                                          std::span<const std::string> fg_texts,
                                          std::span<const std::string> bg_texts, double eps) {
  std::vector<std::string> texts(fg_texts.begin(), fg_texts.end());
  texts.insert(texts.end(), bg_texts.begin(), bg_texts.end());
  const std::vector<double> wts = backend.pooling_weights(image);
  auto f = [&](std::span<const double> feats) { return backend.softmax_scores(feats, wts, texts); };
  return finite_diff_grads(f, backend.features(image), static_cast<int>(fg_texts.size()), eps);
}

// ---------------------------------------------------------------------------

void SceneSpec::validate() const {
  if (width < 1 || height < 1) throw InvalidArgument("scene dimensions must be positive");
  std::set<std::string> seen;
  for (const auto& c : concepts) {
    if (c.text.empty()) throw InvalidArgument("concept text must not be empty");
    if (!seen.insert(c.text).second) throw InvalidArgument("duplicate concept text '" + c.text + "'");
    if (c.mask.width() != width || c.mask.height() != height)
      throw InvalidArgument("concept mask for '" + c.text + "' does not match scene size");
    if (c.amplitude < 0.0 || c.amplitude > 1.0) throw InvalidArgument("concept amplitude must be in [0,1]");
  }
  for (const auto& s : stuff)
    if (s.mask.width() != width || s.mask.height() != height)
      throw InvalidArgument("stuff mask for '" + s.text + "' does not match scene size");
}

ImageBuf render_scene(const SceneSpec& scene, const Lexicon& lexicon) {
  scene.validate();
  ImageBuf img(scene.width, scene.height, scene.background);
  auto paint = [&](const BinMask& m, Rgb c) {
    for (int y = 0; y < scene.height; ++y)
      for (int x = 0; x < scene.width; ++x)
        if (m(x, y)) img.set_pixel(x, y, c);
  };
  for (const auto& s : scene.stuff) paint(s.mask, palette_rgb(lexicon.lookup(s.text).primary));
  for (const auto& c : scene.concepts) {
    const auto p = palette(lexicon.lookup(c.text).primary);
    const double bg[3] = {scene.background.r / 255.0, scene.background.g / 255.0, scene.background.b / 255.0};
    auto q = [&](int i) {
      return static_cast<uint8_t>(std::lround(255.0 * (bg[i] + c.amplitude * (p[static_cast<size_t>(i)] - bg[i]))));
    };
    paint(c.mask, Rgb{q(0), q(1), q(2)});
  }
  return img;
}

LabelMap scene_ground_truth(const SceneSpec& scene, std::span<const std::string> queries) {
  LabelMap gt(scene.width, scene.height, kBackground);
  for (const auto& c : scene.concepts) {
    const auto it = std::find(queries.begin(), queries.end(), c.text);
    if (it == queries.end()) continue;
    const int32_t label = static_cast<int32_t>(it - queries.begin());
    for (int y = 0; y < scene.height; ++y)
      for (int x = 0; x < scene.width; ++x)
        if (c.mask(x, y)) gt(x, y) = label;
  }
  return gt;
}

namespace {

const std::vector<std::string>& concept_pool() {
  static const std::vector<std::string> pool{
      "aeroplane", "bicycle", "bird",  "boat",      "bottle", "bus",         "car",   "cat",  "chair", "cow",
      "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor"};
  return pool;
}

BinMask shape_mask(int size, const BBox& b, bool ellipse) {
  std::vector<uint8_t> bits(static_cast<size_t>(size) * size, 0);
  const double cx = (b.x0 + b.x1) / 2.0, cy = (b.y0 + b.y1) / 2.0;
  const double rx = b.width() / 2.0, ry = b.height() / 2.0;
  for (int y = b.y0; y <= b.y1; ++y)
    for (int x = b.x0; x <= b.x1; ++x) {
      const double dx = (x - cx) / rx, dy = (y - cy) / ry;
      if (!ellipse || dx * dx + dy * dy <= 1.0) bits[static_cast<size_t>(y) * size + x] = 1;
    }
  return BinMask(size, size, std::move(bits));
}

}  // namespace

World make_world(uint64_t seed, const WorldOptions& opt) {
  const int need = opt.planted + opt.absent;
  if (opt.planted < 0 || opt.absent < 0 || opt.stuff < 0 || need < 1)
    throw InvalidArgument("world needs at least one query");
  if (need > static_cast<int>(concept_pool().size()) || need > kObjectChannels - 1)
    throw InvalidArgument("too many queries for the toy world");
  if (opt.size < 24) throw InvalidArgument("toy world size must be at least 24");

  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  auto pick = [&rng](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

  std::vector<std::string> words = concept_pool();
  std::shuffle(words.begin(), words.end(), rng);
  std::vector<int> channels(kObjectChannels);
  std::iota(channels.begin(), channels.end(), 0);
  std::shuffle(channels.begin(), channels.end(), rng);
  const std::vector<int> unused(channels.begin() + need, channels.end());

  World w;
  w.lexicon = Lexicon(seed);
  w.scene.width = w.scene.height = opt.size;
  for (int i = 0; i < opt.planted; ++i) {
    Lexeme lx{channels[static_cast<size_t>(i)], unused[static_cast<size_t>(pick(0, static_cast<int>(unused.size()) - 1))],
              uniform(0.0, 0.3)};
    w.lexicon.set(words[static_cast<size_t>(i)], lx);
    w.planted.push_back(words[static_cast<size_t>(i)]);
  }
  for (int i = opt.planted; i < need; ++i) {
    Lexeme lx{channels[static_cast<size_t>(i)], channels[static_cast<size_t>(opt.planted > 0 ? pick(0, opt.planted - 1) : 0)],
              opt.planted > 0 ? uniform(0.5, 0.8) : 0.0};
    if (opt.planted == 0) lx.secondary = unused.front();
    w.lexicon.set(words[static_cast<size_t>(i)], lx);
    w.absent.push_back(words[static_cast<size_t>(i)]);
  }

  // Rejection-sample boxes with a 4 px border margin and a 4 px gap between shapes.
  const int margin = 4;
  std::vector<BBox> placed;
  auto place = [&](int lo, int hi) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const int bw = pick(lo, hi), bh = pick(lo, hi);
      if (bw + 2 * margin > opt.size || bh + 2 * margin > opt.size) continue;
      BBox b;
      b.x0 = pick(margin, opt.size - margin - bw);
      b.y0 = pick(margin, opt.size - margin - bh);
      b.x1 = b.x0 + bw - 1;
      b.y1 = b.y0 + bh - 1;
      const bool clash = std::any_of(placed.begin(), placed.end(), [&](const BBox& o) {
        return b.x0 <= o.x1 + margin && o.x0 <= b.x1 + margin && b.y0 <= o.y1 + margin && o.y0 <= b.y1 + margin;
      });
      if (!clash) {
        placed.push_back(b);
        return b;
      }
    }
    throw InvalidArgument("cannot place toy shapes; use a larger world");
  };

  const int lo = std::max(6, opt.size * 3 / 16), hi = std::max(lo, opt.size * 5 / 16);
  for (const auto& text : w.planted) {
    const BBox b = place(lo, hi);
    w.scene.concepts.push_back({text, shape_mask(opt.size, b, pick(0, 1) == 1), 1.0});
  }
  const std::vector<std::string>& pool = opt.stuff_pool.empty() ? background_queries(BgSet::All) : opt.stuff_pool;
  for (int i = 0; i < opt.stuff; ++i) {
    const BBox b = place(std::max(4, lo * 2 / 3), std::max(4, hi * 2 / 3));
    const std::string& text = pool[static_cast<size_t>(pick(0, static_cast<int>(pool.size()) - 1))];
    w.scene.stuff.push_back({text, shape_mask(opt.size, b, false)});
  }

  w.queries = w.planted;
  w.queries.insert(w.queries.end(), w.absent.begin(), w.absent.end());
  std::shuffle(w.queries.begin(), w.queries.end(), rng);
  w.image = render_scene(w.scene, w.lexicon);
  w.ground_truth = scene_ground_truth(w.scene, w.queries);
  return w;
}

}  // namespace carseg::toy
