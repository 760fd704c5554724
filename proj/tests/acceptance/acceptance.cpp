// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "carseg/camgen.hpp"
#include "carseg/eval.hpp"
#include "carseg/image_io.hpp"
#include "carseg/pipeline.hpp"
#include "carseg/postproc.hpp"
#include "carseg/prompter.hpp"
#include "carseg/recurrence.hpp"
#include "carseg/toy_backend.hpp"

using namespace carseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Replaces each "{}", "{:.Nf}" or "{:.Ng}" in f with the next argument.
template <typename... Args>
std::string format(std::string_view f, const Args&... args) {
  std::ostringstream out;
  auto put = [&](const auto& arg) {
    const size_t open = f.find('{'), close = f.find('}', open);
    out << f.substr(0, open);
    const std::string_view spec = f.substr(open + 1, close - open - 1);
    if (spec.size() > 2) {
      const int prec = std::stoi(std::string(spec.substr(2, spec.size() - 3)));
      if (spec.back() == 'f') out << std::fixed;
      out << std::setprecision(prec) << arg << std::defaultfloat;
    } else {
      out << arg;
    }
    f.remove_prefix(close + 1);
  };
  (put(args), ...);
  out << f;
  return out.str();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& why) {
    if (!ok && pass) detail = why;
    pass = pass && ok;
  }
};

BinMask random_mask(std::mt19937_64& rng, int w, int h, double p = 0.5) {
  std::bernoulli_distribution d(p);
  std::vector<uint8_t> bits(static_cast<size_t>(w) * h);
  for (auto& b : bits) b = d(rng);
  return BinMask(w, h, std::move(bits));
}

BinMask rect_mask(int w, int h, int x0, int y0, int x1, int y1) {
  std::vector<uint8_t> bits(static_cast<size_t>(w) * h, 0);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) bits[static_cast<size_t>(y) * w + x] = 1;
  return BinMask(w, h, std::move(bits));
}

ImageBuf random_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_int_distribution<int> d(0, 255);
  std::vector<uint8_t> px(static_cast<size_t>(w) * h * 3);
  for (auto& p : px) p = static_cast<uint8_t>(d(rng));
  return ImageBuf(w, h, std::move(px));
}

double scene_miou(const LabelMap& pred, const toy::World& w) {
  return miou(std::span(&pred, 1), std::span(&w.ground_truth, 1), static_cast<int>(w.queries.size())).miou;
}

// --- termination -----------------------------------------------------------

Outcome termination() {
  Outcome o;
  const PipelineConfig cfg = PipelineConfig::defaults();
  const auto t0 = Clock::now();
  int max_steps = 0;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    const int planted = 1 + static_cast<int>(seed % 4), absent = static_cast<int>((seed / 4) % 4);
    const toy::World w = toy::make_world(1000 + seed, {.size = 64, .planted = planted, .absent = absent});
    toy::ToyBackend b(w.lexicon);
    const RecurrenceResult r = run_recurrence(b, w.image, w.queries, cfg);
    max_steps = std::max(max_steps, r.steps);
    o.require(r.steps <= static_cast<int>(w.queries.size()), format("seed {} took {} steps", seed, r.steps));
    const auto texts = r.surviving.texts();
    const std::set<std::string> h0(w.queries.begin(), w.queries.end());
    for (const auto& t : texts) o.require(h0.count(t) == 1, format("seed {} invented '{}'", seed, t));
    for (const Query& q : r.surviving.entries())
      o.require(w.queries[static_cast<size_t>(q.original_index)] == q.text,
                format("seed {} renumbered '{}'", seed, q.text));
    for (const StepTrace& s : r.trace) {
      std::set<int> in;
      for (const Query& q : s.queries_in) in.insert(q.original_index);
      for (const Query& q : s.queries_out)
        o.require(in.count(q.original_index) == 1, format("seed {} step {} grew", seed, s.step));
    }
  }
  const double t = seconds_since(t0);
  o.require(t < 10.0, format("took {:.2f} s", t));
  if (o.pass) o.detail = format("200 scenes, max {} steps, {:.2f} s", max_steps, t);
  return o;
}

// --- gradcam ---------------------------------------------------------------

Outcome gradcam_correctness() {
  Outcome o;
  double worst = 0.0, worst_scale = 0.0;
  const std::vector<std::string> bg{"sky", "grass", "wall"};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const toy::World w = toy::make_world(200 + seed, {.size = 64});
    toy::ToyBackend b(w.lexicon);
    const std::vector<double> fd = toy::toy_finite_diff_grads(b, w.image, w.queries, bg, 1e-4);
    const auto f = b.features(w.image);
    const auto wts = b.pooling_weights(w.image);
    std::vector<std::string> all = w.queries;
    all.insert(all.end(), bg.begin(), bg.end());
    const auto an = b.analytic_grads(f, wts, all, static_cast<int>(w.queries.size()));
    o.require(an.size() == fd.size(), "gradient layouts differ");
    if (an.size() != fd.size()) return o;
    const size_t n = f.size();
    for (size_t q = 0; q < w.queries.size(); ++q) {
      double scale = 0.0, err = 0.0;
      for (size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(an[q * n + i]));
      if (scale == 0.0) continue;
      for (size_t i = 0; i < n; ++i) err = std::max(err, std::abs(an[q * n + i] - fd[q * n + i]) / scale);
      worst = std::max(worst, err);
    }

    const CamBundle bundle = b.activations(w.image, w.queries, bg);
    for (double c : {1e-3, 0.5, 7.0, 1e4}) {
      CamBundle scaled = bundle;
      for (auto& g : scaled.grads) g = static_cast<float>(g * c);
      for (int q = 0; q < bundle.num_fg; ++q) {
        const SoftMask a = gradcam(bundle, q), s = gradcam(scaled, q);
        for (size_t i = 0; i < a.size(); ++i)
          worst_scale = std::max(worst_scale, std::abs(static_cast<double>(a[i]) - s[i]));
      }
    }
  }
  o.require(worst < 1e-3, format("max relative error {:.3g}", worst));
  o.require(worst_scale <= 1e-6, format("scaled gradcam differs by {:.3g}", worst_scale));
  if (o.pass) o.detail = format("max relative error {:.3g}, scale deviation {:.3g}", worst, worst_scale);
  return o;
}

// --- sinkhorn --------------------------------------------------------------

Outcome sinkhorn_property() {
  Outcome o;
  const PipelineConfig cfg = PipelineConfig::defaults();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> logu(-3.0, 3.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = trial < 2 ? 64 : 1 + static_cast<int>(rng() % 64);
    Eigen::MatrixXd w(n, n);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = std::exp(logu(rng));
    const SinkhornResult r = sinkhorn(w, cfg.sinkhorn_iters, cfg.sinkhorn_tol);
    const double rows = (r.matrix.rowwise().sum().array() - 1.0).abs().maxCoeff();
    const double cols = (r.matrix.colwise().sum().array() - 1.0).abs().maxCoeff();
    worst = std::max({worst, rows, cols});
    const AffinityMatrix a = symmetric_affinity(r.matrix);
    o.require(a.a == a.a.transpose(), format("affinity {} not symmetric", trial));
  }
  o.require(worst <= 1e-5, format("stochastic deviation {:.3g}", worst));
  if (o.pass) o.detail = format("100 matrices, deviation {:.3g}, affinities symmetric", worst);
  return o;
}

// --- caa -------------------------------------------------------------------

Outcome caa_property() {
  Outcome o;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 30);
    std::vector<double> m(static_cast<size_t>(n));
    for (auto& v : m) v = u(rng);
    m[static_cast<size_t>(rng() % n)] = 1.0;
    const std::vector<uint8_t> full(static_cast<size_t>(n), 1);
    const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
    o.require(caa_refine(m, id, full, 1 + trial % 3) == m, format("identity trial {} changed the mask", trial));
  }

  Eigen::MatrixXd a(4, 4);
  a << 0.5, 0.25, 0.25, 0.0,
       0.25, 0.5, 0.0, 0.25,
       0.25, 0.0, 0.5, 0.25,
       0.0, 0.25, 0.25, 0.5;
  const std::vector<double> m{1.0, 0.2, 0.6, 0.0};
  const std::vector<uint8_t> box{1, 1, 1, 0};
  double err = 0.0;
  for (int t = 1; t <= 3; ++t) {
    Eigen::MatrixXd p = Eigen::MatrixXd::Identity(4, 4);
    for (int k = 0; k < t; ++k) p = p * a;
    Eigen::VectorXd v = p * Eigen::Map<const Eigen::VectorXd>(m.data(), 4);
    for (int i = 0; i < 4; ++i) v(i) *= box[static_cast<size_t>(i)];
    v /= v.maxCoeff();
    const std::vector<double> got = caa_refine(m, a, box, t);
    for (int i = 0; i < 4; ++i) err = std::max(err, std::abs(got[static_cast<size_t>(i)] - v(i)));
  }
  o.require(err <= 1e-12, format("hand fixture error {:.3g}", err));

  long outside = 0;
  for (int trial = 0; trial < 50; ++trial) {
    SoftMask sm(6, 5);
    for (auto& v : sm.values()) v = static_cast<float>(u(rng));
    Eigen::MatrixXd w(30, 30);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = u(rng) + 0.01;
    const AffinityMatrix aff = symmetric_affinity(sinkhorn(w, 50).matrix);
    const BoxMask bm = box_mask(sm, 0.75);
    const SoftMask out = caa_refine(sm, aff, bm, 1 + trial % 3);
    for (size_t i = 0; i < out.size(); ++i) outside += !bm.mask.at(i) && out[i] != 0.0f;
  }
  o.require(outside == 0, format("{} pixels outside the box", outside));
  if (o.pass) o.detail = format("hand fixture error {:.3g}", err);
  return o;
}

// --- prompts ---------------------------------------------------------------

ImageBuf golden_image() {
  ImageBuf img(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      img.set_pixel(x, y, {static_cast<uint8_t>((x * 8) & 255), static_cast<uint8_t>((y * 8) & 255),
                           static_cast<uint8_t>(((x + y) * 4) & 255)});
  return img;
}

PromptSpec only(PromptType t) {
  PromptSpec s;
  s.types = {t};
  return s;
}

Outcome prompt_rendering() {
  Outcome o;
  const fs::path dir = CARSEG_GOLDEN_DIR;
  const ImageBuf img = read_png(dir / "fixture.png");
  const BinMask mask(read_png_gray(dir / "fixture_mask.png"));
  o.require(img == golden_image(), "fixture.png does not match the generator");
  int matched = 0;
  for (PromptType t : {PromptType::Blur, PromptType::Gray, PromptType::Black, PromptType::Circle,
                       PromptType::Rectangle, PromptType::Contour}) {
    const ImageBuf want = read_png(dir / ("prompt_" + to_string(t) + ".png"));
    const ImageBuf got = apply_visual_prompts(img, mask, only(t));
    if (got == want) ++matched;
    else o.require(false, "prompt_" + to_string(t) + ".png differs");
  }

  std::mt19937_64 rng(5);
  long changed = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const int w = 8 + static_cast<int>(rng() % 40), h = 8 + static_cast<int>(rng() % 40);
    const ImageBuf im = random_image(rng, w, h);
    const BinMask m = random_mask(rng, w, h, 0.3);
    for (PromptType t : {PromptType::Blur, PromptType::Gray}) {
      PromptSpec s = only(t);
      s.blur_kernel = 3 + 2 * static_cast<int>(rng() % 8);
      const ImageBuf out = apply_visual_prompts(im, m, s);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) changed += m(x, y) && out.pixel(x, y) != im.pixel(x, y);
    }
  }
  o.require(changed == 0, format("{} inside-mask pixels altered", changed));
  if (o.pass) o.detail = format("{}/6 goldens exact, inside-mask pixels untouched", matched);
  return o;
}

// --- crf -------------------------------------------------------------------

struct TwoRegion {
  ImageBuf image;
  BinMask left;
  SoftMaskStack masks;
  SoftMask bg;
};

// Red and blue halves; the unary leans 0.05 toward the truth under +-0.3 noise.
TwoRegion two_region(int w, int h, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(-0.3f, 0.3f);
  TwoRegion f{ImageBuf(w, h), rect_mask(w, h, 0, 0, w / 2 - 1, h - 1), {SoftMask(w, h)}, SoftMask(w, h)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool l = f.left(x, y);
      f.image.set_pixel(x, y, l ? Rgb{200, 40, 40} : Rgb{30, 60, 210});
      const float v = 0.5f + (l ? 0.05f : -0.05f) + noise(rng);
      f.masks[0](x, y) = v;
      f.bg(x, y) = 1.0f - v;
    }
  return f;
}

BinMask channel_mask(const ProbMap& q) {
  const std::vector<int> ids{0};
  const LabelMap l = argmax_labels(q, ids);
  std::vector<uint8_t> bits(l.size());
  for (size_t i = 0; i < l.size(); ++i) bits[i] = l[i] == 0;
  return BinMask(q.width, q.height, std::move(bits));
}

double boundary_recall(const BinMask& pred, const BinMask& gt, int tol) {
  const BinMask pb = boundary_map(pred), gb = boundary_map(gt);
  long hit = 0;
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x < gt.width(); ++x) {
      if (!gb(x, y)) continue;
      bool found = false;
      for (int dy = -tol; dy <= tol && !found; ++dy)
        for (int dx = -tol; dx <= tol && !found; ++dx) {
          const int px = x + dx, py = y + dy;
          found = dx * dx + dy * dy <= tol * tol && px >= 0 && py >= 0 && px < gt.width() && py < gt.height() &&
                  pb(px, py);
        }
      hit += found;
    }
  return gb.area() ? static_cast<double>(hit) / static_cast<double>(gb.area()) : 1.0;
}

Outcome crf_property() {
  Outcome o;
  double simplex = 0.0;
  int observed = 0;
  for (int size : {16, 40, 80}) {
    const TwoRegion f = two_region(size, size, 11);
    crf_refine(f.image, f.masks, f.bg, CrfParams{}, [&](int, const ProbMap& q) {
      ++observed;
      simplex = std::max(simplex, q.max_simplex_deviation());
    });
  }
  o.require(simplex <= 1e-5, format("simplex deviation {:.3g}", simplex));

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 5; ++trial) {
    const int w = 4 + trial * 17, h = 3 + trial * 13;
    const ImageBuf img = random_image(rng, w, h);
    SoftMaskStack masks(1 + trial % 3, SoftMask(w, h));
    for (auto& m : masks)
      for (auto& v : m.values()) v = u(rng);
    const SoftMask bg = background_channel(masks, w, h);
    CrfParams p;
    p.gauss_w = 0.0;
    p.bilat_w = 0.0;
    o.require(crf_refine(img, masks, bg, p).data == unary_softmax(unary_probabilities(masks, bg)).data,
              format("zero-pairwise trial {} differs from the unary softmax", trial));
  }

  double recall = 1.0;
  for (uint64_t seed : {21, 22, 23}) {
    const TwoRegion f = two_region(32, 24, seed);
    CrfParams p;
    p.iterations = 10;
    const BinMask got = channel_mask(crf_refine(f.image, f.masks, f.bg, p));
    recall = std::min(recall, boundary_recall(got, f.left, 1));
  }
  o.require(recall >= 0.9, format("boundary recall {:.3f}", recall));
  if (o.pass)
    o.detail = format("{} iterations max deviation {:.3g}, min boundary recall {:.3f}", observed, simplex, recall);
  return o;
}

// --- iom / ensemble ----------------------------------------------------------

Outcome iom_ensemble() {
  Outcome o;
  std::mt19937_64 rng(7);
  long mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int w = 1 + static_cast<int>(rng() % 4), h = 1 + static_cast<int>(rng() % 4);
    const BinMask a = random_mask(rng, w, h), b = random_mask(rng, w, h);
    long na = 0, nb = 0, both = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        na += a(x, y);
        nb += b(x, y);
        both += a(x, y) && b(x, y);
      }
    const long m = std::min(na, nb);
    mismatches += iom(a, b) != (m ? static_cast<double>(both) / static_cast<double>(m) : 0.0);
  }
  o.require(mismatches == 0, format("{} iom mismatches", mismatches));

  for (int trial = 0; trial < 100; ++trial) {
    const std::vector<BinMask> crf{random_mask(rng, 8, 8), random_mask(rng, 8, 8), random_mask(rng, 8, 8)};
    ProposalSet props;
    for (int k = 0; k < 6; ++k) props.masks.push_back(random_mask(rng, 8, 8, 0.2 + 0.1 * k));
    props.masks.push_back(crf[1]);
    o.require(sam_ensemble(crf, props, 0.0, 1.0 + 1e-9) == crf, format("ensemble trial {} changed masks", trial));
  }

  BinMask crf = rect_mask(12, 12, 2, 2, 9, 9);
  std::vector<uint8_t> bits(crf.bits().begin(), crf.bits().end());
  bits[2 * 12 + 2] = 0;
  crf = BinMask(12, 12, bits);
  ProposalSet tiles;
  tiles.masks = {rect_mask(12, 12, 2, 2, 5, 5), rect_mask(12, 12, 6, 2, 9, 5), rect_mask(12, 12, 2, 6, 5, 9),
                 rect_mask(12, 12, 6, 6, 9, 9)};
  const auto out = sam_ensemble({crf}, tiles, 0.7, 0.7);
  o.require(out.size() == 1 && out[0] == rect_mask(12, 12, 2, 2, 9, 9), "tiling fixture did not adopt the union");
  if (o.pass) o.detail = "10000 iom pairs exact, identity and union fixtures hold";
  return o;
}

// --- metrics ---------------------------------------------------------------

LabelMap random_labels(std::mt19937_64& rng, int w, int h, int classes, bool with_ignore) {
  LabelMap l(w, h, kBackground);
  std::uniform_int_distribution<int> d(-1, classes - 1 + (with_ignore ? 1 : 0));
  for (auto& v : l.values()) {
    const int x = d(rng);
    v = x == classes ? 255 : x;
  }
  return l;
}

std::vector<std::pair<int, int>> boundary_pixels(const BinMask& m) {
  std::vector<std::pair<int, int>> out;
  const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      for (int k = 0; k < 4; ++k) {
        const int nx = x + dx[k], ny = y + dy[k];
        if (nx < 0 || ny < 0 || nx >= m.width() || ny >= m.height()) continue;
        if (m(nx, ny) != m(x, y)) {
          out.emplace_back(x, y);
          break;
        }
      }
  return out;
}

double f_oracle(const BinMask& pred, const BinMask& gt, int tol) {
  const auto bp = boundary_pixels(pred), bg = boundary_pixels(gt);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;
  auto frac = [tol](const auto& from, const auto& to) {
    long hit = 0;
    for (const auto& [x, y] : from) {
      bool found = false;
      for (const auto& [u, v] : to) found = found || (x - u) * (x - u) + (y - v) * (y - v) <= tol * tol;
      hit += found;
    }
    return static_cast<double>(hit) / static_cast<double>(from.size());
  };
  const double p = frac(bp, bg), r = frac(bg, bp);
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

double miou_oracle(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts, int classes, bool ignore) {
  double sum = 0.0;
  int present = 0;
  for (int id = -1; id < classes; ++id) {
    long inter = 0, uni = 0;
    for (size_t i = 0; i < gts.size(); ++i)
      for (size_t p = 0; p < gts[i].size(); ++p) {
        const int g = gts[i][p], q = preds[i][p];
        if (ignore && g == 255) continue;
        inter += g == id && q == id;
        uni += g == id || q == id;
      }
    if (uni == 0) continue;
    sum += static_cast<double>(inter) / static_cast<double>(uni);
    ++present;
  }
  return present ? sum / present : 0.0;
}

Outcome metrics() {
  Outcome o;
  std::mt19937_64 rng(8);
  long bad_miou = 0, bad_j = 0, bad_f = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int w = 1 + static_cast<int>(rng() % 8), h = 1 + static_cast<int>(rng() % 8);
    const int classes = 1 + static_cast<int>(rng() % 4);
    const int n_img = 1 + static_cast<int>(rng() % 3);
    const bool ignore = trial % 2 == 0;
    std::vector<LabelMap> preds, gts;
    for (int i = 0; i < n_img; ++i) {
      preds.push_back(random_labels(rng, w, h, classes, false));
      gts.push_back(random_labels(rng, w, h, classes, ignore));
    }
    const double got = miou(preds, gts, classes, ignore ? std::optional<int>(255) : std::nullopt).miou;
    bad_miou += std::abs(got - miou_oracle(preds, gts, classes, ignore)) > 1e-12;

    const BinMask a = random_mask(rng, w, h, 0.2 + 0.15 * (trial % 5)), b = random_mask(rng, w, h);
    long inter = 0, uni = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        inter += a(x, y) && b(x, y);
        uni += a(x, y) || b(x, y);
      }
    bad_j += region_j(a, b) != (uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0);
    const int tol = trial % 3;
    bad_f += contour_f(a, b, tol) != f_oracle(a, b, tol);
  }
  o.require(bad_miou == 0, format("{} mIoU mismatches", bad_miou));
  o.require(bad_j == 0, format("{} J mismatches", bad_j));
  o.require(bad_f == 0, format("{} F mismatches", bad_f));
  if (o.pass) o.detail = "500 fixtures, mIoU, J and F agree";
  return o;
}

// --- end to end --------------------------------------------------------------

Outcome end_to_end() {
  Outcome o;
  const auto t0 = Clock::now();
  const toy::World w = toy::make_world(42, {.size = 64, .planted = 3, .absent = 2});
  const PipelineConfig cfg = PipelineConfig::defaults();
  std::vector<uint8_t> first_png;
  std::vector<std::vector<uint8_t>> first_masks;
  double score = 0.0;
  for (int run = 0; run < 2; ++run) {
    toy::ToyBackend b(w.lexicon);
    const SegmentOutput out = segment(b, w.image, w.queries, cfg);
    const auto texts = out.result.surviving_queries.texts();
    o.require(std::set<std::string>(texts.begin(), texts.end()) ==
                  std::set<std::string>(w.planted.begin(), w.planted.end()),
              format("{} queries survived", texts.size()));
    score = scene_miou(out.result.label_map, w);
    o.require(score >= 0.9, format("mIoU {:.4f}", score));
    const std::vector<uint8_t> png = encode_png_gray(label_map_to_png_values(out.result.label_map));
    std::vector<std::vector<uint8_t>> masks;
    for (const SoftMask& m : out.result.soft_masks) masks.push_back(encode_png_gray(soft_mask_to_gray(m)));
    if (run == 0) {
      first_png = png;
      first_masks = masks;
    } else {
      o.require(png == first_png && masks == first_masks, "second run produced different bytes");
    }
  }
  const double t = seconds_since(t0);
  o.require(t < 30.0, format("took {:.2f} s", t));
  if (o.pass) o.detail = format("planted set recovered, mIoU {:.4f}, reproducible, {:.2f} s", score, t);
  return o;
}

// --- ablation ----------------------------------------------------------------

Outcome ablation() {
  Outcome o;
  const PipelineConfig cfg = PipelineConfig::defaults();
  int wins = 0;
  double mean_rec = 0.0, mean_single = 0.0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    const toy::World w = toy::make_world(5000 + seed, {.size = 64, .planted = 1 + static_cast<int>(seed % 3),
                                                       .absent = 1 + static_cast<int>(seed % 2)});
    toy::ToyBackend b(w.lexicon);
    const double rec = scene_miou(segment(b, w.image, w.queries, cfg).result.label_map, w);
    const double single = scene_miou(segment_without_recurrence(b, w.image, w.queries, cfg).label_map, w);
    wins += rec >= single;
    mean_rec += rec / 100.0;
    mean_single += single / 100.0;
  }
  o.require(wins >= 95, format("recurrence at least as good in {}/100 seeds", wins));
  if (o.pass)
    o.detail = format("{}/100 seeds, mean mIoU {:.3f} with recurrence vs {:.3f} single step", wins, mean_rec,
                           mean_single);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"termination", termination},     {"gradcam", gradcam_correctness}, {"sinkhorn", sinkhorn_property},
      {"caa", caa_property},            {"prompts", prompt_rendering},    {"crf", crf_property},
      {"iom-ensemble", iom_ensemble},   {"metrics", metrics},             {"end-to-end", end_to_end},
      {"ablation", ablation},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failed += !r.pass;
    std::printf("%s %s: %s\n", r.pass ? "PASS" : "FAIL", name, r.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
