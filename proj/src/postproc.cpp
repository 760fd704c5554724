#include "carseg/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>

#include <Eigen/Dense>

#include "carseg/image_io.hpp"

namespace carseg {
namespace {

constexpr double kMinProb = 1e-8;

struct Site {
  double x, y, r, g, b;
};

using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense bilateral kernel over the sites, self excluded, scaled in place to
// w * K(p,q) / sqrt(d_p d_q).
Eigen::MatrixXf bilateral_matrix(const std::vector<Site>& s, const CrfParams& p) {
  const auto n = static_cast<Eigen::Index>(s.size());
  Eigen::ArrayXf x(n), y(n), r(n), g(n), b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Site& t = s[static_cast<size_t>(i)];
    x(i) = static_cast<float>(t.x);
    y(i) = static_cast<float>(t.y);
    r(i) = static_cast<float>(t.r);
    g(i) = static_cast<float>(t.g);
    b(i) = static_cast<float>(t.b);
  }
  const float b2 = static_cast<float>(1.0 / (2.0 * p.bilat_sxy * p.bilat_sxy));
  const float c2 = static_cast<float>(1.0 / (2.0 * p.bilat_srgb * p.bilat_srgb));
  Eigen::MatrixXf k(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    k.col(j) = (-((x - x(j)).square() + (y - y(j)).square()) * b2 -
                ((r - r(j)).square() + (g - g(j)).square() + (b - b(j)).square()) * c2)
                   .exp()
                   .matrix();
    k(j, j) = 0.0f;
  }
  Eigen::ArrayXf inv = k.colwise().sum().transpose().array();
  for (Eigen::Index i = 0; i < n; ++i)
    inv(i) = inv(i) > 0.0f ? static_cast<float>(std::sqrt(p.bilat_w / inv(i))) : 0.0f;
  for (Eigen::Index j = 0; j < n; ++j) k.col(j) = (k.col(j).array() * inv * inv(j)).matrix();
  return k;
}

// The spatial Gaussian on a regular grid factorises into a row and a column
// kernel, so its messages are exact separable products.
struct SpatialKernel {
  RowMajorF gx, gy;  // w x w and h x h
  Eigen::ArrayXf inv;  // sqrt(w / d_p), row-major pixel order
  int w = 0, h = 0;

  SpatialKernel(int width, int height, double step, const CrfParams& p) : w(width), h(height) {
    auto axis = [&](int n) {
      RowMajorF m(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double d = (i - j) * step;
          m(i, j) = static_cast<float>(std::exp(-d * d / (2.0 * p.gauss_sxy * p.gauss_sxy)));
        }
      return m;
    };
    gx = axis(w);
    gy = axis(h);
    const RowMajorF deg = gy * RowMajorF::Ones(h, w) * gx;
    inv.resize(static_cast<Eigen::Index>(w) * h);
    for (int i = 0; i < w * h; ++i) {
      const float d = deg(i / w, i % w) - 1.0f;
      inv(i) = d > 0.0f ? static_cast<float>(std::sqrt(p.gauss_w / d)) : 0.0f;
    }
  }

  // out += inv ⊙ (G (inv ⊙ q) - inv ⊙ q) for one channel.
  void add_messages(const float* q, float* out) const {
    const Eigen::Index n = static_cast<Eigen::Index>(w) * h;
    RowMajorF v(h, w);
    Eigen::Map<Eigen::ArrayXf>(v.data(), n) = Eigen::Map<const Eigen::ArrayXf>(q, n) * inv;
    const RowMajorF conv = gy * v * gx;
    Eigen::Map<Eigen::ArrayXf>(out, n) +=
        inv * (Eigen::Map<const Eigen::ArrayXf>(conv.data(), n) - Eigen::Map<const Eigen::ArrayXf>(v.data(), n));
  }
};

// Q_l ∝ exp(-U_l + m_l) per pixel, in double.
void softmax_update(ProbMap& q, const ProbMap& unary, const float* messages) {
  const size_t n = q.pixels();
  std::vector<double> e(static_cast<size_t>(q.channels));
  for (size_t p = 0; p < n; ++p) {
    double mx = -1e300;
    for (int c = 0; c < q.channels; ++c) {
      double v = -unary.at(c, p);
      if (messages) v += messages[static_cast<size_t>(c) * n + p];
      e[static_cast<size_t>(c)] = v;
      mx = std::max(mx, v);
    }
    double z = 0.0;
    for (double& v : e) z += (v = std::exp(v - mx));
    for (int c = 0; c < q.channels; ++c) q.at(c, p) = static_cast<float>(e[static_cast<size_t>(c)] / z);
  }
}

ProbMap unary_energy(const ProbMap& p) {
  ProbMap u = p;
  for (float& v : u.data) v = static_cast<float>(-std::log(std::max(static_cast<double>(v), kMinProb)));
  return u;
}

bool has_pairwise(const CrfParams& p) { return p.gauss_w != 0.0 || p.bilat_w != 0.0; }

// Mean field over sites laid out as a row-major grid with the given pixel
// spacing. Returns Q; `last_messages` receives the messages of the final Q.
ProbMap dense_mean_field(const std::vector<Site>& sites, double step, const ProbMap& unary, const CrfParams& params,
                         const CrfObserver& observer, Eigen::MatrixXf* last_messages) {
  ProbMap q(unary.width, unary.height, unary.channels);
  softmax_update(q, unary, nullptr);
  if (observer) observer(0, q);
  const auto n = static_cast<Eigen::Index>(q.pixels());
  Eigen::MatrixXf m = Eigen::MatrixXf::Zero(n, q.channels);
  if (!has_pairwise(params)) {
    for (int it = 1; it <= params.iterations; ++it)
      if (observer) observer(it, q);
    if (last_messages) *last_messages = m;
    return q;
  }
  Eigen::MatrixXf bilateral;
  if (params.bilat_w != 0.0) bilateral = bilateral_matrix(sites, params);
  std::optional<SpatialKernel> spatial;
  if (params.gauss_w != 0.0) spatial.emplace(q.width, q.height, step, params);
  auto messages = [&] {
    const Eigen::Map<const Eigen::MatrixXf> qm(q.data.data(), n, q.channels);
    if (params.bilat_w != 0.0) m.noalias() = bilateral * qm;
    else m.setZero();
    if (spatial)
      for (int c = 0; c < q.channels; ++c) spatial->add_messages(qm.col(c).data(), m.col(c).data());
  };
  for (int it = 1; it <= params.iterations; ++it) {
    messages();
    softmax_update(q, unary, m.data());
    if (observer) observer(it, q);
  }
  if (last_messages) {
    messages();
    *last_messages = m;
  }
  return q;
}

}  // namespace

double ProbMap::max_simplex_deviation() const {
  double worst = 0.0;
  for (size_t p = 0; p < pixels(); ++p) {
    double s = 0.0;
    for (int c = 0; c < channels; ++c) s += at(c, p);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

SoftMask background_channel(const SoftMaskStack& masks, int width, int height) {
  SoftMask bg(width, height, 1.0f);
  for (const auto& m : masks) {
    if (!m.same_shape(width, height)) throw InvalidArgument("background_channel: mask size mismatch");
    for (size_t i = 0; i < bg.size(); ++i) bg[i] = std::min(bg[i], 1.0f - std::clamp(m[i], 0.0f, 1.0f));
  }
  return bg;
}

ProbMap unary_probabilities(const SoftMaskStack& masks, const SoftMask& background) {
  const int w = background.width(), h = background.height();
  const int c = static_cast<int>(masks.size()) + 1;
  ProbMap p(w, h, c);
  for (const auto& m : masks)
    if (!m.same_shape(background)) throw InvalidArgument("unary: mask size mismatch");
  for (size_t i = 0; i < p.pixels(); ++i) {
    double sum = 0.0;
    for (int k = 0; k < c; ++k) {
      const float v = std::clamp(k + 1 < c ? masks[static_cast<size_t>(k)][i] : background[i], 0.0f, 1.0f);
      p.at(k, i) = v;
      sum += v;
    }
    for (int k = 0; k < c; ++k)
      p.at(k, i) = sum > 0.0 ? static_cast<float>(p.at(k, i) / sum) : 1.0f / static_cast<float>(c);
  }
  return p;
}

ProbMap unary_softmax(const ProbMap& p) {
  ProbMap q(p.width, p.height, p.channels);
  softmax_update(q, unary_energy(p), nullptr);
  return q;
}

ProbMap crf_refine(const ImageBuf& image, const SoftMaskStack& masks, const SoftMask& background,
                   const CrfParams& params, const CrfObserver& observer) {
  if (!background.same_shape(image.width(), image.height())) throw InvalidArgument("crf: background size mismatch");
  if (params.iterations < 0) throw InvalidArgument("crf: iterations must be >= 0");
  const ProbMap probs = unary_probabilities(masks, background);
  const ProbMap unary = unary_energy(probs);
  const int w = image.width(), h = image.height();
  const long n = static_cast<long>(w) * h;

  if (n <= params.exact_max_pixels || !has_pairwise(params)) {
    std::vector<Site> sites;
    sites.reserve(static_cast<size_t>(n));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Rgb c = image.pixel(x, y);
        sites.push_back({static_cast<double>(x), static_cast<double>(y), double(c.r), double(c.g), double(c.b)});
      }
    return dense_mean_field(sites, 1.0, unary, params, observer, nullptr);
  }

  // Coarse grid of f x f blocks, positions in full-resolution pixel units.
  const int f = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n) / params.exact_max_pixels)));
  const int cw = (w + f - 1) / f, ch = (h + f - 1) / f;
  ProbMap coarse(cw, ch, probs.channels);
  std::vector<Site> sites(static_cast<size_t>(cw) * ch, Site{0, 0, 0, 0, 0});
  std::vector<int> count(sites.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t b = static_cast<size_t>(y / f) * cw + x / f;
      const size_t p = static_cast<size_t>(y) * w + x;
      const Rgb c = image.pixel(x, y);
      Site& s = sites[b];
      s.x += x;
      s.y += y;
      s.r += c.r;
      s.g += c.g;
      s.b += c.b;
      ++count[b];
      for (int k = 0; k < probs.channels; ++k) coarse.at(k, b) += probs.at(k, p);
    }
  for (size_t b = 0; b < sites.size(); ++b) {
    const double inv = 1.0 / count[b];
    sites[b] = {sites[b].x * inv, sites[b].y * inv, sites[b].r * inv, sites[b].g * inv, sites[b].b * inv};
    for (int k = 0; k < coarse.channels; ++k) coarse.at(k, b) = static_cast<float>(coarse.at(k, b) * inv);
  }
  Eigen::MatrixXf messages;
  dense_mean_field(sites, f, unary_energy(coarse), params, observer, &messages);
  std::vector<float> full(static_cast<size_t>(probs.channels) * static_cast<size_t>(n));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto b = static_cast<Eigen::Index>((y / f) * cw + x / f);
      const size_t p = static_cast<size_t>(y) * w + x;
      for (int k = 0; k < probs.channels; ++k) full[static_cast<size_t>(k) * n + p] = messages(b, k);
    }
  ProbMap q(w, h, probs.channels);
  softmax_update(q, unary, full.data());
  return q;
}

LabelMap argmax_labels(const ProbMap& q, std::span<const int> labels) {
  LabelMap out(q.width, q.height, kBackground);
  for (size_t p = 0; p < q.pixels(); ++p) {
    int best = 0;
    for (int c = 1; c < q.channels; ++c)
      if (q.at(c, p) > q.at(best, p)) best = c;
    out[p] = static_cast<size_t>(best) < labels.size() ? labels[static_cast<size_t>(best)] : kBackground;
  }
  return out;
}

double iom(const BinMask& a, const BinMask& b) {
  const long m = std::min(a.area(), b.area());
  return m == 0 ? 0.0 : static_cast<double>(a.intersection_area(b)) / static_cast<double>(m);
}

double iou(const BinMask& a, const BinMask& b) {
  const long inter = a.intersection_area(b);
  const long uni = a.area() + b.area() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

ProposalSet load_proposal_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(dir, ec))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  std::sort(files.begin(), files.end());
  ProposalSet set;
  for (const auto& f : files) {
    const Grid<uint8_t> g = read_png_gray(f);
    std::vector<uint8_t> bits(g.size());
    for (size_t i = 0; i < g.size(); ++i) bits[i] = g[i] != 0;
    if (!set.masks.empty() && (set.masks[0].width() != g.width() || set.masks[0].height() != g.height()))
      throw IoError(f.string() + ": proposal size differs from the others");
    set.masks.emplace_back(g.width(), g.height(), std::move(bits));
  }
  return set;
}

ProposalSet load_indexed_proposals(const std::filesystem::path& png) {
  const Grid<uint8_t> g = read_png_gray(png);
  std::map<uint8_t, std::vector<uint8_t>> by_value;
  for (size_t i = 0; i < g.size(); ++i) {
    if (g[i] == 0) continue;
    auto& bits = by_value[g[i]];
    if (bits.empty()) bits.assign(g.size(), 0);
    bits[i] = 1;
  }
  ProposalSet set;
  for (auto& [v, bits] : by_value) set.masks.emplace_back(g.width(), g.height(), std::move(bits));
  return set;
}

ProposalSet load_proposals_for(const std::filesystem::path& dir, const std::string& stem) {
  const auto sub = dir / stem;
  if (std::filesystem::is_directory(sub)) return load_proposal_dir(sub);
  const auto single = dir / (stem + ".png");
  if (std::filesystem::is_regular_file(single)) return load_indexed_proposals(single);
  return {};
}

std::vector<BinMask> sam_ensemble(const std::vector<BinMask>& crf, const ProposalSet& proposals, double phi_iom,
                                  double phi_iou) {
  std::vector<std::vector<size_t>> assigned(crf.size());
  for (size_t j = 0; j < proposals.masks.size(); ++j) {
    const BinMask& prop = proposals.masks[j];
    long best = -1;
    double best_iom = 0.0;
    for (size_t i = 0; i < crf.size(); ++i) {
      if (crf[i].width() != prop.width() || crf[i].height() != prop.height())
        throw InvalidArgument("sam_ensemble: proposal size does not match the CRF masks");
      const double v = iom(crf[i], prop);
      if (v < phi_iom) continue;
      const bool better = best < 0 || v > best_iom ||
                          (v == best_iom && crf[i].area() > crf[static_cast<size_t>(best)].area());
      if (better) {
        best = static_cast<long>(i);
        best_iom = v;
      }
    }
    if (best >= 0) assigned[static_cast<size_t>(best)].push_back(j);
  }
  std::vector<BinMask> out = crf;
  for (size_t i = 0; i < crf.size(); ++i) {
    if (assigned[i].empty()) continue;
    BinMask uni = proposals.masks[assigned[i][0]];
    for (size_t k = 1; k < assigned[i].size(); ++k) uni = uni.united(proposals.masks[assigned[i][k]]);
    if (iou(uni, crf[i]) >= phi_iou) out[i] = std::move(uni);
  }
  return out;
}

std::vector<BinMask> masks_from_labels(const LabelMap& labels, std::span<const int> ids) {
  std::vector<BinMask> out;
  for (int id : ids) {
    std::vector<uint8_t> bits(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) bits[i] = labels[i] == id;
    out.emplace_back(labels.width(), labels.height(), std::move(bits));
  }
  return out;
}

LabelMap labels_from_masks(const std::vector<BinMask>& masks, std::span<const int> ids, const LabelMap& prior) {
  if (masks.size() != ids.size()) throw InvalidArgument("labels_from_masks: one id per mask required");
  LabelMap out(prior.width(), prior.height(), kBackground);
  for (size_t p = 0; p < out.size(); ++p) {
    int first = kBackground;
    bool prior_claims = false;
    for (size_t k = 0; k < masks.size(); ++k) {
      if (!masks[k].at(p)) continue;
      if (first == kBackground) first = ids[k];
      if (ids[k] == prior[p]) prior_claims = true;
    }
    out[p] = prior_claims ? prior[p] : first;
  }
  return out;
}

}  // namespace carseg
