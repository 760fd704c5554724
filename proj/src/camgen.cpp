#include "carseg/camgen.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace carseg {
namespace {

double stochastic_deviation(const Eigen::MatrixXd& m) {
  const double r = (m.rowwise().sum().array() - 1.0).abs().maxCoeff();
  const double c = (m.colwise().sum().array() - 1.0).abs().maxCoeff();
  return std::max(r, c);
}

void normalise_max(std::vector<double>& v) {
  const double mx = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  if (mx > 0.0) {
    for (double& x : v) x /= mx;
  } else {
    std::fill(v.begin(), v.end(), 0.0);
  }
}

SoftMask to_mask(int w, int h, const std::vector<double>& v) {
  SoftMask out(w, h);
  for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(std::clamp(v[i], 0.0, 1.0));
  return out;
}

}  // namespace

SoftMask gradcam(const CamBundle& b, int q) {
  if (q < 0 || q >= b.num_fg) throw InvalidArgument("gradcam: query index out of range");
  const size_t cells = static_cast<size_t>(b.cells());
  std::vector<double> cam(cells, 0.0);
  for (int k = 0; k < b.channels; ++k) {
    const float* g = b.grads.data() + (static_cast<size_t>(q) * b.channels + k) * cells;
    double alpha = 0.0;
    for (size_t p = 0; p < cells; ++p) alpha += g[p];
    alpha /= static_cast<double>(cells);
    if (alpha == 0.0) continue;
    const float* a = b.features.data() + static_cast<size_t>(k) * cells;
    for (size_t p = 0; p < cells; ++p) cam[p] += alpha * a[p];
  }
  for (double& v : cam) v = std::max(0.0, v);
  normalise_max(cam);
  return to_mask(b.width, b.height, cam);
}

SinkhornResult sinkhorn(const Eigen::MatrixXd& w, int max_iters, double tol) {
  if (max_iters < 1) throw InvalidArgument("sinkhorn: iterations must be >= 1");
  if (w.size() == 0) throw InvalidArgument("sinkhorn: empty matrix");
  if ((w.array() < 0.0).any() || !w.allFinite()) throw InvalidArgument("sinkhorn: entries must be finite and >= 0");
  if ((w.rowwise().sum().array() <= 0.0).any()) throw InvalidArgument("sinkhorn: all-zero row");
  if ((w.colwise().sum().array() <= 0.0).any()) throw InvalidArgument("sinkhorn: all-zero column");
  // Alternate row and column normalisation, tracked as the scalings
  // D = diag(u) W diag(v).
  const Eigen::Index n = w.rows(), m = w.cols();
  Eigen::VectorXd u = Eigen::VectorXd::Ones(n), v = Eigen::VectorXd::Ones(m);
  Eigen::VectorXd wv = w * v;
  SinkhornResult r;
  for (int it = 0; it < max_iters; ++it) {
    u = wv.cwiseInverse();
    const Eigen::VectorXd wtu = w.transpose() * u;
    v = wtu.cwiseInverse();
    wv = w * v;
    r.iterations = it + 1;
    const double row_dev = (u.cwiseProduct(wv).array() - 1.0).abs().maxCoeff();
    const double col_dev = (v.cwiseProduct(wtu).array() - 1.0).abs().maxCoeff();
    r.deviation = std::max(row_dev, col_dev);
    if (r.deviation < tol) break;
  }
  r.matrix = u.asDiagonal() * w * v.asDiagonal();
  r.deviation = stochastic_deviation(r.matrix);
  return r;
}

AffinityMatrix symmetric_affinity(const Eigen::MatrixXd& d) {
  if (d.rows() != d.cols()) throw InvalidArgument("symmetric_affinity: matrix must be square");
  AffinityMatrix out;
  out.a = (d + d.transpose()) / 2.0;
  return out;
}

Eigen::MatrixXd mean_attention(const CamBundle& b, int layers) {
  const int n = b.cells();
  const int use = std::clamp(layers, 1, b.attn_layers);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(n, n);
  using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (int l = b.attn_layers - use; l < b.attn_layers; ++l)
    sum += Eigen::Map<const RowMajorF>(b.attention_layer(l).data(), n, n).cast<double>();
  return sum / static_cast<double>(use);
}

BoxMask box_mask(const SoftMask& m, double lambda) {
  const int w = m.width(), h = m.height();
  std::vector<uint8_t> fg(m.size());
  for (size_t i = 0; i < m.size(); ++i) fg[i] = m[i] >= lambda ? 1 : 0;
  std::vector<int> label(m.size(), -1);
  std::vector<uint8_t> bits(m.size(), 0);
  BoxMask out;
  std::vector<int> stack;
  for (int start = 0; start < static_cast<int>(m.size()); ++start) {
    if (!fg[static_cast<size_t>(start)] || label[static_cast<size_t>(start)] >= 0) continue;
    const int id = static_cast<int>(out.boxes.size());
    BBox box{start % w, start / w, start % w, start / w};
    stack.assign(1, start);
    label[static_cast<size_t>(start)] = id;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int px = p % w, py = p / w;
      box.x0 = std::min(box.x0, px);
      box.x1 = std::max(box.x1, px);
      box.y0 = std::min(box.y0, py);
      box.y1 = std::max(box.y1, py);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = px + dx, ny = py + dy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const size_t qi = static_cast<size_t>(ny) * w + nx;
          if (fg[qi] && label[qi] < 0) {
            label[qi] = id;
            stack.push_back(static_cast<int>(qi));
          }
        }
    }
    out.boxes.push_back(box);
    for (int y = box.y0; y <= box.y1; ++y)
      for (int x = box.x0; x <= box.x1; ++x) bits[static_cast<size_t>(y) * w + x] = 1;
  }
  out.mask = BinMask(w, h, std::move(bits));
  return out;
}

std::vector<double> caa_refine(std::span<const double> m, const Eigen::MatrixXd& a, std::span<const uint8_t> box,
                               int t) {
  const auto n = static_cast<Eigen::Index>(m.size());
  if (a.rows() != n || a.cols() != n || box.size() != m.size())
    throw InvalidArgument("caa_refine: affinity, mask and box sizes disagree");
  if (t < 0) throw InvalidArgument("caa_refine: iterations must be >= 0");
  Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(m.data(), n);
  for (int i = 0; i < t; ++i) v = a * v;
  std::vector<double> out(m.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = box[i] ? v(static_cast<Eigen::Index>(i)) : 0.0;
  normalise_max(out);
  return out;
}

SoftMask caa_refine(const SoftMask& m, const AffinityMatrix& a, const BoxMask& box, int t) {
  if (box.mask.width() != m.width() || box.mask.height() != m.height())
    throw InvalidArgument("caa_refine: box mask does not match mask shape");
  std::vector<double> v(m.values().begin(), m.values().end());
  return to_mask(m.width(), m.height(), caa_refine(v, a.a, box.mask.bits(), t));
}

SoftMask upsample_bilinear(const SoftMask& m, int width, int height) {
  if (m.width() < 1 || m.height() < 1) throw InvalidArgument("upsample: empty mask");
  if (m.same_shape(width, height)) return m;
  SoftMask out(width, height);
  const double sx = static_cast<double>(m.width()) / width;
  const double sy = static_cast<double>(m.height()) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(m.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, m.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(m.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, m.width() - 1);
      const double wx = fx - x0;
      const double top = m(x0, y0) * (1.0 - wx) + m(x1, y0) * wx;
      const double bot = m(x0, y1) * (1.0 - wx) + m(x1, y1) * wx;
      out(x, y) = static_cast<float>(std::clamp(top * (1.0 - wy) + bot * wy, 0.0, 1.0));
    }
  }
  return out;
}

std::vector<std::string> effective_background(std::span<const std::string> fg, const PipelineConfig& cfg) {
  const std::set<std::string, std::less<>> taken(fg.begin(), fg.end());
  std::vector<std::string> out;
  for (const auto& b : cfg.bg_queries)
    if (!taken.count(b)) out.push_back(b);
  return out;
}

namespace {

// Proposals for the queries at `positions`, with `bg` competing in the softmax.
void propose_group(Backend& backend, const ImageBuf& image, const std::vector<std::string>& fg,
                   const std::vector<std::string>& bg, const std::vector<size_t>& positions,
                   const PipelineConfig& cfg, SoftMaskStack& out) {
  const CamBundle bundle = backend.activations(image, fg, bg);
  bundle.validate(fg.size() + bg.size());
  if (bundle.num_fg != static_cast<int>(fg.size())) throw BackendError("activations: n_fg does not match request");
  const SinkhornResult d = sinkhorn(mean_attention(bundle, cfg.last_attn_layers), cfg.sinkhorn_iters, cfg.sinkhorn_tol);
  AffinityMatrix a = symmetric_affinity(d.matrix);
  a.iters_applied = d.iterations;
  for (size_t i = 0; i < fg.size(); ++i) {
    const SoftMask cam = gradcam(bundle, static_cast<int>(i));
    const SoftMask refined = caa_refine(cam, a, box_mask(cam, cfg.lambda), cfg.caa_iters);
    out[positions[i]] = upsample_bilinear(refined, image.width(), image.height());
  }
}

}  // namespace

SoftMaskStack propose_masks(Backend& backend, const ImageBuf& image, const QueryState& h, const PipelineConfig& cfg) {
  if (h.empty()) throw InvalidArgument("propose_masks: no queries");
  SoftMaskStack out(h.size());
  const std::vector<std::string> texts = h.texts();
  if (!cfg.mutual_background) {
    std::vector<size_t> all(texts.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    propose_group(backend, image, texts, effective_background(texts, cfg), all, cfg, out);
    return out;
  }
  // Things compete against the surviving stuff queries and vice versa.
  const std::set<std::string, std::less<>> stuff(cfg.stuff_queries.begin(), cfg.stuff_queries.end());
  std::vector<std::string> group_text[2];
  std::vector<size_t> group_pos[2];
  for (size_t i = 0; i < texts.size(); ++i) {
    const int g = stuff.count(texts[i]) ? 1 : 0;
    group_text[g].push_back(texts[i]);
    group_pos[g].push_back(i);
  }
  for (int g = 0; g < 2; ++g)
    if (!group_text[g].empty())
      propose_group(backend, image, group_text[g], group_text[1 - g], group_pos[g], cfg, out);
  return out;
}

}  // namespace carseg
