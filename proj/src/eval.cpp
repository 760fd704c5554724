#include "carseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

#include "carseg/image_io.hpp"

namespace carseg {

MiouAccumulator::MiouAccumulator(int num_classes, std::optional<int> ignore)
    : num_classes_(num_classes), ignore_(ignore) {
  if (num_classes < 0) throw InvalidArgument("num_classes must be >= 0");
  inter_.assign(static_cast<size_t>(num_classes) + 1, 0);
  union_.assign(static_cast<size_t>(num_classes) + 1, 0);
}

int MiouAccumulator::slot(int label) const {
  if (label == kBackground) return num_classes_;
  if (label < 0 || label >= num_classes_) throw InvalidArgument("label " + std::to_string(label) + " out of range");
  return label;
}

void MiouAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  if (!pred.same_shape(gt)) throw InvalidArgument("prediction and ground truth sizes differ");
  for (size_t i = 0; i < gt.size(); ++i) {
    if (ignore_ && gt[i] == *ignore_) continue;
    const int a = slot(pred[i]);
    const int b = slot(gt[i]);
    if (a == b) {
      ++inter_[static_cast<size_t>(a)];
      ++union_[static_cast<size_t>(a)];
    } else {
      ++union_[static_cast<size_t>(a)];
      ++union_[static_cast<size_t>(b)];
    }
  }
  ++images_;
}

void MiouAccumulator::merge(const MiouAccumulator& o) {
  if (o.num_classes_ != num_classes_) throw InvalidArgument("cannot merge accumulators with different class counts");
  for (size_t i = 0; i < inter_.size(); ++i) {
    inter_[i] += o.inter_[i];
    union_[i] += o.union_[i];
  }
  images_ += o.images_;
}

MetricReport make_report(const MiouAccumulator& acc) {
  MetricReport r;
  r.images = acc.images();
  double sum = 0.0;
  for (size_t i = 0; i < acc.intersection().size(); ++i) {
    if (acc.union_counts()[i] == 0) continue;
    ClassIou c;
    c.id = static_cast<int>(i) == acc.num_classes() ? kBackground : static_cast<int>(i);
    c.intersection = acc.intersection()[i];
    c.union_count = acc.union_counts()[i];
    c.iou = static_cast<double>(c.intersection) / static_cast<double>(c.union_count);
    sum += c.iou;
    r.classes.push_back(c);
  }
  r.miou = r.classes.empty() ? 0.0 : sum / static_cast<double>(r.classes.size());
  return r;
}

MetricReport miou(std::span<const LabelMap> preds, std::span<const LabelMap> gts, int num_classes,
                  std::optional<int> ignore) {
  if (preds.size() != gts.size()) throw InvalidArgument("miou: prediction and ground-truth counts differ");
  MiouAccumulator acc(num_classes, ignore);
  for (size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], gts[i]);
  return make_report(acc);
}

double region_j(const BinMask& pred, const BinMask& gt) {
  if (pred.width() != gt.width() || pred.height() != gt.height()) throw InvalidArgument("region_j: size mismatch");
  const long inter = pred.intersection_area(gt);
  const long uni = pred.area() + gt.area() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BinMask boundary_map(const BinMask& m) {
  const int w = m.width(), h = m.height();
  std::vector<uint8_t> out(static_cast<size_t>(w) * h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool v = m(x, y);
      const bool diff = (x > 0 && m(x - 1, y) != v) || (x + 1 < w && m(x + 1, y) != v) ||
                        (y > 0 && m(x, y - 1) != v) || (y + 1 < h && m(x, y + 1) != v);
      out[static_cast<size_t>(y) * w + x] = diff;
    }
  return BinMask(w, h, std::move(out));
}

namespace {

// Fraction of `from` boundary pixels with a `to` boundary pixel within tol.
double matched_fraction(const BinMask& from, const BinMask& to, int tol) {
  const int w = from.width(), h = from.height();
  const long t2 = static_cast<long>(tol) * tol;
  long hit = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!from(x, y)) continue;
      bool found = false;
      for (int dy = -tol; dy <= tol && !found; ++dy)
        for (int dx = -tol; dx <= tol && !found; ++dx) {
          if (static_cast<long>(dx) * dx + static_cast<long>(dy) * dy > t2) continue;
          const int nx = x + dx, ny = y + dy;
          if (nx >= 0 && ny >= 0 && nx < w && ny < h && to(nx, ny)) found = true;
        }
      hit += found;
    }
  return static_cast<double>(hit) / static_cast<double>(from.area());
}

}  // namespace

double contour_f(const BinMask& pred, const BinMask& gt, int tol) {
  if (pred.width() != gt.width() || pred.height() != gt.height()) throw InvalidArgument("contour_f: size mismatch");
  if (tol < 0) throw InvalidArgument("contour_f: tolerance must be >= 0");
  const BinMask bp = boundary_map(pred), bg = boundary_map(gt);
  if (bp.empty() && bg.empty()) return 1.0;
  if (bp.empty() || bg.empty()) return 0.0;
  const double p = matched_fraction(bp, bg, tol);
  const double r = matched_fraction(bg, bp, tol);
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

int default_contour_tol(int width, int height) {
  return static_cast<int>(std::lround(0.008 * std::hypot(static_cast<double>(width), static_cast<double>(height))));
}

std::vector<ManifestEntry> parse_manifest(std::string_view text, const std::filesystem::path& base) {
  std::vector<ManifestEntry> out;
  int line_no = 0;
  size_t pos = 0;
  auto resolve = [&base](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
  };
  while (pos <= text.size()) {
    const size_t nl = text.find('\n', pos);
    const std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    auto fail = [line_no](const std::string& why) {
      return ConfigError("manifest line " + std::to_string(line_no) + ": " + why);
    };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw fail("not valid JSON");
    }
    if (!j.is_object()) throw fail("expected a JSON object");
    ManifestEntry e;
    e.line = line_no;
    if (!j.contains("image") || !j["image"].is_string()) throw fail("missing string field 'image'");
    e.image = resolve(j["image"].get<std::string>());
    if (j.contains("gt")) {
      if (!j["gt"].is_string()) throw fail("'gt' must be a string");
      e.gt = resolve(j["gt"].get<std::string>());
    }
    if (j.contains("split")) {
      if (!j["split"].is_string()) throw fail("'split' must be a string");
      e.split = j["split"].get<std::string>();
    }
    if (j.contains("expression")) {
      if (!j["expression"].is_string()) throw fail("'expression' must be a string");
      e.expression = j["expression"].get<std::string>();
    }
    if (j.contains("queries")) {
      const auto& q = j["queries"];
      if (q.is_string()) {
        std::stringstream ss(q.get<std::string>());
        std::string item;
        while (std::getline(ss, item, ',')) {
          const size_t a = item.find_first_not_of(' '), b = item.find_last_not_of(' ');
          if (a != std::string::npos) e.queries.push_back(item.substr(a, b - a + 1));
        }
      } else if (q.is_array()) {
        for (const auto& v : q) {
          if (!v.is_string()) throw fail("'queries' entries must be strings");
          e.queries.push_back(v.get<std::string>());
        }
      } else {
        throw fail("'queries' must be an array or a comma-separated string");
      }
    }
    if (e.queries.empty() && !e.expression.empty()) e.queries.push_back(e.expression);
    if (e.queries.empty()) throw fail("entry has no queries");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = read_file(path);
  return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                        path.parent_path());
}

Rgb voc_color(int n) {
  uint8_t c[3] = {0, 0, 0};
  for (int shift = 7; n > 0 && shift >= 0; --shift, n >>= 3)
    for (int k = 0; k < 3; ++k) c[k] |= static_cast<uint8_t>(((n >> k) & 1) << shift);
  return {c[0], c[1], c[2]};
}

ImageBuf render_overlay(const ImageBuf& image, const LabelMap& labels) {
  if (!labels.same_shape(image.width(), image.height())) throw InvalidArgument("overlay: label map size mismatch");
  ImageBuf out = image;
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const int32_t l = labels(x, y);
      if (l == kBackground) continue;
      const Rgb a = image.pixel(x, y);
      const Rgb b = voc_color(l + 1);
      auto mix = [](uint8_t u, uint8_t v) { return static_cast<uint8_t>((u + v + 1) / 2); };
      out.set_pixel(x, y, {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)});
    }
  return out;
}

namespace {

std::string class_name(int id, std::span<const std::string> names) {
  if (id == kBackground) return "background";
  if (id >= 0 && static_cast<size_t>(id) < names.size()) return names[static_cast<size_t>(id)];
  return "class_" + std::to_string(id);
}

}  // namespace

std::string report_to_json(const MetricReport& r, std::span<const std::string> names) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes)
    classes.push_back({{"id", c.id},
                       {"name", class_name(c.id, names)},
                       {"iou", c.iou},
                       {"intersection", c.intersection},
                       {"union", c.union_count}});
  nlohmann::json j{{"miou", r.miou}, {"images", r.images}, {"classes", classes}};
  if (r.j_mean) j["j_mean"] = *r.j_mean;
  if (r.f_mean) j["f_mean"] = *r.f_mean;
  if (r.jf_mean) j["jf_mean"] = *r.jf_mean;
  if (!r.config_fingerprint.empty()) j["config"] = r.config_fingerprint;
  return j.dump(2);
}

std::string report_to_table(const MetricReport& r, std::span<const std::string> names) {
  size_t width = 5;
  for (const auto& c : r.classes) width = std::max(width, class_name(c.id, names).size());
  std::string out;
  char buf[256];
  auto row = [&](const std::string& name, const std::string& value) {
    std::snprintf(buf, sizeof buf, "%-*s  %s\n", static_cast<int>(width), name.c_str(), value.c_str());
    out += buf;
  };
  auto pct = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%6.2f", 100.0 * v);
    return std::string(b);
  };
  row("class", "   IoU");
  for (const auto& c : r.classes) row(class_name(c.id, names), pct(c.iou));
  row("mIoU", pct(r.miou));
  if (r.j_mean) row("J", pct(*r.j_mean));
  if (r.f_mean) row("F", pct(*r.f_mean));
  if (r.jf_mean) row("J&F", pct(*r.jf_mean));
  row("images", std::to_string(r.images));
  return out;
}

}  // namespace carseg
