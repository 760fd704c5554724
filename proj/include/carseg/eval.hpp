// eval.hpp
//
// Segmentation metrics, dataset manifests and report rendering.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "carseg/core.hpp"

namespace carseg {

/// Per-class intersection and union counts. Labels 0..num_classes-1 are
/// classes; kBackground is counted as one more class. Pixels whose gt equals
/// `ignore` are skipped. Accumulators merge associatively.
class MiouAccumulator {
 public:
  explicit MiouAccumulator(int num_classes, std::optional<int> ignore = std::nullopt);

  /// Throws InvalidArgument on shape mismatch or labels out of range.
  void add(const LabelMap& pred, const LabelMap& gt);
  void merge(const MiouAccumulator& other);

  int num_classes() const { return num_classes_; }
  /// Slot num_classes is background.
  const std::vector<long>& intersection() const { return inter_; }
  const std::vector<long>& union_counts() const { return union_; }
  long images() const { return images_; }

 private:
  int slot(int label) const;

  int num_classes_;
  std::optional<int> ignore_;
  std::vector<long> inter_;
  std::vector<long> union_;
  long images_ = 0;
};

struct ClassIou {
  int id = 0;  // kBackground for the background slot
  long intersection = 0;
  long union_count = 0;
  double iou = 0.0;
};

struct MetricReport {
  /// Classes with a nonzero union only.
  std::vector<ClassIou> classes;
  double miou = 0.0;
  long images = 0;
  std::optional<double> j_mean;
  std::optional<double> f_mean;
  std::optional<double> jf_mean;
  std::string config_fingerprint;
};

MetricReport make_report(const MiouAccumulator& acc);
MetricReport miou(std::span<const LabelMap> preds, std::span<const LabelMap> gts, int num_classes,
                  std::optional<int> ignore = std::nullopt);

/// IoU, 1 when both masks are empty.
double region_j(const BinMask& pred, const BinMask& gt);

/// Pixels with a 4-neighbour of different value; outside the image counts
/// as the same value.
BinMask boundary_map(const BinMask& mask);

/// Boundary F-measure. A boundary pixel matches if the other mask has a
/// boundary pixel within Euclidean distance tol. Both boundaries empty gives
/// 1; exactly one empty gives 0.
double contour_f(const BinMask& pred, const BinMask& gt, int tol);

/// round(0.008 * image diagonal).
int default_contour_tol(int width, int height);

struct ManifestEntry {
  std::filesystem::path image;
  std::filesystem::path gt;  // empty when absent
  std::vector<std::string> queries;
  std::string expression;
  std::string split;
  int line = 0;
};

/// JSONL, one object per non-blank line with keys image, gt, queries (array
/// or comma-separated string), expression and split. Relative paths resolve
/// against the manifest's directory. A missing file raises IoError, a bad
/// line ConfigError("manifest line N: ...").
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
std::vector<ManifestEntry> parse_manifest(std::string_view text, const std::filesystem::path& base_dir);

/// VOC colour-map entry n.
Rgb voc_color(int n);
/// Pixels with label i are blended half-and-half with voc_color(i + 1);
/// background pixels are unchanged.
ImageBuf render_overlay(const ImageBuf& image, const LabelMap& labels);

std::string report_to_json(const MetricReport& report, std::span<const std::string> class_names = {});
std::string report_to_table(const MetricReport& report, std::span<const std::string> class_names = {});

}  // namespace carseg
