// core.hpp
//
// Domain types shared by every stage of the segmentation engine: images,
// soft and binary masks, the query state carried between recurrent steps,
// similarity matrices and the pipeline configuration.

#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace carseg {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or command-line input.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Backend unreachable, protocol mismatch or malformed reply.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// File system or codec failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A prompt that needs a bounding box was requested for an empty mask.
class EmptyMaskError : public Error {
 public:
  EmptyMaskError() : Error("empty mask") {}
};

// ---------------------------------------------------------------------------
// Grids and images
// ---------------------------------------------------------------------------

/// Row-major 2-D grid, indexed (x, y).
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<size_t>(checked_area(width, height)), fill) {}
  Grid(int width, int height, std::vector<T> values)
      : width_(width), height_(height), data_(std::move(values)) {
    if (data_.size() != static_cast<size_t>(checked_area(width, height)))
      throw InvalidArgument("grid value count does not match dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  bool same_shape(int w, int h) const { return width_ == w && height_ == h; }
  template <typename U>
  bool same_shape(const Grid<U>& other) const {
    return width_ == other.width() && height_ == other.height();
  }

  bool operator==(const Grid&) const = default;

 private:
  static long checked_area(int w, int h) {
    if (w < 0 || h < 0) throw InvalidArgument("negative grid dimension");
    return static_cast<long>(w) * h;
  }
  size_t index(int x, int y) const {
    return static_cast<size_t>(y) * static_cast<size_t>(width_) + static_cast<size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

/// Soft mask: one real-valued heatmap in [0,1].
using SoftMask = Grid<float>;
using SoftMaskStack = std::vector<SoftMask>;

/// Per-pixel label: a query's original index, or kBackground.
using LabelMap = Grid<int32_t>;
inline constexpr int32_t kBackground = -1;
/// Value used for kBackground in 8-bit label PNG files.
inline constexpr uint8_t kBackgroundPng = 255;

struct Rgb {
  uint8_t r = 0;
  uint8_t g = 0;
  uint8_t b = 0;
  auto operator<=>(const Rgb&) const = default;
};

/// 8-bit RGB image, interleaved, row-major. Channel order is RGB throughout.
class ImageBuf {
 public:
  ImageBuf() = default;
  ImageBuf(int width, int height, Rgb fill = {});
  ImageBuf(int width, int height, std::vector<uint8_t> rgb);

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return width_ == 0; }

  Rgb pixel(int x, int y) const {
    const uint8_t* p = &data_[offset(x, y)];
    return {p[0], p[1], p[2]};
  }
  void set_pixel(int x, int y, Rgb c) {
    uint8_t* p = &data_[offset(x, y)];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }

  std::span<const uint8_t> bytes() const { return data_; }
  std::span<uint8_t> bytes() { return data_; }

  bool operator==(const ImageBuf&) const = default;

 private:
  size_t offset(int x, int y) const {
    return 3 * (static_cast<size_t>(y) * static_cast<size_t>(width_) + static_cast<size_t>(x));
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<uint8_t> data_;
};

/// Inclusive pixel bounding box.
struct BBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = -1;
  int y1 = -1;
  int width() const { return x1 - x0 + 1; }
  int height() const { return y1 - y0 + 1; }
  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  bool operator==(const BBox&) const = default;
};

/// Binary mask with cached area.
class BinMask {
 public:
  BinMask() = default;
  BinMask(int width, int height);
  BinMask(int width, int height, std::vector<uint8_t> bits);
  explicit BinMask(const Grid<uint8_t>& bits);

  int width() const { return width_; }
  int height() const { return height_; }
  long area() const { return area_; }
  bool empty() const { return area_ == 0; }

  bool operator()(int x, int y) const {
    return bits_[static_cast<size_t>(y) * static_cast<size_t>(width_) + static_cast<size_t>(x)] != 0;
  }
  bool at(size_t i) const { return bits_[i] != 0; }
  std::span<const uint8_t> bits() const { return bits_; }

  std::optional<BBox> bbox() const;

  BinMask intersected(const BinMask& other) const;
  BinMask united(const BinMask& other) const;
  long intersection_area(const BinMask& other) const;
  bool is_subset_of(const BinMask& other) const;

  bool operator==(const BinMask& other) const {
    return width_ == other.width_ && height_ == other.height_ && bits_ == other.bits_;
  }

 private:
  void require_same_shape(const BinMask& other) const;

  int width_ = 0;
  int height_ = 0;
  std::vector<uint8_t> bits_;
  long area_ = 0;
};

// ---------------------------------------------------------------------------
// Query state
// ---------------------------------------------------------------------------

struct Query {
  int original_index = 0;
  std::string text;
  bool operator==(const Query&) const = default;
};

/// Surviving text queries at a recurrent step.
class QueryState {
 public:
  QueryState() = default;
  QueryState(std::vector<Query> entries, int step);

  /// Step-0 state built from user queries. Texts must be non-empty and unique.
  static QueryState initial(std::span<const std::string> texts);

  const std::vector<Query>& entries() const { return entries_; }
  int step() const { return step_; }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const Query& operator[](size_t i) const { return entries_[i]; }

  std::vector<std::string> texts() const;
  std::vector<int> original_indices() const;

  /// Entries whose flag is set, stamped with step()+1.
  QueryState filtered(const std::vector<bool>& keep) const;
  bool is_subset_of(const QueryState& other) const;

  bool operator==(const QueryState&) const = default;

 private:
  std::vector<Query> entries_;
  int step_ = 0;
};

// ---------------------------------------------------------------------------
// Similarity matrix
// ---------------------------------------------------------------------------

/// Row-wise softmax of a logits matrix, computed in double with max shift.
Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& logits);

/// Square prompted-image x query similarity matrix, row-stochastic.
class SimMatrix {
 public:
  SimMatrix() = default;
  /// Rows must already be probability vectors.
  explicit SimMatrix(Eigen::MatrixXd probabilities);
  static SimMatrix from_logits(const Eigen::MatrixXd& logits);

  Eigen::Index size() const { return p_.rows(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return p_(i, j); }
  Eigen::VectorXd diagonal() const { return p_.diagonal(); }
  const Eigen::MatrixXd& matrix() const { return p_; }
  /// max over rows of |row sum - 1|.
  double max_row_deviation() const;

 private:
  Eigen::MatrixXd p_;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class PromptType { Blur, Gray, Black, Circle, Rectangle, Contour };

std::string to_string(PromptType t);
std::optional<PromptType> parse_prompt_type(std::string_view name);
/// Parse "circle,blur" style lists. Throws ConfigError on unknown names.
std::vector<PromptType> parse_prompt_types(std::string_view csv);

struct PromptSpec {
  std::vector<PromptType> types{PromptType::Circle, PromptType::Blur};
  Rgb color{255, 0, 0};
  int thickness = 1;
  int blur_kernel = 15;
  /// <= 0 derives sigma from the kernel size.
  double blur_sigma = 0.0;

  bool has(PromptType t) const;
  bool operator==(const PromptSpec&) const = default;
};

struct CrfParams {
  double gauss_sxy = 3.0;
  double gauss_w = 3.0;
  double bilat_sxy = 80.0;
  double bilat_srgb = 13.0;
  double bilat_w = 10.0;
  int iterations = 10;
  /// Images with at most this many pixels use exact dense message passing.
  int exact_max_pixels = 4096;
  bool operator==(const CrfParams&) const = default;
};

struct PipelineConfig {
  double eta = 0.4;
  double theta = 0.6;
  double lambda = 0.4;
  double phi_iom = 0.7;
  double phi_iou = 0.7;
  PromptSpec prompt;
  int caa_iters = 2;
  int sinkhorn_iters = 50;
  double sinkhorn_tol = 1e-6;
  int last_attn_layers = 8;
  std::vector<std::string> bg_queries;
  bool mutual_background = false;
  /// Queries treated as "stuff" when mutual_background is set.
  std::vector<std::string> stuff_queries;
  bool crf_enabled = true;
  CrfParams crf;
  /// 0 runs until the query set is stable.
  int max_steps = 0;

  /// VOC defaults, background queries from all three built-in lists.
  static PipelineConfig defaults();
  bool operator==(const PipelineConfig&) const = default;
};

/// Every invariant violation, empty when the config is usable.
std::vector<std::string> validate_config(const PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct SegResult {
  LabelMap label_map;
  SoftMaskStack soft_masks;
  QueryState surviving_queries;
  int steps = 0;
};

/// out[p] = m[p] >= eta.
BinMask binarize(const SoftMask& m, double eta);

/// True when every value lies in [0,1].
bool is_unit_interval(const SoftMask& m);

}  // namespace carseg
