#include "carseg/core.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "carseg/background.hpp"

namespace carseg {

// ---------------------------------------------------------------------------
// ImageBuf
// ---------------------------------------------------------------------------

ImageBuf::ImageBuf(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width < 1 || height < 1) throw InvalidArgument("image dimensions must be >= 1");
  data_.resize(3 * static_cast<size_t>(width) * static_cast<size_t>(height));
  for (size_t i = 0; i < data_.size(); i += 3) {
    data_[i] = fill.r;
    data_[i + 1] = fill.g;
    data_[i + 2] = fill.b;
  }
}

ImageBuf::ImageBuf(int width, int height, std::vector<uint8_t> rgb)
    : width_(width), height_(height), data_(std::move(rgb)) {
  if (width < 1 || height < 1) throw InvalidArgument("image dimensions must be >= 1");
  if (data_.size() != 3 * static_cast<size_t>(width) * static_cast<size_t>(height))
    throw InvalidArgument("image byte count does not match dimensions");
}

// ---------------------------------------------------------------------------
// BinMask
// ---------------------------------------------------------------------------

BinMask::BinMask(int width, int height)
    : width_(width), height_(height),
      bits_(static_cast<size_t>(width) * static_cast<size_t>(height), 0) {
  if (width < 0 || height < 0) throw InvalidArgument("negative mask dimension");
}

BinMask::BinMask(int width, int height, std::vector<uint8_t> bits)
    : width_(width), height_(height), bits_(std::move(bits)) {
  if (width < 0 || height < 0) throw InvalidArgument("negative mask dimension");
  if (bits_.size() != static_cast<size_t>(width) * static_cast<size_t>(height))
    throw InvalidArgument("mask bit count does not match dimensions");
  for (auto& b : bits_) {
    b = b ? 1 : 0;
    area_ += b;
  }
}

BinMask::BinMask(const Grid<uint8_t>& bits)
    : BinMask(bits.width(), bits.height(), std::vector<uint8_t>(bits.values().begin(), bits.values().end())) {}

std::optional<BBox> BinMask::bbox() const {
  if (area_ == 0) return std::nullopt;
  BBox box{width_, height_, -1, -1};
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x)
      if ((*this)(x, y)) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x);
        box.y1 = std::max(box.y1, y);
      }
  return box;
}

void BinMask::require_same_shape(const BinMask& other) const {
  if (width_ != other.width_ || height_ != other.height_)
    throw InvalidArgument("mask dimensions differ");
}

BinMask BinMask::intersected(const BinMask& other) const {
  require_same_shape(other);
  std::vector<uint8_t> out(bits_.size());
  for (size_t i = 0; i < bits_.size(); ++i) out[i] = bits_[i] & other.bits_[i];
  return BinMask(width_, height_, std::move(out));
}

BinMask BinMask::united(const BinMask& other) const {
  require_same_shape(other);
  std::vector<uint8_t> out(bits_.size());
  for (size_t i = 0; i < bits_.size(); ++i) out[i] = bits_[i] | other.bits_[i];
  return BinMask(width_, height_, std::move(out));
}

long BinMask::intersection_area(const BinMask& other) const {
  require_same_shape(other);
  long n = 0;
  for (size_t i = 0; i < bits_.size(); ++i) n += bits_[i] & other.bits_[i];
  return n;
}

bool BinMask::is_subset_of(const BinMask& other) const {
  return intersection_area(other) == area_;
}

// ---------------------------------------------------------------------------
// QueryState
// ---------------------------------------------------------------------------

QueryState::QueryState(std::vector<Query> entries, int step) : entries_(std::move(entries)), step_(step) {
  if (step < 0) throw InvalidArgument("query state step must be >= 0");
  for (size_t i = 1; i < entries_.size(); ++i)
    if (entries_[i].original_index <= entries_[i - 1].original_index)
      throw InvalidArgument("query original indices must be strictly increasing");
}

QueryState QueryState::initial(std::span<const std::string> texts) {
  std::set<std::string> seen;
  std::vector<Query> entries;
  entries.reserve(texts.size());
  for (size_t i = 0; i < texts.size(); ++i) {
    if (texts[i].empty()) throw InvalidArgument("empty query text");
    if (!seen.insert(texts[i]).second) throw InvalidArgument("duplicate query text '" + texts[i] + "'");
    entries.push_back({static_cast<int>(i), texts[i]});
  }
  return QueryState(std::move(entries), 0);
}

std::vector<std::string> QueryState::texts() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& q : entries_) out.push_back(q.text);
  return out;
}

std::vector<int> QueryState::original_indices() const {
  std::vector<int> out;
  out.reserve(entries_.size());
  for (const auto& q : entries_) out.push_back(q.original_index);
  return out;
}

QueryState QueryState::filtered(const std::vector<bool>& keep) const {
  if (keep.size() != entries_.size()) throw InvalidArgument("keep flags do not match query count");
  std::vector<Query> out;
  for (size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.push_back(entries_[i]);
  return QueryState(std::move(out), step_ + 1);
}

bool QueryState::is_subset_of(const QueryState& other) const {
  for (const auto& q : entries_)
    if (std::find(other.entries_.begin(), other.entries_.end(), q) == other.entries_.end()) return false;
  return true;
}

// ---------------------------------------------------------------------------
// SimMatrix
// ---------------------------------------------------------------------------

Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      out(i, j) = std::exp(logits(i, j) - m);
      sum += out(i, j);
    }
    out.row(i) /= sum;
  }
  return out;
}

SimMatrix::SimMatrix(Eigen::MatrixXd probabilities) : p_(std::move(probabilities)) {
  if (p_.rows() != p_.cols()) throw InvalidArgument("similarity matrix must be square");
  if (p_.size() > 0 && (!p_.allFinite() || p_.minCoeff() < 0.0 || p_.maxCoeff() > 1.0))
    throw InvalidArgument("similarity entries must lie in [0,1]");
  if (max_row_deviation() >= 1e-5) throw InvalidArgument("similarity rows must sum to 1");
}

SimMatrix SimMatrix::from_logits(const Eigen::MatrixXd& logits) {
  if (!logits.allFinite()) throw InvalidArgument("non-finite logits");
  return SimMatrix(row_softmax(logits));
}

double SimMatrix::max_row_deviation() const {
  double dev = 0.0;
  for (Eigen::Index i = 0; i < p_.rows(); ++i) dev = std::max(dev, std::abs(p_.row(i).sum() - 1.0));
  return dev;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string to_string(PromptType t) {
  switch (t) {
    case PromptType::Blur: return "blur";
    case PromptType::Gray: return "gray";
    case PromptType::Black: return "black";
    case PromptType::Circle: return "circle";
    case PromptType::Rectangle: return "rectangle";
    case PromptType::Contour: return "contour";
  }
  return "?";
}

std::optional<PromptType> parse_prompt_type(std::string_view name) {
  for (auto t : {PromptType::Blur, PromptType::Gray, PromptType::Black, PromptType::Circle,
                 PromptType::Rectangle, PromptType::Contour})
    if (name == to_string(t)) return t;
  return std::nullopt;
}

std::vector<PromptType> parse_prompt_types(std::string_view csv) {
  std::vector<PromptType> out;
  std::string item;
  std::stringstream ss{std::string(csv)};
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, item.find_last_not_of(" \t") - b + 1);
    auto t = parse_prompt_type(item);
    if (!t) throw ConfigError("unknown prompt type '" + item + "'");
    if (std::find(out.begin(), out.end(), *t) == out.end()) out.push_back(*t);
  }
  return out;
}

bool PromptSpec::has(PromptType t) const {
  return std::find(types.begin(), types.end(), t) != types.end();
}

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig cfg;
  cfg.bg_queries = background_queries(BgSet::All);
  return cfg;
}

std::vector<std::string> validate_config(const PipelineConfig& cfg) {
  std::vector<std::string> errs;
  auto unit = [&](const char* name, double v) {
    if (!(v >= 0.0 && v <= 1.0)) errs.push_back(std::string(name) + " out of [0,1]");
  };
  unit("eta", cfg.eta);
  unit("theta", cfg.theta);
  unit("lambda", cfg.lambda);
  unit("phi_iom", cfg.phi_iom);
  unit("phi_iou", cfg.phi_iou);
  if (cfg.prompt.types.empty()) errs.push_back("prompt_types must not be empty");
  if (cfg.prompt.thickness < 1) errs.push_back("prompt thickness must be >= 1");
  if (cfg.prompt.blur_kernel < 3 || cfg.prompt.blur_kernel % 2 == 0)
    errs.push_back("blur_kernel must be odd and >= 3");
  if (cfg.caa_iters < 0) errs.push_back("caa_iters must be >= 0");
  if (cfg.sinkhorn_iters < 1) errs.push_back("sinkhorn_iters must be >= 1");
  if (!(cfg.sinkhorn_tol > 0.0)) errs.push_back("sinkhorn_tol must be > 0");
  if (cfg.last_attn_layers < 1) errs.push_back("last_attn_layers must be >= 1");
  if (cfg.max_steps < 0) errs.push_back("max_steps must be >= 0");
  const auto& c = cfg.crf;
  if (!(c.gauss_sxy > 0 && c.bilat_sxy > 0 && c.bilat_srgb > 0)) errs.push_back("crf kernel widths must be > 0");
  if (c.gauss_w < 0 || c.bilat_w < 0) errs.push_back("crf weights must be >= 0");
  if (c.iterations < 1) errs.push_back("crf iterations must be >= 1");
  if (c.exact_max_pixels < 1) errs.push_back("crf exact_max_pixels must be >= 1");
  return errs;
}

BinMask binarize(const SoftMask& m, double eta) {
  std::vector<uint8_t> bits(m.size());
  for (size_t i = 0; i < m.size(); ++i) bits[i] = m[i] >= eta ? 1 : 0;
  return BinMask(m.width(), m.height(), std::move(bits));
}

bool is_unit_interval(const SoftMask& m) {
  return std::all_of(m.values().begin(), m.values().end(), [](float v) { return v >= 0.f && v <= 1.f; });
}

}  // namespace carseg
