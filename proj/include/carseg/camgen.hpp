// camgen.hpp
//
// Mask proposals from backend activations: gradient CAMs refined by a
// Sinkhorn-normalised attention affinity restricted to CAM boxes.

#pragma once

#include <vector>

#include <Eigen/Dense>

#include "carseg/backend.hpp"
#include "carseg/core.hpp"

namespace carseg {

/// alpha_k = mean(grad_k), L = ReLU(sum_k alpha_k A^k), then L / max(L)
/// (all zero if max(L) = 0). Resolution is the bundle's h x w.
SoftMask gradcam(const CamBundle& bundle, int query_index);

struct SinkhornResult {
  Eigen::MatrixXd matrix;
  int iterations = 0;
  /// max |row sum - 1| and |col sum - 1| at exit.
  double deviation = 0.0;
};

/// Alternating row/column normalisation. Stops after `max_iters` rounds or
/// once the deviation is below `tol`. Throws InvalidArgument for negative
/// entries or an all-zero row or column.
SinkhornResult sinkhorn(const Eigen::MatrixXd& w, int max_iters, double tol = 1e-6);

struct AffinityMatrix {
  Eigen::MatrixXd a;
  /// Sinkhorn rounds that produced the source matrix.
  int iters_applied = 0;
};

/// (D + D^T) / 2.
AffinityMatrix symmetric_affinity(const Eigen::MatrixXd& d);

/// Elementwise mean of the last `layers` attention maps (all if fewer).
Eigen::MatrixXd mean_attention(const CamBundle& bundle, int layers);

struct BoxMask {
  BinMask mask;
  /// One box per 8-connected component of the thresholded CAM.
  std::vector<BBox> boxes;
};

/// Union of the bounding boxes of the connected components of m >= lambda.
BoxMask box_mask(const SoftMask& m, double lambda);

/// box ⊙ (A^t vec(m)), then max-normalised. A^t is applied as t successive
/// matrix-vector products.
std::vector<double> caa_refine(std::span<const double> m, const Eigen::MatrixXd& a, std::span<const uint8_t> box,
                               int t);
SoftMask caa_refine(const SoftMask& m, const AffinityMatrix& a, const BoxMask& box, int t);

/// Half-pixel-centred bilinear resampling with edge clamping.
SoftMask upsample_bilinear(const SoftMask& m, int width, int height);

/// Background texts for a set of foreground texts: cfg.bg_queries minus
/// anything already in fg.
std::vector<std::string> effective_background(std::span<const std::string> fg, const PipelineConfig& cfg);

/// One image-resolution soft mask per query in h, in order.
SoftMaskStack propose_masks(Backend& backend, const ImageBuf& image, const QueryState& h, const PipelineConfig& cfg);

}  // namespace carseg
