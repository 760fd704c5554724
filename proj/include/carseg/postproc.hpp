// postproc.hpp
//
// Dense CRF refinement of the final soft masks, argmax to a label map, and
// the optional ensemble with externally supplied proposal masks.
//
// CRF. Channels are the query masks followed by one background channel.
// Unary U = -log p with p the per-pixel renormalised channel values. Mean
// field with Potts compatibility updates Q_l ∝ exp(-U_l + m_l), where m_l is
// the kernel-weighted sum of Q_l over all other pixels. Both kernels, the
// spatial Gaussian and the bilateral one, exclude the pixel itself and are
// symmetrically normalised by 1/sqrt(d_p d_q). Images up to
// CrfParams::exact_max_pixels are solved with a dense kernel matrix; larger
// images run the dense solver on a box-downsampled grid and apply the
// upsampled messages once at full resolution.

#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "carseg/core.hpp"

namespace carseg {

/// Per-pixel distribution over channels, stored [C][H*W].
struct ProbMap {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  ProbMap() = default;
  ProbMap(int w, int h, int c) : width(w), height(h), channels(c), data(static_cast<size_t>(c) * w * h, 0.0f) {}
  size_t pixels() const { return static_cast<size_t>(width) * height; }
  float& at(int c, size_t p) { return data[static_cast<size_t>(c) * pixels() + p]; }
  float at(int c, size_t p) const { return data[static_cast<size_t>(c) * pixels() + p]; }
  /// max over pixels of |sum_c Q - 1|.
  double max_simplex_deviation() const;
};

/// 1 - max over masks, or all ones when there are none.
SoftMask background_channel(const SoftMaskStack& masks, int width, int height);

/// Masks then background, renormalised per pixel (uniform where all are 0).
ProbMap unary_probabilities(const SoftMaskStack& masks, const SoftMask& background);

/// softmax(-U) with U = -log(max(p, 1e-8)).
ProbMap unary_softmax(const ProbMap& p);

using CrfObserver = std::function<void(int iteration, const ProbMap& q)>;

ProbMap crf_refine(const ImageBuf& image, const SoftMaskStack& masks, const SoftMask& background, const CrfParams& params,
                   const CrfObserver& observer = {});

/// Index of the largest channel per pixel, ties to the lowest. Channel c <
/// labels.size() maps to labels[c]; any later channel maps to kBackground.
LabelMap argmax_labels(const ProbMap& q, std::span<const int> labels);

double iom(const BinMask& a, const BinMask& b);
/// 0 for two empty masks.
double iou(const BinMask& a, const BinMask& b);

struct ProposalSet {
  std::vector<BinMask> masks;
};

/// Every *.png in dir, in file-name order; nonzero pixels are foreground.
ProposalSet load_proposal_dir(const std::filesystem::path& dir);
/// One proposal per distinct nonzero value of a single-channel PNG, in value order.
ProposalSet load_indexed_proposals(const std::filesystem::path& png);
/// dir/<stem>/*.png if that directory exists, else dir/<stem>.png, else empty.
ProposalSet load_proposals_for(const std::filesystem::path& dir, const std::string& stem);

/// Each proposal joins the CRF mask it overlaps most (IoM >= phi_iom; ties
/// to the larger CRF mask, then the lower position). A CRF mask is replaced
/// by the union of its proposals when their IoU is >= phi_iou.
std::vector<BinMask> sam_ensemble(const std::vector<BinMask>& crf_masks, const ProposalSet& proposals, double phi_iom,
                                  double phi_iou);

/// One mask per label, in order.
std::vector<BinMask> masks_from_labels(const LabelMap& labels, std::span<const int> ids);
/// Rebuilds a label map. A pixel claimed by several masks keeps its label in
/// `prior` when that label is among the claimants, else takes the first
/// claimant; unclaimed pixels are background.
LabelMap labels_from_masks(const std::vector<BinMask>& masks, std::span<const int> ids, const LabelMap& prior);

}  // namespace carseg
