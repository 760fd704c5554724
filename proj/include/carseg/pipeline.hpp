// pipeline.hpp
//
// End-to-end segmentation of one image: recurrence, CRF, argmax and the
// optional proposal ensemble.

#pragma once

#include <string>
#include <vector>

#include "carseg/backend.hpp"
#include "carseg/core.hpp"
#include "carseg/postproc.hpp"
#include "carseg/recurrence.hpp"

namespace carseg {

struct SegmentOptions {
  /// External proposals to ensemble with; null or empty skips the step.
  const ProposalSet* proposals = nullptr;
  bool keep_prompts = false;
};

struct SegmentOutput {
  SegResult result;
  std::vector<StepTrace> trace;
  std::vector<std::vector<ImageBuf>> prompted;
};

/// Throws ConfigError listing every violation when cfg is unusable.
void require_valid_config(const PipelineConfig& cfg);

/// CRF (when enabled) or plain unary argmax, then the proposal ensemble.
LabelMap finalize_labels(const ImageBuf& image, const SoftMaskStack& masks, const QueryState& surviving,
                         const PipelineConfig& cfg, const ProposalSet* proposals = nullptr);

SegmentOutput segment(Backend& backend, const ImageBuf& image, std::span<const std::string> queries,
                      const PipelineConfig& cfg, const SegmentOptions& opts = {});

/// Same post-processing on the first step's proposals for every query.
SegResult segment_without_recurrence(Backend& backend, const ImageBuf& image, std::span<const std::string> queries,
                                     const PipelineConfig& cfg);

}  // namespace carseg
