#include "carseg/pipeline.hpp"

namespace carseg {

void require_valid_config(const PipelineConfig& cfg) {
  const std::vector<std::string> errs = validate_config(cfg);
  if (errs.empty()) return;
  std::string msg = "invalid configuration: " + errs.front();
  for (size_t i = 1; i < errs.size(); ++i) msg += "; " + errs[i];
  throw ConfigError(msg);
}

LabelMap finalize_labels(const ImageBuf& image, const SoftMaskStack& masks, const QueryState& surviving,
                         const PipelineConfig& cfg, const ProposalSet* proposals) {
  if (masks.size() != surviving.size()) throw InvalidArgument("one mask per surviving query required");
  if (masks.empty()) return LabelMap(image.width(), image.height(), kBackground);
  const std::vector<int> ids = surviving.original_indices();
  const SoftMask bg = background_channel(masks, image.width(), image.height());
  const ProbMap q = cfg.crf_enabled ? crf_refine(image, masks, bg, cfg.crf) : unary_probabilities(masks, bg);
  LabelMap labels = argmax_labels(q, ids);
  if (proposals && !proposals->masks.empty()) {
    const std::vector<BinMask> merged =
        sam_ensemble(masks_from_labels(labels, ids), *proposals, cfg.phi_iom, cfg.phi_iou);
    labels = labels_from_masks(merged, ids, labels);
  }
  return labels;
}

SegmentOutput segment(Backend& backend, const ImageBuf& image, std::span<const std::string> queries,
                      const PipelineConfig& cfg, const SegmentOptions& opts) {
  require_valid_config(cfg);
  RunOptions ro;
  ro.keep_prompts = opts.keep_prompts;
  RecurrenceResult rec = run_recurrence(backend, image, queries, cfg, ro);
  SegmentOutput out;
  out.result.label_map = finalize_labels(image, rec.masks, rec.surviving, cfg, opts.proposals);
  out.result.soft_masks = std::move(rec.masks);
  out.result.surviving_queries = std::move(rec.surviving);
  out.result.steps = rec.steps;
  out.trace = std::move(rec.trace);
  out.prompted = std::move(rec.prompted);
  return out;
}

SegResult segment_without_recurrence(Backend& backend, const ImageBuf& image, std::span<const std::string> queries,
                                     const PipelineConfig& cfg) {
  require_valid_config(cfg);
  RecurrenceResult rec = run_without_recurrence(backend, image, queries, cfg);
  SegResult r;
  r.label_map = finalize_labels(image, rec.masks, rec.surviving, cfg, nullptr);
  r.soft_masks = std::move(rec.masks);
  r.surviving_queries = std::move(rec.surviving);
  r.steps = rec.steps;
  return r;
}

}  // namespace carseg
