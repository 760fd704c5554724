// recurrence.hpp
//
// The recurrent unit: propose masks for the surviving queries, prompt the
// image with each binarised mask, classify every prompted image against the
// surviving queries and drop queries whose own score falls below theta.
// The loop stops when a step removes nothing or nothing is left.

#pragma once

#include <string>
#include <vector>

#include "carseg/backend.hpp"
#include "carseg/core.hpp"

namespace carseg {

struct MaskStat {
  int original_index = 0;
  long area = 0;
  double mean = 0.0;
  double max = 0.0;
};

struct StepTrace {
  int step = 0;
  std::vector<Query> queries_in;
  std::vector<double> diag_scores;
  std::vector<Query> queries_out;
  std::vector<MaskStat> masks;
};

/// Row-wise softmax of backend.score(prompted, queries). Requires
/// |prompted| = |queries|.
SimMatrix classify(Backend& backend, std::span<const ImageBuf> prompted, const QueryState& queries);

/// Queries i with P(i,i) >= theta.
QueryState sigma_filter(const SimMatrix& p, const QueryState& queries, double theta);

struct RecurrenceResult {
  SoftMaskStack masks;
  QueryState surviving;
  int steps = 0;
  std::vector<StepTrace> trace;
  /// Prompted images of every step, kept only when requested.
  std::vector<std::vector<ImageBuf>> prompted;
};

struct RunOptions {
  bool keep_prompts = false;
};

/// Full loop from the user's queries. Queries with an empty binarised mask
/// cannot be prompted and score 0 on the diagonal.
RecurrenceResult run_recurrence(Backend& backend, const ImageBuf& image, std::span<const std::string> h0,
                                const PipelineConfig& cfg, const RunOptions& opts = {});

/// Proposals of the first step for every query, without filtering.
RecurrenceResult run_without_recurrence(Backend& backend, const ImageBuf& image, std::span<const std::string> h0,
                                        const PipelineConfig& cfg);

/// One JSON object per step.
std::string trace_to_jsonl(const std::vector<StepTrace>& trace);

}  // namespace carseg
