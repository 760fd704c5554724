#include "carseg/recurrence.hpp"

#include <algorithm>

#include "json.hpp"

#include "carseg/camgen.hpp"
#include "carseg/prompter.hpp"

namespace carseg {
namespace {

MaskStat stat_of(int index, const SoftMask& m, const BinMask& bin) {
  MaskStat s;
  s.original_index = index;
  s.area = bin.area();
  double sum = 0.0, mx = 0.0;
  for (float v : m.values()) {
    sum += v;
    mx = std::max(mx, static_cast<double>(v));
  }
  s.mean = m.size() ? sum / static_cast<double>(m.size()) : 0.0;
  s.max = mx;
  return s;
}

nlohmann::json queries_json(const std::vector<Query>& qs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& q : qs) out.push_back({{"index", q.original_index}, {"text", q.text}});
  return out;
}

}  // namespace

SimMatrix classify(Backend& backend, std::span<const ImageBuf> prompted, const QueryState& queries) {
  if (prompted.size() != queries.size()) throw InvalidArgument("classify: one prompted image per query required");
  if (queries.empty()) return SimMatrix(Eigen::MatrixXd(0, 0));
  const std::vector<std::string> texts = queries.texts();
  const Eigen::MatrixXd logits = backend.score(prompted, texts);
  if (logits.rows() != static_cast<Eigen::Index>(prompted.size()) || logits.cols() != static_cast<Eigen::Index>(texts.size()))
    throw BackendError("score: reply shape does not match request");
  return SimMatrix::from_logits(logits);
}

QueryState sigma_filter(const SimMatrix& p, const QueryState& queries, double theta) {
  if (p.size() != static_cast<Eigen::Index>(queries.size())) throw InvalidArgument("sigma_filter: size mismatch");
  std::vector<bool> keep(queries.size());
  for (size_t i = 0; i < keep.size(); ++i) keep[i] = p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) >= theta;
  return queries.filtered(keep);
}

RecurrenceResult run_recurrence(Backend& backend, const ImageBuf& image, std::span<const std::string> h0,
                                const PipelineConfig& cfg, const RunOptions& opts) {
  if (h0.empty()) throw InvalidArgument("at least one query is required");
  QueryState h = QueryState::initial(h0);
  RecurrenceResult res;
  for (;;) {
    const SoftMaskStack masks = propose_masks(backend, image, h, cfg);
    const std::vector<std::string> texts = h.texts();
    StepTrace tr;
    tr.step = res.steps + 1;
    tr.queries_in = h.entries();
    tr.diag_scores.assign(h.size(), 0.0);

    // Only queries with a non-empty mask can be prompted; they are scored
    // against all surviving texts.
    std::vector<ImageBuf> prompted;
    std::vector<size_t> rows;
    for (size_t i = 0; i < h.size(); ++i) {
      const BinMask bin = binarize(masks[i], cfg.eta);
      tr.masks.push_back(stat_of(h[i].original_index, masks[i], bin));
      if (bin.empty()) continue;
      prompted.push_back(apply_visual_prompts(image, bin, cfg.prompt));
      rows.push_back(i);
    }
    if (!prompted.empty()) {
      const Eigen::MatrixXd logits = backend.score(prompted, texts);
      if (logits.rows() != static_cast<Eigen::Index>(prompted.size()) ||
          logits.cols() != static_cast<Eigen::Index>(texts.size()))
        throw BackendError("score: reply shape does not match request");
      const Eigen::MatrixXd p = row_softmax(logits);
      for (size_t r = 0; r < rows.size(); ++r)
        tr.diag_scores[rows[r]] = p(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(rows[r]));
    }
    std::vector<bool> keep(h.size());
    for (size_t i = 0; i < keep.size(); ++i) keep[i] = tr.diag_scores[i] >= cfg.theta;
    const QueryState next = h.filtered(keep);
    tr.queries_out = next.entries();
    res.trace.push_back(std::move(tr));
    if (opts.keep_prompts) res.prompted.push_back(std::move(prompted));
    ++res.steps;

    const bool stable = next.size() == h.size();
    const bool truncated = cfg.max_steps > 0 && res.steps >= cfg.max_steps;
    if (stable || next.empty() || truncated) {
      res.masks.clear();
      for (size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) res.masks.push_back(masks[i]);
      res.surviving = next;
      return res;
    }
    h = next;
  }
}

RecurrenceResult run_without_recurrence(Backend& backend, const ImageBuf& image, std::span<const std::string> h0,
                                        const PipelineConfig& cfg) {
  if (h0.empty()) throw InvalidArgument("at least one query is required");
  const QueryState h = QueryState::initial(h0);
  RecurrenceResult res;
  res.masks = propose_masks(backend, image, h, cfg);
  res.surviving = h;
  res.steps = 1;
  return res;
}

std::string trace_to_jsonl(const std::vector<StepTrace>& trace) {
  std::string out;
  for (const auto& t : trace) {
    nlohmann::json masks = nlohmann::json::array();
    for (const auto& m : t.masks)
      masks.push_back({{"index", m.original_index}, {"area", m.area}, {"mean", m.mean}, {"max", m.max}});
    const nlohmann::json line{{"step", t.step},
                              {"queries_in", queries_json(t.queries_in)},
                              {"diag_scores", t.diag_scores},
                              {"queries_out", queries_json(t.queries_out)},
                              {"masks", masks}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

}  // namespace carseg
