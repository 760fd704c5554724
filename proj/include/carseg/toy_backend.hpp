// toy_backend.hpp
//
// A deterministic, analytically differentiable stand-in for a
// vision-language model, plus a generator for synthetic scenes with known
// ground truth.
//
// Model. A fixed palette of 24 colours defines K = 24 feature channels. The
// feature map is a G x G grid of cells; channel k of a cell is the mean over
// its pixels of max(0, 1 - |rgb - palette[k]| / radius). Every text maps to a
// lexeme (primary channel, secondary channel, beta) and so to a template
// vector T = e_primary + beta * e_secondary. Logits are
//
//   l_j = scale * sum_k T_jk * sum_p w_p A_kp^2 / sum_p w_p
//
// with scores s = softmax(l) over all texts. The pooling weights w mimic the
// effect of a red visual prompt on attention: if the image contains pure
// (255,0,0) pixels, cells intersecting their bounding box get weight 1 and
// all other cells get `focus_outside`; otherwise all weights are 1. Blur-only
// prompts therefore carry no focus signal in this model.
//
// Gradients are exact:
//   d s_i / d A_kp = s_i * (2 scale w_p A_kp / W) * (T_ik - sum_j s_j T_jk).
//
// Attention layer l couples cells p, q with
//   exp(-d(p,q)^2 / (2 rho_l^2)) * (0.05 + exp(-|f_p - f_q|^2 / 0.1)),
// row-normalised; rho_l = 0.8 + 0.1 l. The logit scale is 40.
//
// Channels 0-15 are "object" colours, 16-23 "stuff" colours. Texts from the
// built-in background lists hash into the stuff range, everything else into
// the object range, and secondaries stay within the same range.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "carseg/backend.hpp"

namespace carseg::toy {

inline constexpr int kChannels = 24;
inline constexpr int kObjectChannels = 16;

/// Palette colour of a channel, in [0,1].
std::array<double, 3> palette(int channel);
/// round(255 * palette(channel)).
Rgb palette_rgb(int channel);

struct Lexeme {
  int primary = 0;
  int secondary = 1;
  double beta = 0.0;
  bool operator==(const Lexeme&) const = default;
};

class Lexicon {
 public:
  explicit Lexicon(uint64_t seed = 0) : seed_(seed) {}

  uint64_t seed() const { return seed_; }
  /// Override first, hash-derived lexeme otherwise.
  Lexeme lookup(std::string_view text) const;
  void set(std::string text, Lexeme lexeme);
  const std::map<std::string, Lexeme, std::less<>>& overrides() const { return overrides_; }

  std::array<double, kChannels> template_vector(std::string_view text) const;

 private:
  uint64_t seed_;
  std::map<std::string, Lexeme, std::less<>> overrides_;
};

struct Params {
  int grid = 16;
  double logit_scale = 40.0;
  double radius = 0.15;
  double focus_outside = 0.05;
  int attn_layers = 12;
};

class ToyBackend final : public Backend {
 public:
  explicit ToyBackend(Lexicon lexicon, Params params = {});

  BackendKind kind() const override { return BackendKind::Toy; }
  std::string describe() const override;
  Eigen::MatrixXd score(std::span<const ImageBuf> images, std::span<const std::string> texts) override;
  CamBundle activations(const ImageBuf& image, std::span<const std::string> fg_texts,
                        std::span<const std::string> bg_texts) override;

  const Lexicon& lexicon() const { return lexicon_; }
  const Params& params() const { return params_; }

  /// Feature map [K][G][G] in double.
  std::vector<double> features(const ImageBuf& image) const;
  /// Pooling weights [G][G].
  std::vector<double> pooling_weights(const ImageBuf& image) const;
  std::vector<double> logits(std::span<const double> features, std::span<const double> weights,
                             std::span<const std::string> texts) const;
  /// softmax(logits(...)).
  std::vector<double> softmax_scores(std::span<const double> features, std::span<const double> weights,
                                     std::span<const std::string> texts) const;
  /// Closed-form d s_i / d A for the first num_fg texts, [num_fg][K][G][G].
  std::vector<double> analytic_grads(std::span<const double> features, std::span<const double> weights,
                                     std::span<const std::string> texts, int num_fg) const;
  /// [L][G*G][G*G] attention stack.
  std::vector<double> attention(std::span<const double> features) const;

 private:
  Lexicon lexicon_;
  Params params_;
};

/// Central differences of `scores` (first num_fg outputs) with respect to
/// every entry of `features`, [num_fg][features.size()].
std::vector<double> finite_diff_grads(
    const std::function<std::vector<double>(std::span<const double>)>& scores,
    std::span<const double> features, int num_fg, double eps);

/// Finite-difference oracle for a toy backend, same layout as analytic_grads.
std::vector<double> toy_finite_diff_grads(const ToyBackend& backend, const ImageBuf& image,
                                          std::span<const std::string> fg_texts,
                                          std::span<const std::string> bg_texts, double eps);

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

struct Concept {
  std::string text;
  BinMask mask;
  /// 1 paints the palette colour exactly, smaller values blend toward the background.
  double amplitude = 1.0;
};

/// Unqueried scene regions painted with a background text's colour.
struct StuffRegion {
  std::string text;
  BinMask mask;
};

struct SceneSpec {
  int width = 64;
  int height = 64;
  Rgb background{128, 128, 128};
  std::vector<Concept> concepts;
  std::vector<StuffRegion> stuff;

  /// Throws InvalidArgument on duplicate concept texts or mis-sized masks.
  void validate() const;
};

ImageBuf render_scene(const SceneSpec& scene, const Lexicon& lexicon);
/// Concept pixels get the index of the concept's text in `queries`.
LabelMap scene_ground_truth(const SceneSpec& scene, std::span<const std::string> queries);

struct WorldOptions {
  int size = 64;
  int planted = 3;
  int absent = 2;
  int stuff = 1;
  /// Texts stuff regions are drawn from; empty means all built-in lists.
  std::vector<std::string> stuff_pool;
};

/// A scene, the lexicon that makes its planted concepts recognisable, and
/// the query list (planted and absent texts, shuffled).
struct World {
  SceneSpec scene;
  Lexicon lexicon;
  std::vector<std::string> queries;
  std::vector<std::string> planted;
  std::vector<std::string> absent;
  ImageBuf image;
  LabelMap ground_truth;
};

/// Planted concepts get distinct object colours, secondaries on unused
/// channels with beta in [0,0.3]; absent queries get unused primaries and a
/// secondary on a planted concept with beta in [0.5,0.8].
World make_world(uint64_t seed, const WorldOptions& options = {});

}  // namespace carseg::toy
