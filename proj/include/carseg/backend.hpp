// backend.hpp
//
// The vision-language model sits behind this contract. A backend scores
// images against texts and, for mask proposals, exposes the activations
// needed for gradient CAMs: feature maps, per-query gradients of the softmax
// score with respect to those maps, and a stack of spatial attention maps.
//
// Real backends must tap the feature map after the first normalization layer
// of the last residual block, return attention from the final layers, and
// document the logit scale they apply before the softmax.

#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "carseg/core.hpp"

namespace carseg {

enum class BackendKind { Toy, Remote };

struct Capabilities {
  bool score = true;
  bool activations = true;
};

/// Activations for one image. Arrays are row-major float32:
///   features  [K][h][w]
///   grads     [n_fg][K][h][w]   d softmax_i / d features, i over fg texts
///   attention [L][h*w][h*w]
///   scores    [n_fg + n_bg]     softmax over fg then bg texts
struct CamBundle {
  int channels = 0;
  int height = 0;
  int width = 0;
  int num_fg = 0;
  int attn_layers = 0;
  std::vector<float> features;
  std::vector<float> grads;
  std::vector<float> attention;
  std::vector<float> scores;

  int cells() const { return height * width; }
  float feature(int k, int y, int x) const {
    return features[(static_cast<size_t>(k) * height + y) * width + x];
  }
  float grad(int query, int k, int y, int x) const {
    return grads[((static_cast<size_t>(query) * channels + k) * height + y) * width + x];
  }
  std::span<const float> grad_field(int query) const {
    const size_t n = static_cast<size_t>(channels) * cells();
    return std::span<const float>(grads).subspan(static_cast<size_t>(query) * n, n);
  }
  std::span<const float> attention_layer(int layer) const {
    const size_t n = static_cast<size_t>(cells()) * cells();
    return std::span<const float>(attention).subspan(static_cast<size_t>(layer) * n, n);
  }

  /// Throws BackendError describing the first inconsistency found.
  void validate(size_t expected_texts) const;
};

class Backend {
 public:
  virtual ~Backend() = default;

  virtual BackendKind kind() const = 0;
  virtual Capabilities capabilities() const { return {}; }
  /// Human-readable descriptor, e.g. "toy:seed=7".
  virtual std::string describe() const = 0;

  /// Logits, |images| x |texts|.
  virtual Eigen::MatrixXd score(std::span<const ImageBuf> images, std::span<const std::string> texts) = 0;

  virtual CamBundle activations(const ImageBuf& image, std::span<const std::string> fg_texts,
                                std::span<const std::string> bg_texts) = 0;
};

/// Parses the backend descriptor grammar:
///   toy[:key=value,...]       deterministic in-process toy model; keys seed,
///                             grid, and world/size to load the lexicon of
///                             toy::make_world(world, {.size = size})
///   remote:HOST:PORT          framed JSON protocol over TCP
///   pipe:COMMAND              same protocol over a child's stdin/stdout
/// Throws ConfigError on malformed descriptors, BackendError on connect failure.
std::unique_ptr<Backend> make_backend(std::string_view descriptor);

void require_score_inputs(std::span<const ImageBuf> images, std::span<const std::string> texts);

}  // namespace carseg
