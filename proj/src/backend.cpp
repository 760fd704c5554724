#include "carseg/backend.hpp"

#include <charconv>
#include <cmath>
#include <optional>

#include "carseg/protocol.hpp"
#include "carseg/toy_backend.hpp"

namespace carseg {
namespace {

template <typename T>
T parse_number(std::string_view s, std::string_view what) {
  T v{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size())
    throw ConfigError("backend descriptor: bad " + std::string(what) + " '" + std::string(s) + "'");
  return v;
}

std::unique_ptr<Backend> make_toy(std::string_view opts) {
  uint64_t seed = 0;
  std::optional<uint64_t> world;
  int size = toy::WorldOptions{}.size;
  toy::Params params;
  while (!opts.empty()) {
    const size_t comma = opts.find(',');
    std::string_view item = opts.substr(0, comma);
    opts = comma == std::string_view::npos ? std::string_view{} : opts.substr(comma + 1);
    const size_t eq = item.find('=');
    if (eq == std::string_view::npos) throw ConfigError("backend descriptor: expected key=value, got '" + std::string(item) + "'");
    const std::string_view key = item.substr(0, eq);
    const std::string_view val = item.substr(eq + 1);
    if (key == "seed") {
      seed = parse_number<uint64_t>(val, "seed");
    } else if (key == "grid") {
      params.grid = parse_number<int>(val, "grid");
      if (params.grid < 2 || params.grid > 64) throw ConfigError("backend descriptor: grid must be in [2,64]");
    } else if (key == "world") {
      world = parse_number<uint64_t>(val, "world");
    } else if (key == "size") {
      size = parse_number<int>(val, "size");
    } else {
      throw ConfigError("backend descriptor: unknown toy option '" + std::string(key) + "'");
    }
  }
  if (world) {
    try {
      return std::make_unique<toy::ToyBackend>(toy::make_world(*world, {.size = size}).lexicon, params);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("backend descriptor: ") + e.what());
    }
  }
  return std::make_unique<toy::ToyBackend>(toy::Lexicon(seed), params);
}

}  // namespace

void CamBundle::validate(size_t expected_texts) const {
  if (channels < 1 || height < 1 || width < 1) throw BackendError("activations: empty feature shape");
  if (attn_layers < 1) throw BackendError("activations: no attention layers");
  if (num_fg < 1) throw BackendError("activations: no foreground texts");
  const size_t fsize = static_cast<size_t>(channels) * cells();
  if (features.size() != fsize) throw BackendError("activations: feature array has wrong size");
  if (grads.size() != fsize * static_cast<size_t>(num_fg)) throw BackendError("activations: gradient array has wrong size");
  if (attention.size() != static_cast<size_t>(attn_layers) * cells() * cells())
    throw BackendError("activations: attention array has wrong size");
  if (scores.size() != expected_texts) throw BackendError("activations: score count does not match texts");
  for (float v : attention)
    if (!(v >= 0.0f) || !std::isfinite(v)) throw BackendError("activations: attention entries must be finite and >= 0");
  for (float v : features)
    if (!std::isfinite(v)) throw BackendError("activations: non-finite feature");
  for (float v : grads)
    if (!std::isfinite(v)) throw BackendError("activations: non-finite gradient");
  for (float v : scores)
    if (!std::isfinite(v)) throw BackendError("activations: non-finite score");
}

void require_score_inputs(std::span<const ImageBuf> images, std::span<const std::string> texts) {
  if (images.empty()) throw InvalidArgument("score: no images");
  if (texts.empty()) throw InvalidArgument("score: no texts");
  for (const auto& im : images)
    if (im.empty()) throw InvalidArgument("score: empty image");
}

std::unique_ptr<Backend> make_backend(std::string_view descriptor) {
  if (descriptor == "toy") return make_toy({});
  if (descriptor.starts_with("toy:")) return make_toy(descriptor.substr(4));
  if (descriptor.starts_with("remote:")) {
    const std::string_view rest = descriptor.substr(7);
    const size_t colon = rest.rfind(':');
    if (colon == std::string_view::npos || colon == 0)
      throw ConfigError("backend descriptor: expected remote:HOST:PORT");
    const int port = parse_number<int>(rest.substr(colon + 1), "port");
    if (port < 1 || port > 65535) throw ConfigError("backend descriptor: port out of range");
    return std::make_unique<wire::RemoteBackend>(wire::connect_tcp(std::string(rest.substr(0, colon)), port),
                                                 std::string(descriptor));
  }
  if (descriptor.starts_with("pipe:")) {
    const std::string_view cmd = descriptor.substr(5);
    if (cmd.empty()) throw ConfigError("backend descriptor: pipe needs a command");
    return std::make_unique<wire::RemoteBackend>(wire::spawn_pipe(std::string(cmd)), std::string(descriptor));
  }
  throw ConfigError("unknown backend '" + std::string(descriptor) + "' (expected toy, remote:HOST:PORT or pipe:CMD)");
}

}  // namespace carseg
