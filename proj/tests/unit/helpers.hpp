// Shared fixtures for the unit suites.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "carseg/core.hpp"

namespace carseg::test {

inline SoftMask soft(int w, int h, std::vector<float> v) { return SoftMask(w, h, std::move(v)); }

inline BinMask bin(int w, int h, std::vector<uint8_t> v) { return BinMask(w, h, std::move(v)); }

inline BinMask random_mask(std::mt19937_64& rng, int w, int h, double p = 0.5) {
  std::bernoulli_distribution d(p);
  std::vector<uint8_t> bits(static_cast<size_t>(w) * h);
  for (auto& b : bits) b = d(rng);
  return BinMask(w, h, std::move(bits));
}

inline BinMask rect_mask(int w, int h, int x0, int y0, int x1, int y1) {
  std::vector<uint8_t> bits(static_cast<size_t>(w) * h, 0);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) bits[static_cast<size_t>(y) * w + x] = 1;
  return BinMask(w, h, std::move(bits));
}

inline ImageBuf random_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_int_distribution<int> d(0, 255);
  std::vector<uint8_t> px(static_cast<size_t>(w) * h * 3);
  for (auto& p : px) p = static_cast<uint8_t>(d(rng));
  return ImageBuf(w, h, std::move(px));
}

inline std::vector<std::string> strings(std::initializer_list<const char*> l) {
  return std::vector<std::string>(l.begin(), l.end());
}

}  // namespace carseg::test
