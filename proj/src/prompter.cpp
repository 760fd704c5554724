#include "carseg/prompter.hpp"

#include <algorithm>
#include <cmath>

namespace carseg {

double default_blur_sigma(int kernel) { return 0.3 * ((kernel - 1) * 0.5 - 1.0) + 0.8; }

std::vector<double> gaussian_kernel(int kernel, double sigma) {
  if (kernel < 1 || kernel % 2 == 0) throw InvalidArgument("blur kernel must be a positive odd number");
  if (!(sigma > 0.0)) sigma = default_blur_sigma(kernel);
  const int r = kernel / 2;
  std::vector<double> taps(static_cast<size_t>(kernel));
  double sum = 0.0;
  for (int i = 0; i < kernel; ++i) {
    const double d = i - r;
    taps[static_cast<size_t>(i)] = std::exp(-(d * d) / (2.0 * sigma * sigma));
    sum += taps[static_cast<size_t>(i)];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

ImageBuf gaussian_blur(const ImageBuf& image, int kernel, double sigma) {
  const std::vector<double> taps = gaussian_kernel(kernel, sigma);
  if (kernel == 1) return image;
  const int w = image.width(), h = image.height(), r = kernel / 2;
  const auto src = image.bytes();
  std::vector<double> tmp(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = 0; i < kernel; ++i) {
          const int sx = std::clamp(x + i - r, 0, w - 1);
          acc += taps[static_cast<size_t>(i)] * src[3 * (static_cast<size_t>(y) * w + sx) + c];
        }
        tmp[3 * (static_cast<size_t>(y) * w + x) + c] = acc;
      }
  ImageBuf out(w, h);
  auto dst = out.bytes();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = 0; i < kernel; ++i) {
          const int sy = std::clamp(y + i - r, 0, h - 1);
          acc += taps[static_cast<size_t>(i)] * tmp[3 * (static_cast<size_t>(sy) * w + x) + c];
        }
        dst[3 * (static_cast<size_t>(y) * w + x) + c] = static_cast<uint8_t>(std::clamp(std::floor(acc + 0.5), 0.0, 255.0));
      }
  return out;
}

uint8_t luma(Rgb c) { return static_cast<uint8_t>((299 * c.r + 587 * c.g + 114 * c.b + 500) / 1000); }

BinMask fill_holes(const BinMask& mask) {
  const int w = mask.width(), h = mask.height();
  std::vector<uint8_t> outside(static_cast<size_t>(w) * h, 0);
  std::vector<int> stack;
  auto seed = [&](int x, int y) {
    const size_t i = static_cast<size_t>(y) * w + x;
    if (!mask.at(i) && !outside[i]) {
      outside[i] = 1;
      stack.push_back(static_cast<int>(i));
    }
  };
  for (int x = 0; x < w; ++x) {
    seed(x, 0);
    seed(x, h - 1);
  }
  for (int y = 0; y < h; ++y) {
    seed(0, y);
    seed(w - 1, y);
  }
  while (!stack.empty()) {
    const int p = stack.back();
    stack.pop_back();
    const int x = p % w, y = p / w;
    if (x > 0) seed(x - 1, y);
    if (x + 1 < w) seed(x + 1, y);
    if (y > 0) seed(x, y - 1);
    if (y + 1 < h) seed(x, y + 1);
  }
  for (auto& v : outside) v = v ? 0 : 1;
  return BinMask(w, h, std::move(outside));
}

BinMask mask_boundary(const BinMask& mask) {
  const int w = mask.width(), h = mask.height();
  std::vector<uint8_t> out(static_cast<size_t>(w) * h, 0);
  auto in = [&](int x, int y) { return x >= 0 && y >= 0 && x < w && y < h && mask(x, y); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask(x, y) && (!in(x - 1, y) || !in(x + 1, y) || !in(x, y - 1) || !in(x, y + 1)))
        out[static_cast<size_t>(y) * w + x] = 1;
  return BinMask(w, h, std::move(out));
}

std::vector<std::pair<int, int>> ellipse_outline(int cx, int cy, int ax, int ay) {
  std::vector<std::pair<int, int>> pts;
  if (ax < 0 || ay < 0) throw InvalidArgument("ellipse axes must be >= 0");
  if (ax == 0 || ay == 0) {
    for (int dx = -ax; dx <= ax; ++dx)
      for (int dy = -ay; dy <= ay; ++dy) pts.emplace_back(cx + dx, cy + dy);
    return pts;
  }
  auto plot4 = [&](long x, long y) {
    pts.emplace_back(cx + x, cy + y);
    pts.emplace_back(cx - x, cy + y);
    pts.emplace_back(cx - x, cy - y);
    pts.emplace_back(cx + x, cy - y);
  };
  const long a = ax, b = ay;
  const long two_a2 = 2 * a * a, two_b2 = 2 * b * b;
  // Region where the slope is steeper than -1: step y, sometimes x.
  long x = a, y = 0;
  long xchange = b * b * (1 - 2 * a), ychange = a * a, err = 0;
  long stop_x = two_b2 * a, stop_y = 0;
  while (stop_x >= stop_y) {
    plot4(x, y);
    ++y;
    stop_y += two_a2;
    err += ychange;
    ychange += two_a2;
    if (2 * err + xchange > 0) {
      --x;
      stop_x -= two_b2;
      err += xchange;
      xchange += two_b2;
    }
  }
  // Remaining region: step x, sometimes y.
  x = 0;
  y = b;
  xchange = b * b;
  ychange = a * a * (1 - 2 * b);
  err = 0;
  stop_x = 0;
  stop_y = two_a2 * b;
  while (stop_x <= stop_y) {
    plot4(x, y);
    ++x;
    stop_x += two_b2;
    err += xchange;
    xchange += two_b2;
    if (2 * err + ychange > 0) {
      --y;
      stop_y -= two_a2;
      err += ychange;
      ychange += two_a2;
    }
  }
  return pts;
}

void draw_points(ImageBuf& image, const std::vector<std::pair<int, int>>& points, Rgb color, int thickness) {
  if (thickness < 1) throw InvalidArgument("thickness must be >= 1");
  const int lo = -(thickness - 1) / 2, hi = thickness / 2;
  for (const auto& [px, py] : points)
    for (int dy = lo; dy <= hi; ++dy)
      for (int dx = lo; dx <= hi; ++dx) {
        const int x = px + dx, y = py + dy;
        if (x >= 0 && y >= 0 && x < image.width() && y < image.height()) image.set_pixel(x, y, color);
      }
}

void draw_ellipse(ImageBuf& image, int cx, int cy, int ax, int ay, Rgb color, int thickness) {
  draw_points(image, ellipse_outline(cx, cy, ax, ay), color, thickness);
}

void draw_rectangle(ImageBuf& image, int x0, int y0, int x1, int y1, Rgb color, int thickness) {
  if (x0 > x1) std::swap(x0, x1);
  if (y0 > y1) std::swap(y0, y1);
  std::vector<std::pair<int, int>> pts;
  for (int x = x0; x <= x1; ++x) {
    pts.emplace_back(x, y0);
    pts.emplace_back(x, y1);
  }
  for (int y = y0 + 1; y < y1; ++y) {
    pts.emplace_back(x0, y);
    pts.emplace_back(x1, y);
  }
  draw_points(image, pts, color, thickness);
}

void validate_prompt_spec(const PromptSpec& spec) {
  if (spec.types.empty()) throw InvalidArgument("prompt types must not be empty");
  if (spec.thickness < 1) throw InvalidArgument("prompt thickness must be >= 1");
  if (spec.blur_kernel < 3 || spec.blur_kernel % 2 == 0) throw InvalidArgument("blur kernel must be odd and >= 3");
}

ImageBuf apply_visual_prompts(const ImageBuf& image, const BinMask& mask, const PromptSpec& spec) {
  validate_prompt_spec(spec);
  if (mask.width() != image.width() || mask.height() != image.height())
    throw InvalidArgument("prompt mask does not match image size");
  const bool shapes = spec.has(PromptType::Circle) || spec.has(PromptType::Rectangle) || spec.has(PromptType::Contour);
  if (shapes && mask.empty()) throw EmptyMaskError();

  ImageBuf out = image;
  const int w = image.width(), h = image.height();
  auto outside = [&](auto&& fn) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (!mask(x, y)) fn(x, y);
  };
  if (spec.has(PromptType::Blur)) {
    const ImageBuf blurred = gaussian_blur(out, spec.blur_kernel, spec.blur_sigma);
    outside([&](int x, int y) { out.set_pixel(x, y, blurred.pixel(x, y)); });
  }
  if (spec.has(PromptType::Gray)) {
    outside([&](int x, int y) {
      const uint8_t v = luma(out.pixel(x, y));
      out.set_pixel(x, y, {v, v, v});
    });
  }
  if (spec.has(PromptType::Black)) outside([&](int x, int y) { out.set_pixel(x, y, {0, 0, 0}); });

  if (shapes) {
    const BBox box = *mask.bbox();
    const int bw = box.width(), bh = box.height();
    const int cx = box.x0 + bw / 2, cy = box.y0 + bh / 2;
    if (spec.has(PromptType::Circle)) draw_ellipse(out, cx, cy, bw / 2, bh / 2, spec.color, spec.thickness);
    if (spec.has(PromptType::Rectangle))
      draw_rectangle(out, cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2, spec.color, spec.thickness);
    if (spec.has(PromptType::Contour)) {
      const BinMask edge = mask_boundary(fill_holes(mask));
      std::vector<std::pair<int, int>> pts;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (edge(x, y)) pts.emplace_back(x, y);
      draw_points(out, pts, spec.color, spec.thickness);
    }
  }
  return out;
}

}  // namespace carseg
