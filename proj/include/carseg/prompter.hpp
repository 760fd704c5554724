// prompter.hpp
//
// Visual prompts drawn on an image from a binary mask. All rasterisation is
// integer-exact; blur is the only floating-point step and rounds once.
//
// Geometry, for a mask whose bounding box has width W and height H starting
// at (x0, y0):
//   center       (x0 + W/2, y0 + H/2), integer division
//   circle       ellipse with semi-axes (W/2, H/2) around the center
//   rectangle    outline from center - (W/2, H/2) to center + (W/2, H/2)
//   contour      boundary pixels of the hole-filled mask
// Strokes wider than one pixel stamp a thickness x thickness square on every
// stroke pixel.

#pragma once

#include <utility>
#include <vector>

#include "carseg/core.hpp"

namespace carseg {

/// 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8.
double default_blur_sigma(int kernel);

/// Normalised 1-D taps, size `kernel`. sigma <= 0 uses default_blur_sigma.
std::vector<double> gaussian_kernel(int kernel, double sigma);

/// Separable blur with replicated borders, accumulated in double and rounded
/// half-up once. Kernel 1 is the identity. Throws InvalidArgument for even kernels.
ImageBuf gaussian_blur(const ImageBuf& image, int kernel, double sigma);

/// (299 R + 587 G + 114 B + 500) / 1000.
uint8_t luma(Rgb c);

/// Complement of the background reachable from the border through
/// 4-connected steps.
BinMask fill_holes(const BinMask& mask);

/// Mask pixels with a 4-neighbour outside the mask or outside the image.
BinMask mask_boundary(const BinMask& mask);

/// Integer midpoint ellipse outline, unclipped, possibly with repeats.
std::vector<std::pair<int, int>> ellipse_outline(int cx, int cy, int ax, int ay);

void draw_points(ImageBuf& image, const std::vector<std::pair<int, int>>& points, Rgb color, int thickness);
void draw_ellipse(ImageBuf& image, int cx, int cy, int ax, int ay, Rgb color, int thickness);
void draw_rectangle(ImageBuf& image, int x0, int y0, int x1, int y1, Rgb color, int thickness);

/// Throws InvalidArgument describing the first violated PromptSpec invariant.
void validate_prompt_spec(const PromptSpec& spec);

/// Applies spec.types in the fixed order blur, gray, black, circle,
/// rectangle, contour. Throws EmptyMaskError if a shape prompt is requested
/// for an empty mask.
ImageBuf apply_visual_prompts(const ImageBuf& image, const BinMask& mask, const PromptSpec& spec);

}  // namespace carseg
