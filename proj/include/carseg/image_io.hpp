// image_io.hpp
//
// PNG reading and writing. Label maps are stored as 8-bit single-channel
// PNGs whose value is the query's original index, with 255 for background.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "carseg/core.hpp"

namespace carseg {

/// Any PNG colour type is converted to 8-bit RGB (alpha dropped).
ImageBuf decode_png(std::span<const uint8_t> bytes);
std::vector<uint8_t> encode_png(const ImageBuf& image);

ImageBuf read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageBuf& image);

/// Single-channel 8-bit read. Palette images keep their indices; RGB images
/// are reduced to their first channel.
Grid<uint8_t> decode_png_gray(std::span<const uint8_t> bytes);
std::vector<uint8_t> encode_png_gray(const Grid<uint8_t>& image);
Grid<uint8_t> read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const Grid<uint8_t>& image);

/// kBackground <-> 255. Labels outside [0,254] cannot be stored.
Grid<uint8_t> label_map_to_png_values(const LabelMap& labels);
LabelMap png_values_to_label_map(const Grid<uint8_t>& values);
void write_label_png(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_label_png(const std::filesystem::path& path);

/// round(255 * v) per pixel.
Grid<uint8_t> soft_mask_to_gray(const SoftMask& mask);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);

}  // namespace carseg
