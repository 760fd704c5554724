#include "carseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace carseg {
namespace {

struct ReadCursor {
  std::span<const uint8_t> bytes;
  size_t pos = 0;
};

void read_cb(png_structp png, png_bytep out, png_size_t n) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + n > cur->bytes.size()) png_error(png, "truncated PNG data");
  std::memcpy(out, cur->bytes.data() + cur->pos, n);
  cur->pos += n;
}

void write_cb(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

void flush_cb(png_structp) {}

struct ErrorSlot {
  char message[256] = {0};
};

// libpng reports errors by longjmp back to the setjmp in decode/encode.
void error_cb(png_structp png, png_const_charp msg) {
  auto* slot = static_cast<ErrorSlot*>(png_get_error_ptr(png));
  std::snprintf(slot->message, sizeof slot->message, "%s", msg);
  png_longjmp(png, 1);
}
void warning_cb(png_structp, png_const_charp) {}

struct Decoded {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> data;
};

// keep_palette: palette images return indices in a single channel.
Decoded decode(std::span<const uint8_t> bytes, bool keep_palette) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw IoError("not a PNG file");
  auto slot = std::make_unique<ErrorSlot>();
  auto d = std::make_unique<Decoded>();
  auto rows = std::make_unique<std::vector<png_bytep>>();
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, slot.get(), error_cb, warning_cb);
  if (!png) throw IoError("png: cannot allocate read struct");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  if (setjmp(png_jmpbuf(png))) throw IoError(std::string("png: ") + slot->message);

  ReadCursor cursor{bytes, 0};
  png_set_read_fn(png, &cursor, read_cb);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  const bool palette_indices = keep_palette && color == PNG_COLOR_TYPE_PALETTE;
  if (depth == 16) png_set_strip_16(png);
  if (palette_indices) {
    if (depth < 8) png_set_packing(png);
  } else {
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  }
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  d->width = static_cast<int>(png_get_image_width(png, info));
  d->height = static_cast<int>(png_get_image_height(png, info));
  d->channels = png_get_channels(png, info);
  const size_t rowbytes = png_get_rowbytes(png, info);
  d->data.resize(rowbytes * static_cast<size_t>(d->height));
  rows->resize(static_cast<size_t>(d->height));
  for (int y = 0; y < d->height; ++y)
    (*rows)[static_cast<size_t>(y)] = d->data.data() + rowbytes * static_cast<size_t>(y);
  png_read_image(png, rows->data());
  png_read_end(png, nullptr);
  return std::move(*d);
}

std::vector<uint8_t> encode(int width, int height, int color_type, int channels, const uint8_t* data) {
  auto slot = std::make_unique<ErrorSlot>();
  auto out = std::make_unique<std::vector<uint8_t>>();
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, slot.get(), error_cb, warning_cb);
  if (!png) throw IoError("png: cannot allocate write struct");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  if (setjmp(png_jmpbuf(png))) throw IoError(std::string("png: ") + slot->message);

  png_set_write_fn(png, out.get(), write_cb, flush_cb);
  // Fixed settings so identical pixels always give identical files.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const size_t stride = static_cast<size_t>(width) * static_cast<size_t>(channels);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(data + stride * static_cast<size_t>(y)));
  png_write_end(png, nullptr);
  return std::move(*out);
}

}  // namespace

ImageBuf decode_png(std::span<const uint8_t> bytes) {
  Decoded d = decode(bytes, false);
  std::vector<uint8_t> rgb(3 * static_cast<size_t>(d.width) * static_cast<size_t>(d.height));
  const size_t n = static_cast<size_t>(d.width) * static_cast<size_t>(d.height);
  for (size_t i = 0; i < n; ++i) {
    const uint8_t* p = &d.data[i * static_cast<size_t>(d.channels)];
    if (d.channels >= 3) {
      rgb[3 * i] = p[0];
      rgb[3 * i + 1] = p[1];
      rgb[3 * i + 2] = p[2];
    } else {
      rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = p[0];
    }
  }
  return ImageBuf(d.width, d.height, std::move(rgb));
}

std::vector<uint8_t> encode_png(const ImageBuf& image) {
  return encode(image.width(), image.height(), PNG_COLOR_TYPE_RGB, 3, image.bytes().data());
}

Grid<uint8_t> decode_png_gray(std::span<const uint8_t> bytes) {
  Decoded d = decode(bytes, true);
  const size_t n = static_cast<size_t>(d.width) * static_cast<size_t>(d.height);
  std::vector<uint8_t> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = d.data[i * static_cast<size_t>(d.channels)];
  return Grid<uint8_t>(d.width, d.height, std::move(out));
}

std::vector<uint8_t> encode_png_gray(const Grid<uint8_t>& image) {
  if (image.width() < 1 || image.height() < 1) throw IoError("cannot encode an empty image");
  return encode(image.width(), image.height(), PNG_COLOR_TYPE_GRAY, 1, image.values().data());
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

ImageBuf read_png(const std::filesystem::path& path) {
  try {
    return decode_png(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_png(const std::filesystem::path& path, const ImageBuf& image) { write_file(path, encode_png(image)); }

Grid<uint8_t> read_png_gray(const std::filesystem::path& path) {
  try {
    return decode_png_gray(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_png_gray(const std::filesystem::path& path, const Grid<uint8_t>& image) {
  write_file(path, encode_png_gray(image));
}

Grid<uint8_t> label_map_to_png_values(const LabelMap& labels) {
  Grid<uint8_t> out(labels.width(), labels.height());
  for (size_t i = 0; i < labels.size(); ++i) {
    const int32_t l = labels[i];
    if (l == kBackground) out[i] = kBackgroundPng;
    else if (l >= 0 && l < kBackgroundPng) out[i] = static_cast<uint8_t>(l);
    else throw InvalidArgument("label " + std::to_string(l) + " cannot be stored in an 8-bit label PNG");
  }
  return out;
}

LabelMap png_values_to_label_map(const Grid<uint8_t>& values) {
  LabelMap out(values.width(), values.height());
  for (size_t i = 0; i < values.size(); ++i) out[i] = values[i] == kBackgroundPng ? kBackground : values[i];
  return out;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
  write_png_gray(path, label_map_to_png_values(labels));
}

LabelMap read_label_png(const std::filesystem::path& path) { return png_values_to_label_map(read_png_gray(path)); }

Grid<uint8_t> soft_mask_to_gray(const SoftMask& mask) {
  Grid<uint8_t> out(mask.width(), mask.height());
  for (size_t i = 0; i < mask.size(); ++i) {
    const double v = std::clamp(static_cast<double>(mask[i]), 0.0, 1.0);
    out[i] = static_cast<uint8_t>(std::floor(v * 255.0 + 0.5));
  }
  return out;
}

}  // namespace carseg
