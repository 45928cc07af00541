#include "refseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

#include "refseg/error.hpp"

namespace refseg {

void GrayImage::validate() const {
  if (height < 8 || width < 8) {
    throw Error("image must be at least 8x8, got " + std::to_string(height) + "x" +
                std::to_string(width));
  }
  if (pixels.size() != static_cast<std::size_t>(height) * width) {
    throw Error("image pixel buffer does not match its shape");
  }
  for (double v : pixels) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw Error("image intensity outside [0,1]: " + std::to_string(v));
    }
  }
}

void LabelMask::validate() const {
  if (num_classes < 1) throw Error("mask needs at least one foreground class");
  if (labels.size() != static_cast<std::size_t>(height) * width) {
    throw Error("mask label buffer does not match its shape");
  }
  for (auto v : labels) {
    if (v > num_classes) {
      throw Error("mask label " + std::to_string(v) + " exceeds class count " +
                  std::to_string(num_classes));
    }
  }
}

std::set<int> LabelMask::classes_present() const {
  std::set<int> out;
  for (auto v : labels) {
    if (v != 0) out.insert(v);
  }
  return out;
}

bool LabelMask::has_class(int class_id) const {
  return std::find(labels.begin(), labels.end(), static_cast<std::uint8_t>(class_id)) !=
         labels.end();
}

std::vector<double> LabelMask::binary(int class_id) const {
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == class_id ? 1.0 : 0.0;
  return out;
}

ProbMap ClassProbs::channel(int c) const {
  ProbMap out(height, width);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, out.values.begin());
  return out;
}

std::vector<double> gaussian_blur(const std::vector<double>& plane, int height, int width,
                                  double sigma) {
  if (sigma <= 0.0) return plane;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (double& k : kernel) k /= total;

  std::vector<double> tmp(plane.size()), out(plane.size());
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int cc = std::clamp(c + i, 0, width - 1);
        acc += kernel[i + radius] * plane[static_cast<std::size_t>(r) * width + cc];
      }
      tmp[static_cast<std::size_t>(r) * width + c] = acc;
    }
  }
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int rr = std::clamp(r + i, 0, height - 1);
        acc += kernel[i + radius] * tmp[static_cast<std::size_t>(rr) * width + c];
      }
      out[static_cast<std::size_t>(r) * width + c] = acc;
    }
  }
  return out;
}

GrayImage gaussian_blur(const GrayImage& image, double sigma) {
  GrayImage out(image.height, image.width);
  out.pixels = gaussian_blur(image.pixels, image.height, image.width, sigma);
  return out;
}

LabelMask argmax_labels(const ClassProbs& probs, int num_classes) {
  LabelMask out(probs.height, probs.width, num_classes);
  for (int r = 0; r < probs.height; ++r) {
    for (int c = 0; c < probs.width; ++c) {
      int best = 0;
      double best_p = probs.at(0, r, c);
      for (int k = 1; k < probs.num_labels; ++k) {
        if (probs.at(k, r, c) > best_p) {
          best_p = probs.at(k, r, c);
          best = k;
        }
      }
      out.at(r, c) = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

double mean_intensity(const GrayImage& image) {
  double s = 0.0;
  for (double v : image.pixels) s += v;
  return image.pixels.empty() ? 0.0 : s / static_cast<double>(image.pixels.size());
}

GrayImage quantize8(const GrayImage& image) {
  GrayImage out = image;
  for (double& v : out.pixels) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const std::filesystem::path& path, int height, int width, int color_type,
               const std::vector<std::uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed writing PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  for (int r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() +
                                             static_cast<std::size_t>(r) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& height,
                                        int& width) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error("cannot open image: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("failed reading PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(height) * width);
  std::vector<png_bytep> rows(height);
  for (int r = 0; r < height; ++r) rows[r] = bytes.data() + static_cast<std::size_t>(r) * width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace

void save_image_png(const GrayImage& image, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  }
  write_png(path, image.height, image.width, PNG_COLOR_TYPE_GRAY, bytes);
}

GrayImage load_image_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto bytes = read_png_gray(path, h, w);
  GrayImage out(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) out.pixels[i] = bytes[i] / 255.0;
  return out;
}

void save_mask_png(const LabelMask& mask, const std::filesystem::path& path) {
  write_png(path, mask.height, mask.width, PNG_COLOR_TYPE_GRAY, mask.labels);
}

LabelMask load_mask_png(const std::filesystem::path& path, int num_classes) {
  int h = 0, w = 0;
  auto bytes = read_png_gray(path, h, w);
  LabelMask out(h, w, num_classes);
  out.labels = std::move(bytes);
  out.validate();
  return out;
}

void save_rgb_png(const RgbImage& image, const std::filesystem::path& path) {
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  std::vector<std::uint8_t> bytes(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      bytes[i * 3 + ch] = static_cast<std::uint8_t>(
          std::lround(std::clamp(image.data[ch * plane + i], 0.0, 1.0) * 255.0));
    }
  }
  write_png(path, image.height, image.width, PNG_COLOR_TYPE_RGB, bytes);
}

}  // namespace refseg
