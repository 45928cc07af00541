#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <vector>

namespace refseg {

// H×W intensities in [0, 1], row-major.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return pixels.size(); }

  // Throws refseg::Error unless H, W >= 8 and every pixel is finite in [0, 1].
  void validate() const;
  bool operator==(const GrayImage&) const = default;
};

// H×W labels in {0..num_classes}; 0 is background.
struct LabelMask {
  int height = 0;
  int width = 0;
  int num_classes = 1;
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(int h, int w, int classes, std::uint8_t fill = 0)
      : height(h), width(w), num_classes(classes),
        labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return labels.size(); }

  void validate() const;
  // Foreground classes with at least one pixel.
  std::set<int> classes_present() const;
  bool has_class(int class_id) const;
  // 1.0 where label == class_id, else 0.0.
  std::vector<double> binary(int class_id) const;
  bool operator==(const LabelMask&) const = default;
};

// Per-pixel foreground probability of one class.
struct ProbMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  ProbMap() = default;
  ProbMap(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
};

// (C+1)×H×W class probabilities; values(c, r, col) sums to 1 over c.
struct ClassProbs {
  int num_labels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  ClassProbs() = default;
  ClassProbs(int labels, int h, int w)
      : num_labels(labels), height(h), width(w),
        values(static_cast<std::size_t>(labels) * h * w, 0.0) {}
  double& at(int c, int r, int col) {
    return values[(static_cast<std::size_t>(c) * height + r) * width + col];
  }
  double at(int c, int r, int col) const {
    return values[(static_cast<std::size_t>(c) * height + r) * width + col];
  }
  ProbMap channel(int c) const;
};

// Planar RGB in [0, 1]: data[ch * H * W + r * W + c].
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(3) * h * w, 0.0) {}
  double& at(int ch, int r, int c) {
    return data[(static_cast<std::size_t>(ch) * height + r) * width + c];
  }
  double at(int ch, int r, int c) const {
    return data[(static_cast<std::size_t>(ch) * height + r) * width + c];
  }
};

// Separable Gaussian blur with edge clamping.
GrayImage gaussian_blur(const GrayImage& image, double sigma);
std::vector<double> gaussian_blur(const std::vector<double>& plane, int height, int width,
                                  double sigma);

// Arg-max over classes with ties resolved to the lower class index.
LabelMask argmax_labels(const ClassProbs& probs, int num_classes);

double mean_intensity(const GrayImage& image);

// 8-bit PNG storage. Images are quantized to round(255 * v); masks store raw
// label values.
void save_image_png(const GrayImage& image, const std::filesystem::path& path);
GrayImage load_image_png(const std::filesystem::path& path);
void save_mask_png(const LabelMask& mask, const std::filesystem::path& path);
LabelMask load_mask_png(const std::filesystem::path& path, int num_classes);
void save_rgb_png(const RgbImage& image, const std::filesystem::path& path);

// Quantize to the 8-bit grid used on disk.
GrayImage quantize8(const GrayImage& image);

}  // namespace refseg
