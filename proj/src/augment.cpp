#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "refseg/data.hpp"
#include "refseg/error.hpp"
#include "refseg/rng.hpp"

namespace refseg {

namespace {

using Affine = Eigen::Matrix3d;

Affine to_matrix(const std::array<double, 6>& a) {
  Affine m;
  m << a[0], a[1], a[2], a[3], a[4], a[5], 0.0, 0.0, 1.0;
  return m;
}

std::array<double, 6> from_matrix(const Affine& m) {
  return {m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2)};
}

void source_coords(const TransformRecord& rec, int x, int y, double& sx, double& sy) {
  const auto& a = rec.inverse;
  sx = a[0] * x + a[1] * y + a[2];
  sy = a[3] * x + a[4] * y + a[5];
}

double sample_bilinear(const std::vector<double>& plane, int h, int w, double sx, double sy,
                       bool clamp) {
  if (clamp) {
    sx = std::clamp(sx, 0.0, w - 1.0);
    sy = std::clamp(sy, 0.0, h - 1.0);
  }
  const int x0 = static_cast<int>(std::floor(sx));
  const int y0 = static_cast<int>(std::floor(sy));
  const double fx = sx - x0, fy = sy - y0;
  auto px = [&](int yy, int xx) -> double {
    if (xx < 0 || xx >= w || yy < 0 || yy >= h) return 0.0;
    return plane[static_cast<std::size_t>(yy) * w + xx];
  };
  double top = px(y0, x0) * (1.0 - fx);
  if (fx != 0.0) top += px(y0, x0 + 1) * fx;
  if (fy == 0.0) return top;
  double bottom = px(y0 + 1, x0) * (1.0 - fx);
  if (fx != 0.0) bottom += px(y0 + 1, x0 + 1) * fx;
  return top * (1.0 - fy) + bottom * fy;
}

void clamp_unit(GrayImage& image) {
  for (double& v : image.pixels) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

bool TransformRecord::is_geometric_identity() const {
  return inverse == std::array<double, 6>{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
}

std::vector<double> warp_plane(const std::vector<double>& plane, int height, int width,
                               const TransformRecord& record) {
  std::vector<double> out(plane.size());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double sx, sy;
      source_coords(record, x, y, sx, sy);
      out[static_cast<std::size_t>(y) * width + x] =
          sample_bilinear(plane, height, width, sx, sy, record.clamp_edges);
    }
  }
  return out;
}

GrayImage warp_image(const GrayImage& image, const TransformRecord& record) {
  GrayImage out(image.height, image.width);
  out.pixels = warp_plane(image.pixels, image.height, image.width, record);
  clamp_unit(out);
  return out;
}

LabelMask warp_mask(const LabelMask& mask, const TransformRecord& record) {
  LabelMask out(mask.height, mask.width, mask.num_classes);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      double sx, sy;
      source_coords(record, x, y, sx, sy);
      long ix = std::lround(sx), iy = std::lround(sy);
      if (record.clamp_edges) {
        ix = std::clamp<long>(ix, 0, mask.width - 1);
        iy = std::clamp<long>(iy, 0, mask.height - 1);
      } else if (ix < 0 || ix >= mask.width || iy < 0 || iy >= mask.height) {
        continue;
      }
      out.at(y, x) = mask.at(static_cast<int>(iy), static_cast<int>(ix));
    }
  }
  return out;
}

TransformRecord inverse_geometry(const TransformRecord& record) {
  TransformRecord out;
  out.clamp_edges = record.clamp_edges;
  out.inverse = from_matrix(to_matrix(record.inverse).inverse());
  // Snap exact-integer maps (flip/shift) back onto integers.
  for (double& v : out.inverse) {
    const double r = std::round(v);
    if (std::abs(v - r) < 1e-9) v = r;
  }
  return out;
}

AugmentedView weak_augment(const GrayImage& image, const std::optional<LabelMask>& mask,
                           std::uint64_t seed, const WeakAugmentOptions& options) {
  image.validate();
  Rng rng(seed);
  TransformRecord rec;
  rec.hflip = rng.bernoulli(options.flip_prob);
  const int max_dx = static_cast<int>(std::floor(options.max_shift_fraction * image.width));
  const int max_dy = static_cast<int>(std::floor(options.max_shift_fraction * image.height));
  rec.shift_x = max_dx > 0 ? rng.uniform_int(-max_dx, max_dx) : 0;
  rec.shift_y = max_dy > 0 ? rng.uniform_int(-max_dy, max_dy) : 0;
  // out(x, y) = flipped(x - dx, y - dy)
  if (rec.hflip) {
    rec.inverse = {-1.0, 0.0, static_cast<double>(image.width - 1 + rec.shift_x),
                   0.0, 1.0, static_cast<double>(-rec.shift_y)};
  } else {
    rec.inverse = {1.0, 0.0, static_cast<double>(-rec.shift_x),
                   0.0, 1.0, static_cast<double>(-rec.shift_y)};
  }

  AugmentedView view;
  view.record = rec;
  view.image = rec.is_geometric_identity() ? image : warp_image(image, rec);
  if (mask) view.mask = rec.is_geometric_identity() ? *mask : warp_mask(*mask, rec);
  return view;
}

AugmentedView strong_augment(const AugmentedView& view, std::uint64_t seed,
                             const StrongAugmentOptions& options) {
  Rng rng(seed);
  AugmentedView out = view;
  TransformRecord& rec = out.record;
  GrayImage& img = out.image;

  if (rng.bernoulli(options.jitter_prob)) {
    rec.brightness = rng.uniform(-options.max_brightness, options.max_brightness);
    rec.contrast = rng.uniform(options.contrast_min, options.contrast_max);
    rec.gamma = rng.uniform(options.gamma_min, options.gamma_max);
    const double mean = mean_intensity(img);
    for (double& v : img.pixels) {
      v = std::clamp(v + rec.brightness, 0.0, 1.0);
      v = std::clamp(mean + (v - mean) * rec.contrast, 0.0, 1.0);
      v = std::pow(v, rec.gamma);
    }
  }
  if (rng.bernoulli(options.blur_prob)) {
    rec.blur_sigma = rng.uniform(options.blur_sigma_min, options.blur_sigma_max);
    img = gaussian_blur(img, rec.blur_sigma);
  }
  clamp_unit(img);
  if (rng.bernoulli(options.cutout_prob)) {
    rec.cutout = true;
    rec.cutout_height = std::max(1, static_cast<int>(std::lround(
        rng.uniform(options.cutout_min_fraction, options.cutout_max_fraction) * img.height)));
    rec.cutout_width = std::max(1, static_cast<int>(std::lround(
        rng.uniform(options.cutout_min_fraction, options.cutout_max_fraction) * img.width)));
    rec.cutout_row = rng.uniform_int(0, img.height - rec.cutout_height);
    rec.cutout_col = rng.uniform_int(0, img.width - rec.cutout_width);
    rec.cutout_fill = std::clamp(options.cutout_fill, 0.0, 1.0);
    for (int r = rec.cutout_row; r < rec.cutout_row + rec.cutout_height; ++r) {
      for (int c = rec.cutout_col; c < rec.cutout_col + rec.cutout_width; ++c) {
        img.at(r, c) = rec.cutout_fill;
      }
    }
  }
  return out;
}

AugmentedView template_augment(const GrayImage& image, const LabelMask& mask, std::uint64_t seed,
                               const TemplateAugmentOptions& options) {
  image.validate();
  if (mask.height != image.height || mask.width != image.width) {
    throw Error("template image and mask differ in shape");
  }
  Rng rng(seed);
  TransformRecord rec;
  rec.clamp_edges = true;
  rec.hflip = rng.bernoulli(options.flip_prob);
  rec.vflip = rng.bernoulli(options.flip_prob);
  if (rng.bernoulli(options.rotation_prob)) {
    rec.rotation_deg = rng.uniform(-options.max_rotation_deg, options.max_rotation_deg);
  }
  rec.crop_scale = options.crop_scale_min == options.crop_scale_max
                       ? options.crop_scale_min
                       : rng.uniform(options.crop_scale_min, options.crop_scale_max);

  const double w = image.width, h = image.height;
  const double side = std::sqrt(rec.crop_scale);
  const double cw = side * w, ch = side * h;
  const double cx = 0.5 * (w - 1.0), cy = 0.5 * (h - 1.0);

  Affine flip = Affine::Identity();
  if (rec.hflip) {
    flip(0, 0) = -1.0;
    flip(0, 2) = w - 1.0;
  }
  if (rec.vflip) {
    flip(1, 1) = -1.0;
    flip(1, 2) = h - 1.0;
  }
  Affine rot = Affine::Identity();
  if (rec.rotation_deg != 0.0) {
    const double t = rec.rotation_deg * M_PI / 180.0;
    const double c = std::cos(t), s = std::sin(t);
    Affine to_origin = Affine::Identity(), back = Affine::Identity(), r = Affine::Identity();
    to_origin(0, 2) = -cx;
    to_origin(1, 2) = -cy;
    back(0, 2) = cx;
    back(1, 2) = cy;
    r(0, 0) = c;
    r(0, 1) = -s;
    r(1, 0) = s;
    r(1, 1) = c;
    rot = back * r * to_origin;
  }
  auto crop_map = [&](double ox, double oy) {
    Affine m = Affine::Identity();
    m(0, 0) = cw / w;
    m(0, 2) = ox + 0.5 * cw / w - 0.5;
    m(1, 1) = ch / h;
    m(1, 2) = oy + 0.5 * ch / h - 0.5;
    return m;
  };

  const auto present = mask.classes_present();
  auto keeps_classes = [&](const LabelMask& warped) {
    for (int k : present) {
      if (!warped.has_class(k)) return false;
    }
    return true;
  };

  LabelMask warped;
  bool accepted = false;
  for (int attempt = 0; attempt < 10 && !accepted; ++attempt) {
    const double ox = rng.uniform(0.0, w - cw);
    const double oy = rng.uniform(0.0, h - ch);
    rec.inverse = from_matrix(flip * rot * crop_map(ox, oy));
    rec.crop_attempts = attempt + 1;
    warped = warp_mask(mask, rec);
    accepted = keeps_classes(warped);
  }
  if (!accepted) {
    rec.crop_fallback = true;
    rec.inverse = from_matrix(flip * rot * crop_map(0.5 * (w - cw), 0.5 * (h - ch)));
    warped = warp_mask(mask, rec);
  }

  AugmentedView view;
  view.image = warp_image(image, rec);
  view.mask = std::move(warped);

  GrayImage& img = view.image;
  if (rng.bernoulli(options.noise_prob)) {
    rec.noise_sigma = rng.uniform(0.0, options.noise_sigma_max);
    for (double& v : img.pixels) v += rng.normal(0.0, rec.noise_sigma);
    clamp_unit(img);
  }
  if (rng.bernoulli(options.blur_prob)) {
    rec.blur_sigma = rng.uniform(options.blur_sigma_min, options.blur_sigma_max);
    img = gaussian_blur(img, rec.blur_sigma);
  }
  if (rng.bernoulli(options.sharpen_prob)) {
    rec.sharpen_amount = rng.uniform(options.sharpen_min, options.sharpen_max);
    const GrayImage soft = gaussian_blur(img, 1.0);
    for (std::size_t i = 0; i < img.size(); ++i) {
      img.pixels[i] += rec.sharpen_amount * (img.pixels[i] - soft.pixels[i]);
    }
  }
  clamp_unit(img);
  view.record = rec;
  return view;
}

RgbImage make_overlay(const GrayImage& image, const LabelMask& mask, int class_id, double alpha) {
  if (mask.height != image.height || mask.width != image.width) {
    throw Error("overlay image and mask differ in shape");
  }
  RgbImage out(image.height, image.width);
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      const double g = image.at(r, c);
      if (mask.at(r, c) == class_id && class_id != 0) {
        out.at(0, r, c) = (1.0 - alpha) * g;
        out.at(1, r, c) = (1.0 - alpha) * g + alpha;
        out.at(2, r, c) = (1.0 - alpha) * g;
      } else {
        out.at(0, r, c) = out.at(1, r, c) = out.at(2, r, c) = g;
      }
    }
  }
  return out;
}

}  // namespace refseg
