#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "refseg/data.hpp"
#include "refseg/error.hpp"
#include "refseg/rng.hpp"

namespace refseg {

namespace fs = std::filesystem;

namespace {

constexpr std::array<const char*, 4> kClassNames{"ellipse", "lobe", "ring", "box"};
constexpr std::array<double, 4> kClassIntensity{0.58, 0.86, 0.70, 0.95};

struct BlobStyle {
  double cx = 0.0, cy = 0.0;   // base center (pixels)
  double rx = 0.0, ry = 0.0;   // base radii (pixels)
  double angle = 0.0;
  std::array<double, 3> harmonics{};  // radial perturbation amplitudes (lobe)
  std::array<double, 3> phases{};
  double intensity = 0.0;
};

struct PatientStyle {
  double background = 0.0;
  double grad_amp = 0.0;
  double grad_dir = 0.0;
  double body = 0.0;
  double body_rx = 0.0, body_ry = 0.0;
  double contrast = 1.0;
  double noise = 0.0;
  double texture_freq = 0.0;
  std::vector<BlobStyle> blobs;
};

double bounding_radius(const BlobStyle& b) { return std::max(b.rx, b.ry); }

PatientStyle make_patient(Rng& rng, int num_classes, int size) {
  PatientStyle p;
  p.background = rng.uniform(0.02, 0.15);
  p.grad_amp = rng.uniform(0.0, 0.08);
  p.grad_dir = rng.uniform(0.0, 2.0 * M_PI);
  p.body = rng.uniform(0.25, 0.38);
  p.body_rx = size * rng.uniform(0.40, 0.47);
  p.body_ry = size * rng.uniform(0.36, 0.45);
  p.contrast = rng.uniform(0.8, 1.15);
  p.noise = rng.uniform(0.02, 0.05);
  p.texture_freq = rng.uniform(0.15, 0.45);

  for (int k = 1; k <= num_classes; ++k) {
    BlobStyle b;
    switch (k) {
      case 1:
        b.rx = size * rng.uniform(0.10, 0.17);
        b.ry = size * rng.uniform(0.08, 0.14);
        break;
      case 2:
        b.rx = b.ry = size * rng.uniform(0.10, 0.15);
        for (int j = 0; j < 3; ++j) {
          b.harmonics[j] = rng.uniform(0.05, 0.18);
          b.phases[j] = rng.uniform(0.0, 2.0 * M_PI);
        }
        break;
      case 3:
        b.rx = b.ry = size * rng.uniform(0.11, 0.15);
        break;
      default:
        b.rx = size * rng.uniform(0.08, 0.13);
        b.ry = size * rng.uniform(0.08, 0.13);
        break;
    }
    b.angle = rng.uniform(0.0, M_PI);
    b.intensity = kClassIntensity[k - 1] + rng.uniform(-0.06, 0.06);
    p.blobs.push_back(b);
  }

  // Non-overlapping base centers (with margin for per-slice growth).
  for (int attempt = 0;; ++attempt) {
    for (auto& b : p.blobs) {
      const double margin = bounding_radius(b) * 1.15 + 2.0;
      b.cx = rng.uniform(margin, size - margin);
      b.cy = rng.uniform(margin, size - margin);
    }
    bool ok = true;
    for (std::size_t i = 0; i < p.blobs.size() && ok; ++i) {
      for (std::size_t j = i + 1; j < p.blobs.size() && ok; ++j) {
        const double d = std::hypot(p.blobs[i].cx - p.blobs[j].cx, p.blobs[i].cy - p.blobs[j].cy);
        ok = d > 1.2 * (bounding_radius(p.blobs[i]) + bounding_radius(p.blobs[j])) + 2.0;
      }
    }
    if (ok) break;
    if (attempt > 500) {
      for (auto& b : p.blobs) {  // shrink until they fit
        b.rx *= 0.9;
        b.ry *= 0.9;
      }
      attempt = 0;
    }
  }
  return p;
}

// Inside test for blob of class k at scale `grow` with center offset.
bool inside(int k, const BlobStyle& b, double cx, double cy, double grow, double x, double y) {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(b.angle), s = std::sin(b.angle);
  const double u = (c * dx + s * dy) / (b.rx * grow);
  const double v = (-s * dx + c * dy) / (b.ry * grow);
  switch (k) {
    case 1:
      return u * u + v * v <= 1.0;
    case 2: {
      const double theta = std::atan2(v, u);
      double r = 1.0;
      for (int j = 0; j < 3; ++j) r += b.harmonics[j] * std::cos((j + 2) * theta + b.phases[j]);
      return std::hypot(u, v) <= r;
    }
    case 3: {
      const double d = std::hypot(u, v);
      return d <= 1.0 && d >= 0.55;
    }
    default:
      return std::pow(std::abs(u), 4.0) + std::pow(std::abs(v), 4.0) <= 1.0;
  }
}

void render_slice(const PatientStyle& style, int slice, int slices, int size, Rng& rng,
                  GrayImage& image, LabelMask& mask) {
  const double phase = M_PI * (slice + 0.5) / slices;
  const double grow = 0.85 + 0.3 * std::sin(phase);
  const double jitter = 0.03 * size;

  image = GrayImage(size, size);
  mask = LabelMask(size, size, static_cast<int>(style.blobs.size()));
  const double half = 0.5 * (size - 1);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double g = style.grad_amp * ((c - half) * std::cos(style.grad_dir) +
                                         (r - half) * std::sin(style.grad_dir)) / size;
      double v = style.background + g;
      const double bx = (c - half) / style.body_rx, by = (r - half) / style.body_ry;
      if (bx * bx + by * by <= 1.0) v = style.body + g;
      image.at(r, c) = v;
    }
  }

  for (std::size_t i = 0; i < style.blobs.size(); ++i) {
    const int k = static_cast<int>(i) + 1;
    const auto& b = style.blobs[i];
    const double cx = b.cx + rng.uniform(-jitter, jitter);
    const double cy = b.cy + rng.uniform(-jitter, jitter);
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        if (!inside(k, b, cx, cy, grow, c, r)) continue;
        const double texture = 0.03 * std::sin(style.texture_freq * c + 0.7 * k) *
                               std::cos(style.texture_freq * r);
        image.at(r, c) = b.intensity + texture;
        mask.at(r, c) = static_cast<std::uint8_t>(k);
      }
    }
  }

  image = gaussian_blur(image, 0.6);
  for (double& v : image.pixels) {
    v = style.background + (v - style.background) * style.contrast;
    v = std::clamp(v + rng.normal(0.0, style.noise), 0.0, 1.0);
  }
  image = quantize8(image);
}

}  // namespace

DatasetManifest generate_synthetic(const SyntheticOptions& options, const fs::path& root) {
  if (options.num_classes < 1 || options.num_classes > 4) {
    throw Error("num_classes must lie in [1, 4]");
  }
  if (options.size < 32) throw Error("synthetic image size must be >= 32");
  if (options.num_patients < 1 || options.slices_per_patient < 1) {
    throw Error("need at least one patient and one slice");
  }
  const int n_test = options.test_patients >= 0 ? options.test_patients : options.num_patients / 5;
  if (n_test >= options.num_patients) throw Error("test split would consume every patient");

  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "masks", ec);
  if (ec || !fs::is_directory(root / "images")) {
    throw Error("cannot create dataset directory " + root.string());
  }

  std::vector<int> order(options.num_patients);
  for (int i = 0; i < options.num_patients; ++i) order[i] = i;
  Rng split_rng(derive_seed(options.seed, "test-patients"));
  for (int i = options.num_patients; i > 1; --i) std::swap(order[i - 1], order[split_rng.uniform_int(0, i - 1)]);
  std::vector<bool> is_test(options.num_patients, false);
  for (int i = 0; i < n_test; ++i) is_test[order[i]] = true;

  DatasetManifest m;
  m.root = root;
  m.num_classes = options.num_classes;
  for (int k = 0; k < options.num_classes; ++k) m.class_names.emplace_back(kClassNames[k]);

  for (int p = 0; p < options.num_patients; ++p) {
    Rng style_rng(derive_seed(options.seed, "patient-style", {static_cast<std::uint64_t>(p)}));
    const PatientStyle style = make_patient(style_rng, options.num_classes, options.size);
    char pid[16];
    std::snprintf(pid, sizeof(pid), "p%03d", p);
    for (int s = 0; s < options.slices_per_patient; ++s) {
      Rng slice_rng(derive_seed(options.seed, "slice",
                                {static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(s)}));
      GrayImage image;
      LabelMask mask;
      render_slice(style, s, options.slices_per_patient, options.size, slice_rng, image, mask);
      char name[32];
      std::snprintf(name, sizeof(name), "%s_s%02d.png", pid, s);
      save_image_png(image, root / "images" / name);
      save_mask_png(mask, root / "masks" / name);
      m.entries.push_back(ManifestEntry{std::string("images/") + name, std::string("masks/") + name,
                                        pid, is_test[p] ? Split::Test : Split::Unlabeled});
    }
  }
  sort_entries(m);
  save_manifest(m);
  return m;
}

}  // namespace refseg
