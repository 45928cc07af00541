#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "refseg/image.hpp"

namespace refseg {

// --- dataset manifest -------------------------------------------------------

enum class Split { Labeled, Unlabeled, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string image;                // relative to the dataset root
  std::optional<std::string> mask;  // relative to the dataset root
  std::string patient;
  Split split = Split::Unlabeled;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  int num_classes = 1;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;

  std::vector<std::size_t> indices(Split split) const;
  // Sorted unique patient ids, optionally restricted to one split.
  std::vector<std::string> patients() const;
  std::vector<std::string> patients(Split split) const;

  GrayImage image(std::size_t i) const;
  LabelMask mask(std::size_t i) const;

  bool operator==(const DatasetManifest&) const = default;
};

// Accepts either the manifest file or the dataset root directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
// Writes root/manifest.json. Entries are written in (patient, file) order.
void save_manifest(const DatasetManifest& manifest);
// Orders entries by (patient id, image file name).
void sort_entries(DatasetManifest& manifest);

struct SyntheticOptions {
  std::uint64_t seed = 1;
  int num_patients = 20;
  int slices_per_patient = 4;
  int num_classes = 2;
  int size = 64;
  // Patients reserved for the test split; negative selects num_patients / 5.
  int test_patients = -1;
};

// Renders a corpus of noisy blob images under `root` (images/, masks/,
// manifest.json). One blob per foreground class per slice; every patient has
// its own intensity/geometry style. Non-test entries start out unlabeled and
// carry their mask paths; split_labeled() picks the labeled patients.
DatasetManifest generate_synthetic(const SyntheticOptions& options,
                                   const std::filesystem::path& root);

// Patient-level split of the non-test entries: ceil(ratio * #patients)
// patients become labeled, the rest unlabeled. Test entries are untouched.
DatasetManifest split_labeled(const DatasetManifest& manifest, double ratio, std::uint64_t seed);

// --- augmentation -------------------------------------------------------------

// Everything needed to replay an augmentation. Geometry is stored as the
// inverse affine map from output pixel (x = col, y = row) to source
// coordinates: src = A * [x, y, 1].
struct TransformRecord {
  std::array<double, 6> inverse{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
  bool clamp_edges = false;  // otherwise out-of-range samples read 0

  bool hflip = false;
  bool vflip = false;
  int shift_x = 0;
  int shift_y = 0;
  double rotation_deg = 0.0;
  double crop_scale = 1.0;
  int crop_attempts = 0;
  bool crop_fallback = false;

  // Photometric parameters; neutral values mean "not applied".
  double brightness = 0.0;
  double contrast = 1.0;
  double gamma = 1.0;
  double blur_sigma = 0.0;
  double noise_sigma = 0.0;
  double sharpen_amount = 0.0;
  bool cutout = false;
  int cutout_row = 0;
  int cutout_col = 0;
  int cutout_height = 0;
  int cutout_width = 0;
  double cutout_fill = 0.0;

  bool is_geometric_identity() const;
};

struct AugmentedView {
  GrayImage image;
  std::optional<LabelMask> mask;
  TransformRecord record;
};

struct WeakAugmentOptions {
  double flip_prob = 0.5;
  double max_shift_fraction = 0.05;
};

struct StrongAugmentOptions {
  double jitter_prob = 0.8;
  double max_brightness = 0.1;
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double gamma_min = 0.7;
  double gamma_max = 1.4;
  double blur_prob = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  double cutout_prob = 0.5;
  double cutout_min_fraction = 0.1;
  double cutout_max_fraction = 0.3;
  // Intensity written into cutout boxes; trainers set the corpus mean.
  double cutout_fill = 0.5;
};

struct TemplateAugmentOptions {
  double flip_prob = 0.5;  // per axis
  double rotation_prob = 0.5;
  double max_rotation_deg = 15.0;
  double crop_scale_min = 0.7;
  double crop_scale_max = 1.0;
  double noise_prob = 0.3;
  double noise_sigma_max = 0.03;
  double blur_prob = 0.2;
  double blur_sigma_min = 0.3;
  double blur_sigma_max = 1.0;
  double sharpen_prob = 0.2;
  double sharpen_min = 0.3;
  double sharpen_max = 1.0;
};

// Random horizontal flip and integer translation (zero fill). The mask, if
// given, receives the identical geometry.
AugmentedView weak_augment(const GrayImage& image, const std::optional<LabelMask>& mask,
                           std::uint64_t seed, const WeakAugmentOptions& options = {});
inline AugmentedView weak_augment(const GrayImage& image, std::uint64_t seed) {
  return weak_augment(image, std::nullopt, seed);
}

// Photometric jitter, blur and cutout on the image only.
AugmentedView strong_augment(const AugmentedView& view, std::uint64_t seed,
                             const StrongAugmentOptions& options = {});

// Flips, small rotation and an area-scale crop resized back to full size;
// bilinear for the image, nearest for the mask. Then noise/blur/sharpen on the
// image only.
AugmentedView template_augment(const GrayImage& image, const LabelMask& mask, std::uint64_t seed,
                               const TemplateAugmentOptions& options = {});

// Replays the geometric part of a record.
GrayImage warp_image(const GrayImage& image, const TransformRecord& record);
LabelMask warp_mask(const LabelMask& mask, const TransformRecord& record);
std::vector<double> warp_plane(const std::vector<double>& plane, int height, int width,
                               const TransformRecord& record);
// Record whose geometry undoes `record` (for invertible weak transforms).
TransformRecord inverse_geometry(const TransformRecord& record);

// Class pixels alpha-blended with pure green, everything else gray.
RgbImage make_overlay(const GrayImage& image, const LabelMask& mask, int class_id,
                      double alpha = 0.5);

}  // namespace refseg
