#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "refseg/data.hpp"
#include "refseg/error.hpp"
#include "support.hpp"

using namespace refseg;
using testing::TempDir;

namespace {

SyntheticOptions small_options(std::uint64_t seed = 1) {
  SyntheticOptions o;
  o.seed = seed;
  o.num_patients = 20;
  o.slices_per_patient = 4;
  o.num_classes = 2;
  o.size = 64;
  return o;
}

}  // namespace

TEST_CASE("generate_synthetic writes one image/mask pair per slice") {
  TempDir dir("gen");
  DatasetManifest m = generate_synthetic(small_options(), dir.path());
  CHECK(m.entries.size() == 80);
  CHECK(m.patients().size() == 20);
  CHECK(m.patients(Split::Test).size() == 4);
  for (const auto& e : m.entries) {
    CHECK(std::filesystem::exists(dir.path() / e.image));
    REQUIRE(e.mask);
    CHECK(std::filesystem::exists(dir.path() / *e.mask));
  }
  GrayImage img = m.image(0);
  LabelMask mask = m.mask(0);
  CHECK(img.height == 64);
  CHECK(mask.num_classes == 2);
  CHECK_NOTHROW(img.validate());
  CHECK_NOTHROW(mask.validate());
}

TEST_CASE("generate_synthetic is byte-identical across runs") {
  TempDir a("gen_a"), b("gen_b");
  auto ma = generate_synthetic(small_options(3), a.path());
  generate_synthetic(small_options(3), b.path());
  for (const auto& e : ma.entries) {
    CHECK(testing::read_file(a.path() / e.image) == testing::read_file(b.path() / e.image));
    CHECK(testing::read_file(a.path() / *e.mask) == testing::read_file(b.path() / *e.mask));
  }
  CHECK(testing::read_file(a.path() / "manifest.json") == testing::read_file(b.path() / "manifest.json"));
}

TEST_CASE("manifest round-trips through disk") {
  TempDir dir("manifest");
  DatasetManifest m = split_labeled(generate_synthetic(small_options(), dir.path()), 0.1, 4);
  save_manifest(m);
  DatasetManifest back = load_manifest(dir.path());
  CHECK(back == m);
  CHECK(load_manifest(dir.path() / "manifest.json") == m);
}

TEST_CASE("hand-written manifest loads with all entries") {
  TempDir dir("handmade");
  std::filesystem::create_directories(dir.path() / "images");
  std::filesystem::create_directories(dir.path() / "masks");
  nlohmann::json j;
  j["num_classes"] = 1;
  j["classes"] = {"organ"};
  j["entries"] = nlohmann::json::array();
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    const std::string name = "s" + std::to_string(i) + ".png";
    save_image_png(testing::random_image(16, 16, rng), dir.path() / "images" / name);
    save_mask_png(testing::random_mask(16, 16, 1, 0.3, rng), dir.path() / "masks" / name);
    j["entries"].push_back({{"image", "images/" + name},
                            {"mask", "masks/" + name},
                            {"patient", "p" + std::to_string(i / 2)},
                            {"split", i < 2 ? "labeled" : (i < 8 ? "unlabeled" : "test")}});
  }
  std::ofstream(dir.path() / "manifest.json") << j.dump();
  DatasetManifest m = load_manifest(dir.path());
  CHECK(m.entries.size() == 10);
  CHECK(m.indices(Split::Labeled).size() == 2);
  CHECK(m.indices(Split::Test).size() == 2);

  SUBCASE("a labeled entry without a mask is named in the error") {
    j["entries"][1]["mask"] = nullptr;
    std::ofstream(dir.path() / "manifest.json") << j.dump();
    try {
      load_manifest(dir.path());
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("images/s1.png") != std::string::npos);
    }
  }
  SUBCASE("unknown split is rejected") {
    j["entries"][0]["split"] = "validation";
    std::ofstream(dir.path() / "manifest.json") << j.dump();
    CHECK_THROWS_AS(load_manifest(dir.path()), Error);
  }
  SUBCASE("missing file is rejected") {
    CHECK_THROWS_AS(load_manifest(dir.path() / "nope"), Error);
  }
}

TEST_CASE("split_labeled picks patients at the requested ratio") {
  TempDir dir("split");
  DatasetManifest m = generate_synthetic(small_options(), dir.path());
  const auto test_before = m.indices(Split::Test);

  auto one = split_labeled(m, 0.05, 1);
  CHECK(one.patients(Split::Labeled).size() == 1);
  CHECK(one.indices(Split::Labeled).size() == 4);
  CHECK(one.indices(Split::Test) == test_before);

  auto all = split_labeled(m, 1.0, 1);
  CHECK(all.patients(Split::Labeled).size() == 16);
  CHECK(all.indices(Split::Unlabeled).empty());

  auto s1 = split_labeled(m, 0.10, 1), s2 = split_labeled(m, 0.10, 2);
  CHECK(s1.patients(Split::Labeled).size() == 2);
  CHECK(s2.patients(Split::Labeled).size() == 2);
  CHECK(s1.patients(Split::Labeled) != s2.patients(Split::Labeled));

  // Splits are patient-disjoint.
  std::map<std::string, std::set<Split>> seen;
  for (const auto& e : s1.entries) seen[e.patient].insert(e.split);
  for (const auto& [p, splits] : seen) CHECK(splits.size() == 1);

  CHECK_THROWS_AS(split_labeled(m, 0.0, 1), Error);
  CHECK_THROWS_AS(split_labeled(m, 1.5, 1), Error);
}

TEST_CASE("weak_augment") {
  Rng rng(11);
  GrayImage img = testing::random_image(32, 32, rng);

  SUBCASE("identity draw returns the input") {
    WeakAugmentOptions o;
    o.flip_prob = 0.0;
    o.max_shift_fraction = 0.0;
    auto v = weak_augment(img, std::nullopt, 3, o);
    CHECK(v.image == img);
    CHECK(v.record.is_geometric_identity());
  }
  SUBCASE("flip-only draw mirrors rows and preserves the pixel multiset") {
    WeakAugmentOptions o;
    o.flip_prob = 1.0;
    o.max_shift_fraction = 0.0;
    auto v = weak_augment(img, std::nullopt, 3, o);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) CHECK(v.image.at(r, c) == img.at(r, 31 - c));
    auto a = img.pixels, b = v.image.pixels;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
  SUBCASE("flip frequency matches its probability") {
    int flips = 0;
    for (int i = 0; i < 1000; ++i) flips += weak_augment(img, derive_seed(9, "w", {std::uint64_t(i)})).record.hflip;
    CHECK(std::abs(flips / 1000.0 - 0.5) <= 0.05);
  }
  SUBCASE("mask follows the image geometry") {
    LabelMask mask = testing::random_mask(32, 32, 2, 0.4, rng);
    GrayImage coded(32, 32);
    for (std::size_t i = 0; i < coded.size(); ++i) coded.pixels[i] = mask.labels[i] / 2.0;
    for (int s = 0; s < 20; ++s) {
      auto v = weak_augment(coded, mask, s);
      for (std::size_t i = 0; i < coded.size(); ++i) CHECK(v.image.pixels[i] == v.mask->labels[i] / 2.0);
    }
  }
}

TEST_CASE("strong_augment leaves the mask alone") {
  Rng rng(2);
  GrayImage img = testing::random_image(32, 32, rng);
  LabelMask mask = testing::random_mask(32, 32, 2, 0.3, rng);
  AugmentedView base{img, mask, {}};
  StrongAugmentOptions o;
  o.jitter_prob = 1.0;
  o.blur_prob = 1.0;
  o.cutout_prob = 0.0;
  auto v = strong_augment(base, 5, o);
  CHECK(*v.mask == mask);
  CHECK(v.image != img);
  for (double p : v.image.pixels) CHECK((p >= 0.0 && p <= 1.0));

  SUBCASE("cutout writes a constant block at the fill value") {
    StrongAugmentOptions c;
    c.jitter_prob = 0.0;
    c.blur_prob = 0.0;
    c.cutout_prob = 1.0;
    c.cutout_fill = mean_intensity(img);
    auto cv = strong_augment(base, 8, c);
    REQUIRE(cv.record.cutout);
    const auto& r = cv.record;
    CHECK(r.cutout_height >= 1);
    for (int y = r.cutout_row; y < r.cutout_row + r.cutout_height; ++y)
      for (int x = r.cutout_col; x < r.cutout_col + r.cutout_width; ++x)
        CHECK(cv.image.at(y, x) == c.cutout_fill);
  }
}

TEST_CASE("template_augment") {
  Rng rng(4);
  GrayImage img = testing::random_image(32, 32, rng);
  LabelMask mask = testing::random_blobs(32, 32, 2, rng);
  mask.num_classes = 2;

  SUBCASE("identity draw returns the inputs") {
    TemplateAugmentOptions o;
    o.flip_prob = o.rotation_prob = o.noise_prob = o.blur_prob = o.sharpen_prob = 0.0;
    o.crop_scale_min = o.crop_scale_max = 1.0;
    auto v = template_augment(img, mask, 1, o);
    CHECK(v.image == img);
    CHECK(*v.mask == mask);
  }
  SUBCASE("labels stay within the input label set") {
    const auto present = mask.classes_present();
    for (int s = 0; s < 50; ++s) {
      auto v = template_augment(img, mask, s);
      for (int k : v.mask->classes_present()) CHECK(present.count(k) == 1);
    }
  }
  SUBCASE("crop scales are uniform on (0.7, 1.0)") {
    std::vector<double> scales;
    for (int s = 0; s < 1000; ++s) scales.push_back(template_augment(img, mask, derive_seed(2, "t", {std::uint64_t(s)})).record.crop_scale);
    std::sort(scales.begin(), scales.end());
    double d = 0.0;
    for (std::size_t i = 0; i < scales.size(); ++i) {
      const double f = (scales[i] - 0.7) / 0.3;
      CHECK((scales[i] >= 0.7 && scales[i] <= 1.0));
      d = std::max({d, std::abs(f - double(i) / scales.size()), std::abs(f - double(i + 1) / scales.size())});
    }
    // Kolmogorov-Smirnov critical value at p = 0.01 for n = 1000.
    CHECK(d < 1.628 / std::sqrt(1000.0));
  }
}

TEST_CASE("make_overlay blends green on class pixels only") {
  Rng rng(6);
  GrayImage img = testing::random_image(8, 8, rng);
  SUBCASE("empty mask gives gray") {
    RgbImage o = make_overlay(img, LabelMask(8, 8, 1), 1);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        CHECK(o.at(0, r, c) == img.at(r, c));
        CHECK(o.at(1, r, c) == img.at(r, c));
        CHECK(o.at(2, r, c) == img.at(r, c));
      }
  }
  SUBCASE("full mask at alpha 0.5") {
    RgbImage o = make_overlay(img, LabelMask(8, 8, 1, 1), 1, 0.5);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) CHECK(o.at(1, r, c) == doctest::Approx(0.5 * img.at(r, c) + 0.5).epsilon(1e-15));
  }
  SUBCASE("checkerboard") {
    LabelMask m(8, 8, 1);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) m.at(r, c) = (r + c) % 2;
    RgbImage o = make_overlay(img, m, 1, 0.5);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        const double g = img.at(r, c);
        if (m.at(r, c)) {
          CHECK(o.at(0, r, c) == doctest::Approx(0.5 * g).epsilon(1e-15));
          CHECK(o.at(1, r, c) == doctest::Approx(0.5 * g + 0.5).epsilon(1e-15));
        } else {
          CHECK(o.at(1, r, c) == g);
        }
      }
  }
}

TEST_CASE("image validation and PNG storage") {
  GrayImage bad(4, 4);
  CHECK_THROWS_AS(bad.validate(), Error);
  GrayImage nan(8, 8);
  nan.pixels[3] = std::nan("");
  CHECK_THROWS_AS(nan.validate(), Error);

  TempDir dir("png");
  Rng rng(1);
  GrayImage img = quantize8(testing::random_image(12, 9, rng));
  save_image_png(img, dir / "i.png");
  CHECK(load_image_png(dir / "i.png") == img);
  LabelMask m = testing::random_mask(12, 9, 3, 0.5, rng);
  save_mask_png(m, dir / "m.png");
  CHECK(load_mask_png(dir / "m.png", 3) == m);
  CHECK_THROWS_AS(load_mask_png(dir / "m.png", 1), Error);
}

TEST_CASE("inverse_geometry undoes a weak transform on interior pixels") {
  Rng rng(8);
  GrayImage img = testing::random_image(32, 32, rng);
  for (int s = 0; s < 10; ++s) {
    auto v = weak_augment(img, s);
    GrayImage back = warp_image(v.image, inverse_geometry(v.record));
    for (int r = 3; r < 29; ++r)
      for (int c = 3; c < 29; ++c) CHECK(back.at(r, c) == doctest::Approx(img.at(r, c)).epsilon(1e-12));
  }
}
