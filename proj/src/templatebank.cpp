#include "refseg/templatebank.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "refseg/error.hpp"
#include "refseg/hash.hpp"
#include "refseg/rng.hpp"

namespace refseg {

namespace fs = std::filesystem;

namespace {

void normalize(std::vector<double>::iterator begin, std::vector<double>::iterator end) {
  double n2 = 0.0;
  for (auto it = begin; it != end; ++it) n2 += *it * *it;
  if (n2 <= 0.0) return;
  const double inv = 1.0 / std::sqrt(n2);
  for (auto it = begin; it != end; ++it) *it *= inv;
}

}  // namespace

double Descriptor::dot(const Descriptor& other) const {
  if (values.size() != other.values.size()) throw Error("descriptor dimension mismatch");
  return std::inner_product(values.begin(), values.end(), other.values.begin(), 0.0);
}

Descriptor compute_descriptor(const GrayImage& image) {
  image.validate();
  const int h = image.height, w = image.width;
  std::vector<double> v(kDescriptorDim, 0.0);

  // (a) 8×8 mean-pooled grid.
  for (int gy = 0; gy < 8; ++gy) {
    const int r0 = gy * h / 8, r1 = (gy + 1) * h / 8;
    for (int gx = 0; gx < 8; ++gx) {
      const int c0 = gx * w / 8, c1 = (gx + 1) * w / 8;
      double s = 0.0;
      for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) s += image.at(r, c);
      }
      v[gy * 8 + gx] = s / ((r1 - r0) * (c1 - c0));
    }
  }
  // (b) intensity histogram.
  for (double p : image.pixels) {
    const int bin = std::min(31, static_cast<int>(p * 32.0));
    v[64 + bin] += 1.0;
  }
  // (c) gradient orientation histogram, magnitude weighted.
  double total_mag = 0.0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double gx = image.at(r, std::min(c + 1, w - 1)) - image.at(r, std::max(c - 1, 0));
      const double gy = image.at(std::min(r + 1, h - 1), c) - image.at(std::max(r - 1, 0), c);
      const double mag = std::hypot(gx, gy);
      if (mag <= 0.0) continue;
      double angle = std::atan2(gy, gx);
      if (angle < 0.0) angle += 2.0 * M_PI;
      const int bin = std::min(31, static_cast<int>(angle / (2.0 * M_PI) * 32.0));
      v[96 + bin] += mag;
      total_mag += mag;
    }
  }
  if (total_mag <= 0.0) std::fill(v.begin() + 96, v.end(), 1.0);

  normalize(v.begin(), v.begin() + 64);
  normalize(v.begin() + 64, v.begin() + 96);
  normalize(v.begin() + 96, v.end());
  normalize(v.begin(), v.end());
  return Descriptor{std::move(v)};
}

std::uint64_t image_hash(const GrayImage& image) {
  std::uint64_t h = fnv1a64(std::to_string(image.height) + "x" + std::to_string(image.width));
  return fnv1a64(image.pixels, h);
}

std::vector<double> softmax_probabilities(const std::vector<double>& similarities,
                                          double temperature) {
  if (similarities.empty()) return {};
  if (!(temperature > 0.0)) throw Error("sampling temperature must be positive");
  const double mx = *std::max_element(similarities.begin(), similarities.end());
  std::vector<double> p(similarities.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((similarities[i] - mx) / temperature);
    total += p[i];
  }
  for (double& x : p) x /= total;
  return p;
}

TemplateBank::TemplateBank(double temperature, DescriptorFn descriptor)
    : temperature_(temperature), descriptor_(std::move(descriptor)) {
  if (!(temperature_ > 0.0)) throw Error("template bank temperature must be positive");
}

void TemplateBank::insert(const GrayImage& image, const LabelMask& mask,
                          const std::string& patient_id) {
  image.validate();
  mask.validate();
  if (mask.height != image.height || mask.width != image.width) {
    throw Error("template image and mask differ in shape");
  }
  const std::uint64_t h = image_hash(image);
  for (const auto& e : entries_) {
    if (e.patient == patient_id && e.image_hash == h && e.image == image) {
      throw Error("duplicate template for patient " + patient_id);
    }
  }
  TemplateEntry e;
  e.image = image;
  e.mask = mask;
  e.descriptor = descriptor_(image);
  e.patient = patient_id;
  e.classes = mask.classes_present();
  e.image_hash = h;
  entries_.push_back(std::move(e));
}

std::vector<Candidate> TemplateBank::top_k(const Descriptor& query, int k, int class_id,
                                           const std::string& exclude_patient) const {
  if (entries_.empty()) throw Error("template bank is empty");
  if (k < 1) throw Error("top_k needs k >= 1");
  std::vector<Candidate> all;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (class_id != kAnyClass && !entries_[i].classes.count(class_id)) continue;
    all.push_back({i, entries_[i].descriptor.dot(query)});
  }
  if (!exclude_patient.empty()) {
    std::vector<Candidate> kept;
    for (const auto& c : all) {
      if (entries_[c.index].patient != exclude_patient) kept.push_back(c);
    }
    if (!kept.empty()) all = std::move(kept);
  }
  if (all.empty()) {
    throw Error("no template in the bank contains class " + std::to_string(class_id));
  }
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                    [](const Candidate& a, const Candidate& b) {
                      if (a.similarity != b.similarity) return a.similarity > b.similarity;
                      return a.index < b.index;
                    });
  all.resize(n);
  return all;
}

SampleDraw TemplateBank::sample(const Descriptor& query, int class_id, std::uint64_t seed,
                                const std::string& exclude_patient) const {
  SampleDraw draw;
  for (const auto& c : top_k(query, 3, class_id, exclude_patient)) {
    draw.candidates.push_back(c.index);
    draw.similarities.push_back(c.similarity);
  }
  draw.probabilities = softmax_probabilities(draw.similarities, temperature_);
  Rng rng(seed);
  const double u = rng.uniform();
  double acc = 0.0;
  draw.chosen = draw.candidates.back();
  for (std::size_t i = 0; i < draw.candidates.size(); ++i) {
    acc += draw.probabilities[i];
    if (u < acc) {
      draw.chosen = draw.candidates[i];
      break;
    }
  }
  return draw;
}

void TemplateBank::save(const fs::path& dir) const {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  nlohmann::json j;
  j["temperature"] = temperature_;
  j["num_classes"] = entries_.empty() ? 0 : entries_.front().mask.num_classes;
  j["entries"] = nlohmann::json::array();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    char name[32];
    std::snprintf(name, sizeof(name), "t%04zu.png", i);
    save_image_png(e.image, dir / "images" / name);
    save_mask_png(e.mask, dir / "masks" / name);
    j["entries"].push_back({{"image", std::string("images/") + name},
                            {"mask", std::string("masks/") + name},
                            {"patient", e.patient},
                            {"classes", std::vector<int>(e.classes.begin(), e.classes.end())},
                            {"descriptor", e.descriptor.values}});
  }
  std::ofstream out(dir / "bank.json");
  if (!out) throw Error("cannot write bank under " + dir.string());
  out << j.dump(1) << '\n';
}

TemplateBank TemplateBank::load(const fs::path& dir, DescriptorFn descriptor) {
  std::ifstream in(dir / "bank.json");
  if (!in) throw Error("bank.json not found under " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed bank.json: ") + e.what());
  }
  TemplateBank bank(j.at("temperature").get<double>(), std::move(descriptor));
  const int num_classes = j.at("num_classes").get<int>();
  for (const auto& je : j.at("entries")) {
    TemplateEntry e;
    e.image = load_image_png(dir / je.at("image").get<std::string>());
    e.mask = load_mask_png(dir / je.at("mask").get<std::string>(), num_classes);
    e.patient = je.at("patient").get<std::string>();
    e.descriptor.values = je.at("descriptor").get<std::vector<double>>();
    e.classes = e.mask.classes_present();
    e.image_hash = image_hash(e.image);
    bank.entries_.push_back(std::move(e));
  }
  return bank;
}

}  // namespace refseg
