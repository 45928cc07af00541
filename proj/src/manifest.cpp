#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "refseg/data.hpp"
#include "refseg/error.hpp"
#include "refseg/rng.hpp"

namespace refseg {

namespace fs = std::filesystem;

std::string to_string(Split s) {
  switch (s) {
    case Split::Labeled:
      return "labeled";
    case Split::Unlabeled:
      return "unlabeled";
    case Split::Test:
      return "test";
  }
  return "unlabeled";
}

Split split_from_string(const std::string& s) {
  if (s == "labeled") return Split::Labeled;
  if (s == "unlabeled") return Split::Unlabeled;
  if (s == "test") return Split::Test;
  throw Error("unknown split '" + s + "'");
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<std::string> DatasetManifest::patients() const {
  std::set<std::string> ids;
  for (const auto& e : entries) ids.insert(e.patient);
  return {ids.begin(), ids.end()};
}

std::vector<std::string> DatasetManifest::patients(Split split) const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (e.split == split) ids.insert(e.patient);
  }
  return {ids.begin(), ids.end()};
}

GrayImage DatasetManifest::image(std::size_t i) const {
  return load_image_png(root / entries.at(i).image);
}

LabelMask DatasetManifest::mask(std::size_t i) const {
  const auto& e = entries.at(i);
  if (!e.mask) throw Error("entry " + e.image + " has no mask");
  return load_mask_png(root / *e.mask, num_classes);
}

void sort_entries(DatasetManifest& manifest) {
  std::stable_sort(manifest.entries.begin(), manifest.entries.end(),
                   [](const ManifestEntry& a, const ManifestEntry& b) {
                     if (a.patient != b.patient) return a.patient < b.patient;
                     return fs::path(a.image).filename() < fs::path(b.image).filename();
                   });
}

DatasetManifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream in(file);
  if (!in) throw Error("manifest not found: " + file.string());

  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed manifest " + file.string() + ": " + e.what());
  }

  DatasetManifest m;
  m.root = file.parent_path();
  try {
    m.num_classes = j.at("num_classes").get<int>();
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.image = je.at("image").get<std::string>();
      if (je.contains("mask") && !je.at("mask").is_null()) e.mask = je.at("mask").get<std::string>();
      e.patient = je.at("patient").get<std::string>();
      e.split = split_from_string(je.at("split").get<std::string>());
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed manifest " + file.string() + ": " + e.what());
  }

  if (m.num_classes < 1) throw Error("manifest num_classes must be >= 1");
  if (m.class_names.size() != static_cast<std::size_t>(m.num_classes)) {
    throw Error("manifest lists " + std::to_string(m.class_names.size()) + " class names for " +
                std::to_string(m.num_classes) + " classes");
  }
  for (const auto& e : m.entries) {
    if (e.patient.empty()) throw Error("entry " + e.image + " has an empty patient id");
    if (e.split != Split::Unlabeled && !e.mask) {
      throw Error("entry " + e.image + " is " + to_string(e.split) + " but has no mask");
    }
    if (!fs::exists(m.root / e.image)) throw Error("entry image not found: " + e.image);
    if (e.mask && !fs::exists(m.root / *e.mask)) throw Error("entry mask not found: " + *e.mask);
  }
  sort_entries(m);
  return m;
}

void save_manifest(const DatasetManifest& manifest) {
  DatasetManifest sorted = manifest;
  sort_entries(sorted);
  nlohmann::json j;
  j["num_classes"] = sorted.num_classes;
  j["classes"] = sorted.class_names;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : sorted.entries) {
    nlohmann::json je;
    je["image"] = e.image;
    je["mask"] = e.mask ? nlohmann::json(*e.mask) : nlohmann::json(nullptr);
    je["patient"] = e.patient;
    je["split"] = to_string(e.split);
    j["entries"].push_back(std::move(je));
  }
  fs::create_directories(sorted.root);
  std::ofstream out(sorted.root / "manifest.json");
  if (!out) throw Error("cannot write manifest under " + sorted.root.string());
  out << j.dump(2) << '\n';
}

DatasetManifest split_labeled(const DatasetManifest& manifest, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw Error("label ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  std::set<std::string> pool;
  for (const auto& e : manifest.entries) {
    if (e.split != Split::Test) pool.insert(e.patient);
  }
  std::vector<std::string> patients(pool.begin(), pool.end());
  // The small slack keeps exact products such as 0.05 * 20 from rounding up.
  const auto n_labeled = static_cast<std::size_t>(
      std::ceil(ratio * static_cast<double>(patients.size()) - 1e-9));
  if (n_labeled == 0) {
    throw Error("label ratio " + std::to_string(ratio) + " leaves zero labeled patients out of " +
                std::to_string(patients.size()));
  }

  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = patients.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(patients[i - 1], patients[j]);
  }
  const std::set<std::string> labeled(patients.begin(),
                                      patients.begin() + static_cast<std::ptrdiff_t>(n_labeled));

  DatasetManifest out = manifest;
  for (auto& e : out.entries) {
    if (e.split == Split::Test) continue;
    if (labeled.count(e.patient)) {
      if (!e.mask) throw Error("entry " + e.image + " selected as labeled but has no mask");
      e.split = Split::Labeled;
    } else {
      e.split = Split::Unlabeled;
    }
  }
  sort_entries(out);
  return out;
}

}  // namespace refseg
