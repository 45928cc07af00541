#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "refseg/image.hpp"

namespace refseg {

inline constexpr int kDescriptorDim = 128;

// L2-normalized retrieval embedding.
struct Descriptor {
  std::vector<double> values;

  double dot(const Descriptor& other) const;
  bool operator==(const Descriptor&) const = default;
};

// Hand-crafted 128-d embedding: 8×8 mean-pooled intensities, a 32-bin
// intensity histogram and a 32-bin magnitude-weighted gradient-orientation
// histogram. Each block is normalized, then the concatenation is normalized.
Descriptor compute_descriptor(const GrayImage& image);

using DescriptorFn = std::function<Descriptor(const GrayImage&)>;

struct TemplateEntry {
  GrayImage image;
  LabelMask mask;
  Descriptor descriptor;
  std::string patient;
  std::set<int> classes;
  std::uint64_t image_hash = 0;
};

struct Candidate {
  std::size_t index = 0;
  double similarity = 0.0;
};

struct SampleDraw {
  std::size_t chosen = 0;
  std::vector<std::size_t> candidates;
  std::vector<double> similarities;
  std::vector<double> probabilities;
};

// Sentinel for "no class filter".
inline constexpr int kAnyClass = -1;

class TemplateBank {
 public:
  explicit TemplateBank(double temperature = 0.1, DescriptorFn descriptor = compute_descriptor);

  // Computes the descriptor and appends. Rejects a second entry with the same
  // (patient id, image content).
  void insert(const GrayImage& image, const LabelMask& mask, const std::string& patient_id);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const TemplateEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<TemplateEntry>& entries() const { return entries_; }
  double temperature() const { return temperature_; }
  Descriptor describe(const GrayImage& image) const { return descriptor_(image); }

  // Cosine similarity ranking, descending; ties go to the lower index.
  // Entries of exclude_patient are skipped unless that leaves nothing.
  std::vector<Candidate> top_k(const Descriptor& query, int k, int class_id = kAnyClass,
                               const std::string& exclude_patient = {}) const;

  // Softmax over the top-3 similarities at the bank temperature, then one draw.
  SampleDraw sample(const Descriptor& query, int class_id, std::uint64_t seed,
                    const std::string& exclude_patient = {}) const;

  // Directory layout: images/, masks/, bank.json.
  void save(const std::filesystem::path& dir) const;
  static TemplateBank load(const std::filesystem::path& dir,
                           DescriptorFn descriptor = compute_descriptor);

 private:
  double temperature_;
  DescriptorFn descriptor_;
  std::vector<TemplateEntry> entries_;
};

// Softmax of similarities / temperature (max-shifted).
std::vector<double> softmax_probabilities(const std::vector<double>& similarities,
                                          double temperature);

std::uint64_t image_hash(const GrayImage& image);

}  // namespace refseg
