#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "refseg/autodiff.hpp"
#include "refseg/data.hpp"
#include "refseg/image.hpp"
#include "refseg/params.hpp"
#include "refseg/rng.hpp"
#include "refseg/segmenter.hpp"
#include "refseg/templatebank.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

refseg::GrayImage random_image(int h, int w, refseg::Rng& rng);
// Each pixel independently foreground (label 1..classes) with probability p.
refseg::LabelMask random_mask(int h, int w, int classes, double p, refseg::Rng& rng);
// Union of a few random rectangles, labelled class_id.
refseg::LabelMask random_blobs(int h, int w, int class_id, refseg::Rng& rng);
refseg::ad::Tensor random_tensor(std::vector<int> shape, double scale, refseg::Rng& rng);
std::vector<double> random_vector(std::size_t n, double lo, double hi, refseg::Rng& rng);

// Bank whose entries have exactly the given cosine similarities to the
// returned query. Descriptors are read from the first two pixels.
struct SimilarityBank {
  refseg::TemplateBank bank;
  refseg::Descriptor query;
};
SimilarityBank similarity_bank(const std::vector<double>& sims, double temperature);

// Central finite differences on n randomly chosen parameter elements.
// The loss callback returns the value and, when grads is non-null, fills the
// analytic gradient. Relative error is |a - n| / max(|a|, |n|, floor).
struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;  // draws whose +-h evaluations changed the ReLU pattern
  std::string worst;
};
using LossFn = std::function<double(const refseg::ParamSet&, refseg::ParamSet*)>;
GradCheck gradcheck(const refseg::ParamSet& params, const LossFn& loss, int n, std::uint64_t seed,
                    double h = 1e-4, double floor = 1e-6);

// Same, for piecewise-smooth losses: the callback also reports the tape's
// activation pattern. A draw whose perturbed evaluations leave the smooth
// piece of the unperturbed point is skipped and replaced by a fresh draw.
using PatternLossFn =
    std::function<double(const refseg::ParamSet&, refseg::ParamSet*, std::uint64_t* pattern)>;
GradCheck gradcheck_smooth(const refseg::ParamSet& params, const PatternLossFn& loss, int n,
                           std::uint64_t seed, double h = 1e-4, double floor = 1e-6);

// Narrow segmenter that keeps unit tests fast.
refseg::SegmenterConfig tiny_segmenter_config(int num_classes = 2);

std::string read_file(const std::filesystem::path& p);
std::string file_digest(const std::filesystem::path& p);

// Runs the command-line entry point in-process.
int cli(const std::vector<std::string>& args);

}  // namespace testing
