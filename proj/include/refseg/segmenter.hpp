#pragma once

// Reference-guided segmenter: a shared conv encoder, a per-class prompt token
// projected by a small MLP, a template memory path read through multi-head
// cross-attention, and an upsampling mask decoder. One forward pass decodes
// one class as a binary mask.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "refseg/autodiff.hpp"
#include "refseg/data.hpp"
#include "refseg/image.hpp"
#include "refseg/losses.hpp"
#include "refseg/params.hpp"
#include "refseg/templatebank.hpp"

namespace refseg {

struct SegmenterConfig {
  int num_classes = 2;
  int feature_channels = 64;  // C_f
  int feature_stride = 4;
  int prompt_dim = 64;        // D_p
  int heads = 4;
  int memory_pool = 2;        // memory tokens are average-pooled by this factor
  int decoder_channels = 16;
  double lambda_txt = 1.0;
  double lambda_mask = 1.0;
  double lambda_dice = 0.5;
  double lambda_bce = 0.5;
  double eps = 1e-6;
  bool use_prompt = true;
  bool use_memory = true;

  // Stage-1 training.
  std::string optimizer = "sgd";  // sgd | adam
  double learning_rate = 0.05;
  std::string lr_schedule = "cosine";  // constant | cosine (decays to 0 over the run)
  double label_ratio = 0.05;       // share of patients forming the template bank
  double spatial_prompt_prob = 0.5;  // chance of a simulated spatial prompt per step

  void validate() const;
  MaskLossWeights mask_weights() const { return {lambda_dice, lambda_bce, eps}; }
  bool operator==(const SegmenterConfig&) const = default;
};

nlohmann::json to_json(const SegmenterConfig& config);
// Missing keys keep their defaults.
SegmenterConfig segmenter_config_from_json(const nlohmann::json& j,
                                           SegmenterConfig base = SegmenterConfig{});
std::string config_hash(const nlohmann::json& config);

enum class PromptKind { None, ProbMap, Box, Points };
std::string to_string(PromptKind kind);
PromptKind prompt_kind_from_string(const std::string& s);

struct PixelBox {
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;  // inclusive corners
  bool operator==(const PixelBox&) const = default;
};

struct PointCue {
  int row = 0;
  int col = 0;
  bool positive = true;
  bool operator==(const PointCue&) const = default;
};

struct SpatialPrompt {
  PromptKind kind = PromptKind::None;
  ProbMap map;                 // PROB_MAP payload
  PixelBox box;                // BOX payload
  std::vector<PointCue> points;  // POINTS payload

  static SpatialPrompt none() { return {}; }
  static SpatialPrompt prob_map(ProbMap m);
  static SpatialPrompt from_box(PixelBox b);
  static SpatialPrompt from_points(std::vector<PointCue> p);

  // Soft H×W raster in [0, 1]: the map itself, a filled box, or Gaussian
  // bumps (sigma = 2 px) at positive points. All zeros for NONE.
  std::vector<double> raster(int height, int width) const;
};

struct SegmenterState {
  ParamSet params;
};

SegmenterState init_segmenter(const SegmenterConfig& config, std::uint64_t seed);

// Template as seen by the memory path: an image and the binary mask of the
// requested class.
struct TemplateInput {
  GrayImage image;
  std::vector<double> mask;
};

struct SegmenterOutputs {
  ad::Tensor f_img;        // C_f × H/4 × W/4
  ad::Tensor h_seg;        // C_f × 1 (zeros without the prompt path)
  ad::Tensor p;            // f_img + h_seg
  ad::Tensor f_memory;     // C_f × tokens, empty without the memory path
  ad::Tensor q;            // attended features, same shape as f_img
  ad::Tensor logits;       // 1 × H × W
  ad::Tensor class_logits; // (C + 1) × 1
};

// Recorded variables of one forward pass.
struct SegmenterGraph {
  ad::Var f_img, h_seg, p, f_memory, q, logits, class_logits;
  SegmenterOutputs values() const;
};

// Optional replacement for the class-token lookup: an external D_p-vector
// (for example an embedding from a language model).
using ExternalToken = std::optional<std::vector<double>>;

SegmenterGraph forward_graph(Binder& bind, const SegmenterConfig& config, const GrayImage& image,
                             const TemplateInput* templ, int class_id,
                             const SpatialPrompt& spatial, const ExternalToken& token = {});

SegmenterOutputs forward(const SegmenterState& state, const SegmenterConfig& config,
                         const GrayImage& image, const TemplateInput* templ, int class_id,
                         const SpatialPrompt& spatial, const ExternalToken& token = {});

struct Stage1Loss {
  double total = 0.0;
  double text = 0.0;
  double mask = 0.0;
};

// lambda_txt * text_loss + lambda_mask * mask_loss. The text term is dropped
// when the prompt path is disabled.
Stage1Loss stage1_loss(const SegmenterOutputs& out, const LabelMask& target, int class_id,
                       const SegmenterConfig& config);
ad::Var stage1_loss(const SegmenterGraph& g, const LabelMask& target, int class_id,
                    const SegmenterConfig& config, Stage1Loss* parts = nullptr);

struct Stage1Result {
  SegmenterState state;
  std::vector<Stage1Loss> curve;
};

// Trains on the labeled split; templates come from `bank`, excluding the
// query's own patient when possible.
Stage1Result train_stage1(const DatasetManifest& manifest, const TemplateBank& bank,
                          const SegmenterConfig& config, int steps, std::uint64_t seed,
                          const std::function<void(int, const Stage1Loss&)>& on_step = {});

// Bank of all labeled entries of a manifest.
TemplateBank build_bank(const DatasetManifest& manifest, double temperature = 0.1);
// Bank of a patient-level `ratio` share of the labeled split.
TemplateBank build_pretrain_bank(const DatasetManifest& manifest, double ratio, std::uint64_t seed,
                                 double temperature = 0.1);

TemplateInput template_input(const TemplateEntry& entry, int class_id);

// Draws a template for class_id, runs the forward pass and returns the
// sigmoid foreground map.
ProbMap predict(const SegmenterState& state, const SegmenterConfig& config,
                const GrayImage& image, const TemplateBank& bank, int class_id,
                const SpatialPrompt& spatial, std::uint64_t seed, SampleDraw* draw = nullptr);

// Inference helper for repeated queries against a fixed bank. Encodes each
// query image once and caches per-(template, class) memory features.
class SegmenterRunner {
 public:
  SegmenterRunner(const SegmenterState& state, const SegmenterConfig& config,
                  const TemplateBank& bank);

  // Foreground logits for each class 1..C (class_id = index + 1).
  std::vector<std::vector<double>> class_logits(const GrayImage& image,
                                                const std::vector<SpatialPrompt>& spatial,
                                                std::uint64_t seed,
                                                std::vector<SampleDraw>* draws = nullptr);

 private:
  const SegmenterState& state_;
  SegmenterConfig config_;
  const TemplateBank& bank_;
  std::map<std::pair<std::size_t, int>, ad::Tensor> memory_cache_;
};

// Checkpoint: {"kind", "version", "config", "config_hash", "seed", "params"}.
void save_segmenter(const SegmenterState& state, const SegmenterConfig& config,
                    std::uint64_t seed, const std::filesystem::path& path);
std::pair<SegmenterState, SegmenterConfig> load_segmenter(const std::filesystem::path& path);

}  // namespace refseg
