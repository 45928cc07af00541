#pragma once

// Experiment orchestration shared by the command-line tool, the acceptance
// run and the Python bindings.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refseg/data.hpp"
#include "refseg/metrics.hpp"
#include "refseg/segmenter.hpp"
#include "refseg/ssl.hpp"

namespace refseg {

struct ExperimentConfig {
  std::string data;           // target corpus root or manifest
  std::string pretrain_data;  // fully annotated Stage-1 corpus
  std::string out = "out";
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1};  // ablation seeds
  double ratio = 0.05;  // labeled share of target patients
  int pretrain_steps = 3000;
  // Synthetic corpus shape.
  int patients = 20;
  int slices = 4;
  int classes = 2;
  int size = 64;
  int pretrain_patients = 40;
  // Ablation switches, applied on top of the nested configs.
  bool use_prompt = true;
  bool use_memory = true;
  bool use_feedback = true;
  bool use_assistant = true;
  SegmenterConfig segmenter;
  SSLConfig ssl;

  void validate() const;
  // Nested configs with the ablation switches applied.
  SegmenterConfig effective_segmenter() const;
  SSLConfig effective_ssl() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                             ExperimentConfig base = ExperimentConfig{});
// Fingerprint of everything except filesystem paths.
std::string experiment_hash(const ExperimentConfig& config);

// The two corpora of one experiment seed: the target corpus split at `ratio`,
// and a separate, fully labeled pretraining corpus (seed 1000 + seed).
DatasetManifest make_target_corpus(const ExperimentConfig& config, std::uint64_t seed,
                                   const std::filesystem::path& root);
DatasetManifest make_pretrain_corpus(const ExperimentConfig& config, std::uint64_t seed,
                                     const std::filesystem::path& root);

// Mean over split slices and classes of Dice(sigmoid > 0.5, truth) for the
// segmenter with templates drawn from `bank` and no spatial prompt.
double segmenter_dice(const SegmenterState& state, const SegmenterConfig& config,
                      const DatasetManifest& manifest, const TemplateBank& bank,
                      std::uint64_t seed, Split split = Split::Test);

struct AblationVariant {
  std::string name;
  bool use_prompt = true;
  bool use_memory = true;
  bool use_feedback = true;
  bool use_assistant = true;
};

// full, no-prompt, no-memory, no-feedback; optionally the teacher-only
// baseline (no-assistant) as a fifth row.
std::vector<AblationVariant> ablation_grid(bool with_baseline = false);

struct AblationRow {
  AblationVariant variant;
  std::uint64_t seed = 0;
  double stage1_dice = 0.0;  // NaN when no assistant is trained
  MetricReport report;
  bool reference = false;
};

// Trains one assistant per distinct (prompt, memory) pair and one student per
// variant, all from the same master seed.
std::vector<AblationRow> run_ablation(const DatasetManifest& target,
                                      const DatasetManifest& pretrain,
                                      const ExperimentConfig& config, std::uint64_t seed,
                                      const std::vector<AblationVariant>& variants);

std::string ablation_csv(const std::vector<AblationRow>& rows, int num_classes,
                         const std::string& config_hash);

// Command-line entry point; returns the process exit status.
int run_cli(int argc, const char* const* argv);

}  // namespace refseg
