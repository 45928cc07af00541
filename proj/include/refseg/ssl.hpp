#pragma once

// Stage-2 trainer: a student/EMA-teacher pair with weak-to-strong consistency
// and complementary channel dropout, plus assistant pseudo-labels, a cosine
// weight schedule and teacher-to-assistant prompts.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "refseg/autodiff.hpp"
#include "refseg/data.hpp"
#include "refseg/losses.hpp"
#include "refseg/metrics.hpp"
#include "refseg/params.hpp"
#include "refseg/segmenter.hpp"

namespace refseg {

struct SSLConfig {
  double lambda_ce = 1.0;
  double lambda_dice = 1.0;
  double lambda_u = 1.0;
  double tau_c = 0.95;
  double gamma = 0.99;
  int iterations = 800;  // T
  std::string schedule = "cosine";
  double feedback_start = 0.25;
  PromptKind feedback_kind = PromptKind::ProbMap;
  int batch_labeled = 2;
  int batch_unlabeled = 2;
  double dropout = 0.5;
  double eps = 1e-6;
  int student_channels = 32;
  std::string optimizer = "adam";  // adam | sgd
  double learning_rate = 1e-3;
  int eval_every = 0;  // 0: evaluate only at the end
  bool evaluate_teacher = true;  // otherwise the raw student is scored
  bool use_unlabeled = true;   // false: supervised-only training
  bool use_assistant = true;   // false: teacher-only unlabeled loss
  bool use_feedback = true;
  bool force_alpha_v_zero = false;  // keep the assistant path but pin (alpha_t, alpha_v) = (1, 0)

  void validate() const;
  SupervisedLossWeights supervised_weights() const { return {lambda_ce, lambda_dice, eps}; }
  bool operator==(const SSLConfig&) const = default;
};

nlohmann::json to_json(const SSLConfig& config);
SSLConfig ssl_config_from_json(const nlohmann::json& j, SSLConfig base = SSLConfig{});

// --- student ---------------------------------------------------------------

// g: three conv blocks to stride-4 features; h: two upsampling blocks and a
// (C + 1)-way classifier.
ParamSet init_student(int num_classes, int channels, std::uint64_t seed);

ad::Var student_encode(Binder& bind, const GrayImage& image);
ad::Var student_decode(Binder& bind, const ad::Var& features, int height, int width);
// Inference logits (C + 1)×H×W, no dropout.
ad::Tensor student_logits(const ParamSet& params, const GrayImage& image);
LabelMask student_predict(const ParamSet& params, const GrayImage& image, int num_classes);

// Channel keep-mask M ~ Bernoulli(1 - p)^C for one call.
std::vector<double> draw_channel_mask(int channels, double drop_prob, std::uint64_t seed);

struct DualForward {
  ad::Var e1, e2;               // masked, rescaled features
  ad::Var logits_sf, logits_si;  // decoded logits of both streams
  std::vector<double> mask;     // M
};

// e1 = g(x_s1) ⊙ M · 2, e2 = g(x_s2) ⊙ (1 − M) · 2.
DualForward student_forward_dual(Binder& bind, const GrayImage& x_s1, const GrayImage& x_s2,
                                 std::uint64_t seed, double drop_prob = 0.5);

// --- pseudo-labels ---------------------------------------------------------

struct TeacherLabels {
  ClassProbs probs;
  LabelMask labels;
  std::vector<std::uint8_t> confident;
};

TeacherLabels teacher_labels_from_probs(const ClassProbs& probs, int num_classes, double tau_c);
TeacherLabels teacher_pseudo_label(const ParamSet& teacher, int num_classes, const GrayImage& x_w,
                                   double tau_c);

struct AssistantLabels {
  ClassProbs probs;
  LabelMask labels;
};

// Softmax over [0, logit_1, ..., logit_C] per pixel, then arg-max with ties to
// the lower class.
AssistantLabels assemble_assistant(const std::vector<std::vector<double>>& class_logits, int height,
                                   int width);
AssistantLabels assistant_pseudo_label(SegmenterRunner& runner, const GrayImage& x_u,
                                       const std::vector<SpatialPrompt>& spatial,
                                       std::uint64_t seed);

// --- schedule, EMA, feedback -----------------------------------------------

struct ScheduleWeights {
  double alpha_t = 0.0;
  double alpha_v = 1.0;
};

// eta(t) = 0.5 (1 - cos(pi t / T)); alpha_t = eta, alpha_v = 1 - eta. t is
// clamped to [0, T].
ScheduleWeights schedule(int t, int total, const std::string& kind = "cosine");

void ema_update(ParamSet& teacher, const ParamSet& student, double gamma);

// PROB_MAP: the map itself; BOX: tight box of p > 0.5 (NONE if empty);
// POINTS: the five most probable pixels (ties in row-major order).
SpatialPrompt feedback_prompt(const ProbMap& p, PromptKind kind);

// --- training --------------------------------------------------------------

struct UnlabeledItem {
  GrayImage strong1, strong2;
  LabelMask teacher_labels;
  std::optional<LabelMask> assistant_labels;
  std::vector<std::uint8_t> confident;
};

// Everything one iteration's loss depends on besides the student weights.
struct Stage2Batch {
  std::vector<GrayImage> labeled_images;
  std::vector<LabelMask> labeled_masks;
  std::vector<UnlabeledItem> unlabeled;
  std::uint64_t dropout_seed = 0;
  ScheduleWeights weights;
};

struct Stage2Loss {
  double total = 0.0;
  double sup = 0.0;
  double u_teacher = 0.0;
  double u_assistant = 0.0;
};

// L_sup + lambda_u L_u. L_u is the joint dual-source loss when the assistant
// is in use and the teacher-only loss otherwise.
ad::Var stage2_loss(Binder& bind, const SSLConfig& config, const Stage2Batch& batch,
                    Stage2Loss* parts = nullptr);

struct SSLState {
  ParamSet student;
  ParamSet teacher;
  int t = 0;
  AdamState optimizer;
};

struct Stage2LogRow {
  int iteration = 0;
  Stage2Loss loss;
  ScheduleWeights weights;
  std::vector<double> test_dice;  // per class, filled on evaluation rows
};

struct Stage2Result {
  SSLState state;
  std::vector<Stage2LogRow> log;
  std::vector<std::pair<int, MetricReport>> history;
};

// The assistant (state, config, bank) may be absent when use_assistant is
// false. Evaluation runs the student on the test split.
struct Assistant {
  const SegmenterState* state = nullptr;
  const SegmenterConfig* config = nullptr;
  const TemplateBank* bank = nullptr;
};

Stage2Result train_stage2(const DatasetManifest& manifest, const Assistant& assistant,
                          const SSLConfig& config, std::uint64_t seed,
                          const std::function<void(const Stage2LogRow&)>& on_iteration = {});

MetricReport evaluate_student(const ParamSet& student, const DatasetManifest& manifest,
                              Split split = Split::Test);

// CSV: iteration,L_sup,L_u_teacher,L_u_assistant,alpha_t,alpha_v,dice_<c>...
std::string stage2_log_csv(const std::vector<Stage2LogRow>& log, int num_classes);

// Checkpoint: {"kind": "student", "config", "config_hash", "seed", "num_classes",
// "student", "teacher"}.
void save_student(const SSLState& state, const SSLConfig& config, int num_classes,
                  std::uint64_t seed, const std::filesystem::path& path);
struct StudentCheckpoint {
  ParamSet student;
  ParamSet teacher;
  SSLConfig config;
  int num_classes = 0;
};
StudentCheckpoint load_student(const std::filesystem::path& path);

}  // namespace refseg
