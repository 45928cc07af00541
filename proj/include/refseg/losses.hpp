#pragma once

// Loss functions over raw logits. Each returns the scalar value and, when a
// gradient buffer is supplied, writes d(loss)/d(logits) into it. The tape
// wrappers at the bottom splice them into an autodiff graph.

#include <span>
#include <vector>

#include "refseg/autodiff.hpp"
#include "refseg/image.hpp"

namespace refseg {

struct MaskLossWeights {
  double dice = 0.5;
  double bce = 0.5;
  double eps = 1e-6;
};

// lambda_dice * (1 - 2 sum(m * s) / (sum(m) + sum(s) + eps)) + lambda_bce * mean BCE,
// with s = sigmoid(logits) and m the binary target.
double mask_loss(std::span<const double> logits, std::span<const double> target,
                 const MaskLossWeights& weights, std::vector<double>* grad = nullptr);

// Softmax cross-entropy of one logit vector against class_id.
double text_loss(std::span<const double> class_logits, int class_id,
                 std::vector<double>* grad = nullptr);

struct SupervisedLossWeights {
  double ce = 1.0;
  double dice = 1.0;
  double eps = 1e-6;
};

// Batch of (C+1)×H×W logit tensors against label masks. Cross-entropy is the
// per-pixel mean averaged over the batch; Dice pools intersections and sums
// over the batch per foreground class and averages the C class losses.
double supervised_loss(const std::vector<const ad::Tensor*>& logits,
                       const std::vector<const LabelMask*>& labels,
                       const SupervisedLossWeights& weights,
                       std::vector<std::vector<double>>* grads = nullptr);

// One unlabeled image's supervision targets in the strong-view frame.
struct UnlabeledTargets {
  const LabelMask* teacher_labels = nullptr;    // hard teacher pseudo-label
  const LabelMask* assistant_labels = nullptr;  // hard assistant pseudo-label (may be null if alpha_v = 0)
  const std::vector<std::uint8_t>* confident = nullptr;  // teacher confidence mask
};

struct JointLossParts {
  double total = 0.0;
  double teacher = 0.0;    // alpha_t-weighted share
  double assistant = 0.0;  // alpha_v-weighted share
};

// Dual-source hard cross-entropy over both strong streams, gated by the
// teacher confidence mask, normalized per image by its confident-pixel count
// and by 1 / (2 B_u) over the batch.
JointLossParts joint_unlabeled_loss(const std::vector<const ad::Tensor*>& logits_sf,
                                    const std::vector<const ad::Tensor*>& logits_si,
                                    const std::vector<UnlabeledTargets>& targets, double alpha_t,
                                    double alpha_v,
                                    std::vector<std::vector<double>>* grads_sf = nullptr,
                                    std::vector<std::vector<double>>* grads_si = nullptr);

// Teacher-only weak-to-strong loss (UniMatch v2). Written separately from the
// joint loss; the two must agree when alpha_v = 0.
double unimatch_unlabeled_loss(const std::vector<const ad::Tensor*>& logits_s1,
                               const std::vector<const ad::Tensor*>& logits_s2,
                               const std::vector<UnlabeledTargets>& targets,
                               std::vector<std::vector<double>>* grads_s1 = nullptr,
                               std::vector<std::vector<double>>* grads_s2 = nullptr);

// Per-pixel softmax over the leading class dimension.
ClassProbs softmax_classes(const ad::Tensor& logits);

// --- tape wrappers -----------------------------------------------------------

ad::Var mask_loss(const ad::Var& logits, std::vector<double> target, const MaskLossWeights& w);
ad::Var text_loss(const ad::Var& class_logits, int class_id);
ad::Var supervised_loss(const std::vector<ad::Var>& logits, std::vector<LabelMask> labels,
                        const SupervisedLossWeights& w);
// Returns the total; parts (detached values) are written to *parts if given.
ad::Var joint_unlabeled_loss(const std::vector<ad::Var>& logits_sf,
                             const std::vector<ad::Var>& logits_si,
                             const std::vector<UnlabeledTargets>& targets, double alpha_t,
                             double alpha_v, JointLossParts* parts = nullptr);
ad::Var unimatch_unlabeled_loss(const std::vector<ad::Var>& logits_s1,
                                const std::vector<ad::Var>& logits_s2,
                                const std::vector<UnlabeledTargets>& targets);

}  // namespace refseg
