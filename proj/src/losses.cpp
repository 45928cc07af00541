#include "refseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "refseg/error.hpp"

namespace refseg {

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(std::string(what) + " contains a non-finite value");
  }
}

// Per-pixel log-softmax for a (C+1)×H×W tensor; fills probs and returns
// log-sum-exp per pixel.
void pixel_softmax(const ad::Tensor& logits, std::vector<double>& probs, std::vector<double>& lse) {
  const int k = logits.dim(0);
  const std::size_t n = static_cast<std::size_t>(logits.inner());
  probs.assign(logits.numel(), 0.0);
  lse.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits.data[i];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits.data[c * n + i]);
    double total = 0.0;
    for (int c = 0; c < k; ++c) {
      const double e = std::exp(logits.data[c * n + i] - mx);
      probs[c * n + i] = e;
      total += e;
    }
    for (int c = 0; c < k; ++c) probs[c * n + i] /= total;
    lse[i] = mx + std::log(total);
  }
}

void check_batch(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw Error(std::string(what) + ": batch size mismatch");
}

}  // namespace

double mask_loss(std::span<const double> logits, std::span<const double> target,
                 const MaskLossWeights& weights, std::vector<double>* grad) {
  if (logits.size() != target.size()) throw Error("mask_loss: logits and target differ in size");
  if (logits.empty()) throw Error("mask_loss: empty input");
  check_finite(logits, "mask_loss logits");
  const std::size_t n = logits.size();

  double inter = 0.0, sum_m = 0.0, sum_s = 0.0, bce = 0.0;
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = target[i];
    s[i] = sigmoid(logits[i]);
    inter += m * s[i];
    sum_m += m;
    sum_s += s[i];
    // -(m log s + (1 - m) log(1 - s)) in the stable logit form.
    bce += m * softplus(-logits[i]) + (1.0 - m) * softplus(logits[i]);
  }
  const double denom = sum_m + sum_s + weights.eps;
  const double dice = 1.0 - 2.0 * inter / denom;
  bce /= static_cast<double>(n);

  if (grad) {
    grad->assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double d_dice_ds = -2.0 * (target[i] * denom - inter) / (denom * denom);
      const double ds_dz = s[i] * (1.0 - s[i]);
      (*grad)[i] = weights.dice * d_dice_ds * ds_dz +
                   weights.bce * (s[i] - target[i]) / static_cast<double>(n);
    }
  }
  return weights.dice * dice + weights.bce * bce;
}

double text_loss(std::span<const double> class_logits, int class_id, std::vector<double>* grad) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= class_logits.size()) {
    throw Error("text_loss: class id out of range");
  }
  const double mx = *std::max_element(class_logits.begin(), class_logits.end());
  double total = 0.0;
  for (double z : class_logits) total += std::exp(z - mx);
  const double lse = mx + std::log(total);
  if (grad) {
    grad->resize(class_logits.size());
    for (std::size_t c = 0; c < class_logits.size(); ++c) {
      (*grad)[c] = std::exp(class_logits[c] - lse) - (static_cast<int>(c) == class_id ? 1.0 : 0.0);
    }
  }
  return lse - class_logits[static_cast<std::size_t>(class_id)];
}

ClassProbs softmax_classes(const ad::Tensor& logits) {
  ClassProbs out(logits.dim(0), logits.dim(1), logits.dim(2));
  std::vector<double> lse;
  pixel_softmax(logits, out.values, lse);
  return out;
}

double supervised_loss(const std::vector<const ad::Tensor*>& logits,
                       const std::vector<const LabelMask*>& labels,
                       const SupervisedLossWeights& weights,
                       std::vector<std::vector<double>>* grads) {
  check_batch(logits.size(), labels.size(), "supervised_loss");
  if (logits.empty()) throw Error("supervised_loss: empty labeled batch");
  const std::size_t batch = logits.size();
  const int k = logits.front()->dim(0);
  const int num_fg = k - 1;

  std::vector<std::vector<double>> probs(batch);
  std::vector<double> lse;
  double ce = 0.0;
  std::vector<double> inter(k, 0.0), sum_y(k, 0.0), sum_p(k, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const ad::Tensor& z = *logits[b];
    const LabelMask& y = *labels[b];
    const std::size_t n = static_cast<std::size_t>(z.inner());
    if (z.dim(0) != k || y.size() != n) throw Error("supervised_loss: shape mismatch");
    check_finite(z.data, "supervised_loss logits");
    pixel_softmax(z, probs[b], lse);
    double ce_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int yi = y.labels[i];
      ce_b += lse[i] - z.data[yi * n + i];
      for (int c = 1; c < k; ++c) {
        const double p = probs[b][c * n + i];
        inter[c] += (yi == c ? p : 0.0);
        sum_y[c] += (yi == c ? 1.0 : 0.0);
        sum_p[c] += p;
      }
    }
    ce += ce_b / static_cast<double>(n);
  }
  ce /= static_cast<double>(batch);

  double dice = 0.0;
  for (int c = 1; c < k; ++c) dice += 1.0 - 2.0 * inter[c] / (sum_y[c] + sum_p[c] + weights.eps);
  if (num_fg > 0) dice /= num_fg;

  if (grads) {
    grads->assign(batch, {});
    for (std::size_t b = 0; b < batch; ++b) {
      const ad::Tensor& z = *logits[b];
      const LabelMask& y = *labels[b];
      const std::size_t n = static_cast<std::size_t>(z.inner());
      auto& g = (*grads)[b];
      g.assign(z.numel(), 0.0);
      std::vector<double> dp(k);
      for (std::size_t i = 0; i < n; ++i) {
        const int yi = y.labels[i];
        // d(dice)/d(prob_c) for foreground classes; background has none.
        dp[0] = 0.0;
        for (int c = 1; c < k; ++c) {
          const double denom = sum_y[c] + sum_p[c] + weights.eps;
          dp[c] = weights.dice / num_fg * -2.0 * ((yi == c ? 1.0 : 0.0) * denom - inter[c]) /
                  (denom * denom);
        }
        double dot = 0.0;
        for (int c = 0; c < k; ++c) dot += probs[b][c * n + i] * dp[c];
        const double ce_scale = weights.ce / (static_cast<double>(batch) * static_cast<double>(n));
        for (int c = 0; c < k; ++c) {
          const double p = probs[b][c * n + i];
          g[c * n + i] = ce_scale * (p - (yi == c ? 1.0 : 0.0)) + p * (dp[c] - dot);
        }
      }
    }
  }
  return weights.ce * ce + weights.dice * dice;
}

JointLossParts joint_unlabeled_loss(const std::vector<const ad::Tensor*>& logits_sf,
                                    const std::vector<const ad::Tensor*>& logits_si,
                                    const std::vector<UnlabeledTargets>& targets, double alpha_t,
                                    double alpha_v, std::vector<std::vector<double>>* grads_sf,
                                    std::vector<std::vector<double>>* grads_si) {
  check_batch(logits_sf.size(), targets.size(), "joint_unlabeled_loss");
  check_batch(logits_si.size(), targets.size(), "joint_unlabeled_loss");
  const std::size_t batch = targets.size();
  JointLossParts parts;
  if (batch == 0) return parts;
  if (grads_sf) grads_sf->assign(batch, {});
  if (grads_si) grads_si->assign(batch, {});

  std::vector<double> probs, lse;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& t = targets[b];
    const std::size_t n = t.confident->size();
    std::size_t count = 0;
    for (auto c : *t.confident) count += c ? 1 : 0;
    if (grads_sf) (*grads_sf)[b].assign(logits_sf[b]->numel(), 0.0);
    if (grads_si) (*grads_si)[b].assign(logits_si[b]->numel(), 0.0);
    if (count == 0) continue;
    if (alpha_v != 0.0 && !t.assistant_labels) {
      throw Error("joint_unlabeled_loss: assistant labels missing with alpha_v != 0");
    }
    const double norm = 1.0 / (2.0 * static_cast<double>(batch) * static_cast<double>(count));

    for (int stream = 0; stream < 2; ++stream) {
      const ad::Tensor& z = stream == 0 ? *logits_sf[b] : *logits_si[b];
      if (static_cast<std::size_t>(z.inner()) != n) throw Error("joint_unlabeled_loss: shape mismatch");
      check_finite(z.data, "joint_unlabeled_loss logits");
      const int k = z.dim(0);
      pixel_softmax(z, probs, lse);
      std::vector<double>* g = nullptr;
      if (stream == 0 && grads_sf) g = &(*grads_sf)[b];
      if (stream == 1 && grads_si) g = &(*grads_si)[b];
      for (std::size_t i = 0; i < n; ++i) {
        if (!(*t.confident)[i]) continue;
        const int yw = t.teacher_labels->labels[i];
        const double h_w = lse[i] - z.data[yw * n + i];
        parts.teacher += norm * alpha_t * h_w;
        int yv = 0;
        if (alpha_v != 0.0) {
          yv = t.assistant_labels->labels[i];
          parts.assistant += norm * alpha_v * (lse[i] - z.data[yv * n + i]);
        }
        if (g) {
          for (int c = 0; c < k; ++c) {
            const double p = probs[c * n + i];
            double v = alpha_t * (p - (c == yw ? 1.0 : 0.0));
            if (alpha_v != 0.0) v += alpha_v * (p - (c == yv ? 1.0 : 0.0));
            (*g)[c * n + i] = norm * v;
          }
        }
      }
    }
  }
  parts.total = parts.teacher + parts.assistant;
  return parts;
}

double unimatch_unlabeled_loss(const std::vector<const ad::Tensor*>& logits_s1,
                               const std::vector<const ad::Tensor*>& logits_s2,
                               const std::vector<UnlabeledTargets>& targets,
                               std::vector<std::vector<double>>* grads_s1,
                               std::vector<std::vector<double>>* grads_s2) {
  check_batch(logits_s1.size(), targets.size(), "unimatch_unlabeled_loss");
  check_batch(logits_s2.size(), targets.size(), "unimatch_unlabeled_loss");
  const std::size_t batch = targets.size();
  double total = 0.0;
  std::vector<double> probs, lse;
  for (int stream = 0; stream < 2; ++stream) {
    const auto& logits = stream == 0 ? logits_s1 : logits_s2;
    auto* grads = stream == 0 ? grads_s1 : grads_s2;
    if (grads) grads->assign(batch, {});
    for (std::size_t b = 0; b < batch; ++b) {
      const ad::Tensor& z = *logits[b];
      const auto& conf = *targets[b].confident;
      const auto& yw = targets[b].teacher_labels->labels;
      const std::size_t n = conf.size();
      const int k = z.dim(0);
      if (grads) (*grads)[b].assign(z.numel(), 0.0);
      const auto count = static_cast<std::size_t>(std::count_if(conf.begin(), conf.end(), [](auto c) { return c != 0; }));
      if (count == 0) continue;
      pixel_softmax(z, probs, lse);
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (conf[i]) sum += lse[i] - z.data[yw[i] * n + i];
      }
      const double scale = 1.0 / (2.0 * static_cast<double>(batch) * static_cast<double>(count));
      total += scale * sum;
      if (grads) {
        for (std::size_t i = 0; i < n; ++i) {
          if (!conf[i]) continue;
          for (int c = 0; c < k; ++c) {
            (*grads)[b][c * n + i] = scale * (probs[c * n + i] - (c == yw[i] ? 1.0 : 0.0));
          }
        }
      }
    }
  }
  return total;
}

// --- tape wrappers -----------------------------------------------------------

namespace {

void accumulate(ad::Tape& tape, const ad::Var& v, const std::vector<double>& g, double scale) {
  if (ad::Tensor* buf = tape.grad_buffer(v)) {
    for (std::size_t i = 0; i < g.size(); ++i) buf->data[i] += scale * g[i];
  }
}

std::vector<const ad::Tensor*> values_of(const std::vector<ad::Var>& vars) {
  std::vector<const ad::Tensor*> out;
  for (const auto& v : vars) out.push_back(&v.value());
  return out;
}

ad::Tensor scalar(double v) { return ad::Tensor({1}, std::vector<double>{v}); }

}  // namespace

ad::Var mask_loss(const ad::Var& logits, std::vector<double> target, const MaskLossWeights& w) {
  auto grad = std::make_shared<std::vector<double>>();
  const double v = mask_loss(logits.value().data, target, w, grad.get());
  return logits.tape()->record(scalar(v), {logits}, [logits, grad](const ad::Tensor& g, ad::Tape& t) {
    accumulate(t, logits, *grad, g.data[0]);
  });
}

ad::Var text_loss(const ad::Var& class_logits, int class_id) {
  auto grad = std::make_shared<std::vector<double>>();
  const double v = text_loss(class_logits.value().data, class_id, grad.get());
  return class_logits.tape()->record(scalar(v), {class_logits},
                                     [class_logits, grad](const ad::Tensor& g, ad::Tape& t) {
                                       accumulate(t, class_logits, *grad, g.data[0]);
                                     });
}

ad::Var supervised_loss(const std::vector<ad::Var>& logits, std::vector<LabelMask> labels,
                        const SupervisedLossWeights& w) {
  std::vector<const LabelMask*> lp;
  for (const auto& l : labels) lp.push_back(&l);
  auto grads = std::make_shared<std::vector<std::vector<double>>>();
  const double v = supervised_loss(values_of(logits), lp, w, grads.get());
  return logits.front().tape()->record(scalar(v), logits,
                                       [logits, grads](const ad::Tensor& g, ad::Tape& t) {
                                         for (std::size_t b = 0; b < logits.size(); ++b) {
                                           accumulate(t, logits[b], (*grads)[b], g.data[0]);
                                         }
                                       });
}

ad::Var joint_unlabeled_loss(const std::vector<ad::Var>& logits_sf,
                             const std::vector<ad::Var>& logits_si,
                             const std::vector<UnlabeledTargets>& targets, double alpha_t,
                             double alpha_v, JointLossParts* parts) {
  auto gsf = std::make_shared<std::vector<std::vector<double>>>();
  auto gsi = std::make_shared<std::vector<std::vector<double>>>();
  const JointLossParts p = joint_unlabeled_loss(values_of(logits_sf), values_of(logits_si), targets,
                                                alpha_t, alpha_v, gsf.get(), gsi.get());
  if (parts) *parts = p;
  std::vector<ad::Var> parents = logits_sf;
  parents.insert(parents.end(), logits_si.begin(), logits_si.end());
  return logits_sf.front().tape()->record(
      scalar(p.total), parents, [logits_sf, logits_si, gsf, gsi](const ad::Tensor& g, ad::Tape& t) {
        for (std::size_t b = 0; b < logits_sf.size(); ++b) {
          accumulate(t, logits_sf[b], (*gsf)[b], g.data[0]);
          accumulate(t, logits_si[b], (*gsi)[b], g.data[0]);
        }
      });
}

ad::Var unimatch_unlabeled_loss(const std::vector<ad::Var>& logits_s1,
                                const std::vector<ad::Var>& logits_s2,
                                const std::vector<UnlabeledTargets>& targets) {
  auto g1 = std::make_shared<std::vector<std::vector<double>>>();
  auto g2 = std::make_shared<std::vector<std::vector<double>>>();
  const double v = unimatch_unlabeled_loss(values_of(logits_s1), values_of(logits_s2), targets,
                                           g1.get(), g2.get());
  std::vector<ad::Var> parents = logits_s1;
  parents.insert(parents.end(), logits_s2.begin(), logits_s2.end());
  return logits_s1.front().tape()->record(
      scalar(v), parents, [logits_s1, logits_s2, g1, g2](const ad::Tensor& g, ad::Tape& t) {
        for (std::size_t b = 0; b < logits_s1.size(); ++b) {
          accumulate(t, logits_s1[b], (*g1)[b], g.data[0]);
          accumulate(t, logits_s2[b], (*g2)[b], g.data[0]);
        }
      });
}

}  // namespace refseg
