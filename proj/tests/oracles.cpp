#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oracle {

namespace {

std::vector<std::pair<int, int>> edge_pixels(const LabelMask& m, int k) {
  std::vector<std::pair<int, int>> out;
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      if (m.at(r, c) != k) continue;
      bool edge = r == 0 || c == 0 || r == m.height - 1 || c == m.width - 1;
      if (!edge) edge = m.at(r - 1, c) != k || m.at(r + 1, c) != k || m.at(r, c - 1) != k ||
                        m.at(r, c + 1) != k;
      if (edge) out.push_back({r, c});
    }
  }
  return out;
}

double nearest(const std::pair<int, int>& p, const std::vector<std::pair<int, int>>& set) {
  double best = INFINITY;
  for (const auto& q : set) {
    const double dr = p.first - q.first, dc = p.second - q.second;
    best = std::min(best, std::sqrt(dr * dr + dc * dc));
  }
  return best;
}

// log of sum_c exp(z_c) - z_target, evaluated naively per pixel.
double pixel_ce(const Tensor& z, std::size_t n, std::size_t i, int target) {
  const int k = z.shape[0];
  double m = -INFINITY;
  for (int c = 0; c < k; ++c) m = std::max(m, z.data[c * n + i]);
  double s = 0.0;
  for (int c = 0; c < k; ++c) s += std::exp(z.data[c * n + i] - m);
  return m + std::log(s) - z.data[target * n + i];
}

double pixel_prob(const Tensor& z, std::size_t n, std::size_t i, int cls) {
  const int k = z.shape[0];
  double s = 0.0;
  for (int c = 0; c < k; ++c) s += std::exp(z.data[c * n + i] - z.data[cls * n + i]);
  return 1.0 / s;
}

}  // namespace

std::optional<double> hd95_bruteforce(const LabelMask& a, const LabelMask& b, int class_id) {
  const auto ea = edge_pixels(a, class_id), eb = edge_pixels(b, class_id);
  if (ea.empty() || eb.empty()) return std::nullopt;
  std::vector<double> d;
  for (const auto& p : ea) d.push_back(nearest(p, eb));
  for (const auto& p : eb) d.push_back(nearest(p, ea));
  std::sort(d.begin(), d.end());
  const double rank = 0.95 * static_cast<double>(d.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  if (lo + 1 >= d.size()) return d[lo];
  return d[lo] + (rank - static_cast<double>(lo)) * (d[lo + 1] - d[lo]);
}

double mask_loss(const std::vector<double>& logits, const std::vector<double>& target,
                 double w_dice, double w_bce, double eps) {
  double inter = 0.0, sp = 0.0, st = 0.0, bce = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-logits[i]));
    inter += s * target[i];
    sp += s;
    st += target[i];
    bce -= target[i] * std::log(s) + (1.0 - target[i]) * std::log(1.0 - s);
  }
  const double dice = 1.0 - 2.0 * inter / (st + sp + eps);
  return w_dice * dice + w_bce * bce / static_cast<double>(logits.size());
}

double softmax_ce(const std::vector<double>& logits, int target) {
  double s = 0.0;
  for (double z : logits) s += std::exp(z);
  return std::log(s) - logits[static_cast<std::size_t>(target)];
}

double supervised_loss(const std::vector<Tensor>& logits, const std::vector<LabelMask>& labels,
                       double w_ce, double w_dice, double eps) {
  const int k = logits[0].shape[0];
  double ce = 0.0;
  std::vector<double> inter(k, 0.0), sp(k, 0.0), sy(k, 0.0);
  for (std::size_t b = 0; b < logits.size(); ++b) {
    const std::size_t n = labels[b].size();
    double ce_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int y = labels[b].labels[i];
      ce_b += pixel_ce(logits[b], n, i, y);
      for (int c = 1; c < k; ++c) {
        const double p = pixel_prob(logits[b], n, i, c);
        sp[c] += p;
        if (y == c) {
          inter[c] += p;
          sy[c] += 1.0;
        }
      }
    }
    ce += ce_b / static_cast<double>(n);
  }
  ce /= static_cast<double>(logits.size());
  double dice = 0.0;
  for (int c = 1; c < k; ++c) dice += 1.0 - 2.0 * inter[c] / (sp[c] + sy[c] + eps);
  dice /= (k - 1);
  return w_ce * ce + w_dice * dice;
}

double joint_loss(const std::vector<Tensor>& sf, const std::vector<Tensor>& si,
                  const std::vector<LabelMask>& teacher, const std::vector<LabelMask>& assistant,
                  const std::vector<std::vector<std::uint8_t>>& confident, double alpha_t,
                  double alpha_v) {
  const double B = static_cast<double>(sf.size());
  double total = 0.0;
  for (std::size_t b = 0; b < sf.size(); ++b) {
    const std::size_t n = confident[b].size();
    double count = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!confident[b][i]) continue;
      count += 1.0;
      const int yw = teacher[b].labels[i], yv = assistant[b].labels[i];
      sum += alpha_t * (pixel_ce(sf[b], n, i, yw) + pixel_ce(si[b], n, i, yw)) +
             alpha_v * (pixel_ce(sf[b], n, i, yv) + pixel_ce(si[b], n, i, yv));
    }
    if (count > 0.0) total += sum / (2.0 * B * count);
  }
  return total;
}

double unimatch_loss(const std::vector<Tensor>& s1, const std::vector<Tensor>& s2,
                     const std::vector<LabelMask>& teacher,
                     const std::vector<std::vector<std::uint8_t>>& confident) {
  const double B = static_cast<double>(s1.size());
  double total = 0.0;
  for (std::size_t b = 0; b < s1.size(); ++b) {
    const std::size_t n = confident[b].size();
    double count = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!confident[b][i]) continue;
      count += 1.0;
      sum += pixel_ce(s1[b], n, i, teacher[b].labels[i]) + pixel_ce(s2[b], n, i, teacher[b].labels[i]);
    }
    if (count > 0.0) total += sum / (2.0 * B * count);
  }
  return total;
}

std::vector<double> softmax(const std::vector<double>& x, double temperature) {
  std::vector<double> p(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp((x[i] - x[0]) / temperature);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

std::vector<std::size_t> top_k(const std::vector<double>& scores, int k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (static_cast<int>(idx.size()) > k) idx.resize(static_cast<std::size_t>(k));
  return idx;
}

std::pair<LabelMask, std::vector<std::uint8_t>> teacher_scan(const refseg::ClassProbs& probs,
                                                             double tau) {
  LabelMask labels(probs.height, probs.width, probs.num_labels - 1);
  std::vector<std::uint8_t> conf(labels.size(), 0);
  for (int r = 0; r < probs.height; ++r) {
    for (int c = 0; c < probs.width; ++c) {
      int best = 0;
      for (int k = 1; k < probs.num_labels; ++k)
        if (probs.at(k, r, c) > probs.at(best, r, c)) best = k;
      labels.at(r, c) = static_cast<std::uint8_t>(best);
      conf[static_cast<std::size_t>(r) * probs.width + c] = probs.at(best, r, c) >= tau ? 1 : 0;
    }
  }
  return {labels, conf};
}

std::vector<std::pair<int, int>> top5(const refseg::ProbMap& p) {
  std::vector<std::pair<int, int>> out;
  std::vector<std::uint8_t> taken(p.values.size(), 0);
  for (int k = 0; k < 5 && k < static_cast<int>(p.values.size()); ++k) {
    int br = -1, bc = -1;
    for (int r = 0; r < p.height; ++r)
      for (int c = 0; c < p.width; ++c) {
        if (taken[static_cast<std::size_t>(r) * p.width + c]) continue;
        if (br < 0 || p.at(r, c) > p.at(br, bc)) {
          br = r;
          bc = c;
        }
      }
    taken[static_cast<std::size_t>(br) * p.width + bc] = 1;
    out.push_back({br, bc});
  }
  return out;
}

}  // namespace oracle
