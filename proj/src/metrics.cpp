#include "refseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "refseg/error.hpp"

namespace refseg {

namespace {

void check_pair(const LabelMask& a, const LabelMask& b) {
  if (a.height != b.height || a.width != b.width) throw Error("metric inputs differ in shape");
}

struct Counts {
  long inter = 0, pred = 0, truth = 0;
};

Counts count(const LabelMask& pred, const LabelMask& truth, int class_id) {
  check_pair(pred, truth);
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.labels[i] == class_id, t = truth.labels[i] == class_id;
    c.inter += p && t;
    c.pred += p;
    c.truth += t;
  }
  return c;
}

// Squared distance from every pixel to the nearest site, exact in integers:
// a column pass for the vertical offset, then a row-wise minimization.
std::vector<double> squared_distance_map(const std::vector<std::pair<int, int>>& sites, int h, int w) {
  constexpr long kFar = std::numeric_limits<long>::max() / 4;
  std::vector<long> col(static_cast<std::size_t>(h) * w, kFar);
  std::vector<char> is_site(static_cast<std::size_t>(h) * w, 0);
  for (auto [r, c] : sites) is_site[static_cast<std::size_t>(r) * w + c] = 1;
  for (int c = 0; c < w; ++c) {
    long last = -1;
    for (int r = 0; r < h; ++r) {
      if (is_site[static_cast<std::size_t>(r) * w + c]) last = r;
      if (last >= 0) col[static_cast<std::size_t>(r) * w + c] = r - last;
    }
    last = -1;
    for (int r = h - 1; r >= 0; --r) {
      if (is_site[static_cast<std::size_t>(r) * w + c]) last = r;
      if (last >= 0) {
        long& v = col[static_cast<std::size_t>(r) * w + c];
        v = std::min(v, last - r);
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r) {
    const long* row = col.data() + static_cast<std::size_t>(r) * w;
    for (int c = 0; c < w; ++c) {
      long best = kFar;
      for (int c2 = 0; c2 < w; ++c2) {
        if (row[c2] == kFar) continue;
        const long d = (c - c2) * static_cast<long>(c - c2) + row[c2] * row[c2];
        best = std::min(best, d);
      }
      out[static_cast<std::size_t>(r) * w + c] = static_cast<double>(best);
    }
  }
  return out;
}

}  // namespace

double dice(const LabelMask& pred, const LabelMask& truth, int class_id) {
  const Counts c = count(pred, truth, class_id);
  if (c.pred + c.truth == 0) return 1.0;
  return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.pred + c.truth);
}

double iou(const LabelMask& pred, const LabelMask& truth, int class_id) {
  const Counts c = count(pred, truth, class_id);
  const long uni = c.pred + c.truth - c.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.inter) / static_cast<double>(uni);
}

std::vector<std::pair<int, int>> boundary_pixels(const LabelMask& mask, int class_id) {
  std::vector<std::pair<int, int>> out;
  const int h = mask.height, w = mask.width;
  auto in = [&](int r, int c) { return r >= 0 && r < h && c >= 0 && c < w && mask.at(r, c) == class_id; };
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!in(r, c)) continue;
      if (!in(r - 1, c) || !in(r + 1, c) || !in(r, c - 1) || !in(r, c + 1)) out.emplace_back(r, c);
    }
  }
  return out;
}

double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw Error("percentile of an empty list");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::optional<double> hd95(const LabelMask& pred, const LabelMask& truth, int class_id) {
  check_pair(pred, truth);
  const auto bp = boundary_pixels(pred, class_id);
  const auto bt = boundary_pixels(truth, class_id);
  if (bp.empty() || bt.empty()) return std::nullopt;
  const int w = pred.width;
  const auto dt_truth = squared_distance_map(bt, pred.height, w);
  const auto dt_pred = squared_distance_map(bp, pred.height, w);
  std::vector<double> d;
  d.reserve(bp.size() + bt.size());
  for (auto [r, c] : bp) d.push_back(std::sqrt(dt_truth[static_cast<std::size_t>(r) * w + c]));
  for (auto [r, c] : bt) d.push_back(std::sqrt(dt_pred[static_cast<std::size_t>(r) * w + c]));
  return percentile_linear(std::move(d), 0.95);
}

MetricReport evaluate(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& truths,
                      int num_classes) {
  if (preds.size() != truths.size()) throw Error("prediction and truth sets are misaligned");
  if (num_classes < 1) throw Error("evaluate needs at least one class");
  MetricReport report;
  for (int c = 1; c <= num_classes; ++c) {
    ClassMetrics m;
    double hd_sum = 0.0;
    int hd_n = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      m.dice += dice(preds[i], truths[i], c);
      m.iou += iou(preds[i], truths[i], c);
      if (auto h = hd95(preds[i], truths[i], c)) {
        hd_sum += *h;
        ++hd_n;
      } else {
        ++m.undefined_hd95;
      }
      ++m.n;
    }
    if (m.n > 0) {
      m.dice /= m.n;
      m.iou /= m.n;
    }
    if (hd_n > 0) m.hd95 = hd_sum / hd_n;
    report.classes.push_back(m);
  }
  ClassMetrics& avg = report.average;
  double hd_sum = 0.0;
  int hd_n = 0;
  for (const auto& m : report.classes) {
    avg.dice += m.dice;
    avg.iou += m.iou;
    avg.n = std::max(avg.n, m.n);
    avg.undefined_hd95 += m.undefined_hd95;
    if (m.hd95) {
      hd_sum += *m.hd95;
      ++hd_n;
    }
  }
  avg.dice /= num_classes;
  avg.iou /= num_classes;
  if (hd_n > 0) avg.hd95 = hd_sum / hd_n;
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string row(const std::string& name, const ClassMetrics& m) {
  return name + "," + fmt(m.dice) + "," + fmt(m.iou) + "," + (m.hd95 ? fmt(*m.hd95) : "NA") + "," +
         std::to_string(m.n) + "," + std::to_string(m.undefined_hd95) + "\n";
}

}  // namespace

std::string report_csv(const MetricReport& report, const std::vector<std::string>& class_names) {
  std::string out = "class,dice,iou,hd95,n,undefined_hd95\n";
  for (std::size_t i = 0; i < report.classes.size(); ++i) {
    const std::string name = i < class_names.size() ? class_names[i] : std::to_string(i + 1);
    out += row(name, report.classes[i]);
  }
  out += row("AVG", report.average);
  return out;
}

MetricReport parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  // Leading '#' lines carry provenance (seed, config hash).
  while (std::getline(in, line) && !line.empty() && line[0] == '#') {
  }
  if (!in && line.empty()) throw Error("metric CSV is empty");
  if (line != "class,dice,iou,hd95,n,undefined_hd95") {
    throw Error("metric CSV has an unexpected header");
  }
  MetricReport report;
  bool have_avg = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw Error("metric CSV row has " + std::to_string(f.size()) + " fields");
    ClassMetrics m;
    try {
      m.dice = std::stod(f[1]);
      m.iou = std::stod(f[2]);
      if (f[3] != "NA") m.hd95 = std::stod(f[3]);
      m.n = std::stoi(f[4]);
      m.undefined_hd95 = std::stoi(f[5]);
    } catch (const std::exception&) {
      throw Error("malformed metric CSV row: " + line);
    }
    if (f[0] == "AVG") {
      report.average = m;
      have_avg = true;
    } else {
      report.classes.push_back(m);
    }
  }
  if (!have_avg) throw Error("metric CSV lacks the AVG row");
  return report;
}

void write_report_csv(const MetricReport& report, const std::filesystem::path& path,
                      const std::vector<std::string>& class_names) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << report_csv(report, class_names);
}

}  // namespace refseg
