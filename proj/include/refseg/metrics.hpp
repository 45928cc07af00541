#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "refseg/image.hpp"

namespace refseg {

// 2|P∩T| / (|P| + |T|); 1 when both are empty.
double dice(const LabelMask& pred, const LabelMask& truth, int class_id);
// |P∩T| / |P∪T|; 1 when both are empty.
double iou(const LabelMask& pred, const LabelMask& truth, int class_id);

// Foreground pixels of class_id with a 4-neighbour outside the class or on
// the image edge, as (row, col).
std::vector<std::pair<int, int>> boundary_pixels(const LabelMask& mask, int class_id);

// 95th percentile (linear interpolation) of the pooled directed nearest
// boundary distances in both directions. Empty boundary on either side
// gives nullopt.
std::optional<double> hd95(const LabelMask& pred, const LabelMask& truth, int class_id);

// Percentile with linear interpolation between order statistics; q in [0, 1].
double percentile_linear(std::vector<double> values, double q);

struct ClassMetrics {
  double dice = 0.0;
  double iou = 0.0;
  std::optional<double> hd95;  // mean over slices where it is defined
  int n = 0;                   // evaluated slices
  int undefined_hd95 = 0;
  bool operator==(const ClassMetrics&) const = default;
};

struct MetricReport {
  std::vector<ClassMetrics> classes;  // index c - 1 holds class c
  ClassMetrics average;               // mean over foreground classes
  bool operator==(const MetricReport&) const = default;
};

MetricReport evaluate(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& truths,
                      int num_classes);

// CSV with header class,dice,iou,hd95,n,undefined_hd95, one row per class
// (class names or numbers) and a final AVG row. Undefined HD95 is "NA".
std::string report_csv(const MetricReport& report, const std::vector<std::string>& class_names = {});
MetricReport parse_report_csv(const std::string& text);
void write_report_csv(const MetricReport& report, const std::filesystem::path& path,
                      const std::vector<std::string>& class_names = {});

}  // namespace refseg
