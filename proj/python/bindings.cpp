#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "refseg/error.hpp"
#include "refseg/experiment.hpp"
#include "refseg/log.hpp"
#include "refseg/metrics.hpp"
#include "refseg/segmenter.hpp"
#include "refseg/ssl.hpp"
#include "refseg/templatebank.hpp"

namespace py = pybind11;
using namespace refseg;

namespace {

using MaskArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using ImageArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

LabelMask to_mask(const MaskArray& a, int num_classes) {
  if (a.ndim() != 2) throw Error("label masks must be 2-D");
  LabelMask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), num_classes);
  std::copy(a.data(), a.data() + a.size(), m.labels.begin());
  m.validate();
  return m;
}

int max_label(const MaskArray& a, const MaskArray& b) {
  int c = 1;
  for (py::ssize_t i = 0; i < a.size(); ++i) c = std::max<int>(c, a.data()[i]);
  for (py::ssize_t i = 0; i < b.size(); ++i) c = std::max<int>(c, b.data()[i]);
  return c;
}

GrayImage to_image(const ImageArray& a) {
  if (a.ndim() != 2) throw Error("images must be 2-D");
  GrayImage g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), g.pixels.begin());
  return g;
}

MaskArray from_mask(const LabelMask& m) {
  MaskArray out({m.height, m.width});
  std::copy(m.labels.begin(), m.labels.end(), out.mutable_data());
  return out;
}

ImageArray from_image(const GrayImage& g) {
  ImageArray out({g.height, g.width});
  std::copy(g.pixels.begin(), g.pixels.end(), out.mutable_data());
  return out;
}

py::dict metrics_dict(const ClassMetrics& m) {
  py::dict d;
  d["dice"] = m.dice;
  d["iou"] = m.iou;
  d["hd95"] = m.hd95 ? py::cast(*m.hd95) : py::none();
  d["n"] = m.n;
  d["undefined_hd95"] = m.undefined_hd95;
  return d;
}

py::dict report_dict(const MetricReport& r) {
  py::list classes;
  for (const auto& c : r.classes) classes.append(metrics_dict(c));
  py::dict d;
  d["classes"] = classes;
  d["average"] = metrics_dict(r.average);
  return d;
}

ExperimentConfig config_from(const py::dict& overrides) {
  auto json = py::module_::import("json");
  const std::string text = py::str(json.attr("dumps")(overrides));
  ExperimentConfig c = experiment_config_from_json(nlohmann::json::parse(text));
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Reference-guided semi-supervised segmentation core";
  init_logging();
  py::register_exception<Error>(m, "RefsegError", PyExc_RuntimeError);

  m.def(
      "cli", [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"refseg"};
        for (const auto& a : args) argv.push_back(a.c_str());
        return run_cli(static_cast<int>(argv.size()), argv.data());
      },
      py::arg("args"), "Run a command-line subcommand in-process; returns the exit status.");

  m.def(
      "generate",
      [](const std::filesystem::path& out, std::uint64_t seed, int patients, int slices, int classes,
         int size, double ratio) {
        SyntheticOptions o;
        o.seed = seed;
        o.num_patients = patients;
        o.slices_per_patient = slices;
        o.num_classes = classes;
        o.size = size;
        DatasetManifest man = split_labeled(generate_synthetic(o, out), ratio, seed);
        save_manifest(man);
        return static_cast<int>(man.entries.size());
      },
      py::arg("out"), py::arg("seed") = 1, py::arg("patients") = 20, py::arg("slices") = 4,
      py::arg("classes") = 2, py::arg("size") = 64, py::arg("ratio") = 0.05,
      "Render a synthetic corpus with manifest.json; returns the slice count.");

  m.def(
      "load_slice",
      [](const std::filesystem::path& data, std::size_t index) {
        DatasetManifest man = load_manifest(data);
        if (index >= man.entries.size()) throw Error("slice index out of range");
        py::dict d;
        d["image"] = from_image(man.image(index));
        d["mask"] = man.entries[index].mask ? py::object(from_mask(man.mask(index))) : py::none();
        d["patient"] = man.entries[index].patient;
        d["split"] = to_string(man.entries[index].split);
        return d;
      },
      py::arg("data"), py::arg("index"));

  m.def(
      "dice", [](const MaskArray& p, const MaskArray& t, int c) {
        const int k = std::max(c, max_label(p, t));
        return dice(to_mask(p, k), to_mask(t, k), c);
      },
      py::arg("pred"), py::arg("truth"), py::arg("class_id") = 1);
  m.def(
      "iou", [](const MaskArray& p, const MaskArray& t, int c) {
        const int k = std::max(c, max_label(p, t));
        return iou(to_mask(p, k), to_mask(t, k), c);
      },
      py::arg("pred"), py::arg("truth"), py::arg("class_id") = 1);
  m.def(
      "hd95",
      [](const MaskArray& p, const MaskArray& t, int c) -> std::optional<double> {
        const int k = std::max(c, max_label(p, t));
        return hd95(to_mask(p, k), to_mask(t, k), c);
      },
      py::arg("pred"), py::arg("truth"), py::arg("class_id") = 1, "None when either boundary is empty.");
  m.def(
      "evaluate",
      [](const std::vector<MaskArray>& preds, const std::vector<MaskArray>& truths, int num_classes) {
        std::vector<LabelMask> p, t;
        for (const auto& a : preds) p.push_back(to_mask(a, num_classes));
        for (const auto& a : truths) t.push_back(to_mask(a, num_classes));
        return report_dict(evaluate(p, t, num_classes));
      },
      py::arg("preds"), py::arg("truths"), py::arg("num_classes"));

  m.def("softmax_probabilities", &softmax_probabilities, py::arg("similarities"),
        py::arg("temperature") = 0.1);
  m.def(
      "schedule",
      [](int t, int total) {
        auto w = schedule(t, total);
        return std::make_pair(w.alpha_t, w.alpha_v);
      },
      py::arg("t"), py::arg("total"), "(alpha_t, alpha_v) of the cosine schedule.");

  m.def(
      "pretrain",
      [](const std::filesystem::path& data, const std::filesystem::path& checkpoint, int steps,
         std::uint64_t seed, const py::dict& config) {
        ExperimentConfig c = config_from(config);
        DatasetManifest man = load_manifest(data);
        c.classes = man.num_classes;
        SegmenterConfig scfg = c.effective_segmenter();
        Stage1Result r;
        {
          py::gil_scoped_release release;
          TemplateBank bank = build_pretrain_bank(man, scfg.label_ratio, seed);
          r = train_stage1(man, bank, scfg, steps, seed);
        }
        save_segmenter(r.state, scfg, seed, checkpoint);
        py::list curve;
        for (const auto& l : r.curve) curve.append(py::make_tuple(l.total, l.text, l.mask));
        return curve;
      },
      py::arg("data"), py::arg("checkpoint"), py::arg("steps") = 3000, py::arg("seed") = 1,
      py::arg("config") = py::dict(),
      "Stage-1 training; writes the checkpoint and returns (total, text, mask) per step.");

  m.def(
      "ssl_train",
      [](const std::filesystem::path& data, const std::filesystem::path& out_checkpoint,
         const std::optional<std::filesystem::path>& assistant_checkpoint, std::uint64_t seed,
         const py::dict& config) {
        ExperimentConfig c = config_from(config);
        DatasetManifest man = load_manifest(data);
        SSLConfig cfg = c.effective_ssl();
        std::optional<std::pair<SegmenterState, SegmenterConfig>> seg;
        std::optional<TemplateBank> bank;
        Assistant assistant;
        if (cfg.use_assistant) {
          if (!assistant_checkpoint) throw Error("an assistant checkpoint is required unless use_assistant is false");
          seg = load_segmenter(*assistant_checkpoint);
          bank = build_bank(man);
          assistant = {&seg->first, &seg->second, &*bank};
        }
        Stage2Result r;
        {
          py::gil_scoped_release release;
          r = train_stage2(man, assistant, cfg, seed);
        }
        save_student(r.state, cfg, man.num_classes, seed, out_checkpoint);
        return report_dict(r.history.back().second);
      },
      py::arg("data"), py::arg("checkpoint"), py::arg("assistant") = py::none(), py::arg("seed") = 1,
      py::arg("config") = py::dict(), "Stage-2 training; returns the final test-split report.");

  m.def(
      "predict",
      [](const std::filesystem::path& checkpoint, const ImageArray& image) {
        StudentCheckpoint ck = load_student(checkpoint);
        const ParamSet& net = ck.config.evaluate_teacher ? ck.teacher : ck.student;
        return from_mask(student_predict(net, to_image(image), ck.num_classes));
      },
      py::arg("checkpoint"), py::arg("image"), "Label map from a Stage-2 checkpoint.");
}
