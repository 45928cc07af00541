#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "refseg/error.hpp"
#include "refseg/experiment.hpp"
#include "refseg/log.hpp"
#include "refseg/rng.hpp"

namespace fs = std::filesystem;

namespace refseg {
namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::string provenance(std::uint64_t seed, const std::string& hash) {
  return "# seed=" + std::to_string(seed) + " config_hash=" + hash + "\n";
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string stem_png(const std::string& image_path) {
  return fs::path(image_path).stem().string() + ".png";
}

DatasetManifest require_data(const ExperimentConfig& c, const std::string& what = "--data") {
  const std::string& p = what == "--data" ? c.data : c.pretrain_data;
  if (p.empty()) throw Error(what + " is required");
  return load_manifest(p);
}

// Flags shared by every subcommand. Values land in `cli`; an option's count
// tells whether it was given on the command line.
struct CommonFlags {
  std::string config;
  ExperimentConfig cli;
  CLI::Option *data, *pretrain_data, *out, *seed, *seeds, *ratio, *steps, *iters;
  bool no_prompt = false, no_memory = false, no_feedback = false, no_assistant = false;

  void attach(CLI::App& app) {
    app.add_option("--config", config, "JSON experiment config")->check(CLI::ExistingFile);
    data = app.add_option("--data", cli.data, "dataset root or manifest");
    pretrain_data = app.add_option("--pretrain-data", cli.pretrain_data,
                                   "fully labeled corpus for Stage-1 training");
    out = app.add_option("--out", cli.out, "output directory");
    seed = app.add_option("--seed", cli.seed, "master seed");
    seeds = app.add_option("--seeds", cli.seeds, "seeds for ablate")->delimiter(',');
    ratio = app.add_option("--ratio", cli.ratio, "labeled patient ratio in (0, 1]");
    steps = app.add_option("--steps", cli.pretrain_steps, "Stage-1 steps");
    iters = app.add_option("--iters", cli.ssl.iterations, "Stage-2 iterations");
    app.add_flag("--no-prompt", no_prompt, "disable the prompt token path");
    app.add_flag("--no-memory", no_memory, "disable the template memory path");
    app.add_flag("--no-feedback", no_feedback, "never prompt the assistant with teacher maps");
    app.add_flag("--no-assistant", no_assistant, "teacher-only pseudo-labels");
  }

  // default < config file < command line
  ExperimentConfig resolve() const {
    ExperimentConfig c;
    if (!config.empty()) c = experiment_config_from_json(read_json(config), c);
    if (data->count()) c.data = cli.data;
    if (pretrain_data->count()) c.pretrain_data = cli.pretrain_data;
    if (out->count()) c.out = cli.out;
    if (seed->count()) c.seed = cli.seed;
    if (seeds->count()) c.seeds = cli.seeds;
    if (ratio->count()) c.ratio = cli.ratio;
    if (steps->count()) c.pretrain_steps = cli.pretrain_steps;
    if (iters->count()) c.ssl.iterations = cli.ssl.iterations;
    if (no_prompt) c.use_prompt = false;
    if (no_memory) c.use_memory = false;
    if (no_feedback) c.use_feedback = false;
    if (no_assistant) c.use_assistant = false;
    c.validate();
    return c;
  }
};

void write_config(const ExperimentConfig& c) {
  write_text(fs::path(c.out) / "config.json", to_json(c).dump(2) + "\n");
}

int cmd_generate(ExperimentConfig c) {
  SyntheticOptions o;
  o.seed = c.seed;
  o.num_patients = c.patients;
  o.slices_per_patient = c.slices;
  o.num_classes = c.classes;
  o.size = c.size;
  DatasetManifest m = split_labeled(generate_synthetic(o, c.out), c.ratio, c.seed);
  save_manifest(m);
  spdlog::info("generated {} slices under {}", m.entries.size(), c.out);
  return 0;
}

int cmd_pretrain(ExperimentConfig c) {
  DatasetManifest m = require_data(c);
  c.classes = m.num_classes;
  SegmenterConfig scfg = c.effective_segmenter();
  const std::string hash = experiment_hash(c);
  TemplateBank bank = build_pretrain_bank(m, scfg.label_ratio, c.seed);
  spdlog::info("stage 1: {} steps, bank of {} templates", c.pretrain_steps, bank.size());
  Stage1Result r = train_stage1(m, bank, scfg, c.pretrain_steps, c.seed,
                                [](int step, const Stage1Loss& l) {
                                  if (step % 100 == 0)
                                    spdlog::info("step {} loss {:.5f}", step, l.total);
                                });
  fs::create_directories(c.out);
  save_segmenter(r.state, scfg, c.seed, fs::path(c.out) / "segmenter.json");
  std::ostringstream csv;
  csv << provenance(c.seed, hash) << "step,total,text,mask\n";
  for (std::size_t i = 0; i < r.curve.size(); ++i)
    csv << i << ',' << fmt(r.curve[i].total) << ',' << fmt(r.curve[i].text) << ','
        << fmt(r.curve[i].mask) << "\n";
  write_text(fs::path(c.out) / "stage1_loss.csv", csv.str());
  write_config(c);
  return 0;
}

std::string history_csv(const std::vector<std::pair<int, MetricReport>>& history, int C,
                        const std::string& head) {
  std::ostringstream out;
  out << head << "iteration";
  for (int k = 1; k <= C; ++k) out << ",dice_" << k << ",iou_" << k;
  out << ",dice,iou\n";
  for (const auto& [it, rep] : history) {
    out << it;
    for (const auto& m : rep.classes) out << ',' << fmt(m.dice) << ',' << fmt(m.iou);
    out << ',' << fmt(rep.average.dice) << ',' << fmt(rep.average.iou) << "\n";
  }
  return out.str();
}

int cmd_ssl_train(ExperimentConfig c, const std::string& checkpoint) {
  DatasetManifest m = require_data(c);
  c.classes = m.num_classes;
  SSLConfig cfg = c.effective_ssl();
  const std::string hash = experiment_hash(c);

  std::optional<std::pair<SegmenterState, SegmenterConfig>> seg;
  std::optional<TemplateBank> bank;
  Assistant assistant;
  if (cfg.use_assistant) {
    fs::path ck = checkpoint.empty() ? fs::path(c.out) / "segmenter.json" : fs::path(checkpoint);
    if (!fs::exists(ck)) throw Error("Stage-1 checkpoint not found: " + ck.string());
    seg = load_segmenter(ck);
    if (seg->second.num_classes != m.num_classes)
      throw Error("checkpoint class count does not match the dataset");
    bank = build_bank(m);
    assistant = {&seg->first, &seg->second, &*bank};
  }
  Stage2Result r = train_stage2(m, assistant, cfg, c.seed, [](const Stage2LogRow& row) {
    if (row.iteration % 50 == 0)
      spdlog::info("iter {} L_sup {:.4f} L_u {:.4f}/{:.4f}", row.iteration, row.loss.sup,
                   row.loss.u_teacher, row.loss.u_assistant);
  });
  const fs::path out(c.out);
  fs::create_directories(out);
  save_student(r.state, cfg, m.num_classes, c.seed, out / "student.json");
  write_text(out / "train_log.csv", provenance(c.seed, hash) + stage2_log_csv(r.log, m.num_classes));
  write_text(out / "history.csv",
             history_csv(r.history, m.num_classes, provenance(c.seed, hash)));
  write_text(out / "metrics.csv",
             provenance(c.seed, hash) + report_csv(r.history.back().second, m.class_names));
  write_config(c);
  spdlog::info("final test dice {:.4f}", r.history.back().second.average.dice);
  return 0;
}

// Label maps for every entry of `split`, from either checkpoint kind.
std::vector<LabelMask> predict_split(const fs::path& checkpoint, const DatasetManifest& m,
                                     const std::vector<std::size_t>& idx, std::uint64_t seed) {
  std::vector<LabelMask> preds;
  const std::string kind = read_json(checkpoint).value("kind", "");
  if (kind == "student") {
    StudentCheckpoint ck = load_student(checkpoint);
    if (ck.num_classes != m.num_classes) throw Error("checkpoint class count does not match the dataset");
    const ParamSet& net = ck.config.evaluate_teacher ? ck.teacher : ck.student;
    for (std::size_t i : idx) preds.push_back(student_predict(net, m.image(i), m.num_classes));
  } else if (kind == "segmenter") {
    auto [state, cfg] = load_segmenter(checkpoint);
    if (cfg.num_classes != m.num_classes) throw Error("checkpoint class count does not match the dataset");
    TemplateBank bank = build_bank(m);
    SegmenterRunner runner(state, cfg, bank);
    std::vector<SpatialPrompt> none(m.num_classes);
    for (std::size_t i : idx) {
      GrayImage img = m.image(i);
      auto logits = runner.class_logits(img, none, derive_seed(seed, "eval", {i}));
      preds.push_back(assemble_assistant(logits, img.height, img.width).labels);
    }
  } else {
    throw Error(checkpoint.string() + " is not a checkpoint");
  }
  return preds;
}

int cmd_infer(const ExperimentConfig& c, const std::string& checkpoint, const std::string& split) {
  if (checkpoint.empty()) throw Error("--checkpoint is required");
  DatasetManifest m = require_data(c);
  auto idx = m.indices(split_from_string(split));
  auto preds = predict_split(checkpoint, m, idx, c.seed);
  const fs::path dir = fs::path(c.out) / "pred";
  fs::create_directories(dir);
  for (std::size_t k = 0; k < idx.size(); ++k)
    save_mask_png(preds[k], dir / stem_png(m.entries[idx[k]].image));
  spdlog::info("wrote {} masks to {}", idx.size(), dir.string());
  return 0;
}

int cmd_eval(const ExperimentConfig& c, const std::string& checkpoint, const std::string& pred_dir,
             const std::string& split) {
  if (checkpoint.empty() == pred_dir.empty())
    throw Error("exactly one of --checkpoint and --pred is required");
  DatasetManifest m = require_data(c);
  auto idx = m.indices(split_from_string(split));
  if (idx.empty()) throw Error("no entries in the " + split + " split");
  std::vector<LabelMask> preds, truths;
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw Error("checkpoint not found: " + checkpoint);
    preds = predict_split(checkpoint, m, idx, c.seed);
  } else {
    for (std::size_t i : idx)
      preds.push_back(load_mask_png(fs::path(pred_dir) / stem_png(m.entries[i].image), m.num_classes));
  }
  for (std::size_t i : idx) truths.push_back(m.mask(i));
  MetricReport rep = evaluate(preds, truths, m.num_classes);
  write_text(fs::path(c.out) / "metrics.csv",
             provenance(c.seed, experiment_hash(c)) + report_csv(rep, m.class_names));
  std::cout << report_csv(rep, m.class_names);
  return 0;
}

int cmd_ablate(ExperimentConfig c, bool baseline) {
  const fs::path out(c.out);
  std::vector<AblationRow> all;
  for (std::uint64_t s : c.seeds) {
    DatasetManifest target = c.data.empty()
                                 ? make_target_corpus(c, s, out / "corpus" / ("target_" + std::to_string(s)))
                                 : load_manifest(c.data);
    DatasetManifest pre = c.pretrain_data.empty()
                              ? make_pretrain_corpus(c, s, out / "corpus" / ("pretrain_" + std::to_string(s)))
                              : load_manifest(c.pretrain_data);
    c.classes = target.num_classes;
    auto rows = run_ablation(target, pre, c, s, ablation_grid(baseline));
    all.insert(all.end(), rows.begin(), rows.end());
  }
  write_text(out / "ablation.csv", ablation_csv(all, c.classes, experiment_hash(c)));
  write_config(c);
  std::cout << ablation_csv(all, c.classes, experiment_hash(c));
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  init_logging();
  CLI::App app{"Reference-guided semi-supervised segmentation on small medical corpora", "refseg"};
  app.require_subcommand(1);
  // One flag set per subcommand; CLI11 binds options to distinct storage.
  CommonFlags f_gen, f_pre, f_ssl, f_inf, f_ev, f_abl;

  auto* gen = app.add_subcommand("generate", "render a synthetic corpus and its manifest");
  f_gen.attach(*gen);
  int patients = 0, slices = 0, classes = 0, size = 0;
  auto* o_pat = gen->add_option("--patients", patients, "number of patients");
  auto* o_sl = gen->add_option("--slices", slices, "slices per patient");
  auto* o_cl = gen->add_option("--classes", classes, "foreground classes");
  auto* o_sz = gen->add_option("--size", size, "image side in pixels");

  auto* pre = app.add_subcommand("pretrain", "Stage-1 training of the segmenter");
  f_pre.attach(*pre);

  auto* ssl = app.add_subcommand("ssl-train", "Stage-2 semi-supervised training");
  f_ssl.attach(*ssl);
  std::string checkpoint, pred_dir, split = "test";
  ssl->add_option("--checkpoint", checkpoint, "Stage-1 checkpoint (default <out>/segmenter.json)");

  auto* inf = app.add_subcommand("infer", "write predicted label maps as PNG");
  f_inf.attach(*inf);
  inf->add_option("--checkpoint", checkpoint, "segmenter or student checkpoint")->required();
  inf->add_option("--split", split, "labeled | unlabeled | test");

  auto* ev = app.add_subcommand("eval", "score predictions against the ground truth");
  f_ev.attach(*ev);
  ev->add_option("--checkpoint", checkpoint, "segmenter or student checkpoint");
  ev->add_option("--pred", pred_dir, "directory of predicted mask PNGs");
  ev->add_option("--split", split, "labeled | unlabeled | test");

  auto* abl = app.add_subcommand("ablate", "run the ablation grid over seeds");
  f_abl.attach(*abl);
  bool baseline = false;
  abl->add_flag("--with-baseline", baseline, "add a teacher-only row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig c = f_gen.resolve();
      if (o_pat->count()) c.patients = patients;
      if (o_sl->count()) c.slices = slices;
      if (o_cl->count()) c.classes = classes;
      if (o_sz->count()) c.size = size;
      c.validate();
      return cmd_generate(c);
    }
    if (pre->parsed()) return cmd_pretrain(f_pre.resolve());
    if (ssl->parsed()) return cmd_ssl_train(f_ssl.resolve(), checkpoint);
    if (inf->parsed()) return cmd_infer(f_inf.resolve(), checkpoint, split);
    if (ev->parsed()) return cmd_eval(f_ev.resolve(), checkpoint, pred_dir, split);
    if (abl->parsed()) return cmd_ablate(f_abl.resolve(), baseline);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace refseg
