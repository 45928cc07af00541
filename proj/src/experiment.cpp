#include "refseg/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "refseg/error.hpp"
#include "refseg/log.hpp"
#include "refseg/rng.hpp"

namespace refseg {

void ExperimentConfig::validate() const {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw Error("ratio must lie in (0, 1]");
  if (pretrain_steps < 0) throw Error("pretrain steps must be non-negative");
  if (patients < 2 || slices < 1 || classes < 1 || size < 32 || size % 4 != 0)
    throw Error("bad corpus shape (need >= 2 patients, size a multiple of 4 and >= 32)");
  if (pretrain_patients < 2) throw Error("pretraining corpus needs at least 2 patients");
  if (seeds.empty()) throw Error("at least one seed is required");
  effective_segmenter().validate();
  effective_ssl().validate();
}

SegmenterConfig ExperimentConfig::effective_segmenter() const {
  SegmenterConfig c = segmenter;
  c.num_classes = classes;
  c.use_prompt = c.use_prompt && use_prompt;
  c.use_memory = c.use_memory && use_memory;
  return c;
}

SSLConfig ExperimentConfig::effective_ssl() const {
  SSLConfig c = ssl;
  c.use_feedback = c.use_feedback && use_feedback;
  c.use_assistant = c.use_assistant && use_assistant;
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"data", c.data},
          {"pretrain_data", c.pretrain_data},
          {"out", c.out},
          {"seed", c.seed},
          {"seeds", c.seeds},
          {"ratio", c.ratio},
          {"pretrain_steps", c.pretrain_steps},
          {"patients", c.patients},
          {"slices", c.slices},
          {"classes", c.classes},
          {"size", c.size},
          {"pretrain_patients", c.pretrain_patients},
          {"use_prompt", c.use_prompt},
          {"use_memory", c.use_memory},
          {"use_feedback", c.use_feedback},
          {"use_assistant", c.use_assistant},
          {"segmenter", to_json(c.segmenter)},
          {"ssl", to_json(c.ssl)}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig c) {
  if (!j.is_object()) throw Error("experiment config must be a JSON object");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("data", c.data);
    get("pretrain_data", c.pretrain_data);
    get("out", c.out);
    get("seed", c.seed);
    get("seeds", c.seeds);
    get("ratio", c.ratio);
    get("pretrain_steps", c.pretrain_steps);
    get("patients", c.patients);
    get("slices", c.slices);
    get("classes", c.classes);
    get("size", c.size);
    get("pretrain_patients", c.pretrain_patients);
    get("use_prompt", c.use_prompt);
    get("use_memory", c.use_memory);
    get("use_feedback", c.use_feedback);
    get("use_assistant", c.use_assistant);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("bad experiment config: ") + e.what());
  }
  if (j.contains("segmenter")) c.segmenter = segmenter_config_from_json(j.at("segmenter"), c.segmenter);
  if (j.contains("ssl")) c.ssl = ssl_config_from_json(j.at("ssl"), c.ssl);
  return c;
}

std::string experiment_hash(const ExperimentConfig& config) {
  nlohmann::json j = to_json(config);
  j.erase("data");
  j.erase("pretrain_data");
  j.erase("out");
  return config_hash(j);
}

DatasetManifest make_target_corpus(const ExperimentConfig& config, std::uint64_t seed,
                                   const std::filesystem::path& root) {
  SyntheticOptions o;
  o.seed = seed;
  o.num_patients = config.patients;
  o.slices_per_patient = config.slices;
  o.num_classes = config.classes;
  o.size = config.size;
  DatasetManifest m = split_labeled(generate_synthetic(o, root), config.ratio, seed);
  save_manifest(m);
  return m;
}

DatasetManifest make_pretrain_corpus(const ExperimentConfig& config, std::uint64_t seed,
                                     const std::filesystem::path& root) {
  SyntheticOptions o;
  o.seed = 1000 + seed;
  o.num_patients = config.pretrain_patients;
  o.slices_per_patient = config.slices;
  o.num_classes = config.classes;
  o.size = config.size;
  DatasetManifest m = split_labeled(generate_synthetic(o, root), 1.0, o.seed);
  save_manifest(m);
  return m;
}

double segmenter_dice(const SegmenterState& state, const SegmenterConfig& config,
                      const DatasetManifest& manifest, const TemplateBank& bank,
                      std::uint64_t seed, Split split) {
  auto idx = manifest.indices(split);
  if (idx.empty()) throw Error("no entries in the " + to_string(split) + " split");
  SegmenterRunner runner(state, config, bank);
  const int C = manifest.num_classes;
  std::vector<SpatialPrompt> none(C);
  double total = 0.0;
  int count = 0;
  for (std::size_t i : idx) {
    GrayImage img = manifest.image(i);
    LabelMask truth = manifest.mask(i);
    auto logits = runner.class_logits(img, none, derive_seed(seed, "eval", {i}));
    for (int c = 1; c <= C; ++c) {
      LabelMask pred(img.height, img.width, C);
      const auto& l = logits[c - 1];
      for (std::size_t p = 0; p < l.size(); ++p)
        if (l[p] > 0.0) pred.labels[p] = static_cast<std::uint8_t>(c);
      total += dice(pred, truth, c);
      ++count;
    }
  }
  return total / count;
}

std::vector<AblationVariant> ablation_grid(bool with_baseline) {
  std::vector<AblationVariant> v{{"full", true, true, true, true},
                                 {"no-prompt", false, true, true, true},
                                 {"no-memory", true, false, true, true},
                                 {"no-feedback", true, true, false, true}};
  if (with_baseline) v.push_back({"no-assistant", true, true, true, false});
  return v;
}

std::vector<AblationRow> run_ablation(const DatasetManifest& target,
                                      const DatasetManifest& pretrain,
                                      const ExperimentConfig& config, std::uint64_t seed,
                                      const std::vector<AblationVariant>& variants) {
  const TemplateBank target_bank = build_bank(target);
  std::map<std::pair<bool, bool>, std::pair<SegmenterState, double>> assistants;
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    ExperimentConfig ec = config;
    ec.use_prompt = v.use_prompt;
    ec.use_memory = v.use_memory;
    ec.use_feedback = v.use_feedback;
    ec.use_assistant = v.use_assistant;
    SegmenterConfig scfg = ec.effective_segmenter();
    SSLConfig sslcfg = ec.effective_ssl();

    AblationRow row;
    row.variant = v;
    row.seed = seed;
    row.reference = v.name == "full";
    row.stage1_dice = std::numeric_limits<double>::quiet_NaN();

    Assistant assistant;
    if (sslcfg.use_assistant) {
      auto key = std::make_pair(scfg.use_prompt, scfg.use_memory);
      auto it = assistants.find(key);
      if (it == assistants.end()) {
        spdlog::info("[{} seed {}] stage 1 ({} steps)", v.name, seed, ec.pretrain_steps);
        TemplateBank pbank = build_pretrain_bank(pretrain, scfg.label_ratio, seed);
        SegmenterState s = train_stage1(pretrain, pbank, scfg, ec.pretrain_steps, seed).state;
        double d = segmenter_dice(s, scfg, target, target_bank, seed);
        it = assistants.emplace(key, std::make_pair(std::move(s), d)).first;
      }
      row.stage1_dice = it->second.second;
      assistant = {&it->second.first, &scfg, &target_bank};
    }
    spdlog::info("[{} seed {}] stage 2 ({} iterations)", v.name, seed, sslcfg.iterations);
    Stage2Result r = train_stage2(target, assistant, sslcfg, seed);
    row.report = r.history.back().second;
    spdlog::info("[{} seed {}] test dice {:.4f}", v.name, seed, row.report.average.dice);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {
std::string num(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

std::string ablation_csv(const std::vector<AblationRow>& rows, int num_classes,
                         const std::string& config_hash) {
  std::ostringstream out;
  out << "# config_hash=" << config_hash << "\n";
  out << "variant,seed,reference,use_prompt,use_memory,use_feedback,use_assistant,stage1_dice";
  for (int c = 1; c <= num_classes; ++c) out << ",dice_" << c;
  out << ",dice,iou,hd95\n";
  for (const auto& r : rows) {
    out << r.variant.name << ',' << r.seed << ',' << (r.reference ? 1 : 0) << ','
        << r.variant.use_prompt << ',' << r.variant.use_memory << ',' << r.variant.use_feedback
        << ',' << r.variant.use_assistant << ',' << num(r.stage1_dice);
    for (int c = 0; c < num_classes; ++c)
      out << ',' << num(c < static_cast<int>(r.report.classes.size()) ? r.report.classes[c].dice
                                                                      : std::nan(""));
    const auto& a = r.report.average;
    out << ',' << num(a.dice) << ',' << num(a.iou) << ','
        << (a.hd95 ? num(*a.hd95) : std::string("NA")) << "\n";
  }
  return out.str();
}

}  // namespace refseg
