#include "refseg/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "refseg/error.hpp"
#include "refseg/rng.hpp"

namespace refseg {

using ad::Tensor;
using ad::Var;

void SSLConfig::validate() const {
  if (!(tau_c > 0.0 && tau_c < 1.0)) throw Error("confidence threshold must be in (0, 1)");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error("EMA decay must be in [0, 1]");
  if (lambda_ce < 0 || lambda_dice < 0 || lambda_u < 0) throw Error("loss weights must be non-negative");
  if (iterations < 1) throw Error("iterations must be at least 1");
  if (schedule != "cosine") throw Error("unknown schedule " + schedule);
  if (!(feedback_start >= 0.0 && feedback_start <= 1.0)) throw Error("feedback start must be in [0, 1]");
  if (batch_labeled < 1 || batch_unlabeled < 1) throw Error("batch sizes must be positive");
  if (!(dropout > 0.0 && dropout < 1.0)) throw Error("dropout must be in (0, 1)");
  if (student_channels < 1) throw Error("student channels must be positive");
  if (optimizer != "sgd" && optimizer != "adam") throw Error("unknown optimizer " + optimizer);
  if (eval_every < 0) throw Error("eval_every must be non-negative");
}

nlohmann::json to_json(const SSLConfig& c) {
  return {{"lambda_ce", c.lambda_ce},
          {"lambda_dice", c.lambda_dice},
          {"lambda_u", c.lambda_u},
          {"tau_c", c.tau_c},
          {"gamma", c.gamma},
          {"iterations", c.iterations},
          {"schedule", c.schedule},
          {"feedback_start", c.feedback_start},
          {"feedback_kind", to_string(c.feedback_kind)},
          {"batch_labeled", c.batch_labeled},
          {"batch_unlabeled", c.batch_unlabeled},
          {"dropout", c.dropout},
          {"eps", c.eps},
          {"student_channels", c.student_channels},
          {"optimizer", c.optimizer},
          {"learning_rate", c.learning_rate},
          {"eval_every", c.eval_every},
          {"evaluate_teacher", c.evaluate_teacher},
          {"use_unlabeled", c.use_unlabeled},
          {"use_assistant", c.use_assistant},
          {"use_feedback", c.use_feedback},
          {"force_alpha_v_zero", c.force_alpha_v_zero}};
}

SSLConfig ssl_config_from_json(const nlohmann::json& j, SSLConfig c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("lambda_ce", c.lambda_ce);
    get("lambda_dice", c.lambda_dice);
    get("lambda_u", c.lambda_u);
    get("tau_c", c.tau_c);
    get("gamma", c.gamma);
    get("iterations", c.iterations);
    get("schedule", c.schedule);
    get("feedback_start", c.feedback_start);
    if (j.contains("feedback_kind")) c.feedback_kind = prompt_kind_from_string(j.at("feedback_kind").get<std::string>());
    get("batch_labeled", c.batch_labeled);
    get("batch_unlabeled", c.batch_unlabeled);
    get("dropout", c.dropout);
    get("eps", c.eps);
    get("student_channels", c.student_channels);
    get("optimizer", c.optimizer);
    get("learning_rate", c.learning_rate);
    get("eval_every", c.eval_every);
    get("evaluate_teacher", c.evaluate_teacher);
    get("use_unlabeled", c.use_unlabeled);
    get("use_assistant", c.use_assistant);
    get("use_feedback", c.use_feedback);
    get("force_alpha_v_zero", c.force_alpha_v_zero);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("bad SSL config: ") + e.what());
  }
  return c;
}

// --- student ---------------------------------------------------------------

ParamSet init_student(int num_classes, int channels, std::uint64_t seed) {
  ParamSet p;
  auto conv = [&](const std::string& name, int cout, int cin, int k) {
    Rng rng(derive_seed(seed, "init:" + name));
    init_he(p.add(name + ".w", {cout, cin, k, k}), cin * k * k, rng);
    p.add(name + ".b", {cout});
  };
  conv("g.c1", 16, 1, 3);
  conv("g.c2", 32, 16, 3);
  conv("g.c3", channels, 32, 3);
  conv("h.c1", 16, channels, 3);
  conv("h.c2", 8, 16, 3);
  conv("h.c3", 8, 8, 3);
  conv("h.out", num_classes + 1, 8, 1);
  return p;
}

namespace {

Var conv(Binder& bind, const std::string& name, const Var& x, int stride, int pad) {
  return ad::conv2d(x, bind(name + ".w"), bind(name + ".b"), stride, pad);
}

}  // namespace

Var student_encode(Binder& bind, const GrayImage& image) {
  Var x = bind.tape().constant(Tensor({1, image.height, image.width}, image.pixels));
  Var c1 = ad::relu(conv(bind, "g.c1", x, 2, 1));
  Var c2 = ad::relu(conv(bind, "g.c2", c1, 2, 1));
  return ad::relu(conv(bind, "g.c3", c2, 1, 1));
}

Var student_decode(Binder& bind, const Var& features, int height, int width) {
  Var d1 = ad::relu(conv(bind, "h.c1", features, 1, 1));
  Var d2 = ad::relu(conv(bind, "h.c2", ad::resize_bilinear(d1, height / 2, width / 2), 1, 1));
  Var d3 = ad::relu(conv(bind, "h.c3", ad::resize_bilinear(d2, height, width), 1, 1));
  return conv(bind, "h.out", d3, 1, 0);
}

Tensor student_logits(const ParamSet& params, const GrayImage& image) {
  ad::Tape tape;
  Binder bind(tape, params);
  return student_decode(bind, student_encode(bind, image), image.height, image.width).value();
}

LabelMask student_predict(const ParamSet& params, const GrayImage& image, int num_classes) {
  return argmax_labels(softmax_classes(student_logits(params, image)), num_classes);
}

std::vector<double> draw_channel_mask(int channels, double drop_prob, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> m(static_cast<std::size_t>(channels));
  for (double& v : m) v = rng.bernoulli(1.0 - drop_prob) ? 1.0 : 0.0;
  return m;
}

DualForward student_forward_dual(Binder& bind, const GrayImage& x_s1, const GrayImage& x_s2,
                                 std::uint64_t seed, double drop_prob) {
  if (x_s1.height != x_s2.height || x_s1.width != x_s2.width) {
    throw Error("strong views differ in shape");
  }
  DualForward out;
  Var g1 = student_encode(bind, x_s1);
  Var g2 = student_encode(bind, x_s2);
  const int channels = g1.shape()[0];
  out.mask = draw_channel_mask(channels, drop_prob, seed);
  std::vector<double> f1(out.mask.size()), f2(out.mask.size());
  for (std::size_t c = 0; c < out.mask.size(); ++c) {
    f1[c] = out.mask[c] / (1.0 - drop_prob);
    f2[c] = (1.0 - out.mask[c]) / drop_prob;
  }
  out.e1 = ad::scale_channels(g1, f1);
  out.e2 = ad::scale_channels(g2, f2);
  out.logits_sf = student_decode(bind, out.e1, x_s1.height, x_s1.width);
  out.logits_si = student_decode(bind, out.e2, x_s2.height, x_s2.width);
  return out;
}

// --- pseudo-labels ---------------------------------------------------------

TeacherLabels teacher_labels_from_probs(const ClassProbs& probs, int num_classes, double tau_c) {
  TeacherLabels t;
  t.probs = probs;
  t.labels = argmax_labels(probs, num_classes);
  const std::size_t n = static_cast<std::size_t>(probs.height) * probs.width;
  t.confident.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = 0.0;
    for (int c = 0; c < probs.num_labels; ++c) mx = std::max(mx, probs.values[c * n + i]);
    t.confident[i] = mx >= tau_c ? 1 : 0;
  }
  return t;
}

TeacherLabels teacher_pseudo_label(const ParamSet& teacher, int num_classes, const GrayImage& x_w,
                                   double tau_c) {
  return teacher_labels_from_probs(softmax_classes(student_logits(teacher, x_w)), num_classes, tau_c);
}

AssistantLabels assemble_assistant(const std::vector<std::vector<double>>& class_logits, int height,
                                   int width) {
  const int num_classes = static_cast<int>(class_logits.size());
  Tensor z({num_classes + 1, height, width});
  const std::size_t n = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < num_classes; ++c) {
    if (class_logits[c].size() != n) throw Error("assistant logits have the wrong shape");
    std::copy(class_logits[c].begin(), class_logits[c].end(), z.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * n));
  }
  AssistantLabels a;
  a.probs = softmax_classes(z);
  a.labels = argmax_labels(a.probs, num_classes);
  return a;
}

AssistantLabels assistant_pseudo_label(SegmenterRunner& runner, const GrayImage& x_u,
                                       const std::vector<SpatialPrompt>& spatial,
                                       std::uint64_t seed) {
  return assemble_assistant(runner.class_logits(x_u, spatial, seed), x_u.height, x_u.width);
}

// --- schedule, EMA, feedback -----------------------------------------------

ScheduleWeights schedule(int t, int total, const std::string& kind) {
  if (kind != "cosine") throw Error("unknown schedule " + kind);
  if (total < 1) throw Error("schedule needs T >= 1");
  t = std::clamp(t, 0, total);
  // Exact endpoints and midpoint; cos(pi / 2) is not exactly zero in floating point.
  double eta;
  if (t == 0) {
    eta = 0.0;
  } else if (t == total) {
    eta = 1.0;
  } else if (2 * t == total) {
    eta = 0.5;
  } else {
    eta = 0.5 * (1.0 - std::cos(M_PI * static_cast<double>(t) / total));
  }
  return {eta, 1.0 - eta};
}

void ema_update(ParamSet& teacher, const ParamSet& student, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw Error("EMA decay must be in [0, 1]");
  check_layout(teacher, student, "EMA update");
  for (auto& [name, t] : teacher.tensors()) {
    const auto& s = student.at(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = gamma * t.data[i] + (1.0 - gamma) * s[i];
  }
}

SpatialPrompt feedback_prompt(const ProbMap& p, PromptKind kind) {
  switch (kind) {
    case PromptKind::None:
      return SpatialPrompt::none();
    case PromptKind::ProbMap:
      return SpatialPrompt::prob_map(p);
    case PromptKind::Box: {
      int r0 = p.height, c0 = p.width, r1 = -1, c1 = -1;
      for (int r = 0; r < p.height; ++r) {
        for (int c = 0; c < p.width; ++c) {
          if (p.at(r, c) > 0.5) {
            r0 = std::min(r0, r);
            c0 = std::min(c0, c);
            r1 = std::max(r1, r);
            c1 = std::max(c1, c);
          }
        }
      }
      if (r1 < 0) return SpatialPrompt::none();
      return SpatialPrompt::from_box({r0, c0, r1, c1});
    }
    case PromptKind::Points: {
      std::vector<std::size_t> order(p.values.size());
      std::iota(order.begin(), order.end(), 0);
      const std::size_t k = std::min<std::size_t>(5, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::size_t a, std::size_t b) {
                          if (p.values[a] != p.values[b]) return p.values[a] > p.values[b];
                          return a < b;
                        });
      std::vector<PointCue> pts;
      for (std::size_t i = 0; i < k; ++i) {
        pts.push_back({static_cast<int>(order[i]) / p.width, static_cast<int>(order[i]) % p.width, true});
      }
      return SpatialPrompt::from_points(std::move(pts));
    }
  }
  return SpatialPrompt::none();
}

// --- loss ------------------------------------------------------------------

Var stage2_loss(Binder& bind, const SSLConfig& config, const Stage2Batch& batch, Stage2Loss* parts) {
  if (batch.labeled_images.empty()) throw Error("stage-2 loss needs a labeled batch");
  std::vector<Var> sup_logits;
  for (const auto& img : batch.labeled_images) {
    sup_logits.push_back(student_decode(bind, student_encode(bind, img), img.height, img.width));
  }
  Var total = supervised_loss(sup_logits, batch.labeled_masks, config.supervised_weights());
  Stage2Loss s;
  s.sup = total.value().data[0];

  if (config.use_unlabeled && !batch.unlabeled.empty()) {
    std::vector<Var> sf, si;
    std::vector<UnlabeledTargets> targets;
    for (std::size_t b = 0; b < batch.unlabeled.size(); ++b) {
      const UnlabeledItem& item = batch.unlabeled[b];
      const DualForward d = student_forward_dual(
          bind, item.strong1, item.strong2,
          derive_seed(batch.dropout_seed, "dropout", {static_cast<std::uint64_t>(b)}), config.dropout);
      sf.push_back(d.logits_sf);
      si.push_back(d.logits_si);
      targets.push_back({&item.teacher_labels,
                         item.assistant_labels ? &*item.assistant_labels : nullptr, &item.confident});
    }
    Var lu;
    if (config.use_assistant) {
      JointLossParts jp;
      lu = joint_unlabeled_loss(sf, si, targets, batch.weights.alpha_t, batch.weights.alpha_v, &jp);
      s.u_teacher = jp.teacher;
      s.u_assistant = jp.assistant;
    } else {
      lu = unimatch_unlabeled_loss(sf, si, targets);
      s.u_teacher = lu.value().data[0];
    }
    total = ad::add(total, ad::scale(lu, config.lambda_u));
  }
  s.total = total.value().data[0];
  if (parts) *parts = s;
  return total;
}

// --- training --------------------------------------------------------------

MetricReport evaluate_student(const ParamSet& student, const DatasetManifest& manifest, Split split) {
  std::vector<LabelMask> preds, truths;
  for (std::size_t i : manifest.indices(split)) {
    preds.push_back(student_predict(student, manifest.image(i), manifest.num_classes));
    truths.push_back(manifest.mask(i));
  }
  return evaluate(preds, truths, manifest.num_classes);
}

Stage2Result train_stage2(const DatasetManifest& manifest, const Assistant& assistant,
                          const SSLConfig& config, std::uint64_t seed,
                          const std::function<void(const Stage2LogRow&)>& on_iteration) {
  config.validate();
  const int num_classes = manifest.num_classes;
  const auto labeled = manifest.indices(Split::Labeled);
  const auto unlabeled = manifest.indices(Split::Unlabeled);
  if (labeled.empty()) throw Error("stage 2 needs labeled slices");
  if (config.use_unlabeled && unlabeled.empty()) throw Error("stage 2 needs unlabeled slices");
  const bool with_assistant = config.use_unlabeled && config.use_assistant;
  if (with_assistant) {
    if (!assistant.state || !assistant.config || !assistant.bank) {
      throw Error("the assistant path needs a stage-1 segmenter and a template bank");
    }
    if (assistant.config->num_classes != num_classes) {
      throw Error("assistant class count does not match the dataset");
    }
  }

  std::vector<GrayImage> l_images, u_images;
  std::vector<LabelMask> l_masks;
  for (std::size_t i : labeled) {
    l_images.push_back(manifest.image(i));
    l_masks.push_back(manifest.mask(i));
  }
  for (std::size_t i : unlabeled) u_images.push_back(manifest.image(i));

  StrongAugmentOptions strong_opts;
  {
    const auto& pool = u_images.empty() ? l_images : u_images;
    double s = 0.0;
    for (const auto& img : pool) s += mean_intensity(img);
    strong_opts.cutout_fill = s / static_cast<double>(pool.size());
  }

  Stage2Result result;
  SSLState& st = result.state;
  st.student = init_student(num_classes, config.student_channels, derive_seed(seed, "student.init"));
  st.teacher = st.student;
  std::optional<SegmenterRunner> runner;
  if (with_assistant) runner.emplace(*assistant.state, *assistant.config, *assistant.bank);

  const int total = config.iterations;
  const int feedback_from = static_cast<int>(std::ceil(config.feedback_start * total));
  for (int t = 0; t < total; ++t) {
    const auto ut = static_cast<std::uint64_t>(t);
    Stage2Batch batch;
    {
      Rng rng(derive_seed(seed, "stage2.labeled", {ut}));
      for (int b = 0; b < config.batch_labeled; ++b) {
        const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(labeled.size()) - 1));
        AugmentedView v = weak_augment(l_images[k], l_masks[k],
                                       derive_seed(seed, "stage2.labeled.aug", {ut, static_cast<std::uint64_t>(b)}));
        batch.labeled_images.push_back(std::move(v.image));
        batch.labeled_masks.push_back(std::move(*v.mask));
      }
    }
    batch.weights = schedule(t, total, config.schedule);
    if (config.force_alpha_v_zero) batch.weights = {1.0, 0.0};

    if (config.use_unlabeled) {
      Rng rng(derive_seed(seed, "stage2.unlabeled", {ut}));
      const bool feedback = with_assistant && config.use_feedback && t >= feedback_from;
      for (int b = 0; b < config.batch_unlabeled; ++b) {
        const auto ub = static_cast<std::uint64_t>(b);
        const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(unlabeled.size()) - 1));
        const GrayImage& x_u = u_images[k];
        const AugmentedView weak = weak_augment(x_u, derive_seed(seed, "stage2.weak", {ut, ub}));
        TeacherLabels tl = teacher_pseudo_label(st.teacher, num_classes, weak.image, config.tau_c);
        UnlabeledItem item;
        item.strong1 = strong_augment(weak, derive_seed(seed, "stage2.strong1", {ut, ub}), strong_opts).image;
        item.strong2 = strong_augment(weak, derive_seed(seed, "stage2.strong2", {ut, ub}), strong_opts).image;
        if (with_assistant) {
          std::vector<SpatialPrompt> spatial(static_cast<std::size_t>(num_classes));
          if (feedback) {
            // Teacher probabilities live in the weak-view frame; the assistant sees x_u.
            const TransformRecord back = inverse_geometry(weak.record);
            for (int c = 1; c <= num_classes; ++c) {
              ProbMap pm(x_u.height, x_u.width);
              pm.values = warp_plane(tl.probs.channel(c).values, x_u.height, x_u.width, back);
              for (double& v : pm.values) v = std::clamp(v, 0.0, 1.0);
              spatial[static_cast<std::size_t>(c - 1)] = feedback_prompt(pm, config.feedback_kind);
            }
          }
          const AssistantLabels al = assistant_pseudo_label(
              *runner, x_u, spatial, derive_seed(seed, "stage2.assistant", {ut, ub}));
          item.assistant_labels = warp_mask(al.labels, weak.record);
        }
        item.teacher_labels = std::move(tl.labels);
        item.confident = std::move(tl.confident);
        batch.unlabeled.push_back(std::move(item));
      }
      batch.dropout_seed = derive_seed(seed, "stage2.dropout", {ut});
    }

    ad::Tape tape;
    ParamSet grads = st.student.zeros_like();
    Binder bind(tape, st.student, &grads);
    Stage2Loss parts;
    const Var loss = stage2_loss(bind, config, batch, &parts);
    if (!std::isfinite(parts.total)) {
      throw Error("stage-2 training diverged at iteration " + std::to_string(t));
    }
    tape.backward(loss);
    if (config.optimizer == "adam") {
      adam_step(st.student, grads, st.optimizer, config.learning_rate);
    } else {
      sgd_step(st.student, grads, config.learning_rate);
    }
    if (!st.student.all_finite()) {
      throw Error("stage-2 training diverged at iteration " + std::to_string(t));
    }
    ema_update(st.teacher, st.student, config.gamma);
    st.t = t + 1;

    Stage2LogRow row{t, parts, batch.weights, {}};
    const bool eval_now = st.t == total || (config.eval_every > 0 && st.t % config.eval_every == 0);
    if (eval_now && !manifest.indices(Split::Test).empty()) {
      MetricReport report = evaluate_student(config.evaluate_teacher ? st.teacher : st.student, manifest);
      for (const auto& c : report.classes) row.test_dice.push_back(c.dice);
      spdlog::info("stage2 iter {} test dice {:.4f}", st.t, report.average.dice);
      result.history.emplace_back(st.t, std::move(report));
    }
    if (t % 100 == 0) {
      spdlog::debug("stage2 iter {} sup {:.4f} u_t {:.4f} u_v {:.4f}", t, parts.sup, parts.u_teacher,
                    parts.u_assistant);
    }
    if (on_iteration) on_iteration(row);
    result.log.push_back(std::move(row));
  }
  return result;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string stage2_log_csv(const std::vector<Stage2LogRow>& log, int num_classes) {
  std::string out = "iteration,L_sup,L_u_teacher,L_u_assistant,alpha_t,alpha_v";
  for (int c = 1; c <= num_classes; ++c) out += ",dice_" + std::to_string(c);
  out += "\n";
  for (const auto& r : log) {
    out += std::to_string(r.iteration) + "," + fmt(r.loss.sup) + "," + fmt(r.loss.u_teacher) + "," +
           fmt(r.loss.u_assistant) + "," + fmt(r.weights.alpha_t) + "," + fmt(r.weights.alpha_v);
    for (int c = 0; c < num_classes; ++c) {
      out += ",";
      if (static_cast<std::size_t>(c) < r.test_dice.size()) out += fmt(r.test_dice[c]);
    }
    out += "\n";
  }
  return out;
}

void save_student(const SSLState& state, const SSLConfig& config, int num_classes,
                  std::uint64_t seed, const std::filesystem::path& path) {
  const nlohmann::json cfg = to_json(config);
  nlohmann::json j = {{"kind", "student"},
                      {"version", 1},
                      {"config", cfg},
                      {"config_hash", config_hash(cfg)},
                      {"seed", seed},
                      {"num_classes", num_classes},
                      {"iteration", state.t},
                      {"student", params_to_json(state.student)},
                      {"teacher", params_to_json(state.teacher)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

StudentCheckpoint load_student(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("checkpoint not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("kind", "") != "student") throw Error(path.string() + " is not a student checkpoint");
  StudentCheckpoint ck;
  ck.config = ssl_config_from_json(j.at("config"));
  ck.num_classes = j.at("num_classes").get<int>();
  ck.student = params_from_json(j.at("student"));
  ck.teacher = params_from_json(j.at("teacher"));
  const ParamSet expected = init_student(ck.num_classes, ck.config.student_channels, 0);
  check_layout(expected, ck.student, "student checkpoint");
  check_layout(expected, ck.teacher, "teacher checkpoint");
  return ck;
}

}  // namespace refseg
