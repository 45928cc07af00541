#include "refseg/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

#include "refseg/error.hpp"
#include "refseg/hash.hpp"
#include "refseg/rng.hpp"

namespace refseg {

using ad::Tensor;
using ad::Var;

void SegmenterConfig::validate() const {
  if (num_classes < 1 || num_classes > 4) throw Error("num_classes must be in [1, 4]");
  if (feature_channels < 1 || prompt_dim < 1 || heads < 1 || decoder_channels < 2 ||
      memory_pool < 1) {
    throw Error("segmenter dimensions must be positive");
  }
  if (feature_channels % heads != 0) throw Error("feature channels must divide evenly into heads");
  if (feature_stride != 4) throw Error("only feature stride 4 is supported");
  if (lambda_txt < 0 || lambda_mask < 0 || lambda_dice < 0 || lambda_bce < 0) {
    throw Error("loss weights must be non-negative");
  }
  if (!(eps > 0.0)) throw Error("eps must be positive");
  if (optimizer != "sgd" && optimizer != "adam") throw Error("unknown optimizer " + optimizer);
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw Error("unknown learning-rate schedule " + lr_schedule);
  }
  if (!(label_ratio > 0.0 && label_ratio <= 1.0)) throw Error("label ratio must be in (0, 1]");
}

nlohmann::json to_json(const SegmenterConfig& c) {
  return {{"num_classes", c.num_classes},
          {"feature_channels", c.feature_channels},
          {"feature_stride", c.feature_stride},
          {"prompt_dim", c.prompt_dim},
          {"heads", c.heads},
          {"memory_pool", c.memory_pool},
          {"decoder_channels", c.decoder_channels},
          {"lambda_txt", c.lambda_txt},
          {"lambda_mask", c.lambda_mask},
          {"lambda_dice", c.lambda_dice},
          {"lambda_bce", c.lambda_bce},
          {"eps", c.eps},
          {"use_prompt", c.use_prompt},
          {"use_memory", c.use_memory},
          {"optimizer", c.optimizer},
          {"learning_rate", c.learning_rate},
          {"lr_schedule", c.lr_schedule},
          {"label_ratio", c.label_ratio},
          {"spatial_prompt_prob", c.spatial_prompt_prob}};
}

SegmenterConfig segmenter_config_from_json(const nlohmann::json& j, SegmenterConfig c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("num_classes", c.num_classes);
    get("feature_channels", c.feature_channels);
    get("feature_stride", c.feature_stride);
    get("prompt_dim", c.prompt_dim);
    get("heads", c.heads);
    get("memory_pool", c.memory_pool);
    get("decoder_channels", c.decoder_channels);
    get("lambda_txt", c.lambda_txt);
    get("lambda_mask", c.lambda_mask);
    get("lambda_dice", c.lambda_dice);
    get("lambda_bce", c.lambda_bce);
    get("eps", c.eps);
    get("use_prompt", c.use_prompt);
    get("use_memory", c.use_memory);
    get("optimizer", c.optimizer);
    get("learning_rate", c.learning_rate);
    get("lr_schedule", c.lr_schedule);
    get("label_ratio", c.label_ratio);
    get("spatial_prompt_prob", c.spatial_prompt_prob);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("bad segmenter config: ") + e.what());
  }
  return c;
}

std::string config_hash(const nlohmann::json& config) { return to_hex(fnv1a64(config.dump())); }

std::string to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::None: return "none";
    case PromptKind::ProbMap: return "prob_map";
    case PromptKind::Box: return "box";
    case PromptKind::Points: return "points";
  }
  return "none";
}

PromptKind prompt_kind_from_string(const std::string& s) {
  if (s == "none") return PromptKind::None;
  if (s == "prob_map") return PromptKind::ProbMap;
  if (s == "box") return PromptKind::Box;
  if (s == "points") return PromptKind::Points;
  throw Error("unknown prompt kind '" + s + "'");
}

SpatialPrompt SpatialPrompt::prob_map(ProbMap m) {
  for (double v : m.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("probability prompt outside [0, 1]");
  }
  SpatialPrompt s;
  s.kind = PromptKind::ProbMap;
  s.map = std::move(m);
  return s;
}

SpatialPrompt SpatialPrompt::from_box(PixelBox b) {
  if (b.row1 < b.row0 || b.col1 < b.col0 || b.row0 < 0 || b.col0 < 0) {
    throw Error("malformed box prompt");
  }
  SpatialPrompt s;
  s.kind = PromptKind::Box;
  s.box = b;
  return s;
}

SpatialPrompt SpatialPrompt::from_points(std::vector<PointCue> p) {
  SpatialPrompt s;
  s.kind = p.empty() ? PromptKind::None : PromptKind::Points;
  s.points = std::move(p);
  return s;
}

std::vector<double> SpatialPrompt::raster(int height, int width) const {
  std::vector<double> out(static_cast<std::size_t>(height) * width, 0.0);
  switch (kind) {
    case PromptKind::None:
      break;
    case PromptKind::ProbMap:
      if (map.height != height || map.width != width) throw Error("probability prompt has wrong shape");
      out = map.values;
      break;
    case PromptKind::Box:
      if (box.row1 >= height || box.col1 >= width) throw Error("box prompt outside the image");
      for (int r = box.row0; r <= box.row1; ++r) {
        for (int c = box.col0; c <= box.col1; ++c) out[static_cast<std::size_t>(r) * width + c] = 1.0;
      }
      break;
    case PromptKind::Points:
      for (const auto& pt : points) {
        if (pt.row < 0 || pt.row >= height || pt.col < 0 || pt.col >= width) {
          throw Error("point prompt outside the image");
        }
        if (!pt.positive) continue;
        for (int r = 0; r < height; ++r) {
          for (int c = 0; c < width; ++c) {
            const double d2 = (r - pt.row) * (r - pt.row) + (c - pt.col) * (c - pt.col);
            double& v = out[static_cast<std::size_t>(r) * width + c];
            v = std::max(v, std::exp(-d2 / 8.0));
          }
        }
      }
      break;
  }
  return out;
}

// --- parameters ------------------------------------------------------------

SegmenterState init_segmenter(const SegmenterConfig& config, std::uint64_t seed) {
  config.validate();
  const int cf = config.feature_channels, dp = config.prompt_dim, cd = config.decoder_channels;
  const int half = cd / 2;
  const int k = config.num_classes + 1;
  SegmenterState s;
  auto& p = s.params;
  auto conv = [&](const std::string& name, int cout, int cin, int ks) {
    Rng rng(derive_seed(seed, "init:" + name));
    init_he(p.add(name + ".w", {cout, cin, ks, ks}), cin * ks * ks, rng);
    p.add(name + ".b", {cout});
  };
  conv("enc.c1", 16, 2, 3);
  conv("enc.c2", 32, 16, 3);
  conv("enc.c3", cf, 32, 3);
  conv("enc.fuse", cf, cf + 32, 1);

  {
    Rng rng(derive_seed(seed, "init:prompt.tokens"));
    init_normal(p.add("prompt.tokens", {config.num_classes, dp}), 1.0, rng);
  }
  auto dense = [&](const std::string& name, int out, int in, double stddev) {
    Rng rng(derive_seed(seed, "init:" + name));
    init_normal(p.add(name + ".w", {out, in}), stddev, rng);
    p.add(name + ".b", {out});
  };
  dense("prompt.fc1", dp, dp, std::sqrt(2.0 / dp));
  dense("prompt.fc2", cf, dp, std::sqrt(1.0 / dp));

  conv("mem.proj", cf, cf, 1);
  conv("attn.q", cf, cf, 1);
  conv("attn.k", cf, cf, 1);
  conv("attn.v", cf, cf, 1);
  // Zero output map: the attention branch starts as an exact identity.
  p.add("attn.o.w", {cf, cf, 1, 1});
  p.add("attn.o.b", {cf});

  conv("dec.fuse", cd, 2 * cf + 2, 1);
  conv("dec.up1", half, cd + 1, 3);
  conv("dec.up2", half, half + 1, 3);
  conv("dec.out", 1, half, 1);
  dense("head", k, cd, 0.1);
  return s;
}

// --- forward ---------------------------------------------------------------

namespace {

Var conv(Binder& bind, const std::string& name, const Var& x, int stride, int pad) {
  return ad::conv2d(x, bind(name + ".w"), bind(name + ".b"), stride, pad);
}

Var dense(Binder& bind, const std::string& name, const Var& x) {
  return ad::add_channel_vector(ad::matmul(bind(name + ".w"), x), bind(name + ".b"));
}

void check_image(const GrayImage& image) {
  image.validate();
  if (image.height % 4 != 0 || image.width % 4 != 0) {
    throw Error("segmenter input size must be divisible by 4");
  }
}

// Shared encoder on an (image, mask) stack. Three stride-2 blocks, the deepest
// upsampled back to stride 4 and fused with the stride-4 block.
Var encode(Binder& bind, const GrayImage& image, const std::vector<double>& mask_plane) {
  Tensor x({2, image.height, image.width});
  std::copy(image.pixels.begin(), image.pixels.end(), x.data.begin());
  std::copy(mask_plane.begin(), mask_plane.end(), x.data.begin() + static_cast<std::ptrdiff_t>(image.size()));
  Var in = bind.tape().constant(std::move(x));
  Var c1 = ad::relu(conv(bind, "enc.c1", in, 2, 1));
  Var c2 = ad::relu(conv(bind, "enc.c2", c1, 2, 1));
  Var c3 = ad::relu(conv(bind, "enc.c3", c2, 2, 1));
  Var up = ad::resize_bilinear(c3, c2.shape()[1], c2.shape()[2]);
  return conv(bind, "enc.fuse", ad::concat({up, c2}), 1, 0);
}

Var encode_memory(Binder& bind, const SegmenterConfig& config, const TemplateInput& t) {
  check_image(t.image);
  if (t.mask.size() != t.image.size()) throw Error("template mask does not match template image");
  Var f = conv(bind, "mem.proj", encode(bind, t.image, t.mask), 1, 0);
  const int h = f.shape()[1] / config.memory_pool, w = f.shape()[2] / config.memory_pool;
  if (config.memory_pool > 1) f = ad::resize_bilinear(f, h, w);
  return ad::reshape(f, {config.feature_channels, h * w});
}

Var prompt_embedding(Binder& bind, const SegmenterConfig& config, int class_id,
                     const ExternalToken& token) {
  Var t;
  if (token) {
    if (token->size() != static_cast<std::size_t>(config.prompt_dim)) {
      throw Error("external token has the wrong dimension");
    }
    t = bind.tape().constant(Tensor({config.prompt_dim, 1}, *token));
  } else {
    t = ad::transpose(ad::slice(bind("prompt.tokens"), class_id - 1, class_id));
  }
  return dense(bind, "prompt.fc2", ad::relu(dense(bind, "prompt.fc1", t)));
}

Var cross_attention(Binder& bind, const SegmenterConfig& config, const Var& f_img,
                    const Var& f_memory) {
  const int cf = config.feature_channels;
  const int h = f_img.shape()[1], w = f_img.shape()[2];
  const int n = h * w;
  const int dh = cf / config.heads;
  const int m = f_memory.shape()[1];
  Var q = ad::reshape(conv(bind, "attn.q", f_img, 1, 0), {cf, n});
  Var mem = ad::reshape(f_memory, {cf, m, 1});
  Var k = ad::reshape(conv(bind, "attn.k", mem, 1, 0), {cf, m});
  Var v = ad::reshape(conv(bind, "attn.v", mem, 1, 0), {cf, m});
  std::vector<Var> heads;
  for (int hd = 0; hd < config.heads; ++hd) {
    Var qh = ad::slice(q, hd * dh, (hd + 1) * dh);
    Var kh = ad::slice(k, hd * dh, (hd + 1) * dh);
    Var vh = ad::slice(v, hd * dh, (hd + 1) * dh);
    Var scores = ad::scale(ad::matmul(ad::transpose(qh), kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var attn = ad::softmax_rows(scores);  // n × m
    heads.push_back(ad::matmul(vh, ad::transpose(attn)));  // dh × n
  }
  Var merged = ad::reshape(ad::concat(heads), {cf, h, w});
  return ad::add(f_img, conv(bind, "attn.o", merged, 1, 0));
}

Tensor image_tensor(const GrayImage& image) { return Tensor({1, image.height, image.width}, image.pixels); }

SegmenterGraph decode(Binder& bind, const SegmenterConfig& config, const GrayImage& image,
                      const Var& f_img, const Var* f_memory, int class_id,
                      const SpatialPrompt& spatial, const ExternalToken& token) {
  if (class_id < 1 || class_id > config.num_classes) {
    throw Error("class id " + std::to_string(class_id) + " outside 1.." +
                std::to_string(config.num_classes));
  }
  ad::Tape& tape = bind.tape();
  const int cf = config.feature_channels;
  const int fh = f_img.shape()[1], fw = f_img.shape()[2];
  SegmenterGraph g;
  g.f_img = f_img;
  if (config.use_prompt) {
    g.h_seg = prompt_embedding(bind, config, class_id, token);
    g.p = ad::add_channel_vector(f_img, g.h_seg);
  } else {
    g.h_seg = tape.constant(Tensor({cf, 1}));
    g.p = f_img;
  }
  if (config.use_memory) {
    if (!f_memory) throw Error("the memory path needs a template");
    g.f_memory = *f_memory;
    g.q = cross_attention(bind, config, f_img, *f_memory);
  } else {
    g.q = f_img;
  }

  Tensor raster({1, image.height, image.width}, spatial.raster(image.height, image.width));
  Var prompt_small = tape.constant(ad::avg_pool(raster, 4));
  Var flag = tape.constant(Tensor({1, fh, fw}, spatial.kind == PromptKind::None ? 0.0 : 1.0));

  Var d = ad::relu(conv(bind, "dec.fuse", ad::concat({g.p, g.q, prompt_small, flag}), 1, 0));
  const Tensor full = image_tensor(image);
  const int h2 = image.height / 2, w2 = image.width / 2;
  Var img_half = tape.constant(ad::resize_bilinear(full, h2, w2));
  Var u1 = ad::relu(conv(bind, "dec.up1", ad::concat({ad::resize_bilinear(d, h2, w2), img_half}), 1, 1));
  Var img_full = tape.constant(full);
  Var u2 = ad::relu(conv(
      bind, "dec.up2", ad::concat({ad::resize_bilinear(u1, image.height, image.width), img_full}), 1, 1));
  g.logits = conv(bind, "dec.out", u2, 1, 0);
  g.class_logits = dense(bind, "head", ad::global_avg_pool(d));
  return g;
}

std::vector<double> zero_plane(const GrayImage& image) { return std::vector<double>(image.size(), 0.0); }

}  // namespace

SegmenterOutputs SegmenterGraph::values() const {
  SegmenterOutputs o;
  o.f_img = f_img.value();
  o.h_seg = h_seg.value();
  o.p = p.value();
  if (f_memory.valid()) o.f_memory = f_memory.value();
  o.q = q.value();
  o.logits = logits.value();
  o.class_logits = class_logits.value();
  return o;
}

SegmenterGraph forward_graph(Binder& bind, const SegmenterConfig& config, const GrayImage& image,
                             const TemplateInput* templ, int class_id,
                             const SpatialPrompt& spatial, const ExternalToken& token) {
  check_image(image);
  if (config.use_memory && !templ) throw Error("the memory path needs a template");
  Var f_img = encode(bind, image, zero_plane(image));
  std::optional<Var> mem;
  if (config.use_memory) mem = encode_memory(bind, config, *templ);
  return decode(bind, config, image, f_img, mem ? &*mem : nullptr, class_id, spatial, token);
}

SegmenterOutputs forward(const SegmenterState& state, const SegmenterConfig& config,
                         const GrayImage& image, const TemplateInput* templ, int class_id,
                         const SpatialPrompt& spatial, const ExternalToken& token) {
  ad::Tape tape;
  Binder bind(tape, state.params);
  return forward_graph(bind, config, image, templ, class_id, spatial, token).values();
}

// --- losses ----------------------------------------------------------------

Stage1Loss stage1_loss(const SegmenterOutputs& out, const LabelMask& target, int class_id,
                       const SegmenterConfig& config) {
  Stage1Loss s;
  s.mask = mask_loss(out.logits.data, target.binary(class_id), config.mask_weights());
  s.total = config.lambda_mask * s.mask;
  if (config.use_prompt) {
    s.text = text_loss(out.class_logits.data, class_id);
    s.total = config.lambda_txt * s.text + s.total;
  }
  return s;
}

Var stage1_loss(const SegmenterGraph& g, const LabelMask& target, int class_id,
                const SegmenterConfig& config, Stage1Loss* parts) {
  if (target.size() != g.logits.value().numel()) throw Error("stage-1 target has the wrong shape");
  Var m = mask_loss(g.logits, target.binary(class_id), config.mask_weights());
  Var total = ad::scale(m, config.lambda_mask);
  Stage1Loss s;
  s.mask = m.value().data[0];
  if (config.use_prompt) {
    Var t = text_loss(g.class_logits, class_id);
    s.text = t.value().data[0];
    total = ad::add(ad::scale(t, config.lambda_txt), total);
  }
  s.total = total.value().data[0];
  if (parts) *parts = s;
  return total;
}

// --- training --------------------------------------------------------------

TemplateBank build_bank(const DatasetManifest& manifest, double temperature) {
  TemplateBank bank(temperature);
  for (std::size_t i : manifest.indices(Split::Labeled)) {
    bank.insert(manifest.image(i), manifest.mask(i), manifest.entries[i].patient);
  }
  return bank;
}

TemplateBank build_pretrain_bank(const DatasetManifest& manifest, double ratio, std::uint64_t seed,
                                 double temperature) {
  DatasetManifest labeled = manifest;
  std::erase_if(labeled.entries, [](const ManifestEntry& e) { return e.split != Split::Labeled; });
  if (labeled.entries.empty()) throw Error("no labeled slices to build a template bank from");
  return build_bank(split_labeled(labeled, ratio, derive_seed(seed, "bank")), temperature);
}

TemplateInput template_input(const TemplateEntry& entry, int class_id) {
  return {entry.image, entry.mask.binary(class_id)};
}

namespace {

std::vector<double> shifted(const std::vector<double>& plane, int h, int w, int dy, int dx) {
  std::vector<double> out(plane.size(), 0.0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int sr = r - dy, sc = c - dx;
      if (sr >= 0 && sr < h && sc >= 0 && sc < w) {
        out[static_cast<std::size_t>(r) * w + c] = plane[static_cast<std::size_t>(sr) * w + sc];
      }
    }
  }
  return out;
}

// Imperfect spatial cue derived from the ground truth, standing in for the
// teacher feedback the assistant receives later on.
SpatialPrompt simulate_prompt(const LabelMask& mask, int class_id, std::uint64_t seed) {
  Rng rng(seed);
  const int h = mask.height, w = mask.width;
  const std::vector<double> fg = mask.binary(class_id);
  const double u = rng.uniform();
  if (u < 0.7) {
    std::vector<double> plane = shifted(fg, h, w, rng.uniform_int(-3, 3), rng.uniform_int(-3, 3));
    plane = gaussian_blur(plane, h, w, rng.uniform(0.5, 2.0));
    const double gain = rng.uniform(0.6, 1.0);
    std::vector<double> distractor(plane.size(), 0.0);
    if (rng.bernoulli(0.3) && mask.num_classes > 1) {
      int other = rng.uniform_int(1, mask.num_classes - 1);
      if (other >= class_id) ++other;
      const double level = rng.uniform(0.2, 0.6);
      distractor = mask.binary(other);
      for (double& v : distractor) v *= level;
    }
    ProbMap pm(h, w);
    for (std::size_t i = 0; i < plane.size(); ++i) {
      pm.values[i] = std::clamp(std::max(gain * plane[i], distractor[i]) + rng.normal(0.0, 0.05), 0.0, 1.0);
    }
    return SpatialPrompt::prob_map(std::move(pm));
  }
  int r0 = h, c0 = w, r1 = -1, c1 = -1;
  std::vector<std::pair<int, int>> pixels;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (mask.at(r, c) != class_id) continue;
      r0 = std::min(r0, r);
      c0 = std::min(c0, c);
      r1 = std::max(r1, r);
      c1 = std::max(c1, c);
      pixels.emplace_back(r, c);
    }
  }
  if (pixels.empty()) return SpatialPrompt::none();
  if (u < 0.85) {
    auto jitter = [&](int v, int hi) { return std::clamp(v + rng.uniform_int(-2, 2), 0, hi); };
    PixelBox b{jitter(r0, h - 1), jitter(c0, w - 1), jitter(r1, h - 1), jitter(c1, w - 1)};
    if (b.row1 < b.row0) std::swap(b.row0, b.row1);
    if (b.col1 < b.col0) std::swap(b.col0, b.col1);
    return SpatialPrompt::from_box(b);
  }
  std::vector<PointCue> pts;
  for (int i = 0; i < 5; ++i) {
    const auto& px = pixels[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pixels.size()) - 1))];
    pts.push_back({px.first, px.second, true});
  }
  return SpatialPrompt::from_points(std::move(pts));
}

}  // namespace

Stage1Result train_stage1(const DatasetManifest& manifest, const TemplateBank& bank,
                          const SegmenterConfig& config, int steps, std::uint64_t seed,
                          const std::function<void(int, const Stage1Loss&)>& on_step) {
  config.validate();
  if (steps < 0) throw Error("steps must be non-negative");
  if (config.num_classes != manifest.num_classes) {
    throw Error("segmenter class count does not match the dataset");
  }
  Stage1Result result;
  result.state = init_segmenter(config, derive_seed(seed, "segmenter.init"));
  if (steps == 0) return result;
  if (config.use_memory && bank.empty()) throw Error("stage-1 training needs a non-empty bank");

  const std::vector<std::size_t> pool = manifest.indices(Split::Labeled);
  if (pool.empty()) throw Error("no labeled slices for stage 1");
  std::vector<GrayImage> images;
  std::vector<LabelMask> masks;
  std::vector<Descriptor> descriptors;
  for (std::size_t i : pool) {
    images.push_back(manifest.image(i));
    masks.push_back(manifest.mask(i));
    descriptors.push_back(bank.describe(images.back()));
  }

  ParamSet& params = result.state.params;
  AdamState adam;
  for (int step = 0; step < steps; ++step) {
    Rng rng(derive_seed(seed, "stage1.sample", {static_cast<std::uint64_t>(step)}));
    const auto item = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1));
    const LabelMask& mask = masks[item];
    const std::set<int> present = mask.classes_present();
    int class_id;
    if (present.empty()) {
      class_id = rng.uniform_int(1, config.num_classes);
    } else {
      auto it = present.begin();
      std::advance(it, rng.uniform_int(0, static_cast<int>(present.size()) - 1));
      class_id = *it;
    }
    const bool with_prompt = rng.bernoulli(config.spatial_prompt_prob);

    std::optional<TemplateInput> templ;
    if (config.use_memory) {
      const std::string& patient = manifest.entries[pool[item]].patient;
      const SampleDraw draw = bank.sample(
          descriptors[item], class_id,
          derive_seed(seed, "stage1.template", {static_cast<std::uint64_t>(step)}), patient);
      const TemplateEntry& e = bank.entry(draw.chosen);
      const AugmentedView view = template_augment(
          e.image, e.mask, derive_seed(seed, "stage1.augment", {static_cast<std::uint64_t>(step)}));
      templ = TemplateInput{view.image, view.mask->binary(class_id)};
    }
    const SpatialPrompt spatial =
        with_prompt ? simulate_prompt(mask, class_id,
                                      derive_seed(seed, "stage1.prompt", {static_cast<std::uint64_t>(step)}))
                    : SpatialPrompt::none();

    ad::Tape tape;
    ParamSet grads = params.zeros_like();
    Binder bind(tape, params, &grads);
    const SegmenterGraph g =
        forward_graph(bind, config, images[item], templ ? &*templ : nullptr, class_id, spatial);
    Stage1Loss parts;
    const Var loss = stage1_loss(g, mask, class_id, config, &parts);
    if (!std::isfinite(parts.total)) {
      throw Error("stage-1 training diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    const double lr = config.lr_schedule == "cosine"
                          ? 0.5 * config.learning_rate * (1.0 + std::cos(M_PI * step / steps))
                          : config.learning_rate;
    if (config.optimizer == "adam") {
      adam_step(params, grads, adam, lr);
    } else {
      sgd_step(params, grads, lr);
    }
    if (!params.all_finite()) {
      throw Error("stage-1 training diverged at step " + std::to_string(step));
    }
    result.curve.push_back(parts);
    if (on_step) on_step(step, parts);
    if (step % 100 == 0) {
      spdlog::debug("stage1 step {} loss {:.4f} (mask {:.4f}, text {:.4f})", step, parts.total,
                    parts.mask, parts.text);
    }
  }
  return result;
}

// --- inference -------------------------------------------------------------

namespace {

std::uint64_t template_seed(std::uint64_t seed, int class_id) {
  return derive_seed(seed, "predict.template", {static_cast<std::uint64_t>(class_id)});
}

ProbMap sigmoid_map(const Tensor& logits, int h, int w) {
  ProbMap pm(h, w);
  for (std::size_t i = 0; i < pm.values.size(); ++i) pm.values[i] = 1.0 / (1.0 + std::exp(-logits.data[i]));
  return pm;
}

}  // namespace

ProbMap predict(const SegmenterState& state, const SegmenterConfig& config,
                const GrayImage& image, const TemplateBank& bank, int class_id,
                const SpatialPrompt& spatial, std::uint64_t seed, SampleDraw* draw) {
  std::optional<TemplateInput> templ;
  if (config.use_memory) {
    const SampleDraw d = bank.sample(bank.describe(image), class_id, template_seed(seed, class_id));
    templ = template_input(bank.entry(d.chosen), class_id);
    spdlog::debug("template draw for class {}: entry {} (p = {:.3f})", class_id, d.chosen,
                  d.probabilities.front());
    if (draw) *draw = d;
  }
  const SegmenterOutputs out =
      forward(state, config, image, templ ? &*templ : nullptr, class_id, spatial);
  return sigmoid_map(out.logits, image.height, image.width);
}

SegmenterRunner::SegmenterRunner(const SegmenterState& state, const SegmenterConfig& config,
                                 const TemplateBank& bank)
    : state_(state), config_(config), bank_(bank) {
  config_.validate();
}

std::vector<std::vector<double>> SegmenterRunner::class_logits(
    const GrayImage& image, const std::vector<SpatialPrompt>& spatial, std::uint64_t seed,
    std::vector<SampleDraw>* draws) {
  if (spatial.size() != static_cast<std::size_t>(config_.num_classes)) {
    throw Error("one spatial prompt per class expected");
  }
  check_image(image);
  ad::Tape tape;
  Binder bind(tape, state_.params);
  const Var f_img = encode(bind, image, zero_plane(image));
  std::optional<Descriptor> desc;
  if (config_.use_memory) desc = bank_.describe(image);
  std::vector<std::vector<double>> out;
  if (draws) draws->clear();
  for (int c = 1; c <= config_.num_classes; ++c) {
    std::optional<Var> mem;
    if (config_.use_memory) {
      const SampleDraw d = bank_.sample(*desc, c, template_seed(seed, c));
      if (draws) draws->push_back(d);
      const auto key = std::make_pair(d.chosen, c);
      auto it = memory_cache_.find(key);
      if (it == memory_cache_.end()) {
        ad::Tape mt;
        Binder mb(mt, state_.params);
        const TemplateInput t = template_input(bank_.entry(d.chosen), c);
        it = memory_cache_.emplace(key, encode_memory(mb, config_, t).value()).first;
      }
      mem = tape.constant(it->second);
    }
    const SegmenterGraph g =
        decode(bind, config_, image, f_img, mem ? &*mem : nullptr, c, spatial[static_cast<std::size_t>(c - 1)], {});
    const auto& l = g.logits.value().data;
    out.emplace_back(l.begin(), l.end());
  }
  return out;
}

// --- checkpoints -----------------------------------------------------------

void save_segmenter(const SegmenterState& state, const SegmenterConfig& config,
                    std::uint64_t seed, const std::filesystem::path& path) {
  const nlohmann::json cfg = to_json(config);
  nlohmann::json j = {{"kind", "segmenter"},
                      {"version", 1},
                      {"config", cfg},
                      {"config_hash", config_hash(cfg)},
                      {"seed", seed},
                      {"params", params_to_json(state.params)}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

std::pair<SegmenterState, SegmenterConfig> load_segmenter(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("checkpoint not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("kind", "") != "segmenter") throw Error(path.string() + " is not a segmenter checkpoint");
  const SegmenterConfig config = segmenter_config_from_json(j.at("config"));
  config.validate();
  SegmenterState state;
  state.params = params_from_json(j.at("params"));
  check_layout(init_segmenter(config, 0).params, state.params, "segmenter checkpoint");
  return {std::move(state), config};
}

}  // namespace refseg
