#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "refseg/experiment.hpp"
#include "refseg/hash.hpp"

namespace fs = std::filesystem;

namespace testing {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("refseg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

refseg::GrayImage random_image(int h, int w, refseg::Rng& rng) {
  refseg::GrayImage img(h, w);
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

refseg::LabelMask random_mask(int h, int w, int classes, double p, refseg::Rng& rng) {
  refseg::LabelMask m(h, w, classes);
  for (auto& v : m.labels)
    if (rng.bernoulli(p)) v = static_cast<std::uint8_t>(rng.uniform_int(1, classes));
  return m;
}

refseg::LabelMask random_blobs(int h, int w, int class_id, refseg::Rng& rng) {
  refseg::LabelMask m(h, w, class_id);
  const int n = rng.uniform_int(0, 3);
  for (int k = 0; k < n; ++k) {
    const int r0 = rng.uniform_int(0, h - 1), c0 = rng.uniform_int(0, w - 1);
    const int r1 = std::min(h - 1, r0 + rng.uniform_int(0, h / 2));
    const int c1 = std::min(w - 1, c0 + rng.uniform_int(0, w / 2));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) m.at(r, c) = static_cast<std::uint8_t>(class_id);
  }
  return m;
}

refseg::ad::Tensor random_tensor(std::vector<int> shape, double scale, refseg::Rng& rng) {
  refseg::ad::Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

std::vector<double> random_vector(std::size_t n, double lo, double hi, refseg::Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

SimilarityBank similarity_bank(const std::vector<double>& sims, double temperature) {
  auto fn = [](const refseg::GrayImage& img) {
    refseg::Descriptor d;
    d.values = {img.pixels[0], img.pixels[1]};
    return d;
  };
  SimilarityBank out{refseg::TemplateBank(temperature, fn), {}};
  out.query.values = {1.0, 0.0};
  for (std::size_t i = 0; i < sims.size(); ++i) {
    refseg::GrayImage img(8, 8, 0.5);
    img.pixels[0] = sims[i];
    img.pixels[1] = std::sqrt(1.0 - sims[i] * sims[i]);
    img.pixels[2] = static_cast<double>(i) / sims.size();  // keeps entries distinct
    refseg::LabelMask m(8, 8, 1);
    m.labels[10] = 1;
    out.bank.insert(img, m, "p" + std::to_string(i));
  }
  return out;
}

GradCheck gradcheck_smooth(const refseg::ParamSet& params, const PatternLossFn& loss, int n,
                           std::uint64_t seed, double h, double floor) {
  refseg::ParamSet grads = params.zeros_like();
  std::uint64_t base = 0;
  loss(params, &grads, &base);
  std::vector<std::string> names;
  for (const auto& [name, t] : params.tensors()) names.push_back(name);
  refseg::Rng rng(seed);
  GradCheck out;
  refseg::ParamSet probe = params;
  for (int attempt = 0; out.checked < n; ++attempt) {
    if (attempt >= 20 * n) throw std::runtime_error("gradient check found too few smooth draws");
    const std::string& name = names[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(names.size()) - 1))];
    const auto size = static_cast<int>(params.at(name).numel());
    const auto idx = static_cast<std::size_t>(rng.uniform_int(0, size - 1));
    const double orig = params.at(name).data[idx];
    std::uint64_t p_up = 0, p_down = 0;
    probe.element(name, idx) = orig + h;
    const double up = loss(probe, nullptr, &p_up);
    probe.element(name, idx) = orig - h;
    const double down = loss(probe, nullptr, &p_down);
    probe.element(name, idx) = orig;
    if (p_up != base || p_down != base) {
      ++out.skipped;
      continue;
    }
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = grads.at(name).data[idx];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    if (rel >= out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst = name + "[" + std::to_string(idx) + "] analytic " + std::to_string(analytic) +
                  " numeric " + std::to_string(numeric);
    }
    ++out.checked;
  }
  return out;
}

GradCheck gradcheck(const refseg::ParamSet& params, const LossFn& loss, int n, std::uint64_t seed,
                    double h, double floor) {
  return gradcheck_smooth(
      params, [&](const refseg::ParamSet& p, refseg::ParamSet* g, std::uint64_t*) { return loss(p, g); }, n,
      seed, h, floor);
}

refseg::SegmenterConfig tiny_segmenter_config(int num_classes) {
  refseg::SegmenterConfig c;
  c.num_classes = num_classes;
  c.feature_channels = 8;
  c.prompt_dim = 8;
  c.heads = 2;
  c.decoder_channels = 8;
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string file_digest(const fs::path& p) { return refseg::to_hex(refseg::fnv1a64(read_file(p))); }

int cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"refseg"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return refseg::run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace testing
