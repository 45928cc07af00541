#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>

#include "refseg/hash.hpp"
#include "refseg/log.hpp"
#include "refseg/rng.hpp"

namespace refseg {

std::string to_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                          std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = mix64(master ^ fnv1a64(stream));
  for (std::uint64_t c : coords) h = mix64(h ^ mix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

int Rng::uniform_int(int lo, int hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(static_cast<double>(span) * uniform());
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * M_PI * u2);
  has_spare_ = true;
  return r * std::cos(2.0 * M_PI * u2);
}

void init_logging() {
  static std::once_flag once;
  std::call_once(once, [] {
    if (!spdlog::get("refseg")) spdlog::set_default_logger(spdlog::stderr_color_st("refseg"));
    const char* env = std::getenv("REFSEG_LOG");
    const std::string level = env ? env : "warn";
    if (level == "debug") {
      spdlog::set_level(spdlog::level::debug);
    } else if (level == "info") {
      spdlog::set_level(spdlog::level::info);
    } else if (level == "off") {
      spdlog::set_level(spdlog::level::off);
    } else {
      spdlog::set_level(spdlog::level::warn);
    }
    spdlog::set_pattern("[%H:%M:%S] [%l] %v");
  });
}

}  // namespace refseg
