#pragma once

#include <spdlog/spdlog.h>

namespace refseg {

// Reads REFSEG_LOG (debug|info|warn|off) once and configures the default
// spdlog logger accordingly. Defaults to warn so library calls stay quiet.
void init_logging();

}  // namespace refseg
