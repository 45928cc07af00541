#pragma once

#include <stdexcept>
#include <string>

namespace refseg {

// Raised for invalid inputs, malformed files and training divergence.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace refseg
