#pragma once

#include <stdexcept>
#include <string>

namespace gippo {

// Numeric failure during training (non-finite gradients, diverging
// regressions). Carries enough context to locate the offending data.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace gippo
