#pragma once

#include <cstdint>
#include <stdexcept>

namespace abcp {

using u64 = std::uint64_t;
using i64 = std::int64_t;

// Raised when a computation produces non-finite values (losses, gradients,
// head outputs). Callers treat the offending episode or step as failed;
// state that was about to be updated is left untouched.
struct NumericalFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace abcp
