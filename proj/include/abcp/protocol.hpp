#pragma once

#include <cstdio>
#include <iosfwd>
#include <string>

#include "abcp/rl.hpp"

namespace abcp {

// Line-delimited JSON evaluation protocol, one object per line.
//   request:  {"action": [{"b": 1} | {"r": 0.45}, ...], "seed": "123"}
//   response: {"loss": 1.25, "flops": "294912"}  or  {"error": "..."}
// seed and flops travel as decimal strings so 64-bit values survive JSON
// number handling everywhere; plain JSON integers are accepted on input.
// Any process speaking this protocol on stdin/stdout can back a search.

// Serves requests from `in` until end of input. A request that fails to
// parse or evaluate produces an error response; serving continues.
void serve_evaluator(Evaluator& ev, std::istream& in, std::ostream& out);

// Runs a shell command and forwards evaluate() calls to it over the
// protocol. Throws std::runtime_error when the subprocess cannot be
// spawned, closes the stream, or answers with an error.
class ProcessEvaluator : public Evaluator {
 public:
  explicit ProcessEvaluator(const std::string& command);
  ~ProcessEvaluator() override;
  ProcessEvaluator(const ProcessEvaluator&) = delete;
  ProcessEvaluator& operator=(const ProcessEvaluator&) = delete;

  EvalResult evaluate(const PruningAction& action, u64 seed) override;

 private:
  void shutdown();

  long pid_ = -1;
  std::FILE* to_child_ = nullptr;
  std::FILE* from_child_ = nullptr;
};

}  // namespace abcp
