#pragma once

#include <functional>
#include <vector>

#include "abcp/adam.hpp"
#include "abcp/arch.hpp"
#include "abcp/common.hpp"
#include "abcp/controller.hpp"

namespace abcp {

struct RewardConfig {
  double lambda = 1e6;      // accuracy/complexity trade-off
  double flops_unit = 1e3;  // raw FLOPs are divided by this first
};

// R = -loss - (flops / flops_unit) / lambda.
double reward(double l_test, u64 flops, const RewardConfig& cfg);

struct BaselineState {
  double b = 0.0;
  double decay = 0.9;
  bool initialized = false;
};

// First reward initializes the average; afterwards an exponential moving
// average with the state's decay.
BaselineState update_baseline(BaselineState state, double r);

// Abstract evaluation backend: prune by the action, fine-tune, and report
// the test loss and the pruned net's raw FLOPs. Must behave as a pure
// function of (action, seed).
struct EvalResult {
  double loss = 0.0;
  u64 flops = 0;
};

class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual EvalResult evaluate(const PruningAction& action, u64 seed) = 0;
};

struct EpisodeRecord {
  int episode = 0;
  PruningAction action;  // group-constrained, as evaluated
  double l_test = 0.0;
  u64 flops = 0;
  double reward = 0.0;
  double baseline = 0.0;  // value used in this episode's update
  u64 seed = 0;
};

// One policy-gradient update: g = grad_log_prob * (R - b), applied as a
// maximizing Adam step. An uninitialized baseline acts as b = R (the first
// episode is a deliberate no-op). Non-finite gradients leave params and the
// optimizer untouched and raise NumericalFault.
void reinforce_step(ControllerParams& params, const NetworkSpec& spec,
                    const PruningAction& action, const SampleTrace& trace,
                    double r, const BaselineState& baseline, AdamState& adam,
                    const AdamConfig& cfg);

struct SearchConfig {
  int episodes = 310;
  AdamConfig adam;
  RewardConfig reward;
  double baseline_decay = 0.9;
  u64 child_seed_base = 0;  // per-episode seeds derive from this
};

// Mutable cross-episode state, extracted so a search can checkpoint and
// resume mid-run.
struct SearchState {
  BaselineState baseline;
  AdamState adam;
  int next_episode = 0;
};

// Deterministic per-episode evaluation seed.
u64 episode_seed(u64 child_seed_base, int episode);

// Episodes [state.next_episode, cfg.episodes): sample, constrain, evaluate,
// reward, update, log. on_episode (if set) sees each record as it completes,
// so a crashing evaluator still leaves the finished prefix persisted; the
// evaluator's exception then propagates.
std::vector<EpisodeRecord> run_search(
    const NetworkSpec& spec, Evaluator& evaluator, ControllerParams& params,
    const SearchConfig& cfg, SearchState& state, Rng& ctrl_rng,
    const std::function<void(const EpisodeRecord&)>& on_episode = nullptr);

// Action of the highest-reward record; earliest episode wins ties.
const EpisodeRecord& best_record(const std::vector<EpisodeRecord>& log);
PruningAction best_action(const std::vector<EpisodeRecord>& log);

}  // namespace abcp
