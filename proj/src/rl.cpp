#include "abcp/rl.hpp"

#include <cmath>
#include <stdexcept>

namespace abcp {

void adam_step(std::vector<double>& theta, const std::vector<double>& grad,
               AdamState& state, const AdamConfig& cfg) {
  if (theta.size() != grad.size())
    throw std::invalid_argument("gradient length does not match parameters");
  if (state.m.empty()) {
    state.m.assign(theta.size(), 0.0);
    state.v.assign(theta.size(), 0.0);
  }
  if (state.m.size() != theta.size())
    throw std::invalid_argument("optimizer state does not match parameters");
  ++state.t;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < theta.size(); ++k) {
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * grad[k];
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
    double mhat = state.m[k] / bc1;
    double vhat = state.v[k] / bc2;
    theta[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

double reward(double l_test, u64 flops, const RewardConfig& cfg) {
  if (cfg.lambda <= 0.0 || cfg.flops_unit <= 0.0)
    throw std::invalid_argument("lambda and flops_unit must be positive");
  if (!std::isfinite(l_test)) throw NumericalFault("non-finite test loss");
  return -l_test - (static_cast<double>(flops) / cfg.flops_unit) / cfg.lambda;
}

BaselineState update_baseline(BaselineState state, double r) {
  if (!std::isfinite(r)) throw NumericalFault("non-finite reward");
  if (!state.initialized) {
    state.b = r;
    state.initialized = true;
  } else {
    state.b = state.decay * state.b + (1.0 - state.decay) * r;
  }
  return state;
}

void reinforce_step(ControllerParams& params, const NetworkSpec& spec,
                    const PruningAction& action, const SampleTrace& trace,
                    double r, const BaselineState& baseline, AdamState& adam,
                    const AdamConfig& cfg) {
  double b = baseline.initialized ? baseline.b : r;
  double advantage = r - b;
  ControllerParams grads = grad_log_prob(params, spec, action, trace);
  std::vector<double> g = flatten_params(grads);
  // Ascent on expected reward: feed the minimizer the negated estimate.
  for (double& v : g) {
    v *= -advantage;
    if (!std::isfinite(v)) throw NumericalFault("non-finite policy gradient");
  }
  std::vector<double> theta = flatten_params(params);
  adam_step(theta, g, adam, cfg);
  assign_params(params, theta);
}

u64 episode_seed(u64 child_seed_base, int episode) {
  return mix64(child_seed_base + static_cast<u64>(episode));
}

std::vector<EpisodeRecord> run_search(
    const NetworkSpec& spec, Evaluator& evaluator, ControllerParams& params,
    const SearchConfig& cfg, SearchState& state, Rng& ctrl_rng,
    const std::function<void(const EpisodeRecord&)>& on_episode) {
  std::vector<EpisodeRecord> records;
  state.baseline.decay = cfg.baseline_decay;
  for (int ep = state.next_episode; ep < cfg.episodes; ++ep) {
    auto [sampled, trace] = sample_action(params, spec, ctrl_rng);
    PruningAction action = enforce_group_constraint(spec, sampled);
    u64 seed = episode_seed(cfg.child_seed_base, ep);
    EvalResult res = evaluator.evaluate(action, seed);
    double r = reward(res.loss, res.flops, cfg.reward);

    EpisodeRecord rec;
    rec.episode = ep;
    rec.action = action;
    rec.l_test = res.loss;
    rec.flops = res.flops;
    rec.reward = r;
    rec.baseline = state.baseline.initialized ? state.baseline.b : r;
    rec.seed = seed;

    reinforce_step(params, spec, sampled, trace, r, state.baseline, state.adam,
                   cfg.adam);
    state.baseline = update_baseline(state.baseline, r);
    state.next_episode = ep + 1;

    records.push_back(rec);
    if (on_episode) on_episode(records.back());
  }
  return records;
}

const EpisodeRecord& best_record(const std::vector<EpisodeRecord>& log) {
  if (log.empty()) throw std::invalid_argument("episode log is empty");
  std::size_t best = 0;
  for (std::size_t k = 1; k < log.size(); ++k)
    if (log[k].reward > log[best].reward) best = k;
  return log[best];
}

PruningAction best_action(const std::vector<EpisodeRecord>& log) {
  return best_record(log).action;
}

}  // namespace abcp
