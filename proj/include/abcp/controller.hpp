#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "abcp/arch.hpp"
#include "abcp/common.hpp"
#include "abcp/rng.hpp"

namespace abcp {

// Recurrent policy that emits one pruning decision per prunable layer.
// A 2-layer LSTM core is shared across cells; decision heads are per cell.

enum class RatioMode { Continuous, Discrete };

// Joint searches both block removal and channel ratios. BlockOnly fixes all
// ratios at 0 and only samples block choices; ChannelOnly keeps every block
// and only samples ratios.
enum class SearchMode { Joint, BlockOnly, ChannelOnly };

struct ControllerConfig {
  int h_dim = 64;
  int e_dim = 64;
  RatioMode ratio_mode = RatioMode::Continuous;
  SearchMode search_mode = SearchMode::Joint;
};

// Ratios a discrete-mode head can emit.
inline constexpr std::array<double, 5> kDiscreteRatios = {0.0, 0.225, 0.45,
                                                          0.675, 0.9};
// Log-variance clamp bounds for the continuous head.
inline constexpr double kRhoMin = -10.0;
inline constexpr double kRhoMax = 2.0;
// Upper end of the ratio range.
inline constexpr double kRatioMax = 0.9;

// Embedding bin for a ratio value: 0.1-wide bins over [0, 1). The epsilon
// guard keeps exact decimals such as 0.3 (stored as 2.999...e-1 * 10) in
// their intended bin.
inline int ratio_bin(double r) {
  int b = static_cast<int>(r * 10.0 + 1e-9);
  if (b < 0) b = 0;
  if (b > 9) b = 9;
  return b;
}

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;  // row-major

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c) {}
  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const {
    return a[static_cast<std::size_t>(r) * cols + c];
  }
};

// One LSTM layer. Gate rows are packed [input; forget; cell; output], so wx
// is (4h x in), wh is (4h x h), b is 4h.
struct LstmLayerParams {
  Matrix wx, wh;
  std::vector<double> b;
};

struct BlockHeadParams {
  Matrix w;  // 2 x h_dim
  std::vector<double> b;
};

struct RatioHeadCont {
  Matrix w_mu;   // 1 x h_dim
  Matrix w_rho;  // 1 x h_dim
  double b_mu = 0.0;
  double b_rho = 0.0;
};

struct RatioHeadDisc {
  Matrix w;  // 5 x h_dim
  std::vector<double> b;
};

struct ControllerParams {
  ControllerConfig cfg;
  int num_cells = 0;
  LstmLayerParams lstm0, lstm1;
  std::vector<BlockHeadParams> block_heads;     // one per BlockFirst cell
  std::vector<int> block_head_cell;             // cell id of each block head
  std::vector<RatioHeadCont> ratio_heads_cont;  // per cell (continuous mode)
  std::vector<RatioHeadDisc> ratio_heads_disc;  // per cell (discrete mode)
  Matrix embed_block;  // 2 x e_dim
  Matrix embed_ratio;  // 10 x e_dim
  std::vector<double> start_embed;  // e_dim
};

// Visits every parameter chunk in a fixed order. The order defines the
// flattened parameter vector used by the optimizer and by checkpoints.
void for_each_param(ControllerParams& p,
                    const std::function<void(double*, std::size_t)>& fn);
void for_each_param(const ControllerParams& p,
                    const std::function<void(const double*, std::size_t)>& fn);

std::size_t param_count(const ControllerParams& p);
std::vector<double> flatten_params(const ControllerParams& p);
void assign_params(ControllerParams& p, const std::vector<double>& flat);

// Same layout as `like`, every array zero-filled. Used as a gradient store.
ControllerParams zeros_like(const ControllerParams& like);

ControllerParams init_params(const NetworkSpec& spec,
                             const ControllerConfig& cfg, Rng& rng);

enum class BranchKind { Block, RatioContinuous, RatioDiscrete, FixedRatio };

// One stochastic (or fixed) decision. A cell that keeps its block records a
// Block step followed by a ratio step, both tagged with the same cell id.
struct TraceStep {
  int cell = 0;
  BranchKind kind = BranchKind::Block;
  std::vector<double> probs;  // softmax branches only
  int sampled_index = -1;     // Block / RatioDiscrete
  double mu_hat = 0.0;        // RatioContinuous only
  double rho_raw = 0.0;
  double rho_hat = 0.0;
  double sigma_sq = 0.0;
  double raw = 0.0;  // pre-clip sample
  ActionElement element = ActionElement::ratio(0.0);
  double logp = 0.0;
};

// State snapshot after one executed cell.
struct CellRecord {
  int cell = 0;
  std::vector<double> e_in;
  std::vector<double> c0, h0, c1, h1;
};

struct SampleTrace {
  int num_cells = 0;
  std::vector<CellRecord> cells;  // executed cells, in order
  std::vector<TraceStep> steps;   // decisions, in order
  double total_logp() const;
};

struct BlockSample {
  int choice = 0;
  double logp = 0.0;
  std::array<double, 2> probs{};
};
BlockSample sample_block_choice(const std::vector<double>& h,
                                const BlockHeadParams& head, Rng& rng);

struct DiscreteRatioSample {
  double ratio = 0.0;
  double logp = 0.0;
  int index = 0;
  std::array<double, 5> probs{};
};
DiscreteRatioSample sample_ratio_discrete(const std::vector<double>& h,
                                          const RatioHeadDisc& head, Rng& rng);

struct ContinuousRatioSample {
  double ratio = 0.0;
  double logp = 0.0;
  double mu_hat = 0.0;
  double rho_raw = 0.0;
  double rho_hat = 0.0;
  double sigma_sq = 0.0;
  double raw = 0.0;
};
ContinuousRatioSample sample_ratio_continuous(const std::vector<double>& h,
                                              const RatioHeadCont& head,
                                              Rng& rng);

// Embedding row for an action element: block choices use the 2-entry table,
// ratios the 10-entry binned table.
std::vector<double> embed_action(const ControllerParams& params,
                                 const ActionElement& element);

// One rollout of the per-cell recurrence. A pruned block's second cell is
// skipped outright: its action element mirrors the choice, the LSTM state
// passes through, and the choice embedding is consumed by the cell after
// next.
std::pair<PruningAction, SampleTrace> sample_action(
    const ControllerParams& params, const NetworkSpec& spec, Rng& rng);

// Recomputes the trace's log-probability by teacher-forced replay of the
// executed path (raw samples taken from the trace). Equals
// trace.total_logp() for a trace produced under the same params.
double log_prob_of_trace(const ControllerParams& params,
                         const NetworkSpec& spec, const PruningAction& action,
                         const SampleTrace& trace);

// Exact log-probability of an action with finite support (discrete ratios /
// block choices only). Continuous-ratio actions have no recoverable raw
// sample, so scoring them throws invalid_argument.
double score_action(const ControllerParams& params, const NetworkSpec& spec,
                    const PruningAction& action);

// Exact reverse-mode d(total log-prob)/d(params) for one trace, replayed
// teacher-forced and backpropagated through time. Returned store has the
// same layout as params.
ControllerParams grad_log_prob(const ControllerParams& params,
                               const NetworkSpec& spec,
                               const PruningAction& action,
                               const SampleTrace& trace);

}  // namespace abcp
