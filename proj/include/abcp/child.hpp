#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "abcp/arch.hpp"
#include "abcp/dataset.hpp"
#include "abcp/rl.hpp"
#include "abcp/rng.hpp"

namespace abcp {

// One convolution with per-channel normalization. filter is
// [out_ch][in_ch][kernel][kernel] row-major; there is no conv bias, the
// normalization shift plays that role. run_mean/run_var are inference-time
// statistics, updated during training and excluded from the trainable
// parameter vector.
struct ConvLayer {
  std::vector<double> filter;
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> run_mean;
  std::vector<double> run_var;

  bool operator==(const ConvLayer&) const = default;
};

// Conv stack shaped by a NetworkSpec, followed by global average pooling and
// an affine classifier over the last layer's channels.
struct ChildModel {
  NetworkSpec spec;
  int num_classes = 0;
  std::vector<ConvLayer> convs;
  std::vector<double> head_w;  // [num_classes][feat_dim] row-major
  std::vector<double> head_b;  // [num_classes]

  int feat_dim() const {
    return spec.layers.empty() ? 0 : spec.layers.back().out_ch;
  }
  bool operator==(const ChildModel&) const = default;
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.9;  // kept fraction of the old stat
inline constexpr double kLeakySlope = 0.1;

// The stock search target: a 3x3 stem into two residual groups (stride-2
// entry plus two 1x1/3x3 bottleneck blocks each), 11 prunable convs in all,
// for 32x32 single-channel inputs. head_ids holds the classifier sentinel,
// so per-episode fine-tuning touches only the affine head.
NetworkSpec reference_child_spec();

// Scaled-normal conv init (sqrt(2/fan_in)), gamma 1, beta 0, running stats
// (0, 1), zero classifier. A fresh model therefore emits uniform logits.
ChildModel build_child(const NetworkSpec& spec, int num_classes, Rng& rng);

// Trainable parameter count / vector (filters, gamma, beta, head).
u64 child_param_count(const ChildModel& m);
std::vector<double> flatten_child(const ChildModel& m);
void assign_child(ChildModel& m, std::span<const double> theta);

// Per-layer normalization scales in layer order; the channel-importance
// signal consumed by resolve_mask.
std::vector<std::vector<double>> bn_gammas(const ChildModel& m);

// Mutable per-layer views consumed by apply_mask. Valid until the model's
// buffers reallocate.
std::vector<LayerWeightsRef> weight_refs(ChildModel& m);

// A batch ready for the forward pass: normalized pixels in [0, 1],
// [n][C][H][W] row-major.
struct Batch {
  int n = 0;
  std::vector<double> x;
  std::vector<int> y;
};

Batch make_batch(const DataSplit& d, std::span<const int> idx);

// Batch statistics produced by a training-mode forward, one mean/var pair
// per conv layer. Committed into running stats by the training loop.
struct BnStats {
  std::vector<std::vector<double>> mean;
  std::vector<std::vector<double>> var;
};

void commit_bn_stats(ChildModel& m, const BnStats& s);

// Mean softmax cross-entropy of the batch, plus (optionally) gradients for
// every trainable parameter, batch normalization statistics, and a capture
// of each layer's post-normalization tensor for inspection. train selects
// batch statistics (vs running statistics) inside the normalization.
// mask_hint, valid only with train == false, skips channels and blocks a
// mask has zeroed; it never changes the result, only the work done.
double child_loss(const ChildModel& m, const Batch& b, bool train,
                  ChildModel* grad = nullptr, BnStats* stats = nullptr,
                  std::vector<std::vector<double>>* bn_capture = nullptr,
                  const PruneMask* mask_hint = nullptr);

struct TrainConfig {
  int epochs = 12;
  int batch_size = 32;
  AdamConfig adam;
};

// Full-model training with per-epoch reshuffling. Throws NumericalFault if
// the loss leaves the finite range. Deterministic for a fixed rng state.
ChildModel pretrain(const NetworkSpec& spec, const Dataset& data,
                    const TrainConfig& cfg, Rng& rng);

// Training from scratch on a compact exported spec; identical recipe to
// pretrain, no weight transfer.
ChildModel retrain(const NetworkSpec& pruned_spec, const Dataset& data,
                   const TrainConfig& cfg, Rng& rng);

// Exactly one epoch over data.train in which only spec.head_ids parameters
// move (the conv trunk runs in inference mode with frozen statistics).
// Expects apply_mask(mask) to have been applied to model already; the mask
// is re-applied after every optimizer step so masked weights stay exactly
// zero whatever the update rule does. seed orders the epoch.
ChildModel fine_tune(const ChildModel& model, const PruneMask& mask,
                     const Dataset& data, const TrainConfig& cfg, u64 seed);

// Mean per-example cross-entropy over the whole split, inference mode.
// Per-example losses are sorted before summation, so the value is invariant
// to any reordering of the split. Throws std::invalid_argument when empty.
double test_loss(const ChildModel& m, const DataSplit& d);
// Same value, skipping work on channels the mask has zeroed.
double test_loss(const ChildModel& m, const DataSplit& d,
                 const PruneMask& mask_hint);

// Fraction of the split classified correctly (argmax logits, lowest index
// on ties).
double accuracy(const ChildModel& m, const DataSplit& d);

// Pre-trained-backend evaluator: action -> resolve against the stored
// normalization scales -> mask a copy -> head-only fine-tune (ordered by
// the episode seed) -> test loss + masked FLOPs. A pure function of
// (action, seed) for a fixed construction.
class ReferenceEvaluator : public Evaluator {
 public:
  ReferenceEvaluator(ChildModel pretrained, Dataset data, TrainConfig ft_cfg);
  EvalResult evaluate(const PruningAction& action, u64 seed) override;

  const ChildModel& model() const { return base_; }

 private:
  ChildModel base_;
  Dataset data_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> gammas_;
};

// Closed-form pseudo-loss landscape for controller tests: the loss is a
// weighted L1 distance between the action and a designated optimum, with a
// pruned block sitting at coordinate 1.0 (past the largest ratio, 0.9).
// FLOPs are the real masked FLOPs of the spec (unit scales, lowest-index
// channels dropped), so reward shaping behaves as in a real search.
struct SyntheticLandscape {
  NetworkSpec spec;
  PruningAction optimum;
  std::vector<double> weights;  // per position; empty means all ones
  double base_loss = 0.25;
};

double synthetic_loss(const SyntheticLandscape& l, const PruningAction& a);
EvalResult synthetic_eval(const SyntheticLandscape& l,
                          const PruningAction& a);

class SyntheticEvaluator : public Evaluator {
 public:
  explicit SyntheticEvaluator(SyntheticLandscape l);
  EvalResult evaluate(const PruningAction& action, u64 seed) override;

  const SyntheticLandscape& landscape() const { return land_; }

 private:
  SyntheticLandscape land_;
};

// Versioned JSON checkpoint carrying the spec, every weight, and the
// normalization running statistics; values round-trip exactly.
void save_child_model(const std::string& path, const ChildModel& m);
ChildModel load_child_model(const std::string& path);

}  // namespace abcp
