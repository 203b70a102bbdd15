#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace abcp {

// Roles a convolution plays in the residual IR:
//  - Ordinary:    plain conv, channel-prunable only.
//  - GroupFirst:  entry conv of a residual group; its output width is shared
//                 by every shortcut in the group, so its pruning ratio is
//                 coupled to the group's BlockSecond layers.
//  - BlockFirst:  first conv inside a two-conv residual block; the position
//                 where the keep/prune decision for the whole block is made.
//  - BlockSecond: second conv of a block; its output is added to the block
//                 input through the shortcut.
enum class LayerKind { Ordinary, GroupFirst, BlockFirst, BlockSecond };

const char* to_string(LayerKind k);

// One convolutional layer. in_h/in_w are the layer's input feature map.
// Convolutions use same padding (pad = kernel / 2), so output spatial dims
// follow from kernel and stride alone.
struct LayerSpec {
  int id = 0;
  LayerKind kind = LayerKind::Ordinary;
  int kernel = 1;
  int in_ch = 1;
  int out_ch = 1;
  int in_h = 1;
  int in_w = 1;
  int stride = 1;
  std::optional<int> block_id;
  std::optional<int> group_id;

  int out_h() const { return (in_h + 2 * (kernel / 2) - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * (kernel / 2) - kernel) / stride + 1; }

  bool operator==(const LayerSpec&) const = default;
};

// A prunable network: a chain of conv layers where each BlockFirst/BlockSecond
// pair forms a residual block. head_ids lists the layers that keep training
// during the per-episode fine-tune; the value num_layers() addresses the
// classifier that follows the conv stack (convs are 0..num_layers()-1).
struct NetworkSpec {
  std::vector<LayerSpec> layers;
  std::set<int> s_frb;     // ids of the BlockFirst layers
  std::set<int> head_ids;  // fine-tune targets

  int num_layers() const { return static_cast<int>(layers.size()); }

  bool operator==(const NetworkSpec&) const = default;
};

// One slot of a sampled pruning action.
//  - Block: 1 = prune the block, 0 = keep it. Appears at a BlockFirst
//    position; when the block is pruned, the paired BlockSecond position
//    mirrors the same element.
//  - Ratio: channel pruning ratio in [0, 0.9].
struct ActionElement {
  enum class Kind { Block, Ratio };
  Kind kind = Kind::Ratio;
  double value = 0.0;

  static ActionElement block(int choice) {
    return {Kind::Block, static_cast<double>(choice)};
  }
  static ActionElement ratio(double r) { return {Kind::Ratio, r}; }

  bool is_prune() const { return kind == Kind::Block && value == 1.0; }
  bool operator==(const ActionElement&) const = default;
};

using PruningAction = std::vector<ActionElement>;

// Resolved per-layer pruning decision. kept lists surviving output channel
// indices in increasing order; removed layers keep an empty list.
struct LayerMask {
  bool removed = false;
  std::vector<int> kept;

  bool operator==(const LayerMask&) const = default;
};

struct PruneMask {
  std::vector<LayerMask> layers;

  bool operator==(const PruneMask&) const = default;
};

// Returns every well-formedness violation found (empty means valid):
// id ordering, positive dims, block pairing and adjacency, residual shape,
// group membership, channel and spatial flow, s_frb exactness, head range.
std::vector<std::string> validate_network(const NetworkSpec& spec);

// Multiply-accumulate count of one conv layer evaluated on its full input
// map: in_h * in_w * kernel^2 * c_in * c_out. Spatial dims are the layer's
// input dims regardless of stride; this is the bookkeeping convention used
// for the search reward, not a cycle-accurate cost model.
std::uint64_t layer_flops(int kernel, int in_h, int in_w, int c_in, int c_out);

// Sum of layer_flops over non-removed layers, with each layer's c_in equal
// to the kept out-channel count of the nearest non-removed producer
// (removed blocks are bypassed by their shortcut and contribute zero).
std::uint64_t total_flops(const NetworkSpec& spec, const PruneMask& mask);

PruneMask identity_mask(const NetworkSpec& spec);

// Throws std::invalid_argument when the action does not fit the spec
// (length, element kinds per position, value ranges, prune mirroring).
void check_action(const NetworkSpec& spec, const PruningAction& action);

// Throws std::invalid_argument when the mask does not fit the spec
// (length, kept ranges/ordering, removal restricted to whole blocks).
void check_mask(const NetworkSpec& spec, const PruneMask& mask);

// Every shortcut-coupled set of ratio positions given the block choices in
// the action: the entry layer feeding a run of blocks plus the BlockSecond
// position of each kept block in that run. Sets with fewer than two members
// are omitted (nothing to tie).
std::vector<std::vector<int>> coupled_ratio_sets(const NetworkSpec& spec,
                                                 const PruningAction& action);

// Replaces the ratio at every member of a shortcut-coupled set with the
// set's maximum, so all layers feeding one shortcut chain keep the same
// channel count. Idempotent; everything else passes through unchanged.
PruningAction enforce_group_constraint(const NetworkSpec& spec,
                                       const PruningAction& action);

// Turns an action into a concrete mask using BN scale magnitudes:
// prune_count = floor(ratio * out_ch) (clamped to keep at least one
// channel); the prune_count channels with the smallest |gamma| are dropped,
// ties broken by pruning the lower index first. Callers pass actions that
// already went through enforce_group_constraint.
PruneMask resolve_mask(const NetworkSpec& spec, const PruningAction& action,
                       const std::vector<std::vector<double>>& gammas);

// Mutable view over one layer's parameters in some weight store.
// filter is [out_ch][in_ch][kernel][kernel] row-major.
struct LayerWeightsRef {
  std::span<double> filter;
  std::span<double> gamma;
  std::span<double> beta;
};

// Zeroes the filter slice, gamma and beta of every dropped channel, and all
// three arrays of removed layers. Idempotent; kept weights are untouched.
void apply_mask(const NetworkSpec& spec, const PruneMask& mask,
                std::span<LayerWeightsRef> weights);

// The architecture that remains once masked channels and removed blocks are
// deleted: surviving layers renumbered, channel counts shrunk to the kept
// counts, s_frb and head_ids rebuilt. Preserves total_flops exactly:
// total_flops(export_pruned(s, m), identity) == total_flops(s, m).
NetworkSpec export_pruned(const NetworkSpec& spec, const PruneMask& mask);

// Trainable parameter count of the spec at full width: conv weights plus
// per-channel scale/shift, plus the trailing classifier (feat -> classes).
std::uint64_t spec_param_count(const NetworkSpec& spec, int num_classes);

}  // namespace abcp
