#pragma once

// Shared fixtures and independent oracles for the test suites. Oracles here
// intentionally re-derive results with their own traversal and arithmetic
// instead of calling back into the code under test.

#include <cmath>
#include <cstdint>
#include <vector>

#include "abcp/arch.hpp"
#include "abcp/controller.hpp"
#include "abcp/rng.hpp"

namespace abcp::testing {

// Ordinary(3->8) -> GroupFirst(8->16, stride 2) -> two blocks (16->8->16)
// -> Ordinary(16->4). Seven layers, one group, two blocks.
inline NetworkSpec toy7() {
  NetworkSpec s;
  auto add = [&](LayerKind k, int kernel, int in_ch, int out_ch, int in_h,
                 int in_w, int stride, std::optional<int> block,
                 std::optional<int> group) {
    LayerSpec l;
    l.id = static_cast<int>(s.layers.size());
    l.kind = k;
    l.kernel = kernel;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.in_h = in_h;
    l.in_w = in_w;
    l.stride = stride;
    l.block_id = block;
    l.group_id = group;
    s.layers.push_back(l);
  };
  add(LayerKind::Ordinary, 3, 3, 8, 16, 16, 1, {}, {});
  add(LayerKind::GroupFirst, 3, 8, 16, 16, 16, 2, {}, 0);
  add(LayerKind::BlockFirst, 1, 16, 8, 8, 8, 1, 0, 0);
  add(LayerKind::BlockSecond, 3, 8, 16, 8, 8, 1, 0, 0);
  add(LayerKind::BlockFirst, 1, 16, 8, 8, 8, 1, 1, 0);
  add(LayerKind::BlockSecond, 3, 8, 16, 8, 8, 1, 1, 0);
  add(LayerKind::Ordinary, 3, 16, 4, 8, 8, 1, {}, {});
  s.s_frb = {2, 4};
  s.head_ids = {7};
  return s;
}

// Ordinary(3->8) -> one block (8->4->8) on an 8x8 map.
inline NetworkSpec toy3() {
  NetworkSpec s;
  LayerSpec a;
  a.id = 0; a.kind = LayerKind::Ordinary; a.kernel = 3;
  a.in_ch = 3; a.out_ch = 8; a.in_h = 8; a.in_w = 8; a.stride = 1;
  LayerSpec b;
  b.id = 1; b.kind = LayerKind::BlockFirst; b.kernel = 1;
  b.in_ch = 8; b.out_ch = 4; b.in_h = 8; b.in_w = 8; b.stride = 1;
  b.block_id = 0;
  LayerSpec c;
  c.id = 2; c.kind = LayerKind::BlockSecond; c.kernel = 3;
  c.in_ch = 4; c.out_ch = 8; c.in_h = 8; c.in_w = 8; c.stride = 1;
  c.block_id = 0;
  s.layers = {a, b, c};
  s.s_frb = {1};
  s.head_ids = {3};
  return s;
}

// Brute-force flop count: for every surviving layer, scan backwards for its
// producer and multiply the dimensions longhand.
inline std::uint64_t oracle_flops(const NetworkSpec& spec,
                                  const PruneMask& mask) {
  std::uint64_t total = 0;
  for (int j = 0; j < spec.num_layers(); ++j) {
    if (mask.layers[j].removed) continue;
    std::uint64_t cin = spec.layers[0].in_ch;
    for (int k = j - 1; k >= 0; --k) {
      if (!mask.layers[k].removed) {
        cin = mask.layers[k].kept.size();
        break;
      }
    }
    const LayerSpec& l = spec.layers[j];
    std::uint64_t term = 1;
    term *= static_cast<std::uint64_t>(l.in_h);
    term *= static_cast<std::uint64_t>(l.in_w);
    term *= static_cast<std::uint64_t>(l.kernel);
    term *= static_cast<std::uint64_t>(l.kernel);
    term *= cin;
    term *= static_cast<std::uint64_t>(mask.layers[j].kept.size());
    total += term;
  }
  return total;
}

// Random residual nets: a stem, then a few segments that are each an
// ordinary layer, a grouped run of blocks, or a bare block run.
inline NetworkSpec random_spec(Rng& rng) {
  NetworkSpec s;
  int h = 8 << (rng.next_u64() % 2);  // 8 or 16
  int w = h;
  int ch = 2 + static_cast<int>(rng.next_u64() % 5);
  int next_block = 0, next_group = 0;

  auto add = [&](LayerKind k, int kernel, int out_ch, int stride,
                 std::optional<int> block, std::optional<int> group) {
    LayerSpec l;
    l.id = static_cast<int>(s.layers.size());
    l.kind = k;
    l.kernel = kernel;
    l.in_ch = ch;
    l.out_ch = out_ch;
    l.in_h = h;
    l.in_w = w;
    l.stride = stride;
    l.block_id = block;
    l.group_id = group;
    s.layers.push_back(l);
    ch = out_ch;
    h = l.out_h();
    w = l.out_w();
  };

  // stem
  add(LayerKind::Ordinary, 3, 4 + static_cast<int>(rng.next_u64() % 9), 1, {}, {});

  // Blocks inherit the group of the entry they hang off, so the generator
  // tracks which group (if any) is currently open.
  std::optional<int> active_group;
  int segments = 1 + static_cast<int>(rng.next_u64() % 3);
  for (int seg = 0; seg < segments; ++seg) {
    switch (rng.next_u64() % 3) {
      case 0:
        add(LayerKind::Ordinary, 3, 4 + static_cast<int>(rng.next_u64() % 9),
            1 + static_cast<int>(rng.next_u64() % 2), {}, {});
        active_group.reset();
        break;
      case 1: {
        int group = next_group++;
        add(LayerKind::GroupFirst, 3, 6 + static_cast<int>(rng.next_u64() % 11),
            1 + static_cast<int>(rng.next_u64() % 2), {}, group);
        active_group = group;
        int blocks = 1 + static_cast<int>(rng.next_u64() % 2);
        for (int b = 0; b < blocks; ++b) {
          int block = next_block++;
          int mid = 1 + ch / 2;
          int outer = ch;
          add(LayerKind::BlockFirst, 1, mid, 1, block, group);
          add(LayerKind::BlockSecond, 3, outer, 1, block, group);
        }
        break;
      }
      default: {
        // extra blocks hanging off whatever entry came last
        int blocks = 1 + static_cast<int>(rng.next_u64() % 2);
        for (int b = 0; b < blocks; ++b) {
          int block = next_block++;
          int mid = 1 + ch / 2;
          int outer = ch;
          add(LayerKind::BlockFirst, 1, mid, 1, block, active_group);
          add(LayerKind::BlockSecond, 3, outer, 1, block, active_group);
        }
        break;
      }
    }
  }
  for (const LayerSpec& l : s.layers)
    if (l.kind == LayerKind::BlockFirst) s.s_frb.insert(l.id);
  s.head_ids = {s.num_layers()};
  return s;
}

// Grammar-correct random action: blocks pruned with probability ~0.35,
// ratios uniform with occasional exact endpoints.
inline PruningAction random_action(const NetworkSpec& spec, Rng& rng) {
  PruningAction a(spec.num_layers());
  auto ratio = [&] {
    double r = rng.uniform(0.0, 0.9);
    std::uint64_t roll = rng.next_u64() % 10;
    if (roll == 0) r = 0.0;
    if (roll == 1) r = 0.9;
    return ActionElement::ratio(r);
  };
  for (int j = 0; j < spec.num_layers(); ++j) {
    switch (spec.layers[j].kind) {
      case LayerKind::BlockFirst:
        if (rng.uniform() < 0.35) {
          a[j] = ActionElement::block(1);
          a[j + 1] = ActionElement::block(1);
          ++j;
        } else {
          a[j] = ratio();
        }
        break;
      default:
        a[j] = ratio();
        break;
    }
  }
  return a;
}

// Random BN scales, with occasional quantization so ties actually occur.
inline std::vector<std::vector<double>> random_gammas(const NetworkSpec& spec,
                                                      Rng& rng) {
  std::vector<std::vector<double>> g(spec.num_layers());
  for (int j = 0; j < spec.num_layers(); ++j) {
    g[j].resize(spec.layers[j].out_ch);
    bool quantize = rng.uniform() < 0.3;
    for (double& x : g[j]) {
      x = rng.uniform(-1.0, 1.0);
      if (quantize) x = std::round(x * 4.0) / 4.0;
    }
  }
  return g;
}

// Every action a discrete-mode joint rollout can produce, by direct
// recursion over the cell grammar (prune branch at BlockFirst cells, forced
// mirror at their BlockSecond, five ratio choices everywhere else).
inline void enumerate_actions_rec(const NetworkSpec& spec, PruningAction& cur,
                                  int i, std::vector<PruningAction>& out) {
  if (i == spec.num_layers()) {
    out.push_back(cur);
    return;
  }
  const LayerSpec& l = spec.layers[i];
  if (l.kind == LayerKind::BlockSecond && i > 0 &&
      cur[i - 1] == ActionElement::block(1)) {
    cur[i] = ActionElement::block(1);
    enumerate_actions_rec(spec, cur, i + 1, out);
    return;
  }
  if (l.kind == LayerKind::BlockFirst) {
    cur[i] = ActionElement::block(1);
    enumerate_actions_rec(spec, cur, i + 1, out);
  }
  for (double r : kDiscreteRatios) {
    cur[i] = ActionElement::ratio(r);
    enumerate_actions_rec(spec, cur, i + 1, out);
  }
}

inline std::vector<PruningAction> enumerate_actions(const NetworkSpec& spec) {
  std::vector<PruningAction> out;
  PruningAction cur(static_cast<std::size_t>(spec.num_layers()));
  enumerate_actions_rec(spec, cur, 0, out);
  return out;
}

// Trace skeleton for a discrete-mode action, so grad_log_prob can replay an
// enumerated action that was never sampled.
inline SampleTrace discrete_trace(const NetworkSpec& spec,
                                  const PruningAction& action) {
  SampleTrace t;
  t.num_cells = spec.num_layers();
  for (int i = 0; i < spec.num_layers(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::BlockSecond && i > 0 &&
        action[i - 1] == ActionElement::block(1))
      continue;
    t.cells.push_back({i, {}, {}, {}, {}, {}});
    if (l.kind == LayerKind::BlockFirst) {
      TraceStep st;
      st.cell = i;
      st.kind = BranchKind::Block;
      st.sampled_index = action[i] == ActionElement::block(1) ? 1 : 0;
      st.element = ActionElement::block(st.sampled_index);
      t.steps.push_back(st);
      if (st.sampled_index == 1) continue;
    }
    TraceStep st;
    st.cell = i;
    st.kind = BranchKind::RatioDiscrete;
    for (std::size_t k = 0; k < kDiscreteRatios.size(); ++k)
      if (std::abs(kDiscreteRatios[k] - action[i].value) < 1e-12)
        st.sampled_index = static_cast<int>(k);
    st.element = action[i];
    t.steps.push_back(st);
  }
  return t;
}

}  // namespace abcp::testing
