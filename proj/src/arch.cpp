#include "abcp/arch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace abcp {

namespace {

std::string at_layer(int j) { return "layer " + std::to_string(j) + ": "; }

bool is_block_layer(LayerKind k) {
  return k == LayerKind::BlockFirst || k == LayerKind::BlockSecond;
}

}  // namespace

const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Ordinary: return "ordinary";
    case LayerKind::GroupFirst: return "group_first";
    case LayerKind::BlockFirst: return "block_first";
    case LayerKind::BlockSecond: return "block_second";
  }
  return "?";
}

std::vector<std::string> validate_network(const NetworkSpec& spec) {
  std::vector<std::string> v;
  const auto& L = spec.layers;
  if (L.empty()) {
    v.push_back("network has no layers");
    return v;
  }

  for (std::size_t j = 0; j < L.size(); ++j) {
    const LayerSpec& l = L[j];
    if (l.id != static_cast<int>(j))
      v.push_back(at_layer(j) + "id " + std::to_string(l.id) +
                  " does not match position");
    if (l.kernel < 1 || l.in_ch < 1 || l.out_ch < 1 || l.in_h < 1 ||
        l.in_w < 1 || l.stride < 1)
      v.push_back(at_layer(j) + "non-positive dimension");
  }

  // Block structure: BlockFirst immediately followed by its BlockSecond,
  // block ids unique, residual addition shape-consistent, stride 1 inside
  // blocks so the shortcut sum is spatially aligned.
  std::set<int> seen_blocks;
  for (std::size_t j = 0; j < L.size(); ++j) {
    const LayerSpec& l = L[j];
    switch (l.kind) {
      case LayerKind::BlockFirst: {
        if (!l.block_id) v.push_back(at_layer(j) + "block_first without block_id");
        if (j == 0) v.push_back(at_layer(j) + "block has no producing layer");
        if (l.stride != 1) v.push_back(at_layer(j) + "block layer with stride != 1");
        if (j + 1 >= L.size() || L[j + 1].kind != LayerKind::BlockSecond) {
          v.push_back(at_layer(j) + "block_first not followed by block_second");
        } else {
          const LayerSpec& s = L[j + 1];
          if (l.block_id && s.block_id && *l.block_id != *s.block_id)
            v.push_back(at_layer(j) + "block pairing mismatch");
          if (s.out_ch != l.in_ch)
            v.push_back(at_layer(j + 1) +
                        "residual shape mismatch: block_second out_ch " +
                        std::to_string(s.out_ch) + " != block input channels " +
                        std::to_string(l.in_ch));
        }
        if (l.block_id && !seen_blocks.insert(*l.block_id).second)
          v.push_back(at_layer(j) + "duplicate block_id " +
                      std::to_string(*l.block_id));
        break;
      }
      case LayerKind::BlockSecond: {
        if (!l.block_id) v.push_back(at_layer(j) + "block_second without block_id");
        if (l.stride != 1) v.push_back(at_layer(j) + "block layer with stride != 1");
        if (j == 0 || L[j - 1].kind != LayerKind::BlockFirst)
          v.push_back(at_layer(j) + "block_second not preceded by block_first");
        break;
      }
      case LayerKind::GroupFirst:
        if (!l.group_id) v.push_back(at_layer(j) + "group_first without group_id");
        if (l.block_id) v.push_back(at_layer(j) + "non-block layer with block_id");
        break;
      case LayerKind::Ordinary:
        if (l.block_id) v.push_back(at_layer(j) + "non-block layer with block_id");
        if (l.group_id) v.push_back(at_layer(j) + "ordinary layer with group_id");
        break;
    }
  }

  // Group membership: block layers carry the group_id of the nearest
  // preceding GroupFirst, or none when the enclosing entry is Ordinary.
  std::optional<int> current_group;
  for (std::size_t j = 0; j < L.size(); ++j) {
    const LayerSpec& l = L[j];
    if (l.kind == LayerKind::GroupFirst) {
      current_group = l.group_id;
    } else if (l.kind == LayerKind::Ordinary) {
      current_group.reset();
    } else if (l.group_id != current_group) {
      v.push_back(at_layer(j) + "group_id does not match enclosing group");
    }
  }

  // Channel and spatial flow along the chain. Residual sums preserve both
  // channel count and spatial dims, so plain chaining is the invariant.
  for (std::size_t j = 1; j < L.size(); ++j) {
    if (L[j].in_ch != L[j - 1].out_ch)
      v.push_back(at_layer(j) + "channel flow mismatch: in_ch " +
                  std::to_string(L[j].in_ch) + " != previous out_ch " +
                  std::to_string(L[j - 1].out_ch));
    if (L[j].in_h != L[j - 1].out_h() || L[j].in_w != L[j - 1].out_w())
      v.push_back(at_layer(j) + "spatial flow mismatch");
  }

  for (std::size_t j = 0; j < L.size(); ++j) {
    if (L[j].kind == LayerKind::BlockFirst &&
        !spec.s_frb.count(static_cast<int>(j)))
      v.push_back("s_frb incomplete: missing id " + std::to_string(j));
  }
  for (int id : spec.s_frb) {
    if (id < 0 || id >= spec.num_layers() ||
        L[id].kind != LayerKind::BlockFirst)
      v.push_back("s_frb contains non-block_first id " + std::to_string(id));
  }

  for (int id : spec.head_ids) {
    if (id < 0 || id > spec.num_layers())
      v.push_back("head id " + std::to_string(id) + " out of range");
  }

  return v;
}

std::uint64_t layer_flops(int kernel, int in_h, int in_w, int c_in, int c_out) {
  if (kernel < 1 || in_h < 1 || in_w < 1 || c_in < 1 || c_out < 1)
    throw std::invalid_argument("layer_flops: all dimensions must be >= 1");
  std::uint64_t f = static_cast<std::uint64_t>(in_h) * in_w;
  f *= static_cast<std::uint64_t>(kernel) * kernel;
  f *= static_cast<std::uint64_t>(c_in);
  f *= static_cast<std::uint64_t>(c_out);
  return f;
}

PruneMask identity_mask(const NetworkSpec& spec) {
  PruneMask m;
  m.layers.resize(spec.layers.size());
  for (std::size_t j = 0; j < spec.layers.size(); ++j) {
    m.layers[j].kept.resize(spec.layers[j].out_ch);
    std::iota(m.layers[j].kept.begin(), m.layers[j].kept.end(), 0);
  }
  return m;
}

void check_action(const NetworkSpec& spec, const PruningAction& action) {
  if (static_cast<int>(action.size()) != spec.num_layers())
    throw std::invalid_argument("action length " +
                                std::to_string(action.size()) +
                                " does not match layer count " +
                                std::to_string(spec.num_layers()));
  for (std::size_t j = 0; j < action.size(); ++j) {
    const ActionElement& e = action[j];
    const LayerKind kind = spec.layers[j].kind;
    if (e.kind == ActionElement::Kind::Block) {
      if (!is_block_layer(kind))
        throw std::invalid_argument(at_layer(j) +
                                    "block element at non-block position");
      if (e.value != 0.0 && e.value != 1.0)
        throw std::invalid_argument(at_layer(j) + "block choice must be 0 or 1");
      if (kind == LayerKind::BlockSecond) {
        const ActionElement& first = action[j - 1];
        if (!(first.kind == ActionElement::Kind::Block && first.value == e.value))
          throw std::invalid_argument(at_layer(j) +
                                      "block_second element does not mirror "
                                      "its block_first choice");
      }
    } else {
      if (!std::isfinite(e.value) || e.value < 0.0 || e.value > 0.9)
        throw std::invalid_argument(at_layer(j) + "ratio outside [0, 0.9]");
      if (kind == LayerKind::BlockSecond &&
          action[j - 1].is_prune())
        throw std::invalid_argument(at_layer(j) +
                                    "ratio element inside a pruned block");
    }
    if (kind == LayerKind::BlockFirst && e.is_prune()) {
      if (j + 1 >= action.size() || !action[j + 1].is_prune())
        throw std::invalid_argument(at_layer(j) +
                                    "pruned block without mirrored element");
    }
  }
}

void check_mask(const NetworkSpec& spec, const PruneMask& mask) {
  if (static_cast<int>(mask.layers.size()) != spec.num_layers())
    throw std::invalid_argument("mask length does not match layer count");
  for (std::size_t j = 0; j < mask.layers.size(); ++j) {
    const LayerMask& m = mask.layers[j];
    const LayerSpec& l = spec.layers[j];
    if (m.removed) {
      if (!is_block_layer(l.kind))
        throw std::invalid_argument(at_layer(j) + "removed non-block layer");
      if (!m.kept.empty())
        throw std::invalid_argument(at_layer(j) + "removed layer with kept channels");
      // Whole blocks only: the paired layer must be removed as well.
      std::size_t partner =
          (l.kind == LayerKind::BlockFirst) ? j + 1 : j - 1;
      if (partner >= mask.layers.size() || !mask.layers[partner].removed)
        throw std::invalid_argument(at_layer(j) + "half-removed block");
      continue;
    }
    if (m.kept.empty())
      throw std::invalid_argument(at_layer(j) + "no channels kept");
    int prev = -1;
    for (int c : m.kept) {
      if (c <= prev)
        throw std::invalid_argument(at_layer(j) + "kept channels not strictly increasing");
      if (c < 0 || c >= l.out_ch)
        throw std::invalid_argument(at_layer(j) + "kept channel out of range");
      prev = c;
    }
  }
}

std::uint64_t total_flops(const NetworkSpec& spec, const PruneMask& mask) {
  check_mask(spec, mask);
  std::uint64_t total = 0;
  int produced = spec.layers.empty() ? 0 : spec.layers[0].in_ch;
  for (std::size_t j = 0; j < spec.layers.size(); ++j) {
    const LayerMask& m = mask.layers[j];
    if (m.removed) continue;  // shortcut bypass: width flows through unchanged
    const LayerSpec& l = spec.layers[j];
    int cout = static_cast<int>(m.kept.size());
    total += layer_flops(l.kernel, l.in_h, l.in_w, produced, cout);
    produced = cout;
  }
  return total;
}

std::vector<std::vector<int>> coupled_ratio_sets(const NetworkSpec& spec,
                                                 const PruningAction& action) {
  check_action(spec, action);
  std::vector<std::vector<int>> sets;
  std::vector<int> current;
  auto flush = [&] {
    if (current.size() >= 2) sets.push_back(current);
    current.clear();
  };
  for (std::size_t j = 0; j < spec.layers.size(); ++j) {
    switch (spec.layers[j].kind) {
      case LayerKind::Ordinary:
      case LayerKind::GroupFirst:
        // New entry: whatever follows couples to this layer's output.
        flush();
        current.push_back(static_cast<int>(j));
        break;
      case LayerKind::BlockFirst:
        if (!action[j].is_prune())
          current.push_back(static_cast<int>(j) + 1);  // its BlockSecond
        break;
      case LayerKind::BlockSecond:
        break;  // handled at the BlockFirst
    }
  }
  flush();
  return sets;
}

PruningAction enforce_group_constraint(const NetworkSpec& spec,
                                       const PruningAction& action) {
  PruningAction out = action;
  for (const auto& set : coupled_ratio_sets(spec, action)) {
    double mx = 0.0;
    for (int pos : set) {
      // Block(0) represents "keep, ratio 0" and participates with ratio 0.
      double r = (out[pos].kind == ActionElement::Kind::Ratio) ? out[pos].value : 0.0;
      mx = std::max(mx, r);
    }
    for (int pos : set) out[pos] = ActionElement::ratio(mx);
  }
  return out;
}

PruneMask resolve_mask(const NetworkSpec& spec, const PruningAction& action,
                       const std::vector<std::vector<double>>& gammas) {
  check_action(spec, action);
  if (static_cast<int>(gammas.size()) != spec.num_layers())
    throw std::invalid_argument("gamma vector count does not match layer count");
  for (std::size_t j = 0; j < gammas.size(); ++j) {
    if (static_cast<int>(gammas[j].size()) != spec.layers[j].out_ch)
      throw std::invalid_argument(at_layer(j) + "gamma length != out_ch");
  }

  PruneMask mask;
  mask.layers.resize(spec.layers.size());
  for (std::size_t j = 0; j < spec.layers.size(); ++j) {
    const LayerSpec& l = spec.layers[j];
    const ActionElement& e = action[j];

    bool pruned_block = false;
    if (l.kind == LayerKind::BlockFirst) pruned_block = e.is_prune();
    if (l.kind == LayerKind::BlockSecond) pruned_block = action[j - 1].is_prune();
    if (pruned_block) {
      mask.layers[j].removed = true;
      continue;
    }

    double r = (e.kind == ActionElement::Kind::Ratio) ? e.value : 0.0;
    int prune_count = static_cast<int>(std::floor(r * l.out_ch));
    if (prune_count >= l.out_ch) prune_count = l.out_ch - 1;  // keep >= 1
    if (prune_count < 0) prune_count = 0;

    // Rank channels by |gamma|, lowest first; equal magnitudes lose the
    // lower index first.
    std::vector<int> order(l.out_ch);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      double ma = std::abs(gammas[j][a]);
      double mb = std::abs(gammas[j][b]);
      if (ma != mb) return ma < mb;
      return a < b;
    });
    std::vector<int>& kept = mask.layers[j].kept;
    kept.assign(order.begin() + prune_count, order.end());
    std::sort(kept.begin(), kept.end());
  }
  return mask;
}

void apply_mask(const NetworkSpec& spec, const PruneMask& mask,
                std::span<LayerWeightsRef> weights) {
  check_mask(spec, mask);
  if (static_cast<int>(weights.size()) != spec.num_layers())
    throw std::invalid_argument("weight store size does not match layer count");

  for (std::size_t j = 0; j < weights.size(); ++j) {
    const LayerSpec& l = spec.layers[j];
    const LayerWeightsRef& w = weights[j];
    const std::size_t per_filter =
        static_cast<std::size_t>(l.in_ch) * l.kernel * l.kernel;
    if (w.filter.size() != per_filter * l.out_ch ||
        w.gamma.size() != static_cast<std::size_t>(l.out_ch) ||
        w.beta.size() != static_cast<std::size_t>(l.out_ch))
      throw std::invalid_argument(at_layer(j) + "weight store shape mismatch");

    const LayerMask& m = mask.layers[j];
    if (m.removed) {
      std::fill(w.filter.begin(), w.filter.end(), 0.0);
      std::fill(w.gamma.begin(), w.gamma.end(), 0.0);
      std::fill(w.beta.begin(), w.beta.end(), 0.0);
      continue;
    }
    std::vector<char> keep(l.out_ch, 0);
    for (int c : m.kept) keep[c] = 1;
    for (int c = 0; c < l.out_ch; ++c) {
      if (keep[c]) continue;
      std::fill(w.filter.begin() + c * per_filter,
                w.filter.begin() + (c + 1) * per_filter, 0.0);
      w.gamma[c] = 0.0;
      w.beta[c] = 0.0;
    }
  }
}

NetworkSpec export_pruned(const NetworkSpec& spec, const PruneMask& mask) {
  check_mask(spec, mask);
  NetworkSpec out;
  std::vector<int> new_id(spec.layers.size(), -1);
  int produced = spec.layers.empty() ? 0 : spec.layers[0].in_ch;
  for (std::size_t j = 0; j < spec.layers.size(); ++j) {
    const LayerMask& m = mask.layers[j];
    if (m.removed) continue;
    LayerSpec nl = spec.layers[j];
    nl.id = static_cast<int>(out.layers.size());
    nl.in_ch = produced;
    nl.out_ch = static_cast<int>(m.kept.size());
    new_id[j] = nl.id;
    produced = nl.out_ch;
    out.layers.push_back(nl);
  }
  for (const LayerSpec& l : out.layers) {
    if (l.kind == LayerKind::BlockFirst) out.s_frb.insert(l.id);
  }
  for (int h : spec.head_ids) {
    if (h == spec.num_layers()) {
      out.head_ids.insert(out.num_layers());  // the classifier keeps its slot
    } else if (new_id[h] >= 0) {
      out.head_ids.insert(new_id[h]);
    }
  }
  return out;
}

std::uint64_t spec_param_count(const NetworkSpec& spec, int num_classes) {
  std::uint64_t n = 0;
  for (const LayerSpec& l : spec.layers) {
    n += static_cast<std::uint64_t>(l.out_ch) * l.in_ch * l.kernel * l.kernel;
    n += 2ull * l.out_ch;  // scale + shift
  }
  if (!spec.layers.empty())
    n += static_cast<std::uint64_t>(spec.layers.back().out_ch) * num_classes +
         num_classes;
  return n;
}

}  // namespace abcp
