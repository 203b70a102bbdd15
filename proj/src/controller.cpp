#include "abcp/controller.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace abcp {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_finite(const double* v, std::size_t n, const char* what) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(v[i]))
      throw NumericalFault(std::string("non-finite ") + what);
}

// y = w x + b
std::vector<double> affine(const Matrix& w, const double* b,
                           const std::vector<double>& x) {
  std::vector<double> y(w.rows);
  for (int r = 0; r < w.rows; ++r) {
    double acc = b ? b[r] : 0.0;
    const double* row = w.a.data() + static_cast<std::size_t>(r) * w.cols;
    for (int c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

// In-place softmax with max subtraction; inputs must be finite.
void softmax(std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

double gaussian_logp(double raw, double mu, double sigma_sq) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double d = raw - mu;
  return -0.5 * std::log(kTwoPi * sigma_sq) - d * d / (2.0 * sigma_sq);
}

struct LstmLayerCache {
  std::vector<double> x, h_prev, c_prev;
  std::vector<double> i, f, g, o, c, tc, h;
};

// Gate rows packed [input; forget; cell; output].
void lstm_layer_forward(const LstmLayerParams& p, LstmLayerCache& cc) {
  int hd = p.wh.cols;
  std::vector<double> z = affine(p.wx, p.b.data(), cc.x);
  std::vector<double> zr = affine(p.wh, nullptr, cc.h_prev);
  for (int k = 0; k < 4 * hd; ++k) z[k] += zr[k];
  cc.i.resize(hd);
  cc.f.resize(hd);
  cc.g.resize(hd);
  cc.o.resize(hd);
  cc.c.resize(hd);
  cc.tc.resize(hd);
  cc.h.resize(hd);
  for (int k = 0; k < hd; ++k) {
    cc.i[k] = sigmoid(z[k]);
    cc.f[k] = sigmoid(z[hd + k]);
    cc.g[k] = std::tanh(z[2 * hd + k]);
    cc.o[k] = sigmoid(z[3 * hd + k]);
    cc.c[k] = cc.f[k] * cc.c_prev[k] + cc.i[k] * cc.g[k];
    cc.tc[k] = std::tanh(cc.c[k]);
    cc.h[k] = cc.o[k] * cc.tc[k];
  }
}

// Backward of one LSTM layer. dh/dc are gradients w.r.t. this step's h and
// c; outputs are accumulated into the gradient store and the returned
// (dx, dh_prev, dc_prev).
struct LstmLayerBack {
  std::vector<double> dx, dh_prev, dc_prev;
};

LstmLayerBack lstm_layer_backward(const LstmLayerParams& p,
                                  const LstmLayerCache& cc,
                                  const std::vector<double>& dh,
                                  const std::vector<double>& dc_in,
                                  LstmLayerParams& grad) {
  int hd = p.wh.cols;
  int in = p.wx.cols;
  std::vector<double> dz(4 * hd);
  std::vector<double> dc(hd);
  LstmLayerBack out;
  out.dx.assign(in, 0.0);
  out.dh_prev.assign(hd, 0.0);
  out.dc_prev.assign(hd, 0.0);
  for (int k = 0; k < hd; ++k) {
    double d_o = dh[k] * cc.tc[k];
    dc[k] = dc_in[k] + dh[k] * cc.o[k] * (1.0 - cc.tc[k] * cc.tc[k]);
    double d_i = dc[k] * cc.g[k];
    double d_f = dc[k] * cc.c_prev[k];
    double d_g = dc[k] * cc.i[k];
    out.dc_prev[k] = dc[k] * cc.f[k];
    dz[k] = d_i * cc.i[k] * (1.0 - cc.i[k]);
    dz[hd + k] = d_f * cc.f[k] * (1.0 - cc.f[k]);
    dz[2 * hd + k] = d_g * (1.0 - cc.g[k] * cc.g[k]);
    dz[3 * hd + k] = d_o * cc.o[k] * (1.0 - cc.o[k]);
  }
  for (int r = 0; r < 4 * hd; ++r) {
    double* gwx = grad.wx.a.data() + static_cast<std::size_t>(r) * in;
    const double* wx = p.wx.a.data() + static_cast<std::size_t>(r) * in;
    for (int c = 0; c < in; ++c) {
      gwx[c] += dz[r] * cc.x[c];
      out.dx[c] += wx[c] * dz[r];
    }
    double* gwh = grad.wh.a.data() + static_cast<std::size_t>(r) * hd;
    const double* wh = p.wh.a.data() + static_cast<std::size_t>(r) * hd;
    for (int c = 0; c < hd; ++c) {
      gwh[c] += dz[r] * cc.h_prev[c];
      out.dh_prev[c] += wh[c] * dz[r];
    }
    grad.b[r] += dz[r];
  }
  return out;
}

}  // namespace

double SampleTrace::total_logp() const {
  double s = 0.0;
  for (const TraceStep& st : steps) s += st.logp;
  return s;
}

void for_each_param(ControllerParams& p,
                    const std::function<void(double*, std::size_t)>& fn) {
  auto vis = [&](std::vector<double>& v) { fn(v.data(), v.size()); };
  vis(p.lstm0.wx.a);
  vis(p.lstm0.wh.a);
  vis(p.lstm0.b);
  vis(p.lstm1.wx.a);
  vis(p.lstm1.wh.a);
  vis(p.lstm1.b);
  std::size_t bh = 0;
  for (int cell = 0; cell < p.num_cells; ++cell) {
    if (bh < p.block_head_cell.size() && p.block_head_cell[bh] == cell) {
      vis(p.block_heads[bh].w.a);
      vis(p.block_heads[bh].b);
      ++bh;
    }
    if (p.cfg.ratio_mode == RatioMode::Continuous) {
      RatioHeadCont& h = p.ratio_heads_cont[cell];
      vis(h.w_mu.a);
      fn(&h.b_mu, 1);
      vis(h.w_rho.a);
      fn(&h.b_rho, 1);
    } else {
      RatioHeadDisc& h = p.ratio_heads_disc[cell];
      vis(h.w.a);
      vis(h.b);
    }
  }
  vis(p.embed_block.a);
  vis(p.embed_ratio.a);
  vis(p.start_embed);
}

void for_each_param(
    const ControllerParams& p,
    const std::function<void(const double*, std::size_t)>& fn) {
  for_each_param(const_cast<ControllerParams&>(p),
                 [&](double* d, std::size_t n) { fn(d, n); });
}

std::size_t param_count(const ControllerParams& p) {
  std::size_t n = 0;
  for_each_param(p, [&](const double*, std::size_t k) { n += k; });
  return n;
}

std::vector<double> flatten_params(const ControllerParams& p) {
  std::vector<double> flat;
  flat.reserve(param_count(p));
  for_each_param(p, [&](const double* d, std::size_t n) {
    flat.insert(flat.end(), d, d + n);
  });
  return flat;
}

void assign_params(ControllerParams& p, const std::vector<double>& flat) {
  if (flat.size() != param_count(p))
    throw std::invalid_argument("flat parameter vector has wrong length");
  std::size_t off = 0;
  for_each_param(p, [&](double* d, std::size_t n) {
    std::memcpy(d, flat.data() + off, n * sizeof(double));
    off += n;
  });
}

ControllerParams zeros_like(const ControllerParams& like) {
  ControllerParams z = like;
  for_each_param(z, [](double* d, std::size_t n) {
    std::fill(d, d + n, 0.0);
  });
  return z;
}

ControllerParams init_params(const NetworkSpec& spec,
                             const ControllerConfig& cfg, Rng& rng) {
  if (cfg.h_dim < 1 || cfg.e_dim < 1)
    throw std::invalid_argument("h_dim and e_dim must be at least 1");
  ControllerParams p;
  p.cfg = cfg;
  p.num_cells = spec.num_layers();
  auto make_lstm = [&](int in) {
    LstmLayerParams l;
    l.wx = Matrix(4 * cfg.h_dim, in);
    l.wh = Matrix(4 * cfg.h_dim, cfg.h_dim);
    l.b.assign(4 * static_cast<std::size_t>(cfg.h_dim), 0.0);
    return l;
  };
  p.lstm0 = make_lstm(cfg.e_dim);
  p.lstm1 = make_lstm(cfg.h_dim);
  for (const LayerSpec& l : spec.layers) {
    if (l.kind == LayerKind::BlockFirst) {
      BlockHeadParams h;
      h.w = Matrix(2, cfg.h_dim);
      h.b.assign(2, 0.0);
      p.block_heads.push_back(std::move(h));
      p.block_head_cell.push_back(l.id);
    }
  }
  if (cfg.ratio_mode == RatioMode::Continuous) {
    p.ratio_heads_cont.resize(p.num_cells);
    for (RatioHeadCont& h : p.ratio_heads_cont) {
      h.w_mu = Matrix(1, cfg.h_dim);
      h.w_rho = Matrix(1, cfg.h_dim);
    }
  } else {
    p.ratio_heads_disc.resize(p.num_cells);
    for (RatioHeadDisc& h : p.ratio_heads_disc) {
      h.w = Matrix(5, cfg.h_dim);
      h.b.assign(5, 0.0);
    }
  }
  p.embed_block = Matrix(2, cfg.e_dim);
  p.embed_ratio = Matrix(10, cfg.e_dim);
  p.start_embed.assign(cfg.e_dim, 0.0);
  for_each_param(p, [&](double* d, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) d[k] = rng.uniform(-0.1, 0.1);
  });
  return p;
}

BlockSample sample_block_choice(const std::vector<double>& h,
                                const BlockHeadParams& head, Rng& rng) {
  std::vector<double> z = affine(head.w, head.b.data(), h);
  check_finite(z.data(), z.size(), "block head output");
  softmax(z);
  BlockSample s;
  s.probs = {z[0], z[1]};
  s.choice = static_cast<int>(rng.categorical(z));
  s.logp = std::log(z[static_cast<std::size_t>(s.choice)]);
  return s;
}

DiscreteRatioSample sample_ratio_discrete(const std::vector<double>& h,
                                          const RatioHeadDisc& head,
                                          Rng& rng) {
  std::vector<double> z = affine(head.w, head.b.data(), h);
  check_finite(z.data(), z.size(), "ratio head output");
  softmax(z);
  DiscreteRatioSample s;
  for (int k = 0; k < 5; ++k) s.probs[static_cast<std::size_t>(k)] = z[static_cast<std::size_t>(k)];
  s.index = static_cast<int>(rng.categorical(z));
  s.ratio = kDiscreteRatios[static_cast<std::size_t>(s.index)];
  s.logp = std::log(z[static_cast<std::size_t>(s.index)]);
  return s;
}

ContinuousRatioSample sample_ratio_continuous(const std::vector<double>& h,
                                              const RatioHeadCont& head,
                                              Rng& rng) {
  ContinuousRatioSample s;
  std::vector<double> mu = affine(head.w_mu, &head.b_mu, h);
  std::vector<double> rho = affine(head.w_rho, &head.b_rho, h);
  check_finite(mu.data(), 1, "ratio head output");
  check_finite(rho.data(), 1, "ratio head output");
  s.mu_hat = mu[0];
  s.rho_raw = rho[0];
  s.rho_hat = std::clamp(s.rho_raw, kRhoMin, kRhoMax);
  s.sigma_sq = std::exp(s.rho_hat);
  s.raw = rng.normal(s.mu_hat, std::sqrt(s.sigma_sq));
  s.ratio = std::clamp(s.raw, 0.0, kRatioMax);
  s.logp = gaussian_logp(s.raw, s.mu_hat, s.sigma_sq);
  return s;
}

std::vector<double> embed_action(const ControllerParams& params,
                                 const ActionElement& element) {
  const Matrix& table = element.kind == ActionElement::Kind::Block
                            ? params.embed_block
                            : params.embed_ratio;
  int row = element.kind == ActionElement::Kind::Block
                ? static_cast<int>(element.value)
                : ratio_bin(element.value);
  std::vector<double> e(table.cols);
  for (int c = 0; c < table.cols; ++c) e[c] = table.at(row, c);
  return e;
}

namespace {

int block_head_index(const ControllerParams& p, int cell) {
  for (std::size_t k = 0; k < p.block_head_cell.size(); ++k)
    if (p.block_head_cell[k] == cell) return static_cast<int>(k);
  throw std::invalid_argument("no block head for cell " +
                              std::to_string(cell));
}

}  // namespace

std::pair<PruningAction, SampleTrace> sample_action(
    const ControllerParams& params, const NetworkSpec& spec, Rng& rng) {
  int t = spec.num_layers();
  if (params.num_cells != t)
    throw std::invalid_argument("controller was built for a different net");
  int hd = params.cfg.h_dim;
  PruningAction action(static_cast<std::size_t>(t));
  SampleTrace trace;
  trace.num_cells = t;

  std::vector<double> c0(hd, 0.0), h0(hd, 0.0), c1(hd, 0.0), h1(hd, 0.0);
  std::vector<double> e = params.start_embed;

  for (int i = 0; i < t; ++i) {
    const LayerSpec& layer = spec.layers[i];
    if (layer.kind == LayerKind::BlockSecond && i > 0 &&
        action[i - 1] == ActionElement::block(1)) {
      // Pruned block: mirror the choice, skip the cell, leave the state and
      // the pending embedding for the cell after next.
      action[i] = ActionElement::block(1);
      continue;
    }

    LstmLayerCache l0, l1;
    l0.x = e;
    l0.h_prev = h0;
    l0.c_prev = c0;
    lstm_layer_forward(params.lstm0, l0);
    l1.x = l0.h;
    l1.h_prev = h1;
    l1.c_prev = c1;
    lstm_layer_forward(params.lstm1, l1);
    c0 = l0.c;
    h0 = l0.h;
    c1 = l1.c;
    h1 = l1.h;
    trace.cells.push_back({i, e, c0, h0, c1, h1});

    bool pruned = false;
    if (layer.kind == LayerKind::BlockFirst &&
        params.cfg.search_mode != SearchMode::ChannelOnly) {
      BlockSample bs = sample_block_choice(
          h1, params.block_heads[static_cast<std::size_t>(block_head_index(params, i))], rng);
      TraceStep st;
      st.cell = i;
      st.kind = BranchKind::Block;
      st.probs = {bs.probs[0], bs.probs[1]};
      st.sampled_index = bs.choice;
      st.element = ActionElement::block(bs.choice);
      st.logp = bs.logp;
      trace.steps.push_back(std::move(st));
      if (bs.choice == 1) {
        action[i] = ActionElement::block(1);
        pruned = true;
      }
    }

    if (!pruned) {
      TraceStep st;
      st.cell = i;
      if (params.cfg.search_mode == SearchMode::BlockOnly) {
        st.kind = BranchKind::FixedRatio;
        st.element = ActionElement::ratio(0.0);
        st.logp = 0.0;
      } else if (params.cfg.ratio_mode == RatioMode::Discrete) {
        DiscreteRatioSample rs = sample_ratio_discrete(
            h1, params.ratio_heads_disc[static_cast<std::size_t>(i)], rng);
        st.kind = BranchKind::RatioDiscrete;
        st.probs.assign(rs.probs.begin(), rs.probs.end());
        st.sampled_index = rs.index;
        st.element = ActionElement::ratio(rs.ratio);
        st.logp = rs.logp;
      } else {
        ContinuousRatioSample rs = sample_ratio_continuous(
            h1, params.ratio_heads_cont[static_cast<std::size_t>(i)], rng);
        st.kind = BranchKind::RatioContinuous;
        st.mu_hat = rs.mu_hat;
        st.rho_raw = rs.rho_raw;
        st.rho_hat = rs.rho_hat;
        st.sigma_sq = rs.sigma_sq;
        st.raw = rs.raw;
        st.element = ActionElement::ratio(rs.ratio);
        st.logp = rs.logp;
      }
      action[i] = st.element;
      trace.steps.push_back(std::move(st));
    }

    e = embed_action(params, action[static_cast<std::size_t>(i)]);
  }
  return {std::move(action), std::move(trace)};
}

namespace {

// Replayed forward pass: teacher-forced on the trace's decisions, caching
// everything the backward pass needs.
struct StepReplay {
  const TraceStep* step = nullptr;
  std::vector<double> probs;  // recomputed under current params
  double mu_hat = 0.0, rho_raw = 0.0, rho_hat = 0.0, sigma_sq = 0.0;
  double logp = 0.0;
};

struct CellReplay {
  int cell = 0;
  LstmLayerCache l0, l1;
  std::vector<StepReplay> steps;
};

struct Replay {
  std::vector<CellReplay> cells;
  double total_logp = 0.0;
};

Replay replay_forward(const ControllerParams& params, const NetworkSpec& spec,
                      const PruningAction& action, const SampleTrace& trace) {
  int t = spec.num_layers();
  if (params.num_cells != t || trace.num_cells != t ||
      static_cast<int>(action.size()) != t)
    throw std::invalid_argument("trace does not match params");
  int hd = params.cfg.h_dim;
  int ed = params.cfg.e_dim;
  if (static_cast<int>(params.start_embed.size()) != ed)
    throw std::invalid_argument("trace does not match params");

  Replay rp;
  std::vector<double> c0(hd, 0.0), h0(hd, 0.0), c1(hd, 0.0), h1(hd, 0.0);
  std::vector<double> e = params.start_embed;
  std::size_t step_idx = 0;
  std::size_t cell_idx = 0;

  for (int i = 0; i < t; ++i) {
    const LayerSpec& layer = spec.layers[i];
    if (layer.kind == LayerKind::BlockSecond && i > 0 &&
        action[i - 1] == ActionElement::block(1))
      continue;  // skipped cell

    if (cell_idx >= trace.cells.size() || trace.cells[cell_idx].cell != i)
      throw std::invalid_argument("trace does not match the action's path");
    ++cell_idx;

    CellReplay cr;
    cr.cell = i;
    cr.l0.x = e;
    cr.l0.h_prev = h0;
    cr.l0.c_prev = c0;
    lstm_layer_forward(params.lstm0, cr.l0);
    cr.l1.x = cr.l0.h;
    cr.l1.h_prev = h1;
    cr.l1.c_prev = c1;
    lstm_layer_forward(params.lstm1, cr.l1);
    c0 = cr.l0.c;
    h0 = cr.l0.h;
    c1 = cr.l1.c;
    h1 = cr.l1.h;

    while (step_idx < trace.steps.size() &&
           trace.steps[step_idx].cell == i) {
      const TraceStep& st = trace.steps[step_idx];
      StepReplay sr;
      sr.step = &st;
      switch (st.kind) {
        case BranchKind::Block: {
          const BlockHeadParams& head =
              params.block_heads[static_cast<std::size_t>(block_head_index(params, i))];
          std::vector<double> z = affine(head.w, head.b.data(), h1);
          check_finite(z.data(), z.size(), "block head output");
          softmax(z);
          sr.probs = z;
          sr.logp = std::log(z[static_cast<std::size_t>(st.sampled_index)]);
          break;
        }
        case BranchKind::RatioDiscrete: {
          const RatioHeadDisc& head =
              params.ratio_heads_disc[static_cast<std::size_t>(i)];
          std::vector<double> z = affine(head.w, head.b.data(), h1);
          check_finite(z.data(), z.size(), "ratio head output");
          softmax(z);
          sr.probs = z;
          sr.logp = std::log(z[static_cast<std::size_t>(st.sampled_index)]);
          break;
        }
        case BranchKind::RatioContinuous: {
          const RatioHeadCont& head =
              params.ratio_heads_cont[static_cast<std::size_t>(i)];
          std::vector<double> mu = affine(head.w_mu, &head.b_mu, h1);
          std::vector<double> rho = affine(head.w_rho, &head.b_rho, h1);
          check_finite(mu.data(), 1, "ratio head output");
          check_finite(rho.data(), 1, "ratio head output");
          sr.mu_hat = mu[0];
          sr.rho_raw = rho[0];
          sr.rho_hat = std::clamp(sr.rho_raw, kRhoMin, kRhoMax);
          sr.sigma_sq = std::exp(sr.rho_hat);
          sr.logp = gaussian_logp(st.raw, sr.mu_hat, sr.sigma_sq);
          break;
        }
        case BranchKind::FixedRatio:
          sr.logp = 0.0;
          break;
      }
      rp.total_logp += sr.logp;
      cr.steps.push_back(std::move(sr));
      ++step_idx;
    }
    rp.cells.push_back(std::move(cr));
    e = embed_action(params, action[static_cast<std::size_t>(i)]);
  }
  if (step_idx != trace.steps.size() || cell_idx != trace.cells.size())
    throw std::invalid_argument("trace does not match the action's path");
  return rp;
}

}  // namespace

double log_prob_of_trace(const ControllerParams& params,
                         const NetworkSpec& spec, const PruningAction& action,
                         const SampleTrace& trace) {
  return replay_forward(params, spec, action, trace).total_logp;
}

double score_action(const ControllerParams& params, const NetworkSpec& spec,
                    const PruningAction& action) {
  if (params.cfg.ratio_mode == RatioMode::Continuous &&
      params.cfg.search_mode != SearchMode::BlockOnly)
    throw std::invalid_argument(
        "continuous-ratio actions cannot be scored exactly");
  int t = spec.num_layers();
  if (params.num_cells != t || static_cast<int>(action.size()) != t)
    throw std::invalid_argument("action does not match params");
  int hd = params.cfg.h_dim;

  auto ratio_index = [](double r) {
    for (std::size_t k = 0; k < kDiscreteRatios.size(); ++k)
      if (std::abs(kDiscreteRatios[k] - r) < 1e-12) return static_cast<int>(k);
    throw std::invalid_argument("ratio is not one of the discrete choices");
  };

  double total = 0.0;
  std::vector<double> c0(hd, 0.0), h0(hd, 0.0), c1(hd, 0.0), h1(hd, 0.0);
  std::vector<double> e = params.start_embed;
  for (int i = 0; i < t; ++i) {
    const LayerSpec& layer = spec.layers[i];
    const ActionElement& el = action[static_cast<std::size_t>(i)];
    if (layer.kind == LayerKind::BlockSecond && i > 0 &&
        action[i - 1] == ActionElement::block(1)) {
      if (!(el == ActionElement::block(1)))
        throw std::invalid_argument("action does not mirror the block prune");
      continue;
    }

    LstmLayerCache l0, l1;
    l0.x = e;
    l0.h_prev = h0;
    l0.c_prev = c0;
    lstm_layer_forward(params.lstm0, l0);
    l1.x = l0.h;
    l1.h_prev = h1;
    l1.c_prev = c1;
    lstm_layer_forward(params.lstm1, l1);
    c0 = l0.c;
    h0 = l0.h;
    c1 = l1.c;
    h1 = l1.h;

    bool pruned = false;
    if (layer.kind == LayerKind::BlockFirst &&
        params.cfg.search_mode != SearchMode::ChannelOnly) {
      const BlockHeadParams& head =
          params.block_heads[static_cast<std::size_t>(block_head_index(params, i))];
      std::vector<double> z = affine(head.w, head.b.data(), h1);
      check_finite(z.data(), z.size(), "block head output");
      softmax(z);
      int choice;
      if (el == ActionElement::block(1)) {
        choice = 1;
        pruned = true;
      } else if (el.kind == ActionElement::Kind::Ratio) {
        choice = 0;
      } else {
        throw std::invalid_argument(
            "a kept block's element must be its sampled ratio");
      }
      total += std::log(z[static_cast<std::size_t>(choice)]);
    } else if (el.kind == ActionElement::Kind::Block) {
      throw std::invalid_argument("block element outside a sampleable slot");
    }

    if (!pruned) {
      if (params.cfg.search_mode == SearchMode::BlockOnly) {
        if (el.kind != ActionElement::Kind::Ratio || el.value != 0.0)
          throw std::invalid_argument("block-only actions fix ratios at 0");
      } else {
        const RatioHeadDisc& head =
            params.ratio_heads_disc[static_cast<std::size_t>(i)];
        std::vector<double> z = affine(head.w, head.b.data(), h1);
        check_finite(z.data(), z.size(), "ratio head output");
        softmax(z);
        total += std::log(z[static_cast<std::size_t>(ratio_index(el.value))]);
      }
    }
    e = embed_action(params, el);
  }
  return total;
}

ControllerParams grad_log_prob(const ControllerParams& params,
                               const NetworkSpec& spec,
                               const PruningAction& action,
                               const SampleTrace& trace) {
  Replay rp = replay_forward(params, spec, action, trace);
  ControllerParams g = zeros_like(params);
  int hd = params.cfg.h_dim;

  std::vector<double> dh1(hd, 0.0), dc1(hd, 0.0);
  std::vector<double> dh0(hd, 0.0), dc0(hd, 0.0);

  for (std::size_t ci = rp.cells.size(); ci-- > 0;) {
    const CellReplay& cr = rp.cells[ci];
    const std::vector<double>& h1 = cr.l1.h;

    // Decision heads at this cell all read the top hidden state.
    for (const StepReplay& sr : cr.steps) {
      const TraceStep& st = *sr.step;
      switch (st.kind) {
        case BranchKind::Block: {
          int bi = block_head_index(params, cr.cell);
          const BlockHeadParams& head = params.block_heads[static_cast<std::size_t>(bi)];
          BlockHeadParams& gh = g.block_heads[static_cast<std::size_t>(bi)];
          for (int j = 0; j < 2; ++j) {
            double dz = (j == st.sampled_index ? 1.0 : 0.0) -
                        sr.probs[static_cast<std::size_t>(j)];
            gh.b[static_cast<std::size_t>(j)] += dz;
            for (int k = 0; k < hd; ++k) {
              gh.w.at(j, k) += dz * h1[static_cast<std::size_t>(k)];
              dh1[static_cast<std::size_t>(k)] += head.w.at(j, k) * dz;
            }
          }
          break;
        }
        case BranchKind::RatioDiscrete: {
          const RatioHeadDisc& head =
              params.ratio_heads_disc[static_cast<std::size_t>(cr.cell)];
          RatioHeadDisc& gh = g.ratio_heads_disc[static_cast<std::size_t>(cr.cell)];
          for (int j = 0; j < 5; ++j) {
            double dz = (j == st.sampled_index ? 1.0 : 0.0) -
                        sr.probs[static_cast<std::size_t>(j)];
            gh.b[static_cast<std::size_t>(j)] += dz;
            for (int k = 0; k < hd; ++k) {
              gh.w.at(j, k) += dz * h1[static_cast<std::size_t>(k)];
              dh1[static_cast<std::size_t>(k)] += head.w.at(j, k) * dz;
            }
          }
          break;
        }
        case BranchKind::RatioContinuous: {
          const RatioHeadCont& head =
              params.ratio_heads_cont[static_cast<std::size_t>(cr.cell)];
          RatioHeadCont& gh = g.ratio_heads_cont[static_cast<std::size_t>(cr.cell)];
          double d = st.raw - sr.mu_hat;
          double dmu = d / sr.sigma_sq;
          // d logp / d rho_hat with sigma^2 = exp(rho_hat); zero when the
          // clamp is active.
          double drho = 0.5 * (d * d / sr.sigma_sq - 1.0);
          if (sr.rho_raw < kRhoMin || sr.rho_raw > kRhoMax) drho = 0.0;
          gh.b_mu += dmu;
          gh.b_rho += drho;
          for (int k = 0; k < hd; ++k) {
            gh.w_mu.at(0, k) += dmu * h1[static_cast<std::size_t>(k)];
            gh.w_rho.at(0, k) += drho * h1[static_cast<std::size_t>(k)];
            dh1[static_cast<std::size_t>(k)] +=
                head.w_mu.at(0, k) * dmu + head.w_rho.at(0, k) * drho;
          }
          break;
        }
        case BranchKind::FixedRatio:
          break;
      }
    }

    LstmLayerBack b1 = lstm_layer_backward(params.lstm1, cr.l1, dh1, dc1, g.lstm1);
    for (int k = 0; k < hd; ++k) dh0[static_cast<std::size_t>(k)] += b1.dx[static_cast<std::size_t>(k)];
    LstmLayerBack b0 = lstm_layer_backward(params.lstm0, cr.l0, dh0, dc0, g.lstm0);

    // Route the input-embedding gradient to its source row.
    if (ci == 0) {
      for (int k = 0; k < params.cfg.e_dim; ++k)
        g.start_embed[static_cast<std::size_t>(k)] += b0.dx[static_cast<std::size_t>(k)];
    } else {
      const ActionElement& prev =
          action[static_cast<std::size_t>(rp.cells[ci - 1].cell)];
      Matrix& table = prev.kind == ActionElement::Kind::Block ? g.embed_block
                                                              : g.embed_ratio;
      int row = prev.kind == ActionElement::Kind::Block
                    ? static_cast<int>(prev.value)
                    : ratio_bin(prev.value);
      for (int k = 0; k < params.cfg.e_dim; ++k)
        table.at(row, k) += b0.dx[static_cast<std::size_t>(k)];
    }

    dh1 = b1.dh_prev;
    dc1 = b1.dc_prev;
    dh0 = b0.dh_prev;
    dc0 = b0.dc_prev;
  }
  return g;
}

}  // namespace abcp
