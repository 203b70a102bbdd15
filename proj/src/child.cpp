#include "abcp/child.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "abcp/adam.hpp"

namespace abcp {

namespace {

struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<std::size_t>(n_) * c_ * h_ * w_, 0.0) {}

  double& at(int i, int ch, int y, int x) {
    return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }
  double at(int i, int ch, int y, int x) const {
    return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }
  bool empty() const { return v.empty(); }
};

std::vector<int> all_channels(int c) {
  std::vector<int> r(c);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

void conv_forward(const LayerSpec& L, std::span<const double> w,
                  const Tensor& in, Tensor& out, const std::vector<int>& ocs,
                  const std::vector<int>& ics) {
  const int k = L.kernel, s = L.stride, pad = L.kernel / 2;
  for (int i = 0; i < in.n; ++i)
    for (int oc : ocs) {
      const double* wb = w.data() + static_cast<std::size_t>(oc) * L.in_ch * k * k;
      for (int oy = 0; oy < out.h; ++oy)
        for (int ox = 0; ox < out.w; ++ox) {
          double acc = 0.0;
          for (int ic : ics) {
            const double* wk = wb + static_cast<std::size_t>(ic) * k * k;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * s - pad + ky;
              if (iy < 0 || iy >= in.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * s - pad + kx;
                if (ix < 0 || ix >= in.w) continue;
                acc += wk[ky * k + kx] * in.at(i, ic, iy, ix);
              }
            }
          }
          out.at(i, oc, oy, ox) = acc;
        }
    }
}

void conv_backward(const LayerSpec& L, std::span<const double> w,
                   const Tensor& in, const Tensor& dout, std::span<double> dw,
                   Tensor& din) {
  const int k = L.kernel, s = L.stride, pad = L.kernel / 2;
  for (int i = 0; i < in.n; ++i)
    for (int oc = 0; oc < L.out_ch; ++oc) {
      const double* wb = w.data() + static_cast<std::size_t>(oc) * L.in_ch * k * k;
      double* dwb = dw.data() + static_cast<std::size_t>(oc) * L.in_ch * k * k;
      for (int oy = 0; oy < dout.h; ++oy)
        for (int ox = 0; ox < dout.w; ++ox) {
          const double g = dout.at(i, oc, oy, ox);
          if (g == 0.0) continue;
          for (int ic = 0; ic < L.in_ch; ++ic) {
            const double* wk = wb + static_cast<std::size_t>(ic) * k * k;
            double* dwk = dwb + static_cast<std::size_t>(ic) * k * k;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * s - pad + ky;
              if (iy < 0 || iy >= in.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * s - pad + kx;
                if (ix < 0 || ix >= in.w) continue;
                dwk[ky * k + kx] += g * in.at(i, ic, iy, ix);
                din.at(i, ic, iy, ix) += g * wk[ky * k + kx];
              }
            }
          }
        }
    }
}

// Per executed layer: the normalized activations, the statistics used to
// normalize (batch stats in training, running stats in inference), and the
// value handed to the next layer (after the shortcut add, when present).
struct LayerFwd {
  bool executed = false;
  Tensor xhat;
  Tensor chain;
  std::vector<double> mean;
  std::vector<double> var;
};

struct Forward {
  Tensor x0;
  std::vector<LayerFwd> layers;
  std::vector<int> input_of;   // feeding layer index, -1 for the image
  std::vector<int> executed;   // executed layer indices in order
  std::vector<double> feats;   // [n][feat_dim]
  std::vector<double> logits;  // [n][num_classes]
};

Forward run_forward(const ChildModel& m, const Batch& b,
                    bool train, const PruneMask* hint) {
  const NetworkSpec& spec = m.spec;
  const int L = spec.num_layers();
  Forward f;
  f.layers.resize(L);
  f.input_of.assign(L, -1);

  const LayerSpec& first = spec.layers.front();
  f.x0 = Tensor(b.n, first.in_ch, first.in_h, first.in_w);
  f.x0.v = b.x;

  // live holds the channels of the current value that can be nonzero: a
  // masked layer's kept set, widened by whatever a shortcut mixed back in.
  // Skipping the dead channels never changes any value because apply_mask
  // zeroed their weights and scales; it only skips arithmetic on zeros.
  std::vector<int> live = all_channels(first.in_ch);
  std::vector<int> block_in_live;
  int prev = -1;  // index of the layer whose chain is the current value
  for (int li = 0; li < L; ++li) {
    const LayerSpec& ls = spec.layers[li];
    if (hint && hint->layers[li].removed) continue;  // shortcut carries prev

    const Tensor& in = prev < 0 ? f.x0 : f.layers[prev].chain;
    LayerFwd& lf = f.layers[li];
    lf.executed = true;
    f.input_of[li] = prev;
    if (ls.kind == LayerKind::BlockFirst) block_in_live = live;

    const ConvLayer& cl = m.convs[li];
    Tensor conv(b.n, ls.out_ch, ls.out_h(), ls.out_w());
    const std::vector<int> ocs =
        hint ? hint->layers[li].kept : all_channels(ls.out_ch);
    conv_forward(ls, cl.filter, in, conv, ocs, live);

    lf.mean.assign(ls.out_ch, 0.0);
    lf.var.assign(ls.out_ch, train ? 0.0 : 1.0);
    lf.xhat = Tensor(b.n, ls.out_ch, ls.out_h(), ls.out_w());
    const double inv_count =
        1.0 / (static_cast<double>(b.n) * conv.h * conv.w);
    for (int c : ocs) {
      double mu, va;
      if (train) {
        double s1 = 0.0;
        for (int i = 0; i < b.n; ++i)
          for (int y = 0; y < conv.h; ++y)
            for (int x = 0; x < conv.w; ++x) s1 += conv.at(i, c, y, x);
        mu = s1 * inv_count;
        double s2 = 0.0;
        for (int i = 0; i < b.n; ++i)
          for (int y = 0; y < conv.h; ++y)
            for (int x = 0; x < conv.w; ++x) {
              const double d = conv.at(i, c, y, x) - mu;
              s2 += d * d;
            }
        va = s2 * inv_count;
      } else {
        mu = cl.run_mean[c];
        va = cl.run_var[c];
      }
      lf.mean[c] = mu;
      lf.var[c] = va;
      const double inv_sd = 1.0 / std::sqrt(va + kBnEps);
      for (int i = 0; i < b.n; ++i)
        for (int y = 0; y < conv.h; ++y)
          for (int x = 0; x < conv.w; ++x)
            lf.xhat.at(i, c, y, x) = (conv.at(i, c, y, x) - mu) * inv_sd;
    }

    // Scale/shift then the leaky rectifier, then the shortcut add.
    lf.chain = Tensor(b.n, ls.out_ch, conv.h, conv.w);
    for (int c : ocs) {
      const double g = cl.gamma[c], be = cl.beta[c];
      for (int i = 0; i < b.n; ++i)
        for (int y = 0; y < conv.h; ++y)
          for (int x = 0; x < conv.w; ++x) {
            const double pre = g * lf.xhat.at(i, c, y, x) + be;
            lf.chain.at(i, c, y, x) = pre > 0.0 ? pre : kLeakySlope * pre;
          }
    }
    live = ocs;
    if (ls.kind == LayerKind::BlockSecond) {
      const int src = f.input_of[li - 1];
      const Tensor& sh = src < 0 ? f.x0 : f.layers[src].chain;
      for (std::size_t t = 0; t < lf.chain.v.size(); ++t)
        lf.chain.v[t] += sh.v[t];
      std::vector<int> merged;
      std::set_union(live.begin(), live.end(), block_in_live.begin(),
                     block_in_live.end(), std::back_inserter(merged));
      live = std::move(merged);
    }

    f.executed.push_back(li);
    prev = li;
  }

  // Global average pool over the final value, then the affine head.
  const Tensor& last = prev < 0 ? f.x0 : f.layers[prev].chain;
  const int fd = m.feat_dim();
  f.feats.assign(static_cast<std::size_t>(b.n) * fd, 0.0);
  const double inv_hw = 1.0 / (static_cast<double>(last.h) * last.w);
  for (int i = 0; i < b.n; ++i)
    for (int c = 0; c < fd; ++c) {
      double s = 0.0;
      for (int y = 0; y < last.h; ++y)
        for (int x = 0; x < last.w; ++x) s += last.at(i, c, y, x);
      f.feats[static_cast<std::size_t>(i) * fd + c] = s * inv_hw;
    }
  f.logits.assign(static_cast<std::size_t>(b.n) * m.num_classes, 0.0);
  for (int i = 0; i < b.n; ++i)
    for (int k = 0; k < m.num_classes; ++k) {
      double s = m.head_b[k];
      for (int c = 0; c < fd; ++c)
        s += m.head_w[static_cast<std::size_t>(k) * fd + c] *
             f.feats[static_cast<std::size_t>(i) * fd + c];
      f.logits[static_cast<std::size_t>(i) * m.num_classes + k] = s;
    }
  return f;
}

double example_ce(const double* logits, int classes, int label) {
  double mx = logits[0];
  for (int k = 1; k < classes; ++k) mx = std::max(mx, logits[k]);
  double se = 0.0;
  for (int k = 0; k < classes; ++k) se += std::exp(logits[k] - mx);
  return mx + std::log(se) - logits[label];
}

ChildModel zeros_like_child(const ChildModel& m) {
  ChildModel z;
  z.spec = m.spec;
  z.num_classes = m.num_classes;
  z.convs.resize(m.convs.size());
  for (std::size_t i = 0; i < m.convs.size(); ++i) {
    z.convs[i].filter.assign(m.convs[i].filter.size(), 0.0);
    z.convs[i].gamma.assign(m.convs[i].gamma.size(), 0.0);
    z.convs[i].beta.assign(m.convs[i].beta.size(), 0.0);
    z.convs[i].run_mean.assign(m.convs[i].run_mean.size(), 0.0);
    z.convs[i].run_var.assign(m.convs[i].run_var.size(), 0.0);
  }
  z.head_w.assign(m.head_w.size(), 0.0);
  z.head_b.assign(m.head_b.size(), 0.0);
  return z;
}

void validate_batch(const ChildModel& m, const Batch& b) {
  if (b.n <= 0) throw std::invalid_argument("empty batch");
  const LayerSpec& first = m.spec.layers.front();
  const std::size_t need = static_cast<std::size_t>(b.n) * first.in_ch *
                           first.in_h * first.in_w;
  if (b.x.size() != need)
    throw std::invalid_argument("batch pixel buffer does not match the spec");
  if (b.y.size() != static_cast<std::size_t>(b.n))
    throw std::invalid_argument("batch label count mismatch");
  for (int y : b.y)
    if (y < 0 || y >= m.num_classes)
      throw std::invalid_argument("batch label out of range");
}

}  // namespace

NetworkSpec reference_child_spec() {
  NetworkSpec s;
  auto add = [&](LayerKind k, int kernel, int in_ch, int out_ch, int in_h,
                 int stride, std::optional<int> block,
                 std::optional<int> group) {
    LayerSpec l;
    l.id = static_cast<int>(s.layers.size());
    l.kind = k;
    l.kernel = kernel;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.in_h = l.in_w = in_h;
    l.stride = stride;
    l.block_id = block;
    l.group_id = group;
    s.layers.push_back(l);
    if (k == LayerKind::BlockFirst) s.s_frb.insert(l.id);
  };
  add(LayerKind::Ordinary, 3, 1, 16, 32, 1, {}, {});
  add(LayerKind::GroupFirst, 3, 16, 32, 32, 2, {}, 0);
  add(LayerKind::BlockFirst, 1, 32, 16, 16, 1, 0, 0);
  add(LayerKind::BlockSecond, 3, 16, 32, 16, 1, 0, 0);
  add(LayerKind::BlockFirst, 1, 32, 16, 16, 1, 1, 0);
  add(LayerKind::BlockSecond, 3, 16, 32, 16, 1, 1, 0);
  add(LayerKind::GroupFirst, 3, 32, 64, 16, 2, {}, 1);
  add(LayerKind::BlockFirst, 1, 64, 32, 8, 1, 2, 1);
  add(LayerKind::BlockSecond, 3, 32, 64, 8, 1, 2, 1);
  add(LayerKind::BlockFirst, 1, 64, 32, 8, 1, 3, 1);
  add(LayerKind::BlockSecond, 3, 32, 64, 8, 1, 3, 1);
  s.head_ids.insert(s.num_layers());  // classifier sentinel
  return s;
}

ChildModel build_child(const NetworkSpec& spec, int num_classes, Rng& rng) {
  const std::vector<std::string> errs = validate_network(spec);
  if (!errs.empty())
    throw std::invalid_argument("invalid network spec: " + errs.front());
  if (num_classes <= 1) throw std::invalid_argument("need at least 2 classes");
  ChildModel m;
  m.spec = spec;
  m.num_classes = num_classes;
  m.convs.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& ls = spec.layers[i];
    ConvLayer& cl = m.convs[i];
    const std::size_t nw = static_cast<std::size_t>(ls.out_ch) * ls.in_ch *
                           ls.kernel * ls.kernel;
    const double sd =
        std::sqrt(2.0 / (static_cast<double>(ls.in_ch) * ls.kernel * ls.kernel));
    cl.filter.resize(nw);
    for (double& w : cl.filter) w = rng.normal(0.0, sd);
    cl.gamma.assign(ls.out_ch, 1.0);
    cl.beta.assign(ls.out_ch, 0.0);
    cl.run_mean.assign(ls.out_ch, 0.0);
    cl.run_var.assign(ls.out_ch, 1.0);
  }
  m.head_w.assign(static_cast<std::size_t>(num_classes) * m.feat_dim(), 0.0);
  m.head_b.assign(num_classes, 0.0);
  return m;
}

u64 child_param_count(const ChildModel& m) {
  u64 n = 0;
  for (const ConvLayer& cl : m.convs)
    n += cl.filter.size() + cl.gamma.size() + cl.beta.size();
  return n + m.head_w.size() + m.head_b.size();
}

std::vector<double> flatten_child(const ChildModel& m) {
  std::vector<double> v;
  v.reserve(child_param_count(m));
  for (const ConvLayer& cl : m.convs) {
    v.insert(v.end(), cl.filter.begin(), cl.filter.end());
    v.insert(v.end(), cl.gamma.begin(), cl.gamma.end());
    v.insert(v.end(), cl.beta.begin(), cl.beta.end());
  }
  v.insert(v.end(), m.head_w.begin(), m.head_w.end());
  v.insert(v.end(), m.head_b.begin(), m.head_b.end());
  return v;
}

void assign_child(ChildModel& m, std::span<const double> theta) {
  if (theta.size() != child_param_count(m))
    throw std::invalid_argument("parameter vector length mismatch");
  std::size_t o = 0;
  auto take = [&](std::vector<double>& dst) {
    std::copy_n(theta.begin() + o, dst.size(), dst.begin());
    o += dst.size();
  };
  for (ConvLayer& cl : m.convs) {
    take(cl.filter);
    take(cl.gamma);
    take(cl.beta);
  }
  take(m.head_w);
  take(m.head_b);
}

std::vector<std::vector<double>> bn_gammas(const ChildModel& m) {
  std::vector<std::vector<double>> g;
  g.reserve(m.convs.size());
  for (const ConvLayer& cl : m.convs) g.push_back(cl.gamma);
  return g;
}

std::vector<LayerWeightsRef> weight_refs(ChildModel& m) {
  std::vector<LayerWeightsRef> refs;
  refs.reserve(m.convs.size());
  for (ConvLayer& cl : m.convs)
    refs.push_back({std::span<double>(cl.filter), std::span<double>(cl.gamma),
                    std::span<double>(cl.beta)});
  return refs;
}

Batch make_batch(const DataSplit& d, std::span<const int> idx) {
  Batch b;
  b.n = static_cast<int>(idx.size());
  b.x.resize(idx.size() * d.image_size());
  b.y.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= d.count())
      throw std::invalid_argument("batch index out of range");
    const std::uint8_t* src = d.pixels.data() + d.image_size() * idx[i];
    double* dst = b.x.data() + d.image_size() * i;
    for (std::size_t t = 0; t < d.image_size(); ++t)
      dst[t] = static_cast<double>(src[t]) / 255.0;
    b.y[i] = d.labels[idx[i]];
  }
  return b;
}

void commit_bn_stats(ChildModel& m, const BnStats& s) {
  if (s.mean.size() != m.convs.size() || s.var.size() != m.convs.size())
    throw std::invalid_argument("statistics layer count mismatch");
  for (std::size_t i = 0; i < m.convs.size(); ++i) {
    ConvLayer& cl = m.convs[i];
    if (s.mean[i].size() != cl.run_mean.size() ||
        s.var[i].size() != cl.run_var.size())
      throw std::invalid_argument("statistics channel count mismatch");
    for (std::size_t c = 0; c < cl.run_mean.size(); ++c) {
      cl.run_mean[c] =
          kBnMomentum * cl.run_mean[c] + (1.0 - kBnMomentum) * s.mean[i][c];
      cl.run_var[c] =
          kBnMomentum * cl.run_var[c] + (1.0 - kBnMomentum) * s.var[i][c];
    }
  }
}

double child_loss(const ChildModel& m, const Batch& b, bool train,
                  ChildModel* grad, BnStats* stats,
                  std::vector<std::vector<double>>* bn_capture,
                  const PruneMask* mask_hint) {
  validate_batch(m, b);
  if (train && mask_hint)
    throw std::invalid_argument(
        "mask skipping is an inference-mode optimization");
  if (grad && mask_hint)
    throw std::invalid_argument(
        "mask skipping applies to evaluation-only passes");
  if (mask_hint) check_mask(m.spec, *mask_hint);

  Forward f = run_forward(m, b, train, mask_hint);

  if (stats) {
    stats->mean.clear();
    stats->var.clear();
    for (int li = 0; li < m.spec.num_layers(); ++li) {
      if (f.layers[li].executed) {
        stats->mean.push_back(f.layers[li].mean);
        stats->var.push_back(f.layers[li].var);
      } else {
        stats->mean.push_back(m.convs[li].run_mean);
        stats->var.push_back(m.convs[li].run_var);
      }
    }
  }
  if (bn_capture) {
    bn_capture->clear();
    for (int li = 0; li < m.spec.num_layers(); ++li) {
      const LayerFwd& lf = f.layers[li];
      if (!lf.executed) {
        bn_capture->emplace_back();
        continue;
      }
      std::vector<double> y(lf.xhat.v.size());
      const ConvLayer& cl = m.convs[li];
      for (int i = 0; i < lf.xhat.n; ++i)
        for (int c = 0; c < lf.xhat.c; ++c)
          for (int yy = 0; yy < lf.xhat.h; ++yy)
            for (int xx = 0; xx < lf.xhat.w; ++xx)
              y[((static_cast<std::size_t>(i) * lf.xhat.c + c) * lf.xhat.h +
                 yy) * lf.xhat.w + xx] =
                  cl.gamma[c] * lf.xhat.at(i, c, yy, xx) + cl.beta[c];
      bn_capture->push_back(std::move(y));
    }
  }

  const int classes = m.num_classes;
  double loss = 0.0;
  for (int i = 0; i < b.n; ++i)
    loss += example_ce(f.logits.data() + static_cast<std::size_t>(i) * classes,
                       classes, b.y[i]);
  loss /= b.n;

  if (!grad) return loss;
  *grad = zeros_like_child(m);

  // Softmax cross-entropy: dlogit = (p - onehot) / n.
  const int fd = m.feat_dim();
  std::vector<double> dlogits(f.logits.size());
  for (int i = 0; i < b.n; ++i) {
    const double* lg = f.logits.data() + static_cast<std::size_t>(i) * classes;
    double mx = lg[0];
    for (int k = 1; k < classes; ++k) mx = std::max(mx, lg[k]);
    double se = 0.0;
    for (int k = 0; k < classes; ++k) se += std::exp(lg[k] - mx);
    for (int k = 0; k < classes; ++k) {
      double p = std::exp(lg[k] - mx) / se;
      dlogits[static_cast<std::size_t>(i) * classes + k] =
          (p - (k == b.y[i] ? 1.0 : 0.0)) / b.n;
    }
  }
  std::vector<double> dfeat(f.feats.size(), 0.0);
  for (int i = 0; i < b.n; ++i)
    for (int k = 0; k < classes; ++k) {
      const double g = dlogits[static_cast<std::size_t>(i) * classes + k];
      grad->head_b[k] += g;
      for (int c = 0; c < fd; ++c) {
        grad->head_w[static_cast<std::size_t>(k) * fd + c] +=
            g * f.feats[static_cast<std::size_t>(i) * fd + c];
        dfeat[static_cast<std::size_t>(i) * fd + c] +=
            g * m.head_w[static_cast<std::size_t>(k) * fd + c];
      }
    }

  if (f.executed.empty()) return loss;

  // Gradients w.r.t. each layer's outgoing value, filled as the reverse walk
  // reaches consumers.
  std::vector<Tensor> dchain(m.spec.num_layers());
  const int last = f.executed.back();
  {
    const Tensor& lc = f.layers[last].chain;
    dchain[last] = Tensor(lc.n, lc.c, lc.h, lc.w);
    const double inv_hw = 1.0 / (static_cast<double>(lc.h) * lc.w);
    for (int i = 0; i < b.n; ++i)
      for (int c = 0; c < fd; ++c) {
        const double g =
            dfeat[static_cast<std::size_t>(i) * fd + c] * inv_hw;
        for (int y = 0; y < lc.h; ++y)
          for (int x = 0; x < lc.w; ++x) dchain[last].at(i, c, y, x) = g;
      }
  }

  Tensor dx0(f.x0.n, f.x0.c, f.x0.h, f.x0.w);
  auto sink_of = [&](int src) -> Tensor& {
    if (src < 0) return dx0;
    if (dchain[src].empty()) {
      const Tensor& t = f.layers[src].chain;
      dchain[src] = Tensor(t.n, t.c, t.h, t.w);
    }
    return dchain[src];
  };

  for (auto it = f.executed.rbegin(); it != f.executed.rend(); ++it) {
    const int li = *it;
    const LayerSpec& ls = m.spec.layers[li];
    const ConvLayer& cl = m.convs[li];
    const LayerFwd& lf = f.layers[li];
    Tensor& dc = dchain[li];

    // The shortcut branch of a residual pair feeds the block input directly.
    if (ls.kind == LayerKind::BlockSecond) {
      Tensor& sh = sink_of(f.input_of[li - 1]);
      for (std::size_t t = 0; t < dc.v.size(); ++t) sh.v[t] += dc.v[t];
    }

    // Leaky rectifier: the sign of the pre-activation recovers the slope.
    Tensor dy(dc.n, dc.c, dc.h, dc.w);
    for (int c = 0; c < dc.c; ++c) {
      const double g = cl.gamma[c], be = cl.beta[c];
      for (int i = 0; i < dc.n; ++i)
        for (int y = 0; y < dc.h; ++y)
          for (int x = 0; x < dc.w; ++x) {
            const double pre = g * lf.xhat.at(i, c, y, x) + be;
            dy.at(i, c, y, x) =
                dc.at(i, c, y, x) * (pre > 0.0 ? 1.0 : kLeakySlope);
          }
    }

    // Normalization backward.
    ConvLayer& gcl = grad->convs[li];
    Tensor dconv(dc.n, dc.c, dc.h, dc.w);
    const double count = static_cast<double>(b.n) * dc.h * dc.w;
    for (int c = 0; c < dc.c; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < dc.n; ++i)
        for (int y = 0; y < dc.h; ++y)
          for (int x = 0; x < dc.w; ++x) {
            const double g = dy.at(i, c, y, x);
            sum_dy += g;
            sum_dy_xhat += g * lf.xhat.at(i, c, y, x);
          }
      gcl.gamma[c] += sum_dy_xhat;
      gcl.beta[c] += sum_dy;
      const double inv_sd = 1.0 / std::sqrt(lf.var[c] + kBnEps);
      const double ga = cl.gamma[c];
      if (train) {
        for (int i = 0; i < dc.n; ++i)
          for (int y = 0; y < dc.h; ++y)
            for (int x = 0; x < dc.w; ++x)
              dconv.at(i, c, y, x) =
                  ga * inv_sd *
                  (dy.at(i, c, y, x) - sum_dy / count -
                   lf.xhat.at(i, c, y, x) * sum_dy_xhat / count);
      } else {
        for (int i = 0; i < dc.n; ++i)
          for (int y = 0; y < dc.h; ++y)
            for (int x = 0; x < dc.w; ++x)
              dconv.at(i, c, y, x) = ga * inv_sd * dy.at(i, c, y, x);
      }
    }

    const int src = f.input_of[li];
    const Tensor& in = src < 0 ? f.x0 : f.layers[src].chain;
    Tensor& din = sink_of(src);
    conv_backward(ls, cl.filter, in, dconv, gcl.filter, din);
  }
  return loss;
}

namespace {

std::vector<int> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.next_u64() % i;
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace

ChildModel pretrain(const NetworkSpec& spec, const Dataset& data,
                    const TrainConfig& cfg, Rng& rng) {
  check_split(data.train);
  check_split(data.test);
  if (data.train.count() == 0)
    throw std::invalid_argument("cannot train on an empty split");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0)
    throw std::invalid_argument("training schedule must be positive");

  ChildModel m = build_child(spec, data.train.num_classes, rng);
  AdamState adam;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<int> idx = shuffled_indices(data.train.count(), rng);
    for (std::size_t off = 0; off < idx.size(); off += cfg.batch_size) {
      const std::size_t end = std::min(idx.size(), off + cfg.batch_size);
      const Batch b = make_batch(
          data.train, std::span<const int>(idx.data() + off, end - off));
      ChildModel grad;
      BnStats stats;
      const double loss = child_loss(m, b, true, &grad, &stats);
      if (!std::isfinite(loss))
        throw NumericalFault("training loss is not finite");
      std::vector<double> theta = flatten_child(m);
      std::vector<double> g = flatten_child(grad);
      for (double v : g)
        if (!std::isfinite(v))
          throw NumericalFault("training gradient is not finite");
      commit_bn_stats(m, stats);
      adam_step(theta, g, adam, cfg.adam);
      assign_child(m, theta);
    }
  }
  return m;
}

ChildModel retrain(const NetworkSpec& pruned_spec, const Dataset& data,
                   const TrainConfig& cfg, Rng& rng) {
  return pretrain(pruned_spec, data, cfg, rng);
}

ChildModel fine_tune(const ChildModel& model, const PruneMask& mask,
                     const Dataset& data, const TrainConfig& cfg, u64 seed) {
  check_mask(model.spec, mask);
  check_split(data.train);
  if (data.train.count() == 0)
    throw std::invalid_argument("cannot fine-tune on an empty split");
  if (cfg.batch_size <= 0)
    throw std::invalid_argument("training schedule must be positive");

  ChildModel m = model;
  const int sentinel = m.spec.num_layers();
  const bool train_head = m.spec.head_ids.count(sentinel) > 0;
  bool conv_heads = false;
  for (int id : m.spec.head_ids)
    if (id < sentinel) conv_heads = true;

  Rng rng(seed);
  const std::vector<int> idx = shuffled_indices(data.train.count(), rng);
  AdamState adam;
  const int fd = m.feat_dim();
  const int classes = m.num_classes;

  for (std::size_t off = 0; off < idx.size(); off += cfg.batch_size) {
    const std::size_t end = std::min(idx.size(), off + cfg.batch_size);
    const Batch b = make_batch(
        data.train, std::span<const int>(idx.data() + off, end - off));

    if (!conv_heads) {
      // Frozen trunk: one inference forward gives the features; only the
      // affine head needs gradients.
      const Forward f = run_forward(m, b, false, &mask);
      double loss = 0.0;
      std::vector<double> dw(m.head_w.size(), 0.0), db(m.head_b.size(), 0.0);
      for (int i = 0; i < b.n; ++i) {
        const double* lg =
            f.logits.data() + static_cast<std::size_t>(i) * classes;
        loss += example_ce(lg, classes, b.y[i]);
        double mx = lg[0];
        for (int k = 1; k < classes; ++k) mx = std::max(mx, lg[k]);
        double se = 0.0;
        for (int k = 0; k < classes; ++k) se += std::exp(lg[k] - mx);
        for (int k = 0; k < classes; ++k) {
          const double dl =
              (std::exp(lg[k] - mx) / se - (k == b.y[i] ? 1.0 : 0.0)) / b.n;
          db[k] += dl;
          for (int c = 0; c < fd; ++c)
            dw[static_cast<std::size_t>(k) * fd + c] +=
                dl * f.feats[static_cast<std::size_t>(i) * fd + c];
        }
      }
      loss /= b.n;
      if (!std::isfinite(loss))
        throw NumericalFault("fine-tune loss is not finite");
      if (train_head) {
        std::vector<double> theta(m.head_w);
        theta.insert(theta.end(), m.head_b.begin(), m.head_b.end());
        std::vector<double> g(dw);
        g.insert(g.end(), db.begin(), db.end());
        adam_step(theta, g, adam, cfg.adam);
        std::copy_n(theta.begin(), m.head_w.size(), m.head_w.begin());
        std::copy_n(theta.begin() + m.head_w.size(), m.head_b.size(),
                    m.head_b.begin());
      }
    } else {
      // Conv layers among the fine-tune targets: full inference-mode
      // backward, then freeze everything not listed.
      ChildModel grad;
      const double loss = child_loss(m, b, false, &grad);
      if (!std::isfinite(loss))
        throw NumericalFault("fine-tune loss is not finite");
      for (int li = 0; li < sentinel; ++li) {
        if (m.spec.head_ids.count(li)) continue;
        std::fill(grad.convs[li].filter.begin(), grad.convs[li].filter.end(),
                  0.0);
        std::fill(grad.convs[li].gamma.begin(), grad.convs[li].gamma.end(),
                  0.0);
        std::fill(grad.convs[li].beta.begin(), grad.convs[li].beta.end(), 0.0);
      }
      if (!train_head) {
        std::fill(grad.head_w.begin(), grad.head_w.end(), 0.0);
        std::fill(grad.head_b.begin(), grad.head_b.end(), 0.0);
      }
      // Masked entries never move, whatever the update rule.
      std::vector<LayerWeightsRef> grefs = weight_refs(grad);
      apply_mask(m.spec, mask, grefs);
      std::vector<double> theta = flatten_child(m);
      std::vector<double> g = flatten_child(grad);
      adam_step(theta, g, adam, cfg.adam);
      assign_child(m, theta);
    }

    // Re-zero after every step so zero preservation survives any update.
    std::vector<LayerWeightsRef> refs = weight_refs(m);
    apply_mask(m.spec, mask, refs);
  }
  return m;
}

namespace {

double split_loss(const ChildModel& m, const DataSplit& d,
                  const PruneMask* hint) {
  if (d.count() == 0)
    throw std::invalid_argument("cannot evaluate an empty split");
  check_split(d);
  std::vector<double> losses;
  losses.reserve(d.count());
  constexpr int kChunk = 64;
  std::vector<int> idx(kChunk);
  for (std::size_t off = 0; off < d.count(); off += kChunk) {
    const std::size_t end = std::min(d.count(), off + kChunk);
    idx.resize(end - off);
    std::iota(idx.begin(), idx.end(), static_cast<int>(off));
    const Batch b = make_batch(d, idx);
    const Forward f = run_forward(m, b, false, hint);
    for (int i = 0; i < b.n; ++i)
      losses.push_back(example_ce(
          f.logits.data() + static_cast<std::size_t>(i) * m.num_classes,
          m.num_classes, b.y[i]));
  }
  // Inference is per-example independent, so the multiset of losses does not
  // depend on the split's order; sorting fixes the summation order too.
  std::sort(losses.begin(), losses.end());
  double s = 0.0;
  for (double v : losses) s += v;
  return s / static_cast<double>(losses.size());
}

}  // namespace

double test_loss(const ChildModel& m, const DataSplit& d) {
  return split_loss(m, d, nullptr);
}

double test_loss(const ChildModel& m, const DataSplit& d,
                 const PruneMask& mask_hint) {
  check_mask(m.spec, mask_hint);
  return split_loss(m, d, &mask_hint);
}

double accuracy(const ChildModel& m, const DataSplit& d) {
  if (d.count() == 0)
    throw std::invalid_argument("cannot evaluate an empty split");
  check_split(d);
  std::size_t hits = 0;
  constexpr int kChunk = 64;
  std::vector<int> idx(kChunk);
  for (std::size_t off = 0; off < d.count(); off += kChunk) {
    const std::size_t end = std::min(d.count(), off + kChunk);
    idx.resize(end - off);
    std::iota(idx.begin(), idx.end(), static_cast<int>(off));
    const Batch b = make_batch(d, idx);
    const Forward f = run_forward(m, b, false, nullptr);
    for (int i = 0; i < b.n; ++i) {
      const double* lg =
          f.logits.data() + static_cast<std::size_t>(i) * m.num_classes;
      int best = 0;
      for (int k = 1; k < m.num_classes; ++k)
        if (lg[k] > lg[best]) best = k;
      if (best == b.y[i]) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(d.count());
}

ReferenceEvaluator::ReferenceEvaluator(ChildModel pretrained, Dataset data,
                                       TrainConfig ft_cfg)
    : base_(std::move(pretrained)),
      data_(std::move(data)),
      cfg_(ft_cfg),
      gammas_(bn_gammas(base_)) {
  check_split(data_.train);
  check_split(data_.test);
}

EvalResult ReferenceEvaluator::evaluate(const PruningAction& action,
                                        u64 seed) {
  check_action(base_.spec, action);
  const PruneMask mask = resolve_mask(base_.spec, action, gammas_);
  ChildModel masked = base_;
  std::vector<LayerWeightsRef> refs = weight_refs(masked);
  apply_mask(base_.spec, mask, refs);
  const ChildModel tuned = fine_tune(masked, mask, data_, cfg_, seed);
  return {test_loss(tuned, data_.test, mask), total_flops(base_.spec, mask)};
}

double synthetic_loss(const SyntheticLandscape& l, const PruningAction& a) {
  if (a.size() != l.optimum.size())
    throw std::invalid_argument("action length does not match the landscape");
  if (!l.weights.empty() && l.weights.size() != l.optimum.size())
    throw std::invalid_argument("weight vector length mismatch");
  auto coord = [](const ActionElement& e) {
    return e.is_prune() ? 1.0 : e.value;
  };
  double loss = l.base_loss;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double w = l.weights.empty() ? 1.0 : l.weights[i];
    loss += w * std::abs(coord(a[i]) - coord(l.optimum[i]));
  }
  return loss;
}

EvalResult synthetic_eval(const SyntheticLandscape& l,
                          const PruningAction& a) {
  check_action(l.spec, a);
  std::vector<std::vector<double>> unit;
  unit.reserve(l.spec.layers.size());
  for (const LayerSpec& ls : l.spec.layers)
    unit.emplace_back(ls.out_ch, 1.0);
  const PruneMask mask = resolve_mask(l.spec, a, unit);
  return {synthetic_loss(l, a), total_flops(l.spec, mask)};
}

SyntheticEvaluator::SyntheticEvaluator(SyntheticLandscape l)
    : land_(std::move(l)) {
  const std::vector<std::string> errs = validate_network(land_.spec);
  if (!errs.empty())
    throw std::invalid_argument("invalid landscape spec: " + errs.front());
  check_action(land_.spec, land_.optimum);
}

EvalResult SyntheticEvaluator::evaluate(const PruningAction& action,
                                        u64 /*seed*/) {
  return synthetic_eval(land_, action);
}

}  // namespace abcp
