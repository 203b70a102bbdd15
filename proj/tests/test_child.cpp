#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "abcp/child.hpp"
#include "abcp/dataset.hpp"
#include "abcp/protocol.hpp"
#include "abcp/serialize.hpp"
#include "support.hpp"

namespace {

using namespace abcp;

LayerSpec layer(int id, LayerKind k, int kernel, int in_ch, int out_ch,
                int side, int stride, std::optional<int> block,
                std::optional<int> group) {
  LayerSpec l;
  l.id = id;
  l.kind = k;
  l.kernel = kernel;
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.in_h = l.in_w = side;
  l.stride = stride;
  l.block_id = block;
  l.group_id = group;
  return l;
}

// Stem, stride-2 group entry, one residual block; every layer flavor in
// 164 trainable parameters.
NetworkSpec micro4() {
  NetworkSpec s;
  s.layers = {
      layer(0, LayerKind::Ordinary, 3, 1, 2, 6, 1, {}, {}),
      layer(1, LayerKind::GroupFirst, 3, 2, 3, 6, 2, {}, 0),
      layer(2, LayerKind::BlockFirst, 1, 3, 2, 3, 1, 0, 0),
      layer(3, LayerKind::BlockSecond, 3, 2, 3, 3, 1, 0, 0),
  };
  s.s_frb = {2};
  s.head_ids = {4};
  return s;
}

NetworkSpec bn1() {
  NetworkSpec s;
  s.layers = {layer(0, LayerKind::Ordinary, 3, 1, 4, 8, 1, {}, {})};
  s.head_ids = {1};
  return s;
}

Batch random_batch(const NetworkSpec& spec, int n, Rng& rng,
                   double sd = 1.0) {
  const LayerSpec& f = spec.layers.front();
  Batch b;
  b.n = n;
  b.x.resize(static_cast<std::size_t>(n) * f.in_ch * f.in_h * f.in_w);
  for (double& v : b.x) v = rng.normal(0.0, sd);
  b.y.resize(n);
  for (int i = 0; i < n; ++i) b.y[i] = i % 3;
  return b;
}

DataSplit random_split(int count, int side, Rng& rng) {
  DataSplit d;
  d.channels = 1;
  d.height = side;
  d.width = side;
  d.num_classes = 3;
  d.pixels.resize(static_cast<std::size_t>(count) * side * side);
  for (std::uint8_t& p : d.pixels)
    p = static_cast<std::uint8_t>(rng.next_u64() & 0xFF);
  d.labels.resize(count);
  for (int i = 0; i < count; ++i)
    d.labels[i] = static_cast<std::uint8_t>(i % 3);
  return d;
}

void randomize_model(ChildModel& m, Rng& rng) {
  for (ConvLayer& cl : m.convs) {
    for (double& g : cl.gamma) g = rng.uniform(0.6, 1.5);
    for (double& b : cl.beta) b = rng.uniform(-0.3, 0.3);
    for (double& v : cl.run_mean) v = rng.uniform(-0.2, 0.2);
    for (double& v : cl.run_var) v = rng.uniform(0.5, 1.5);
  }
  for (double& v : m.head_w) v = rng.uniform(-0.5, 0.5);
  for (double& v : m.head_b) v = rng.uniform(-0.2, 0.2);
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
  const NetworkSpec s = micro4();
  REQUIRE(validate_network(s).empty());
  Rng rng(314);
  ChildModel m = build_child(s, 3, rng);
  randomize_model(m, rng);
  const Batch b = random_batch(s, 3, rng);

  for (const bool train : {true, false}) {
    CAPTURE(train);
    ChildModel grad;
    child_loss(m, b, train, &grad);
    const std::vector<double> an = flatten_child(grad);
    const std::vector<double> theta = flatten_child(m);
    REQUIRE(an.size() == theta.size());
    CHECK(theta.size() == 164);

    ChildModel probe = m;
    int checked = 0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double h = 1e-4;
      std::vector<double> t = theta;
      t[i] = theta[i] + h;
      assign_child(probe, t);
      const double lp = child_loss(probe, b, train);
      t[i] = theta[i] - h;
      assign_child(probe, t);
      const double lm = child_loss(probe, b, train);
      const double fd = (lp - lm) / (2.0 * h);
      const double scale = std::max(std::abs(fd), std::abs(an[i]));
      if (scale >= 1e-6) {
        CHECK(std::abs(an[i] - fd) <= 1e-3 * scale);
        ++checked;
      } else {
        CHECK(std::abs(an[i] - fd) <= 1e-9);
      }
    }
    CHECK(checked > 100);
  }
}

TEST_CASE("training-mode normalization pins batch mean and spread") {
  const NetworkSpec s = bn1();
  REQUIRE(validate_network(s).empty());
  Rng rng(99);
  ChildModel m = build_child(s, 3, rng);
  m.convs[0].gamma = {1.2, -0.7, 1.0, 2.0};
  m.convs[0].beta = {-0.3, 0.1, 0.0, 0.5};
  const Batch b = random_batch(s, 4, rng, 2.0);

  std::vector<std::vector<double>> cap;
  child_loss(m, b, true, nullptr, nullptr, &cap);
  REQUIRE(cap.size() == 1);
  const int C = 4, H = 8, W = 8, n = 4;
  REQUIRE(cap[0].size() == static_cast<std::size_t>(n * C * H * W));
  for (int c = 0; c < C; ++c) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          mean += cap[0][((static_cast<std::size_t>(i) * C + c) * H + y) * W + x];
    mean /= n * H * W;
    double var = 0.0;
    for (int i = 0; i < n; ++i)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double d =
              cap[0][((static_cast<std::size_t>(i) * C + c) * H + y) * W + x] -
              mean;
          var += d * d;
        }
    var /= n * H * W;
    CHECK(std::abs(mean - m.convs[0].beta[c]) <= 1e-5);
    CHECK(std::abs(std::sqrt(var) - std::abs(m.convs[0].gamma[c])) <= 1e-5);
  }
}

TEST_CASE("a fresh model emits uniform class scores") {
  Rng rng(5);
  ChildModel m = build_child(reference_child_spec(), 3, rng);
  Rng drng(17);
  const DataSplit d = make_shapes_split(6, drng);

  std::vector<int> idx(d.count());
  std::iota(idx.begin(), idx.end(), 0);
  const double l = child_loss(m, make_batch(d, idx), false);
  CHECK(l == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(test_loss(m, d) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("evaluation loss contracts") {
  const NetworkSpec s = bn1();
  Rng rng(8);
  ChildModel m = build_child(s, 3, rng);
  Rng drng(9);
  DataSplit d = random_split(10, 8, drng);

  SUBCASE("empty split is rejected") {
    DataSplit empty = d;
    empty.pixels.clear();
    empty.labels.clear();
    CHECK_THROWS_AS(test_loss(m, empty), std::invalid_argument);
    CHECK_THROWS_AS(accuracy(m, empty), std::invalid_argument);
  }

  SUBCASE("evaluating twice gives the identical value") {
    randomize_model(m, rng);
    const double a = test_loss(m, d);
    const double b = test_loss(m, d);
    CHECK(a == b);
  }

  SUBCASE("the value ignores the order of the split") {
    randomize_model(m, rng);
    const double before = test_loss(m, d);
    DataSplit shuffled = d;
    std::vector<int> perm(d.count());
    std::iota(perm.begin(), perm.end(), 0);
    Rng prng(123);
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[prng.next_u64() % i]);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      std::copy_n(d.pixels.begin() + d.image_size() * perm[i], d.image_size(),
                  shuffled.pixels.begin() + d.image_size() * i);
      shuffled.labels[i] = d.labels[perm[i]];
    }
    CHECK(test_loss(m, shuffled) == before);
  }

  SUBCASE("a saturated correct class drives the loss to zero") {
    for (std::uint8_t& l : d.labels) l = 0;
    m.head_b = {40.0, 0.0, 0.0};
    CHECK(test_loss(m, d) >= 0.0);
    CHECK(test_loss(m, d) < 1e-12);
  }
}

TEST_CASE("normalization bookkeeping") {
  SUBCASE("fresh scale vectors are all ones with layer widths") {
    Rng rng(3);
    const ChildModel m = build_child(reference_child_spec(), 3, rng);
    const std::vector<std::vector<double>> g = bn_gammas(m);
    REQUIRE(g.size() == m.spec.layers.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      CHECK(g[i].size() ==
            static_cast<std::size_t>(m.spec.layers[i].out_ch));
      for (double v : g[i]) CHECK(v == 1.0);
    }
  }

  SUBCASE("running statistics blend with the kept fraction") {
    Rng rng(4);
    ChildModel m = build_child(bn1(), 3, rng);
    m.convs[0].run_mean = {2.0, 0.0, 0.0, 0.0};
    m.convs[0].run_var = {3.0, 1.0, 1.0, 1.0};
    BnStats s;
    s.mean = {{4.0, 0.0, 0.0, 0.0}};
    s.var = {{5.0, 1.0, 1.0, 1.0}};
    commit_bn_stats(m, s);
    CHECK(m.convs[0].run_mean[0] == 0.9 * 2.0 + 0.1 * 4.0);
    CHECK(m.convs[0].run_var[0] == 0.9 * 3.0 + 0.1 * 5.0);
    CHECK(m.convs[0].run_mean[1] == 0.0);
    CHECK(m.convs[0].run_var[1] == 1.0);
  }
}

TEST_CASE("shape container round trip") {
  const Dataset ds = make_shapes_dataset(12, 6, 7);
  REQUIRE(ds.train.count() == 12);
  REQUIRE(ds.test.count() == 6);
  CHECK_NOTHROW(check_split(ds.train));
  CHECK_NOTHROW(check_split(ds.test));

  const std::string dir =
      (std::filesystem::temp_directory_path() / "abcp_data_rt").string();
  std::filesystem::remove_all(dir);
  save_dataset(dir, ds);
  const Dataset back = load_dataset(dir);
  CHECK(back == ds);

  SUBCASE("same seed regenerates the identical dataset") {
    CHECK(make_shapes_dataset(12, 6, 7) == ds);
    CHECK(make_shapes_dataset(12, 6, 8) != ds);
  }

  SUBCASE("a foreign magic is refused") {
    std::fstream f(dir + "/train.bin",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
    f.close();
    CHECK_THROWS_AS(load_split(dir + "/train.bin"), VersionMismatch);
  }

  SUBCASE("a foreign manifest schema is refused") {
    nlohmann::json manifest = read_json_file(dir + "/manifest.json");
    manifest["schema"] = "abcp-data/999";
    write_json_file(dir + "/manifest.json", manifest);
    CHECK_THROWS_AS(load_dataset(dir), VersionMismatch);
  }
}

TEST_CASE("model checkpoints round-trip every value") {
  Rng rng(21);
  ChildModel m = build_child(micro4(), 3, rng);
  randomize_model(m, rng);
  for (double& v : m.convs[2].filter) v = rng.normal(0.0, 0.3);

  const std::string path =
      (std::filesystem::temp_directory_path() / "abcp_child_rt.json").string();
  save_child_model(path, m);
  const ChildModel back = load_child_model(path);
  CHECK(back == m);

  SUBCASE("a foreign schema is refused") {
    nlohmann::json j = read_json_file(path);
    j["schema"] = "abcp-ctrl/1";
    write_json_file(path, j);
    CHECK_THROWS_AS(load_child_model(path), VersionMismatch);
  }
}

TEST_CASE("masked channels cost nothing and change nothing") {
  const NetworkSpec s = reference_child_spec();
  Rng rng(31);
  ChildModel m = build_child(s, 3, rng);
  randomize_model(m, rng);

  // Prune the second block of group A outright, thin everything else.
  PruningAction a(s.layers.size(), ActionElement::ratio(0.45));
  a[1] = ActionElement::ratio(0.225);
  a[3] = ActionElement::ratio(0.225);
  a[4] = ActionElement::block(1);
  a[5] = ActionElement::block(1);
  a[6] = ActionElement::ratio(0.45);
  a[8] = ActionElement::ratio(0.45);
  a[10] = ActionElement::ratio(0.45);
  REQUIRE_NOTHROW(check_action(s, a));
  REQUIRE(enforce_group_constraint(s, a) == a);

  const PruneMask mask = resolve_mask(s, a, bn_gammas(m));
  std::vector<LayerWeightsRef> refs = weight_refs(m);
  apply_mask(s, mask, refs);

  Rng drng(32);
  const DataSplit d = make_shapes_split(8, drng);
  const double honest = test_loss(m, d);
  const double skipped = test_loss(m, d, mask);
  CHECK(honest == skipped);
}

TEST_CASE("head-only fine-tuning moves nothing but the head") {
  const NetworkSpec s = reference_child_spec();
  Rng rng(41);
  ChildModel m = build_child(s, 3, rng);
  randomize_model(m, rng);

  PruningAction a(s.layers.size(), ActionElement::ratio(0.45));
  a[2] = ActionElement::block(1);
  a[3] = ActionElement::block(1);
  a[1] = a[5] = ActionElement::ratio(0.675);
  a[6] = a[8] = a[10] = ActionElement::ratio(0.225);
  REQUIRE_NOTHROW(check_action(s, a));
  REQUIRE(enforce_group_constraint(s, a) == a);
  const PruneMask mask = resolve_mask(s, a, bn_gammas(m));
  std::vector<LayerWeightsRef> refs = weight_refs(m);
  apply_mask(s, mask, refs);

  Dataset data = make_shapes_dataset(48, 8, 51);
  TrainConfig cfg;
  cfg.batch_size = 16;
  const ChildModel tuned = fine_tune(m, mask, data, cfg, 5);

  // Trunk untouched, bit for bit: weights, scales, running statistics.
  CHECK(tuned.convs == m.convs);
  CHECK(tuned.head_w != m.head_w);

  // Masked weights are still exactly zero: re-masking is a no-op.
  ChildModel again = tuned;
  std::vector<LayerWeightsRef> arefs = weight_refs(again);
  apply_mask(s, mask, arefs);
  CHECK(again == tuned);

  // The evaluation epoch is a pure function of its seed.
  const ChildModel tuned2 = fine_tune(m, mask, data, cfg, 5);
  CHECK(tuned2 == tuned);
  const ChildModel other = fine_tune(m, mask, data, cfg, 6);
  CHECK(other.head_w != tuned.head_w);
}

TEST_CASE("fine-tuning listed conv layers freezes the rest") {
  NetworkSpec s = micro4();
  s.head_ids = {0, 4};  // stem plus classifier
  Rng rng(61);
  ChildModel m = build_child(s, 3, rng);
  randomize_model(m, rng);

  PruningAction a{ActionElement::ratio(0.45), ActionElement::ratio(0.0),
                  ActionElement::ratio(0.45), ActionElement::ratio(0.0)};
  REQUIRE_NOTHROW(check_action(s, a));
  const PruneMask mask = resolve_mask(s, a, bn_gammas(m));
  std::vector<LayerWeightsRef> refs = weight_refs(m);
  apply_mask(s, mask, refs);

  Dataset data;
  Rng drng(62);
  data.train = random_split(24, 6, drng);
  data.test = random_split(6, 6, drng);
  TrainConfig cfg;
  cfg.batch_size = 8;
  const ChildModel tuned = fine_tune(m, mask, data, cfg, 9);

  CHECK(tuned.convs[0].filter != m.convs[0].filter);  // listed layer moved
  CHECK(tuned.convs[1] == m.convs[1]);
  CHECK(tuned.convs[2] == m.convs[2]);
  CHECK(tuned.convs[3] == m.convs[3]);
  CHECK(tuned.head_w != m.head_w);
  // Running statistics never move during the frozen-trunk epoch.
  CHECK(tuned.convs[0].run_mean == m.convs[0].run_mean);
  CHECK(tuned.convs[0].run_var == m.convs[0].run_var);

  // Masked entries of the trained layer held at zero through every step.
  ChildModel again = tuned;
  std::vector<LayerWeightsRef> arefs = weight_refs(again);
  apply_mask(s, mask, arefs);
  CHECK(again == tuned);
}

TEST_CASE("pseudo-loss landscape evaluator") {
  const NetworkSpec s = micro4();
  SyntheticLandscape land;
  land.spec = s;
  land.optimum = {ActionElement::ratio(0.45), ActionElement::ratio(0.0),
                  ActionElement::block(1), ActionElement::block(1)};
  land.weights = {1.0, 2.0, 3.0, 0.5};
  land.base_loss = 0.25;

  SUBCASE("the optimum attains the base loss and others sit above it") {
    CHECK(synthetic_loss(land, land.optimum) == 0.25);
    PruningAction off = land.optimum;
    off[0] = ActionElement::ratio(0.675);
    CHECK(synthetic_loss(land, off) ==
          doctest::Approx(0.25 + 1.0 * 0.225).epsilon(1e-12));
  }

  SUBCASE("equal distances in different coordinates differ by weight") {
    PruningAction off0 = land.optimum;
    off0[0] = ActionElement::ratio(0.225);
    PruningAction off1 = land.optimum;
    off1[1] = ActionElement::ratio(0.225);
    CHECK(synthetic_loss(land, off0) != synthetic_loss(land, off1));
  }

  SUBCASE("a pruned block sits past the largest ratio") {
    PruningAction kept = land.optimum;
    kept[2] = ActionElement::ratio(0.9);
    kept[3] = ActionElement::ratio(0.9);
    CHECK(synthetic_loss(land, kept) ==
          doctest::Approx(0.25 + 3.0 * 0.1 + 0.5 * 0.1).epsilon(1e-12));
  }

  SUBCASE("the cost side is the exact masked operation count") {
    SyntheticEvaluator ev(land);
    PruningAction a{ActionElement::ratio(0.225), ActionElement::ratio(0.0),
                    ActionElement::ratio(0.45), ActionElement::ratio(0.0)};
    const EvalResult r = ev.evaluate(a, 123);
    std::vector<std::vector<double>> unit;
    for (const LayerSpec& l : s.layers) unit.emplace_back(l.out_ch, 1.0);
    CHECK(r.flops == total_flops(s, resolve_mask(s, a, unit)));
    CHECK(r.loss == synthetic_eval(land, a).loss);
    CHECK_THROWS_AS(ev.evaluate(PruningAction{}, 0), std::invalid_argument);
  }

  SUBCASE("a landscape with an ill-formed optimum is refused") {
    SyntheticLandscape bad = land;
    bad.optimum[2] = ActionElement::ratio(1.7);
    CHECK_THROWS_AS(SyntheticEvaluator{bad}, std::invalid_argument);
  }
}

TEST_CASE("line protocol serves and reports errors without dying") {
  const NetworkSpec s = micro4();
  SyntheticLandscape land;
  land.spec = s;
  land.optimum = {ActionElement::ratio(0.45), ActionElement::ratio(0.0),
                  ActionElement::block(1), ActionElement::block(1)};
  SyntheticEvaluator ev(land);

  const PruningAction query{ActionElement::ratio(0.0),
                            ActionElement::ratio(0.0),
                            ActionElement::ratio(0.45),
                            ActionElement::ratio(0.0)};
  nlohmann::json req{{"action", action_to_json(query)}, {"seed", "7"}};

  std::stringstream in, out;
  in << req.dump() << "\n";
  in << "this is not json\n";
  nlohmann::json bad{{"action", nlohmann::json::array({{{"r", 5.0}}})},
                     {"seed", 1}};
  in << bad.dump() << "\n";

  serve_evaluator(ev, in, out);

  std::string line;
  REQUIRE(std::getline(out, line));
  nlohmann::json r1 = nlohmann::json::parse(line);
  const EvalResult direct = synthetic_eval(land, query);
  CHECK(r1.at("loss").get<double>() == direct.loss);
  CHECK(r1.at("flops").get<std::string>() == u64_to_string(direct.flops));

  REQUIRE(std::getline(out, line));
  CHECK(nlohmann::json::parse(line).contains("error"));
  REQUIRE(std::getline(out, line));
  CHECK(nlohmann::json::parse(line).contains("error"));
  CHECK_FALSE(std::getline(out, line));
}

TEST_CASE("training is deterministic and beats the uniform floor") {
  const NetworkSpec s = reference_child_spec();
  const Dataset data = make_shapes_dataset(24, 9, 71);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;

  Rng r1(123);
  const ChildModel m1 = pretrain(s, data, cfg, r1);
  Rng r2(123);
  const ChildModel m2 = pretrain(s, data, cfg, r2);
  CHECK(m1 == m2);

  CHECK(test_loss(m1, data.train) < std::log(3.0));

  SUBCASE("retraining the unpruned architecture is plain training") {
    Rng r3(123);
    const ChildModel m3 = retrain(s, data, cfg, r3);
    CHECK(m3 == m1);
  }
}

TEST_CASE("a pruned architecture retrains with fewer parameters") {
  const NetworkSpec s = reference_child_spec();
  Rng rng(81);
  ChildModel m = build_child(s, 3, rng);

  PruningAction a(s.layers.size(), ActionElement::ratio(0.45));
  a[1] = a[3] = a[5] = ActionElement::ratio(0.45);
  a[7] = ActionElement::block(1);
  a[8] = ActionElement::block(1);
  a[6] = a[10] = ActionElement::ratio(0.45);
  REQUIRE_NOTHROW(check_action(s, a));
  const PruneMask mask = resolve_mask(s, a, bn_gammas(m));
  const NetworkSpec pruned = export_pruned(s, mask);
  REQUIRE(validate_network(pruned).empty());

  const Dataset data = make_shapes_dataset(12, 6, 91);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  Rng rrng(7);
  const ChildModel small = retrain(pruned, data, cfg, rrng);
  CHECK(child_param_count(small) < child_param_count(m));
  CHECK(child_param_count(small) == spec_param_count(pruned, 3));
  CHECK(child_param_count(m) == spec_param_count(s, 3));
}
