#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "support.hpp"
#include "tresdiag/error.hpp"
#include "tresdiag/interpret.hpp"

using namespace tresdiag;
using tresdiag::testing::random_tensor;
using tresdiag::testing::TempDir;

namespace {

constexpr std::size_t kP = 6;
constexpr std::size_t kT = 20;

std::vector<std::string> names(std::size_t p) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < p; ++i) out.push_back("ch" + std::to_string(i));
  return out;
}

void unit_norm(TrainedModel& m) {
  m.norm.mean.assign(m.arch.channels, 0.0);
  m.norm.std.assign(m.arch.channels, 1.0);
}

void zero_all(TrainedModel& m) {
  for (auto& [name, w] : m.weights) {
    for (double& v : w.values()) v = 0.0;
  }
}

// Kernel taps only on the centre row: rows never mix inside the trunk.
void centre_row_kernels(TrainedModel& m, Rng& rng) {
  for (auto& [name, w] : m.weights) {
    if (!name.ends_with("conv1.weight") && !name.ends_with("conv2.weight")) continue;
    const std::size_t kh = w.dim(2), kw = w.dim(3);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const std::size_t r = (i / kw) % kh;
      w[i] = r == kh / 2 ? rng.uniform(0.05, 0.5) : 0.0;
    }
  }
}

// Plain single-filter trunk that copies relu(input) to the last conv block;
// the size head is the mean of row k and the class head reads it too.
TrainedModel pass_through(std::size_t k) {
  ArchConfig a;
  a.kind = ArchKind::tres_cnn_plain;
  a.blocks = {{1, 3, 5, 1}};
  a.dense_width = 1;
  a.channels = kP;
  a.samples = kT;
  TrainedModel m = build_model(a, Rng(1), names(kP));
  zero_all(m);
  unit_norm(m);
  m.weights.at("block1.conv1.weight")[7] = 1.0;  // centre tap of the 1 x 1 x 3 x 5 kernel
  m.weights.at("block1.conv2.weight")[7] = 1.0;  // centre tap of the 1 x 1 x 3 x 5 kernel
  m.weights.at("dense.weight").at(0, k) = 1.0;
  m.weights.at("size.weight")[0] = 1.0;
  m.weights.at("class.weight")[0] = 1.0;
  m.weights.at("class.weight")[1] = -1.0;
  return m;
}

// Raw values that preprocess to exactly zero for a mean-0 / std-1 model.
void make_dead(Tensor& values, std::size_t row) {
  const Tensor pe = positional_encoding_map(values.dim(0), values.dim(1));
  for (std::size_t j = 0; j < values.dim(1); ++j) values.at(row, j) = -pe.at(row, j);
}

std::size_t argmax_row(const Tensor& map) {
  const auto it = std::max_element(map.data().begin(), map.data().end());
  return static_cast<std::size_t>(it - map.data().begin()) / map.dim(1);
}

double row_mean(const Tensor& map, std::size_t row) {
  double s = 0.0;
  for (std::size_t j = 0; j < map.dim(1); ++j) s += map.at(row, j);
  return s / static_cast<double>(map.dim(1));
}

double map_mean(const Tensor& map) {
  double s = 0.0;
  for (double v : map.values()) s += v;
  return s / static_cast<double>(map.size());
}

ArchConfig small_arch() {
  ArchConfig a;
  a.blocks = {{4, 3, 5, 2}, {4, 3, 5, 2}};
  a.dense_width = 8;
  a.channels = kP;
  a.samples = kT;
  return a;
}

}  // namespace

TEST_CASE("bilinear resize with aligned corners") {
  Tensor m(Shape{2, 3}, std::vector<double>{0, 1, 2, 10, 11, 12});
  const Tensor same = bilinear_resize(m, 2, 3);
  CHECK(same == m);
  const Tensor up = bilinear_resize(m, 3, 5);
  CHECK(up.at(0, 0) == 0.0);
  CHECK(up.at(2, 4) == 12.0);
  CHECK(up.at(1, 2) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(up.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
  const Tensor col = bilinear_resize(Tensor(Shape{1, 1}, 4.0), 3, 3);
  for (double v : col.values()) CHECK(v == 4.0);
}

TEST_CASE("max normalization") {
  Tensor m(Shape{1, 3}, std::vector<double>{0.5, 2.0, 1.0});
  max_normalize(m);
  CHECK(m[1] == 1.0);
  CHECK(m[0] == 0.25);
  Tensor z(Shape{2, 2});
  max_normalize(z);
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("Grad-CAM++ puts the pass-through channel at the argmax") {
  for (std::size_t k : {0u, 3u, 5u}) {
    const TrainedModel m = pass_through(k);
    Rng rng(40 + k);
    Tensor x = random_tensor({kP, kT}, rng, 2.0, 3.0);
    // Other rows carry smaller positive signal; they still reach the last block.
    for (std::size_t r = 0; r < kP; ++r) {
      if (r == k) continue;
      for (std::size_t j = 0; j < kT; ++j) x.at(r, j) = 0.5 * x.at(r, j) - 1.0;
    }
    const SaliencyMap map = grad_campp(m, x, 7);
    CHECK(map.case_id == 7);
    CHECK(map.source == SaliencySource::grad_campp);
    CHECK(argmax_row(map.values) == k);
    CHECK(*std::max_element(map.values.data().begin(), map.values.data().end()) == 1.0);
    CHECK(*std::min_element(map.values.data().begin(), map.values.data().end()) >= 0.0);
  }
}

TEST_CASE("Grad-CAM++ of a size head that sees only zero maps is all zero") {
  TrainedModel m = pass_through(2);
  Tensor x(Shape{kP, kT}, 2.0);
  make_dead(x, 2);
  const SaliencyMap map = grad_campp(m, x);
  for (double v : map.values.values()) CHECK(v == 0.0);

  m = pass_through(2);
  m.weights.at("size.weight")[0] = 0.0;
  const SaliencyMap none = grad_campp(m, Tensor(Shape{kP, kT}, 2.0));
  for (double v : none.values.values()) CHECK(v == 0.0);
}

TEST_CASE("dead channels attribute at most 5% of the map mean") {
  ArchConfig a = small_arch();
  a.kind = ArchKind::tres_cnn_plain;
  Rng weights(11);
  TrainedModel m = build_model(a, weights, names(kP));
  unit_norm(m);
  centre_row_kernels(m, weights);
  for (const char* bias : {"block1.conv1.bias", "block1.conv2.bias", "block2.conv1.bias", "block2.conv2.bias"}) {
    for (double& v : m.weights.at(bias).values()) v = 0.0;
  }
  for (const char* name : {"dense.weight", "size.weight"}) {
    for (double& v : m.weights.at(name).values()) v = std::abs(v);
  }
  const std::vector<std::size_t> dead = {1, 4};
  Rng cases(12);
  for (int c = 0; c < 10; ++c) {
    Tensor x = random_tensor({kP, kT}, cases, 2.0, 3.0);
    for (std::size_t r : dead) make_dead(x, r);
    const SaliencyMap map = grad_campp(m, x, c);
    const double mean = map_mean(map.values);
    REQUIRE(mean > 0.0);
    for (std::size_t r : dead) CHECK(row_mean(map.values, r) <= 0.05 * mean);
  }
}

TEST_CASE("Grad-CAM++ argmax is invariant to scaling the size head of a one-filter trunk") {
  // With several filters the pixel weights 1 / (2 + sum(A) g) rescale the
  // filters unevenly, so only the one-filter trunk is scale invariant.
  Rng rng(21);
  ArchConfig a = small_arch();
  a.blocks = {{1, 3, 5, 2}, {1, 3, 5, 2}};
  TrainedModel m = build_model(a, rng, names(kP));
  unit_norm(m);
  for (int c = 0; c < 5; ++c) {
    const Tensor x = random_tensor({kP, kT}, rng, -2.0, 2.0);
    const SaliencyMap base = grad_campp(m, x);
    TrainedModel scaled = m;
    for (double& v : scaled.weights.at("size.weight").values()) v *= 3.0;
    const SaliencyMap other = grad_campp(scaled, x);
    const auto b = std::max_element(base.values.data().begin(), base.values.data().end());
    const auto o = std::max_element(other.values.data().begin(), other.values.data().end());
    CHECK(b - base.values.data().begin() == o - other.values.data().begin());
  }
}

TEST_CASE("Grad-CAM++ is deterministic and rejects the MLP baseline") {
  Rng rng(5);
  TrainedModel m = build_model(small_arch(), rng, names(kP));
  unit_norm(m);
  const Tensor x = random_tensor({kP, kT}, rng);
  CHECK(grad_campp(m, x) == grad_campp(m, x));

  ArchConfig mlp = small_arch();
  mlp.kind = ArchKind::mlp_baseline;
  TrainedModel flat = build_model(mlp, rng, names(kP));
  unit_norm(flat);
  CHECK_THROWS_AS(grad_campp(flat, x), UnsupportedError);
  CHECK_THROWS_AS(grad_campp(m, Tensor(Shape{kP - 1, kT})), ValidationError);
}

TEST_CASE("LIME on a constant black box gives zero weights") {
  Rng rng(3);
  const LimeExplanation e = lime_explain([](const std::vector<bool>&) { return 0.7; }, 8, {}, rng);
  REQUIRE(e.weights.size() == 8);
  for (double w : e.weights) CHECK(std::abs(w) < 1e-6);
  CHECK(e.intercept == doctest::Approx(0.7).epsilon(1e-9));
  CHECK(e.perturbations == 500);
}

TEST_CASE("LIME recovers a linear-in-mask black box") {
  const auto f = [](const std::vector<bool>& z) { return 0.5 + 0.3 * z[0] - 0.2 * z[1]; };
  for (std::size_t p : {2u, 6u, 38u}) {
    Rng rng(100 + p);
    const LimeExplanation e = lime_explain(f, p, {}, rng);
    CHECK(e.r2 >= 0.99);
    const double ratio = e.weights[0] / e.weights[1];
    CHECK(std::abs(ratio / -1.5 - 1.0) <= 0.10);
    for (std::size_t i = 2; i < p; ++i) CHECK(std::abs(e.weights[i]) < 1e-4);
  }
}

TEST_CASE("LIME weights are stable when the sample doubles") {
  const double a[kP] = {1.0, -0.8, 0.6, 0.5, -0.4, 0.3};
  const auto f = [&](const std::vector<bool>& z) {
    double s = -0.5;
    for (std::size_t i = 0; i < kP; ++i) s += z[i] ? a[i] : 0.0;
    return 1.0 / (1.0 + std::exp(-s));
  };
  LimeConfig small, large;
  large.perturbations = 2 * small.perturbations;
  Rng r1(9), r2(9);
  const LimeExplanation e1 = lime_explain(f, kP, small, r1);
  const LimeExplanation e2 = lime_explain(f, kP, large, r2);
  for (std::size_t i = 0; i < kP; ++i) {
    CHECK(std::abs(e1.weights[i] - e2.weights[i]) < 0.05 * std::abs(e2.weights[i]));
    CHECK((e2.weights[i] > 0) == (a[i] > 0));
  }
}

TEST_CASE("LIME rejects too few perturbations and a degenerate design") {
  Rng rng(1);
  LimeConfig c;
  c.perturbations = 5;
  CHECK_THROWS_AS(lime_explain([](const std::vector<bool>&) { return 0.0; }, 4, c, rng), ConfigError);
  // One channel and two masks: identical draws twice in a row.
  c.perturbations = 3;
  bool degenerate = false;
  for (std::uint64_t seed = 0; seed < 64 && !degenerate; ++seed) {
    Rng probe(seed);
    try {
      lime_explain([](const std::vector<bool>&) { return 0.0; }, 1, c, probe);
    } catch (const ValidationError& e) {
      degenerate = std::string(e.what()).find("degenerate") != std::string::npos;
    }
  }
  CHECK(degenerate);
}

TEST_CASE("LIME on a model is seeded and targets the predicted class") {
  const std::size_t k = 4;
  const TrainedModel m = pass_through(k);
  Rng data(8);
  const Tensor x = random_tensor({kP, kT}, data, 2.0, 3.0);
  Rng a(77), b(77);
  const LimeExplanation e1 = lime_explain(m, x, {}, a, 3);
  const LimeExplanation e2 = lime_explain(m, x, {}, b, 3);
  CHECK(e1 == e2);
  CHECK(e1.case_id == 3);
  std::size_t top = 0;
  for (std::size_t i = 0; i < kP; ++i) {
    if (std::abs(e1.weights[i]) > std::abs(e1.weights[top])) top = i;
  }
  CHECK(top == k);
  // Keeping channel k raises the predicted (cold-leg) probability.
  CHECK(forward(m, x).predicted_class() == 0);
  CHECK(e1.weights[k] > 0.0);
}

TEST_CASE("explain_case: both methods rank the pass-through channel first") {
  const std::size_t k = 1;
  const TrainedModel m = pass_through(k);
  Rng data(31);
  Tensor x = random_tensor({kP, kT}, data, 2.0, 3.0);
  for (std::size_t r = 0; r < kP; ++r) {
    if (r != k) make_dead(x, r);
  }
  const CaseAttribution att = explain_case(m, x, 12, {}, Rng(4));
  CHECK(att.gradcam.case_id == 12);
  CHECK(att.lime.case_id == 12);
  CHECK(argmax_row(att.gradcam.values) == k);
  const SaliencyMap broadcast = lime_broadcast(att.lime, kT);
  CHECK(broadcast.source == SaliencySource::lime_broadcast);
  CHECK(argmax_row(broadcast.values) == k);
  for (std::size_t j = 0; j < kT; ++j) CHECK(broadcast.values.at(k, j) == 1.0);
}

TEST_CASE("attributions depend on the case") {
  Rng rng(14);
  TrainedModel m = build_model(small_arch(), rng, names(kP));
  unit_norm(m);
  const Tensor x1 = random_tensor({kP, kT}, rng, -2.0, 2.0);
  const Tensor x2 = random_tensor({kP, kT}, rng, -2.0, 2.0);
  LimeConfig c;
  c.perturbations = 60;
  const CaseAttribution a1 = explain_case(m, x1, 1, c, Rng(2));
  const CaseAttribution a2 = explain_case(m, x2, 2, c, Rng(2));
  CHECK_FALSE(a1.gradcam.values == a2.gradcam.values);
  CHECK_FALSE(a1.lime.weights == a2.lime.weights);
}

TEST_CASE("explain_cases matches explain_case and ignores the thread count") {
  GeneratorConfig g;
  g.num_cases = 6;
  g.num_test = 2;
  g.duration_s = 10.0;
  const Dataset ds = generate_dataset(g, 5);
  ArchConfig a = small_arch();
  a.channels = 5;
  std::vector<std::string> channels = {ds.channel_names()[3], ds.channel_names()[0], ds.channel_names()[20],
                                       ds.channel_names()[30], ds.channel_names()[7]};
  TrainedModel m = build_model(a, Rng(6), channels);
  std::vector<const Tensor*> inputs;
  std::vector<Tensor> reduced;
  const auto rows = channel_rows(channels, ds.channel_names());
  for (const auto& tc : ds.cases) reduced.push_back(take_rows(tc.values, rows));
  for (const auto& t : reduced) inputs.push_back(&t);
  m.norm = compute_norm_stats(inputs);
  LimeConfig c;
  c.perturbations = 40;
  const std::vector<std::size_t> idx = {4, 0, 2};
  const auto serial = explain_cases(m, ds, idx, c, Rng(3), 1);
  const auto parallel = explain_cases(m, ds, idx, c, Rng(3), 3);
  CHECK(serial == parallel);
  CHECK(serial[0] == explain_case(m, reduced[4], ds.cases[4].case_id, c, Rng(3)));
}

TEST_CASE("attribution files round-trip") {
  const TrainedModel m = pass_through(2);
  Rng data(1);
  const Tensor x = random_tensor({kP, kT}, data, 2.0, 3.0);
  LimeConfig c;
  c.perturbations = 30;
  std::vector<CaseAttribution> atts = {explain_case(m, x, 9, c, Rng(1)), explain_case(m, x, 3, c, Rng(2))};
  TempDir dir("attributions");
  save_attributions(atts, m.channels, dir.path);
  const auto back = load_attributions(dir.path, m.channels);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == atts[1]);  // sorted by file name
  CHECK(back[1] == atts[0]);

  CHECK_THROWS_AS(load_attributions(dir.path, names(kP - 1)), IoError);
  std::ofstream(dir.path / "case_0100.json") << "{\"case_id\": 100";
  CHECK_THROWS_AS(load_attributions(dir.path, m.channels), IoError);
  CHECK_THROWS_AS(load_attributions(dir.path / "absent", m.channels), IoError);
}
