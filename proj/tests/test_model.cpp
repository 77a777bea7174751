#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "support.hpp"
#include "tresdiag/config.hpp"
#include "tresdiag/model.hpp"

using namespace tresdiag;
using tresdiag::testing::random_tensor;
using tresdiag::testing::relative_error;
namespace fs = std::filesystem;

namespace {

ArchConfig small_arch(ArchKind kind = ArchKind::tres_cnn) {
  ArchConfig a;
  a.kind = kind;
  a.blocks = {{4, 3, 5, 2}, {4, 3, 5, 2}};
  a.dense_width = 8;
  a.channels = 6;
  a.samples = 20;
  return a;
}

struct Losses {
  double cl, re;
};

Losses case_losses(const TrainedModel& m, const Tensor& x, BreakLocation loc, double size) {
  const Prediction pred = forward(m, x);
  Graph g;
  const auto nodes = build_forward(g, m, x, false);
  const double cl = loss_classification(g.value(nodes.logits).reshaped({1, 2}),
                                        Tensor(Shape{1, 2}, one_hot(loc)));
  return {cl, loss_regression({pred.size}, {size})};
}

// Analytic gradients of the chosen loss terms for one case.
Gradients case_gradients(const TrainedModel& m, const Tensor& x, BreakLocation loc, double size, bool cl,
                         bool re) {
  Graph g;
  const auto nodes = build_forward(g, m, x, false);
  std::vector<NodeId> terms;
  if (cl) terms.push_back(g.softmax_cross_entropy(nodes.logits, Tensor::vector(one_hot(loc))));
  if (re) terms.push_back(g.squared_error(nodes.size, Tensor::vector({size})));
  return g.backward(g.add_scalars(terms));
}

// Central differences of the same loss for every weight of m.
Gradients numeric_gradients(const TrainedModel& m, const Tensor& x, BreakLocation loc, double size, bool cl,
                            bool re) {
  Gradients out;
  for (const auto& [name, w] : m.weights) {
    out[name] = finite_diff_gradient(
        [&, name = name](const Tensor& theta) {
          TrainedModel probe = m;
          probe.weights[name] = theta;
          const Losses l = case_losses(probe, x, loc, size);
          return (cl ? l.cl : 0.0) + (re ? l.re : 0.0);
        },
        w);
  }
  return out;
}

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& tag)
      : path(fs::temp_directory_path() / ("tresdiag_model_" + tag + "_" + std::to_string(::getpid()))) {}
  ~TempFile() { fs::remove(path); }
};

}  // namespace

TEST_CASE("positional encoding at the origin") {
  for (std::size_t i = 0; i < 38; ++i) CHECK(positional_encoding(0, i, 38) == (i % 2 == 0 ? 0.0 : 1.0));
}

TEST_CASE("positional encoding examples") {
  CHECK(positional_encoding(1, 0, 38) == doctest::Approx(0.841471).epsilon(1e-6));
  CHECK(std::abs(positional_encoding(10, 37, 38) - 0.9999988) < 1e-6);
}

TEST_CASE("positional encoding matches extended precision over the full grid") {
  const Tensor map = positional_encoding_map(38, 200);
  double worst = 0.0;
  for (std::size_t p = 0; p < 38; ++p) {
    const long double exponent = static_cast<long double>(p - p % 2) / 38.0L;
    for (std::size_t t = 0; t < 200; ++t) {
      const long double angle = static_cast<long double>(t) / std::pow(10000.0L, exponent);
      const long double want = p % 2 == 0 ? std::sin(angle) : std::cos(angle);
      const double got = map.at(p, t);
      CHECK(got >= -1.0);
      CHECK(got <= 1.0);
      worst = std::max(worst, static_cast<double>(std::abs(static_cast<long double>(got) - want)));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("positional encoding bounds") {
  CHECK_THROWS_AS(positional_encoding(0, 38, 38), LookupError);
}

TEST_CASE("plain ablation shares the weight shapes") {
  ArchConfig plain;
  plain.kind = ArchKind::tres_cnn_plain;
  CHECK(parameter_shapes(ArchConfig{}) == parameter_shapes(plain));
  CHECK(plain.effective_dropout() == 0.0);
  CHECK_FALSE(plain.residual());
}

TEST_CASE("build_model is seeded") {
  const TrainedModel a = build_model(ArchConfig{}, Rng(4));
  const TrainedModel b = build_model(ArchConfig{}, Rng(4));
  const TrainedModel c = build_model(ArchConfig{}, Rng(5));
  CHECK(a == b);
  CHECK_FALSE(a.weights == c.weights);
  CHECK(a.parameter_count() > 0);
  for (const auto& [name, w] : a.weights) {
    // A bias shares the fan-in of its layer's weight.
    const bool is_bias = name.ends_with(".bias");
    const Tensor& layer = is_bias ? a.weights.at(name.substr(0, name.size() - 4) + "weight") : w;
    const double bound = std::sqrt(static_cast<double>(layer.dim(0)) / static_cast<double>(layer.size()));
    for (double v : w.values()) CHECK(std::abs(v) <= bound);
  }
}

TEST_CASE("default model output shapes") {
  const TrainedModel m = build_model(ArchConfig{}, Rng(1));
  Rng rng(2);
  const Prediction p = forward(m, random_tensor({38, 200}, rng));
  REQUIRE(p.class_probs.size() == 2);
  CHECK(std::abs(p.class_probs[0] + p.class_probs[1] - 1.0) < 1e-9);
  CHECK(std::isfinite(p.size));
  const auto sizes = block_output_sizes(ArchConfig{});
  CHECK(sizes.back()[0] == 38);
}

TEST_CASE("pooling below one sample is rejected and names the block") {
  ArchConfig a = small_arch();
  a.blocks.push_back({4, 3, 5, 8});
  try {
    build_model(a, Rng(1));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("block 3") != std::string::npos);
  }
}

TEST_CASE("zero heads give uniform probabilities and the size bias") {
  TrainedModel m = build_model(small_arch(), Rng(3));
  for (const char* name : {"class.weight", "class.bias", "size.weight"}) {
    for (double& v : m.weights.at(name).values()) v = 0.0;
  }
  m.weights.at("size.bias")[0] = 0.37;
  Rng rng(4);
  const Prediction p = forward(m, random_tensor({6, 20}, rng));
  CHECK(p.class_probs[0] == 0.5);
  CHECK(p.class_probs[1] == 0.5);
  CHECK(p.size == 0.37);
  CHECK(p.predicted_class() == 0);
}

TEST_CASE("inference is deterministic, training dropout is not the identity") {
  const TrainedModel m = build_model(small_arch(), Rng(3));
  Rng rng(5);
  const Tensor x = random_tensor({6, 20}, rng, -3, 3);
  const Prediction a = forward(m, x), b = forward(m, x);
  CHECK(a.class_probs == b.class_probs);
  CHECK(a.size == b.size);
  Rng d1(9), d2(9);
  const Prediction t1 = forward(m, x, true, &d1), t2 = forward(m, x, true, &d2);
  CHECK(t1.size == t2.size);
  CHECK_THROWS_AS(forward(m, x, true, nullptr), ConfigError);
}

TEST_CASE("residual skips are live") {
  const TrainedModel m = build_model(small_arch(), Rng(11));
  TrainedModel plain = m;
  plain.arch.kind = ArchKind::tres_cnn_plain;
  Rng rng(12);
  const Tensor x = random_tensor({6, 20}, rng, -2, 2);
  CHECK(forward(m, x).size != forward(plain, x).size);
}

TEST_CASE("input shape and channel checks") {
  const TrainedModel m = build_model(small_arch(), Rng(1));
  CHECK_THROWS_AS(forward(m, Tensor(Shape{5, 20})), ValidationError);
  CHECK_THROWS_AS(forward(m, Tensor(Shape{6, 21})), ValidationError);
  try {
    channel_rows({"a", "zz", "b", "yy"}, {"a", "b", "c"});
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find("zz") != std::string::npos);
    CHECK(what.find("yy") != std::string::npos);
  }
  CHECK(channel_rows({"c", "a"}, {"a", "b", "c"}) == std::vector<std::size_t>{2, 0});
  const Tensor v(Shape{3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(take_rows(v, {2, 0}) == Tensor(Shape{2, 2}, std::vector<double>{5, 6, 1, 2}));
}

TEST_CASE("normalization statistics standardize the training split") {
  GeneratorConfig gc;
  gc.num_cases = 30;
  gc.num_test = 6;
  const Dataset ds = generate_dataset(gc, 17);
  std::vector<const Tensor*> train;
  for (std::size_t i : ds.indices(Split::train)) train.push_back(&ds.cases[i].values);
  const NormStats s = compute_norm_stats(train);
  REQUIRE(s.mean.size() == 38);
  for (std::size_t p = 0; p < 38; ++p) {
    double sum = 0.0, sq = 0.0, n = 0.0;
    for (const Tensor* c : train) {
      for (std::size_t t = 0; t < c->dim(1); ++t) {
        const double z = (c->at(p, t) - s.mean[p]) / s.std[p];
        sum += z;
        sq += z * z;
        n += 1.0;
      }
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(sq / n - mean * mean) - 1.0) < 1e-6);
  }
}

TEST_CASE("constant channels get the std floor") {
  const Tensor c(Shape{2, 3}, std::vector<double>{1, 1, 1, 0, 1, 2});
  const NormStats s = compute_norm_stats({&c});
  CHECK(s.std[0] == kStdFloor);
  CHECK(s.mean[1] == 1.0);
}

TEST_CASE("regression loss") {
  CHECK(loss_regression({0.3, 0.7}, {0.3, 0.7}) == 0.0);
  CHECK(loss_regression({2, 0}, {0, 0}) == 4.0);
  CHECK_THROWS_AS(loss_regression({1}, {1, 2}), ShapeError);
  const Tensor x = Tensor::vector({0.4, -1.2, 2.0});
  const std::vector<double> y{1.0, 0.5, 2.5};
  const Tensor fd = finite_diff_gradient(
      [&](const Tensor& t) { return loss_regression(t.data(), y); }, x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(fd[i] == doctest::Approx(2 * (x[i] - y[i])).epsilon(1e-8));
}

TEST_CASE("classification loss") {
  const Tensor label(Shape{1, 2}, std::vector<double>{1, 0});
  CHECK(std::abs(loss_classification(Tensor(Shape{1, 2}, std::vector<double>{0, 0}), label) - std::log(2.0)) <
        1e-12);
  const double big = loss_classification(Tensor(Shape{1, 2}, std::vector<double>{1000, 0}), label);
  CHECK(std::isfinite(big));
  CHECK(big < 1e-12);
  // Correct-class probability p gives -ln p.
  const double logit = 0.8;
  const double p = std::exp(logit) / (std::exp(logit) + 1.0);
  CHECK(loss_classification(Tensor(Shape{1, 2}, std::vector<double>{logit, 0}), label) ==
        doctest::Approx(-std::log(p)).epsilon(1e-12));
  // Rows add up.
  const Tensor two(Shape{2, 2}, std::vector<double>{0, 0, 0, 0});
  CHECK(loss_classification(two, Tensor(Shape{2, 2}, std::vector<double>{1, 0, 0, 1})) ==
        doctest::Approx(2 * std::log(2.0)));
  CHECK_THROWS_AS(loss_classification(two, Tensor(Shape{2, 2}, std::vector<double>{1, 1, 0, 1})),
                  ValidationError);
  CHECK_THROWS_AS(loss_classification(two, Tensor(Shape{2, 2}, std::vector<double>{0.5, 0.5, 0, 1})),
                  ValidationError);
}

TEST_CASE("total loss") {
  CHECK(loss_total(0, 0) == 0.0);
  CHECK(loss_total(0.693, 4.0) == doctest::Approx(4.693));
}

TEST_CASE("full-model gradients agree with finite differences") {
  for (ArchKind kind : {ArchKind::tres_cnn, ArchKind::tres_cnn_plain, ArchKind::mlp_baseline}) {
    INFO(to_string(kind));
    TrainedModel m = build_model(small_arch(kind), Rng(21));
    Rng rng(22);
    m.norm.mean = {0.1, -0.2, 0.0, 0.3, 0.0, 1.0};
    m.norm.std = {1.0, 2.0, 0.5, 1.0, 1.5, 1.0};
    const Tensor x = random_tensor({6, 20}, rng, -1, 1);
    const auto analytic = case_gradients(m, x, BreakLocation::hot_leg, 0.4, true, true);
    const auto numeric = numeric_gradients(m, x, BreakLocation::hot_leg, 0.4, true, true);
    for (const auto& [name, g] : numeric) {
      if (kind == ArchKind::tres_cnn_plain && name.find("skip") != std::string::npos) {
        for (double v : analytic.at(name).values()) CHECK(v == 0.0);
        continue;
      }
      INFO(name);
      CHECK(relative_error(analytic.at(name), g, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("the total-loss gradient is the sum of the parts") {
  const TrainedModel m = build_model(small_arch(), Rng(31));
  Rng rng(32);
  const Tensor x = random_tensor({6, 20}, rng, -1, 1);
  const auto both = case_gradients(m, x, BreakLocation::cold_leg, 0.9, true, true);
  const auto cl = case_gradients(m, x, BreakLocation::cold_leg, 0.9, true, false);
  const auto re = case_gradients(m, x, BreakLocation::cold_leg, 0.9, false, true);
  const auto numeric = numeric_gradients(m, x, BreakLocation::cold_leg, 0.9, true, true);
  for (const auto& [name, g] : both) {
    Tensor sum = cl.at(name);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += re.at(name)[i];
    CHECK(relative_error(sum, g) < 1e-12);
    CHECK(relative_error(sum, numeric.at(name), 1e-6) < 1e-4);
  }
}

TEST_CASE("checkpoint round-trip reproduces predictions bitwise") {
  TrainedModel m = build_model(ArchConfig{}, Rng(41));
  m.channels.clear();
  for (const auto& c : channel_catalog({})) m.channels.push_back(c.name);
  m.norm.mean.assign(38, 0.1 / 3.0);
  m.norm.std.assign(38, 7.0 / 3.0);
  m.metadata = {99, 123, "converged"};
  TempFile file("ckpt");
  const Json extra{{"note", 1}};
  save_checkpoint(m, file.path, &extra);
  Json back_extra;
  const TrainedModel back = load_checkpoint(file.path, &back_extra);
  CHECK(back == m);
  CHECK(back_extra == extra);
  Rng rng(42);
  const Tensor x = random_tensor({38, 200}, rng, -5, 5);
  const Prediction a = forward(m, x), b = forward(back, x);
  CHECK(a.class_probs == b.class_probs);
  CHECK(a.size == b.size);
}

TEST_CASE("checkpoint loading rejects malformed weights") {
  const TrainedModel m = build_model(small_arch(), Rng(1));
  Json j = model_to_json(m);
  j["weights"]["dense.bias"].push_back(0.0);
  CHECK_THROWS_AS(model_from_json(j), ValidationError);
  j = model_to_json(m);
  j["weights"].erase("size.bias");
  CHECK_THROWS_AS(model_from_json(j), ValidationError);
  TempFile file("corrupt");
  std::ofstream(file.path) << "{ not json";
  CHECK_THROWS_AS(load_checkpoint(file.path), IoError);
  CHECK_THROWS_AS(load_checkpoint(file.path.string() + ".absent"), IoError);
}

TEST_CASE("arch config JSON") {
  const ArchConfig a = small_arch(ArchKind::tres_cnn_plain);
  CHECK(arch_config_from_json(to_json(a)) == a);
  CHECK(arch_config_from_json(Json::object()) == ArchConfig{});
  CHECK_THROWS_AS(arch_config_from_json(Json{{"kind", "transformer"}}), ConfigError);
  CHECK_THROWS_AS(arch_config_from_json(Json{{"blocks", Json::array({Json{{"filter", 3}}})}}), ConfigError);
}

TEST_CASE("mlp baseline has no convolutional features") {
  const TrainedModel m = build_model(small_arch(ArchKind::mlp_baseline), Rng(2));
  Graph g;
  Rng rng(3);
  const auto nodes = build_forward(g, m, random_tensor({6, 20}, rng), false);
  CHECK_FALSE(nodes.last_conv.has_value());
  const TrainedModel c = build_model(small_arch(), Rng(2));
  Graph h;
  CHECK(build_forward(h, c, random_tensor({6, 20}, rng), false).last_conv.has_value());
}
