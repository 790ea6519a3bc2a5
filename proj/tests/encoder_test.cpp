#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "cmssl/encoders.hpp"
#include "cmssl/rng.hpp"
#include "testutil.hpp"

using cmssl::EncoderBundle;
using cmssl::EncoderKind;
using cmssl::EncoderSpec;
using cmssl::ModalitySpec;
using cmssl::ParamSet;
using cmssl::Rng;
using cmssl::Shape;
using cmssl::Tensor;
using cmssl::ad::Graph;

namespace {

ModalitySpec small_modality(int id = 0) {
  ModalitySpec m;
  m.id = id;
  m.name = "M" + std::to_string(id);
  m.channels = 2;
  m.height = 8;
  m.width = 8;
  return m;
}

EncoderSpec small_mlp() {
  EncoderSpec s;
  s.kind = EncoderKind::MLP;
  s.hidden_sizes = {16, 8};
  s.output_dim = 6;
  return s;
}

EncoderSpec small_cnn() {
  EncoderSpec s;
  s.kind = EncoderKind::SmallCNN;
  s.conv_stages = {{4, 3, 1}};  // 8 -> 6 -> pool 3... adjusted below
  s.conv_stages[0].kernel = 5;  // 8 -> 4 -> pool 2
  s.output_dim = 6;
  return s;
}

}  // namespace

TEST(InitEncoder, DeterministicPerSeed) {
  auto m = small_modality();
  ParamSet a = cmssl::init_encoder(small_mlp(), m, 1234);
  ParamSet b = cmssl::init_encoder(small_mlp(), m, 1234);
  ASSERT_EQ(a.size(), b.size());
  for (auto& [name, t] : a) {
    auto& u = b.at(name);
    EXPECT_EQ(0, std::memcmp(t.values.data(), u.values.data(), t.values.size() * sizeof(double)));
  }
  ParamSet c = cmssl::init_encoder(small_mlp(), m, 1235);
  EXPECT_NE(a.at("fc0/w").values, c.at("fc0/w").values);
}

TEST(InitEncoder, BiasesZeroAtInit) {
  ParamSet p = cmssl::init_encoder(small_cnn(), small_modality(), 7);
  for (auto& [name, t] : p) {
    if (name.ends_with("/b"))
      for (double v : t.values) EXPECT_EQ(v, 0.0);
  }
}

// Sample variance of a uniform(-a, a) layer should sit near a^2/3.
TEST(InitEncoder, WeightVarianceMatchesDistribution) {
  ModalitySpec m = small_modality();
  m.channels = 1;
  m.height = 8;
  m.width = 8;
  EncoderSpec s;
  s.kind = EncoderKind::MLP;
  s.hidden_sizes = {64};
  s.output_dim = 4;
  ParamSet p = cmssl::init_encoder(s, m, 99);
  const Tensor& w = p.at("fc0/w");  // 64 x 64
  double a = std::sqrt(6.0 / (64.0 + 64.0));
  double mean = 0;
  for (double v : w.values) mean += v;
  mean /= static_cast<double>(w.values.size());
  double var = 0;
  for (double v : w.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.values.size());
  double expected = a * a / 3.0;
  EXPECT_NEAR(var, expected, 0.2 * expected);
}

TEST(Encode, OutputLengthMatchesSpec) {
  Rng rng(3);
  for (auto spec : {small_mlp(), small_cnn()}) {
    ModalitySpec m = small_modality();
    ParamSet p = cmssl::init_encoder(spec, m, 11);
    Tensor img = testutil::random_tensor(m.image_shape(), rng);
    Graph g;
    auto out = cmssl::encode(g, spec, m, p, img);
    EXPECT_EQ(g.value(out.representation).size(), spec.output_dim);
    EXPECT_EQ(g.value(out.embedding).size(), spec.embedding_dim());
  }
}

TEST(Encode, ZeroInputZeroBiasGivesZeroFirstPreactivation) {
  ModalitySpec m = small_modality();
  EncoderSpec spec = small_mlp();
  ParamSet p = cmssl::init_encoder(spec, m, 5);
  Tensor img(m.image_shape(), 0.0);
  Graph g;
  // first hidden layer output is relu(W * 0 + 0) = 0
  auto out = cmssl::encode(g, spec, m, p, img);
  // with zero input every later layer sees only zero biases, so the
  // representation is exactly zero as well
  for (double v : g.value(out.representation).values) EXPECT_EQ(v, 0.0);
}

TEST(Encode, TinyMlpHandComputed) {
  // 2 -> 3 -> 2 with hand-set weights on input [1, -1]:
  //   h = relu(W1 x + b1), y = W2 h + b2
  ModalitySpec m;
  m.id = 0;
  m.name = "T";
  m.channels = 1;
  m.height = 1;
  m.width = 2;
  EncoderSpec spec;
  spec.kind = EncoderKind::MLP;
  spec.hidden_sizes = {3};
  spec.output_dim = 2;
  ParamSet p = cmssl::init_encoder(spec, m, 0);
  p.at("fc0/w") = Tensor::from({3, 2}, {1, 2, -1, 0.5, 0.25, 0.25});
  p.at("fc0/b") = Tensor::from({3}, {0.5, -0.25, 0});
  p.at("out/w") = Tensor::from({2, 3}, {1, 1, 1, 2, -2, 0.5});
  p.at("out/b") = Tensor::from({2}, {0.125, -1});
  for (auto& [name, t] : p) t.set_requires_grad(true);

  // x = [1, -1]: W1 x + b1 = [1-2+0.5, -1-0.5-0.25, 0.25-0.25+0] = [-0.5, -1.75, 0]
  // h = [0, 0, 0]; y = b2-ish: [0.125, -1]
  Graph g;
  auto out = cmssl::encode(g, spec, m, p, Tensor::from({1, 1, 2}, {1, -1}));
  EXPECT_DOUBLE_EQ(g.value(out.representation).values[0], 0.125);
  EXPECT_DOUBLE_EQ(g.value(out.representation).values[1], -1.0);

  // and a second input that activates units: x = [1, 1]
  // W1 x + b1 = [3.5, -1.75, 0.5], h = [3.5, 0, 0.5]
  // y = [3.5+0.5+0.125, 7+0.25-1] = [4.125, 6.25]
  auto out2 = cmssl::encode(g, spec, m, p, Tensor::from({1, 1, 2}, {1, 1}));
  EXPECT_DOUBLE_EQ(g.value(out2.representation).values[0], 4.125);
  EXPECT_DOUBLE_EQ(g.value(out2.representation).values[1], 6.25);
}

TEST(Encode, ShapeMismatchAndUnknownModality) {
  ModalitySpec m = small_modality();
  EncoderSpec spec = small_mlp();
  ParamSet p = cmssl::init_encoder(spec, m, 5);
  Graph g;
  EXPECT_THROW(cmssl::encode(g, spec, m, p, Tensor(Shape{2, 4, 4})), cmssl::ShapeError);

  EncoderBundle bundle;
  bundle.encoders[0] = {m, spec, std::move(p)};
  EXPECT_THROW(bundle.at(3), cmssl::ContractError);
}

TEST(Encode, CnnGradientsVsFiniteDifferences) {
  ModalitySpec m = small_modality();
  EncoderSpec spec = small_cnn();
  ParamSet p = cmssl::init_encoder(spec, m, 21);
  Rng rng(2);
  Tensor img = testutil::random_tensor(m.image_shape(), rng);

  auto build = [&](Graph& g) {
    auto out = cmssl::encode(g, spec, m, p, img);
    return g.logsumexp(out.embedding);
  };
  Graph g;
  g.backward(build(g));
  auto eval = [&] {
    Graph h;
    return h.value(build(h)).item();
  };
  std::vector<std::pair<std::string, Tensor*>> params;
  for (auto& [name, t] : p) params.emplace_back(name, &t);
  auto res = testutil::fd_check(params, eval);
  EXPECT_LE(res.max_rel_err, 1e-6) << res.worst_param;
}

// Loss gradients reach every encoder parameter over a handful of batches.
TEST(Encode, GradientFlowsToAllParameters) {
  ModalitySpec m = small_modality();
  EncoderSpec spec = small_cnn();
  spec.projection.enabled = true;
  spec.projection.hidden = 8;
  spec.projection.out = 4;
  ParamSet p = cmssl::init_encoder(spec, m, 31);
  Rng rng(4);

  std::map<std::string, bool> touched;
  for (auto& [name, t] : p) touched[name] = false;
  for (int batch = 0; batch < 5; ++batch) {
    cmssl::zero_grads(p);
    Graph g;
    auto out = cmssl::encode(g, spec, m, p, testutil::random_tensor(m.image_shape(), rng));
    g.backward(g.logsumexp(out.embedding));
    for (auto& [name, t] : p)
      for (double gv : t.grad)
        if (gv != 0.0) {
          touched[name] = true;
          break;
        }
  }
  for (auto& [name, was] : touched) EXPECT_TRUE(was) << name << " never received gradient";
}

// Perturbing one modality's parameters must not change another modality's
// representations.
TEST(Bundle, ModalityIsolation) {
  std::vector<ModalitySpec> mods{small_modality(0), small_modality(1)};
  std::map<int, EncoderSpec> specs{{0, small_mlp()}, {1, small_mlp()}};
  EncoderBundle bundle = cmssl::make_bundle(mods, specs, 8);
  Rng rng(6);
  Tensor img = testutil::random_tensor(mods[1].image_shape(), rng);

  Graph g1;
  std::vector<double> before = g1.value(bundle.encode(g1, 1, img).representation).values;
  for (auto& [name, t] : bundle.at(0).params)
    for (double& v : t.values) v += 0.37;
  Graph g2;
  std::vector<double> after = g2.value(bundle.encode(g2, 1, img).representation).values;
  EXPECT_EQ(0, std::memcmp(before.data(), after.data(), before.size() * sizeof(double)));
}

TEST(Bundle, MergedParamsAreNamespaced) {
  std::vector<ModalitySpec> mods{small_modality(0), small_modality(1)};
  std::map<int, EncoderSpec> specs{{0, small_mlp()}, {1, small_cnn()}};
  EncoderBundle bundle = cmssl::make_bundle(mods, specs, 8);
  ParamSet merged = bundle.merged_params();
  EXPECT_TRUE(merged.count("M0/fc0/w"));
  EXPECT_TRUE(merged.count("M1/conv0/w"));

  // round-trip through merged form
  for (auto& [name, t] : merged)
    for (double& v : t.values) v *= 2.0;
  bundle.load_merged(merged);
  EXPECT_EQ(bundle.at(0).params.at("fc0/w").values, merged.at("M0/fc0/w").values);
}
