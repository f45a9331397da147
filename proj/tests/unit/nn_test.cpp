#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "../support/oracles.hpp"
#include "fsbd/model.hpp"

using namespace fsbd;

namespace {

Model<float> zero_model(const TopologyPtr& t) { return Model<float>(t, ParamVector<float>(t->layout())); }

double row_exp_sum(const Tensor<float>& lp, std::size_t row) {
  double s = 0;
  const std::size_t C = lp.shape[1];
  for (std::size_t k = 0; k < C; ++k) s += std::exp(double(lp.data[row * C + k]));
  return s;
}

}  // namespace

TEST(Topology, DeskCnnShape) {
  auto t = Topology::desk_cnn();
  EXPECT_EQ(t.classes(), 10u);
  EXPECT_EQ(t.layout()->total(), 27562u);
  EXPECT_EQ(t.layout()->entry(0).name, "conv1.weight");
  EXPECT_EQ(t.layout()->entry(0).shape, (std::vector<std::size_t>{8, 1, 3, 3}));
}

TEST(Topology, RejectsBadStacks) {
  EXPECT_THROW(Topology({1, 4, 4}, {LayerSpec::dense(16, 2)}, 2), InputError);
  EXPECT_THROW(Topology({1, 4, 4}, {LayerSpec::dense(15, 2), LayerSpec::log_softmax()}, 2), InputError);
  EXPECT_THROW(Topology({1, 4, 4}, {LayerSpec::log_softmax(), LayerSpec::dense(16, 2), LayerSpec::log_softmax()}, 2),
               InputError);
  EXPECT_THROW(Topology({1, 4, 4}, {LayerSpec::dense(16, 3), LayerSpec::log_softmax()}, 2), InputError);
}

TEST(Forward, ZeroWeightsGiveUniform) {
  auto t = oracle::tiny_cnn();
  auto x = oracle::random_batch(*t, 2, 7);
  auto lp = forward(zero_model(t), x);
  for (float v : lp.data) EXPECT_NEAR(v, std::log(1.0 / 4), 1e-6);
}

TEST(Forward, HandLogSoftmaxTwoClasses) {
  auto t = oracle::linear_model(2, 2);
  // W = I, b = 0, x = (1, 3): log-softmax of (1, 3).
  ParamVector<float> p(t->layout());
  p[0] = 1;
  p[3] = 1;
  Tensor<float> x({1, 1, 1, 2}, {1.0f, 3.0f});
  auto lp = forward(Model<float>(t, p), x);
  const double lz = std::log(std::exp(1.0) + std::exp(3.0));
  EXPECT_NEAR(lp.data[0], 1.0 - lz, 1e-6);
  EXPECT_NEAR(lp.data[1], 3.0 - lz, 1e-6);
}

TEST(Forward, BatchShapeAndNormalisation) {
  auto t = oracle::small_cnn();
  auto m = oracle::random_model(t, 3);
  auto x = oracle::random_batch(*t, 5, 4);
  auto lp = forward(m, x);
  EXPECT_EQ(lp.shape, (std::vector<std::size_t>{5, 10}));
  for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(row_exp_sum(lp, r), 1.0, 1e-5);
}

TEST(Forward, MatchesIndependentReference) {
  auto t = oracle::small_cnn();
  auto m = oracle::random_model<double>(t, 11);
  auto x = oracle::random_batch(*t, 1, 12).cast<double>();
  auto lp = forward(m, x);
  std::vector<double> p(m.params().values().begin(), m.params().values().end());
  auto ref = oracle::ref_forward(*t, p, x.data);
  for (std::size_t k = 0; k < 10; ++k) EXPECT_NEAR(lp.data[k], ref.log_probs[k], 1e-12);
}

TEST(Forward, ShapeMismatchThrows) {
  auto t = oracle::tiny_cnn();
  Tensor<float> bad({1, 1, 7, 8});
  EXPECT_THROW(forward(zero_model(t), bad), InputError);
}

TEST(NllLoss, UniformTenClasses) {
  Tensor<float> lp({2, 10}, float(std::log(0.1)));
  std::vector<int> y{3, 9};
  EXPECT_NEAR(nll_loss(lp, y), std::log(10.0), 1e-6);
}

TEST(NllLoss, PerfectPredictionIsZero) {
  Tensor<float> lp({2, 3}, -50.0f);
  lp.data[1] = 0;
  lp.data[5] = 0;
  EXPECT_EQ(nll_loss(lp, std::vector<int>{1, 2}), 0.0);
}

TEST(NllLoss, HandRows) {
  Tensor<float> lp({2, 2}, {-0.5f, -1.0f, -2.0f, -0.1f});
  EXPECT_NEAR(nll_loss(lp, std::vector<int>{0, 0}), (0.5 + 2.0) / 2, 1e-7);
}

TEST(NllLoss, LabelOutOfRange) {
  Tensor<float> lp({1, 3}, -1.0f);
  EXPECT_THROW(nll_loss(lp, std::vector<int>{3}), InputError);
  EXPECT_THROW(nll_loss(lp, std::vector<int>{-1}), InputError);
  EXPECT_THROW(nll_loss(lp, std::vector<int>{0, 1}), InputError);
}

TEST(GradLossParams, ZeroModelBiasIsSoftmaxMinusOneHot) {
  auto t = oracle::linear_model(2, 3);
  Tensor<float> x({2, 1, 1, 2}, {0.5f, 0.5f, 0.5f, 0.5f});
  std::vector<int> y{0, 2};
  auto g = grad_loss_params(zero_model(t), x, y);
  auto bias = g.entry(1);
  // softmax is uniform 1/3; one-hot averaged over the batch is (1/2, 0, 1/2).
  EXPECT_NEAR(bias[0], 1.0 / 3 - 0.5, 1e-6);
  EXPECT_NEAR(bias[1], 1.0 / 3, 1e-6);
  EXPECT_NEAR(bias[2], 1.0 / 3 - 0.5, 1e-6);
}

TEST(GradLossParams, DuplicatedRowKeepsMean) {
  auto t = oracle::tiny_cnn();
  auto m = oracle::random_model(t, 5);
  auto x1 = oracle::random_batch(*t, 1, 6);
  Tensor<float> x2({2, 1, 8, 8});
  std::copy(x1.data.begin(), x1.data.end(), x2.data.begin());
  std::copy(x1.data.begin(), x1.data.end(), x2.data.begin() + 64);
  auto a = grad_loss_params(m, x1, std::vector<int>{2});
  auto b = grad_loss_params(m, x2, std::vector<int>{2, 2});
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-7 + 1e-6 * std::abs(a[i]));
}

class GradientFd : public ::testing::TestWithParam<oracle::Flavor> {};

TEST_P(GradientFd, Float32AgainstCentralDifference) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto r = oracle::check_gradient<float>(oracle::small_cnn(), seed, GetParam(), 100, 1e-3, 1e-3);
    EXPECT_EQ(r.checked, 100u);
    EXPECT_LE(r.max_rel, 1e-3) << "seed " << seed;
  }
}

TEST_P(GradientFd, Float64ShadowAgainstCentralDifference) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto r = oracle::check_gradient<double>(oracle::small_cnn(), seed, GetParam(), 100, 1e-6, 1e-4);
    EXPECT_EQ(r.checked, 100u);
    EXPECT_LE(r.max_rel, 1e-5) << "seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllFlavors, GradientFd,
                         ::testing::Values(oracle::Flavor::loss_params, oracle::Flavor::loss_input,
                                           oracle::Flavor::logit_params),
                         [](const auto& info) {
                           switch (info.param) {
                             case oracle::Flavor::loss_params: return std::string("LossParams");
                             case oracle::Flavor::loss_input: return std::string("LossInput");
                             case oracle::Flavor::logit_params: return std::string("LogitParams");
                           }
                           return std::string("?");
                         });

TEST(GradLossInput, ZeroFirstLayerGivesZero) {
  auto t = oracle::linear_model(4, 3);
  auto m = oracle::random_model(t, 2);
  ParamVector<float> p = m.params();
  for (auto& w : p.entry(0)) w = 0;
  Tensor<float> x({1, 1, 4}, {0.1f, 0.2f, 0.3f, 0.4f});
  auto g = grad_loss_input(m.with_params(p), x, 1);
  for (float v : g.data) EXPECT_EQ(v, 0.0f);
}

TEST(GradLossInput, Deterministic) {
  auto t = oracle::small_cnn();
  auto m = oracle::random_model(t, 9);
  auto x = oracle::random_batch(*t, 1, 10);
  auto a = grad_loss_input(m, x, 4);
  auto b = grad_loss_input(m, x, 4);
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.shape, x.shape);
}

TEST(GradLogitParams, LastBiasIsOneMinusSoftmax) {
  auto t = oracle::linear_model(3, 4);
  auto m = oracle::random_model(t, 4);
  Tensor<float> x({1, 1, 3}, {0.3f, 0.6f, 0.9f});
  const int y = 2;
  auto g = grad_logit_params(m, x, y, 1);
  auto lp = forward(m, Tensor<float>({1, 1, 1, 3}, x.data));
  for (int k = 0; k < 4; ++k) {
    const double sm = std::exp(double(lp.data[k]));
    EXPECT_NEAR(g.data[k], (k == y ? 1.0 : 0.0) - sm, 1e-6);
  }
}

TEST(GradLogitParams, NoPathGivesZero) {
  auto t = oracle::tiny_cnn();
  auto m = oracle::random_model(t, 8);
  ParamVector<float> p = m.params();
  // dense2 weights zero: nothing upstream of them reaches the output.
  for (auto& w : p.entry(4)) w = 0;
  auto x = oracle::random_batch(*t, 1, 3);
  Tensor<float> x1({1, 8, 8}, x.data);
  for (std::size_t layer : {0u, 1u, 2u, 3u}) {
    auto g = grad_logit_params(m.with_params(p), x1, 1, layer);
    for (float v : g.data) EXPECT_EQ(v, 0.0f);
  }
}

TEST(GradLogitParams, InvalidLayer) {
  auto t = oracle::tiny_cnn();
  Tensor<float> x({1, 8, 8});
  EXPECT_THROW(grad_logit_params(zero_model(t), x, 0, 6), InputError);
}

TEST(SgdStep, Arithmetic) {
  auto t = oracle::linear_model(1, 2);
  ParamVector<float> p(t->layout(), 1.0f), g(t->layout(), 0.5f);
  auto out = sgd_step(Model<float>(t, p), g, 0.1f);
  for (float v : out.params().values()) EXPECT_FLOAT_EQ(v, 0.95f);
}

TEST(SgdStep, ZeroGradAndLinearity) {
  auto t = oracle::tiny_cnn();
  auto m = oracle::random_model(t, 1);
  ParamVector<float> zero(t->layout());
  EXPECT_EQ(sgd_step(m, zero, 0.3f).params(), m.params());
  ParamVector<float> g(t->layout(), 0.25f);
  auto two = sgd_step(sgd_step(m, g, 0.5f), g, 0.5f);
  auto one = sgd_step(m, g, 1.0f);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(two.params()[i], one.params()[i], 1e-6);
}

TEST(SgdStep, Errors) {
  auto t = oracle::tiny_cnn();
  auto m = oracle::random_model(t, 1);
  ParamVector<float> g(t->layout());
  EXPECT_THROW(sgd_step(m, g, 0.0f), InputError);
  ParamVector<float> other(oracle::linear_model(2, 2)->layout());
  EXPECT_THROW(sgd_step(m, other, 0.1f), InputError);
}

TEST(ParamVector, FlattenRoundTripIsBitwise) {
  auto t = oracle::small_cnn();
  auto m = oracle::random_model(t, 13);
  auto parts = unflatten(m.params());
  EXPECT_EQ(parts.size(), t->layout()->size());
  EXPECT_EQ(flatten(t->layout(), parts), m.params());
}

TEST(Model, InitIsSeededAndBounded) {
  auto t = std::make_shared<const Topology>(Topology::desk_cnn());
  auto a = init_model(t, 5), b = init_model(t, 5), c = init_model(t, 6);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
  const double bound = std::sqrt(6.0 / (9.0 + 72.0));
  for (float w : a.params().entry(0)) EXPECT_LE(std::abs(w), bound);
  for (float v : a.params().entry(1)) EXPECT_EQ(v, 0.0f);
}
