#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../support/oracles.hpp"
#include "fsbd/metrics.hpp"

using namespace fsbd;

namespace {

ActivationMatrix random_acts(std::size_t n, std::size_t p, std::uint64_t seed) {
  ActivationMatrix m{n, p, std::vector<double>(n * p)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  for (auto& v : m.data) v = g(rng);
  return m;
}

// X·Q for a product of Givens rotations Q.
ActivationMatrix rotate(const ActivationMatrix& X, std::uint64_t seed) {
  ActivationMatrix Y = X;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ang(0, 6.283185307179586);
  for (int t = 0; t < 20; ++t) {
    const std::size_t a = rng() % X.cols, b = (a + 1 + rng() % (X.cols - 1)) % X.cols;
    const double th = ang(rng), c = std::cos(th), s = std::sin(th);
    for (std::size_t i = 0; i < X.rows; ++i) {
      double& u = Y.data[i * X.cols + a];
      double& v = Y.data[i * X.cols + b];
      const double nu = c * u - s * v, nv = s * u + c * v;
      u = nu;
      v = nv;
    }
  }
  return Y;
}

// Reference CKA in feature space: ‖YcᵀXc‖² / (‖XcᵀXc‖ ‖YcᵀYc‖).
double cka_feature_space(const ActivationMatrix& X, const ActivationMatrix& Y) {
  auto center = [](const ActivationMatrix& M) {
    std::vector<double> c = M.data;
    for (std::size_t j = 0; j < M.cols; ++j) {
      double m = 0;
      for (std::size_t i = 0; i < M.rows; ++i) m += M.data[i * M.cols + j];
      m /= double(M.rows);
      for (std::size_t i = 0; i < M.rows; ++i) c[i * M.cols + j] -= m;
    }
    return c;
  };
  auto cross = [](const std::vector<double>& a, std::size_t pa, const std::vector<double>& b, std::size_t pb,
                  std::size_t n) {
    double s = 0;
    for (std::size_t j = 0; j < pa; ++j)
      for (std::size_t k = 0; k < pb; ++k) {
        double d = 0;
        for (std::size_t i = 0; i < n; ++i) d += a[i * pa + j] * b[i * pb + k];
        s += d * d;
      }
    return s;
  };
  auto xc = center(X), yc = center(Y);
  const double xy = cross(xc, X.cols, yc, Y.cols, X.rows);
  return xy / std::sqrt(cross(xc, X.cols, xc, X.cols, X.rows) * cross(yc, Y.cols, yc, Y.cols, X.rows));
}

Dataset probe(std::size_t n, std::uint64_t seed) {
  auto d = synthetic(4, (n + 3) / 4, seed, {1, 8, 8});
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return d.subset(idx);
}

TriggerSet triggers_with(std::vector<std::vector<float>> etas) {
  TriggerSet s;
  for (auto& e : etas) {
    TriggerEntry t;
    t.source = Tensor<float>({1, 1, e.size()}, std::vector<float>(e.size(), 0.25f));
    t.adv = t.source;
    for (std::size_t i = 0; i < e.size(); ++i) t.adv.data[i] += e[i];
    s.entries.push_back(std::move(t));
  }
  return s;
}

}  // namespace

TEST(AccMain, ConstantPredictorMatchesClassShare) {
  auto topo = oracle::linear_model(64, 10);
  ParamVector<float> p(topo->layout());
  p[p.size() - 10 + 3] = 5.0f;  // bias of class 3 dominates
  Model<float> m(topo, p);
  auto test = synthetic(10, 10, 2, {1, 1, 64});
  EXPECT_DOUBLE_EQ(acc_main(m, test), 0.1);
  EXPECT_DOUBLE_EQ(acc_main(m, test, 3), 0.1);
  EXPECT_THROW(acc_main(m, Dataset{}), InputError);
}

TEST(AccBackdoor, CountsTargetHits) {
  auto topo = oracle::linear_model(3, 2);
  ParamVector<float> p(topo->layout());
  p[0] = 10.0f;  // class 0 iff first pixel exceeds 0.5
  p[6] = -5.0f;
  Model<float> m(topo, p);
  TriggerSet s = triggers_with({{0.7f, 0, 0}, {0.0f, 0.1f, 0}, {0.6f, 0, 0}, {-0.2f, 0, 0}});
  s.target_label = 0;
  EXPECT_DOUBLE_EQ(acc_backdoor(m, s), 0.5);
  EXPECT_THROW(acc_backdoor(m, TriggerSet{}), InputError);
}

TEST(LinearCka, MatrixIdentities) {
  auto X = random_acts(30, 6, 1), Y = random_acts(30, 4, 2);
  EXPECT_NEAR(linear_cka(X, X), 1.0, 1e-12);
  EXPECT_NEAR(linear_cka(X, Y), linear_cka(Y, X), 1e-12);
  EXPECT_NEAR(linear_cka(X, Y), cka_feature_space(X, Y), 1e-10);
  auto Xs = X;
  for (auto& v : Xs.data) v *= 7.5;
  EXPECT_NEAR(linear_cka(Xs, Y), linear_cka(X, Y), 1e-12);
  EXPECT_NEAR(linear_cka(rotate(X, 3), Y), linear_cka(X, Y), 1e-10);
  EXPECT_NEAR(linear_cka(rotate(X, 4), X), 1.0, 1e-10);
  ActivationMatrix flat{30, 2, std::vector<double>(60, 1.5)};
  EXPECT_EQ(linear_cka(flat, Y), 0.0);
}

TEST(LinearCka, ModelLevel) {
  auto topo = oracle::tiny_cnn();
  auto pr = probe(40, 3);
  auto a = init_model<float>(topo, 1), b = init_model<float>(topo, 2);
  EXPECT_NEAR(linear_cka(a, a, pr), 1.0, 1e-9);
  const double ab = linear_cka(a, b, pr);
  EXPECT_LT(ab, linear_cka(a, a, pr));
  EXPECT_NEAR(ab, linear_cka(b, a, pr), 1e-12);
  EXPECT_NEAR(ab, linear_cka(b, a, pr, 4), 1e-12);
  EXPECT_THROW(linear_cka(a, init_model<float>(oracle::small_cnn(), 1), pr), InputError);
}

TEST(LinearCka, RepresentationLayers) {
  auto topo = Topology::desk_cnn();
  EXPECT_EQ(representation_layers(topo), (std::vector<std::size_t>{2, 5, 8, 10}));
}

TEST(VarianceSeries, HandCase) {
  auto l = std::make_shared<const ParamLayout>(
      std::vector<std::pair<std::string, std::vector<std::size_t>>>{{"w", {2}}});
  std::vector<ParamVector<float>> snaps;
  for (int k = 0; k < 4; ++k) snaps.emplace_back(l, std::vector<float>{3.0f, float(k % 2)});
  ParamMask m(l);
  m.set(0);
  auto s = param_variance_series(snaps, m);
  ASSERT_EQ(s.size(), 3u);
  // complement coordinate runs 0,1,0,1: windows [0,1], [0,1,0], [0,1,0,1]
  const double want[] = {0.5, 1.0 / 3.0, 1.0 / 3.0};
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(s[k].window, k + 2);
    EXPECT_EQ(s[k].masked, 0.0);
    EXPECT_NEAR(s[k].complement, want[k], 1e-15);
  }
  EXPECT_THROW(param_variance_series(std::span(snaps).first(1), m), InputError);
}

TEST(Ssd, UniformVersusSpread) {
  auto same = triggers_with({{0.5f, 0, 0.5f}, {0.5f, 0, 0.5f}, {0.5f, 0, 0.5f}});
  auto s = trigger_ssd(same);
  ASSERT_EQ(s.size(), 3u);
  for (double v : s) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(sample_variance(s), 0.0);

  auto spread = triggers_with({{0.1f, 0, 0}, {0, 0.2f, 0}, {0, 0, -0.1f}, {0.1f, 0.1f, 0.1f}});
  auto d = trigger_ssd(spread);
  ASSERT_EQ(d.size(), 6u);
  EXPECT_NEAR(d[0], 0.01 + 0.04, 1e-7);  // pair (0,1)
  EXPECT_GT(sample_variance(d), 0.0);
}
