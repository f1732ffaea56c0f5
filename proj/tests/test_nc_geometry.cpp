#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nfilab/nc_geometry.hpp"
#include "nfilab/softmax_ce.hpp"

using namespace nfilab;

TEST(SimplexETF, AntipodalPair) {
  const auto f = build_simplex_etf(2, 1, 1.0);
  EXPECT_NEAR(std::abs(f.vectors(0, 0)), 1.0, 1e-15);
  EXPECT_NEAR(f.vectors(0, 0), -f.vectors(1, 0), 1e-15);
}

TEST(SimplexETF, GramMatchesDefinition) {
  for (int K = 2; K <= 12; ++K) {
    for (int extra : {0, 3}) {
      const int d = K - 1 + extra;
      const double scale = 0.5 + K;
      const auto f = build_simplex_etf(K, d, scale);
      const Matrix gram = f.vectors * f.vectors.transpose();
      const Matrix want = scale * scale * (static_cast<double>(K) / (K - 1)) *
                          (Matrix::Identity(K, K) - Matrix::Constant(K, K, 1.0 / K));
      EXPECT_LE((gram - want).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LE(f.vectors.colwise().sum().norm(), 1e-10 * K * scale);
    }
  }
  const auto f3 = build_simplex_etf(3, 2, 1.0);
  EXPECT_NEAR(f3.vectors.row(0).dot(f3.vectors.row(1)), -0.5, 1e-12);
  const auto f4 = build_simplex_etf(4, 8, 2.0);
  EXPECT_NEAR(f4.vectors.row(2).dot(f4.vectors.row(3)), -4.0 / 3.0, 1e-12);
  EXPECT_NEAR(f4.vectors.row(1).norm(), 2.0, 1e-12);
}

TEST(SimplexETF, DimensionTooSmall) {
  EXPECT_THROW(build_simplex_etf(5, 3, 1.0), DimensionTooSmall);
  EXPECT_THROW(build_simplex_etf(1, 3, 1.0), DimensionTooSmall);
}

TEST(OrthogonalNC, HandExampleKTwo) {
  const auto s = build_orthogonal_nc_state(2, 2, 1.0, 1.0);
  EXPECT_NEAR(s.global_mean(0), 0.5, 1e-15);
  EXPECT_NEAR(s.global_mean(1), 0.5, 1e-15);
  EXPECT_NEAR(s.centered_means(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(s.centered_means(0, 1), -0.5, 1e-15);
  EXPECT_NEAR(s.centered_means(1, 0), -0.5, 1e-15);
  EXPECT_EQ(s.classifier_mean.norm(), 0.0);
}

TEST(OrthogonalNC, LemmaHoldsConstructively) {
  for (int K = 2; K <= 10; ++K) {
    for (std::optional<std::uint64_t> seed : {std::optional<std::uint64_t>{}, std::optional<std::uint64_t>{K * 17u}}) {
      const double R = 1.0 + 0.3 * K;
      const auto s = build_orthogonal_nc_state(K, K + 3, R, 2.0, seed);
      EXPECT_NEAR(s.global_mean.squaredNorm(), R * R / K, 1e-12);
      for (int k = 0; k < K; ++k) {
        EXPECT_NEAR(s.global_mean.dot(s.centered_means.row(k).transpose()), 0.0, 1e-10);
        EXPECT_NEAR(s.class_means.row(k).norm(), R, 1e-12);
        for (int q = k + 1; q < K; ++q) EXPECT_NEAR(s.class_means.row(k).dot(s.class_means.row(q)), 0.0, 1e-12);
        EXPECT_NEAR(s.centered_rows.row(k).norm(), 2.0, 1e-12);
        if (!seed) {
          EXPECT_GE(s.class_means.row(k).minCoeff(), 0.0);
        }
      }
      EXPECT_TRUE(verify_nc(s, 1e-8).passes());
      EXPECT_TRUE(verify_nc(s, 1e-8).passes_uncentered_nc3());
    }
  }
  const auto s4 = build_orthogonal_nc_state(4, 4, 1.0, 1.0);
  EXPECT_NEAR(s4.global_mean.norm(), 0.5, 1e-15);
  EXPECT_THROW(build_orthogonal_nc_state(5, 4, 1.0, 1.0), DimensionTooSmall);
}

TEST(VerifyNC, ShiftedClassifierMeanBreaksOnlyUncenteredSelfDuality) {
  auto s = build_orthogonal_nc_state(5, 8, 2.0, 1.5);
  Vector v = Vector::Zero(8);
  v(7) = 3.0;
  s.shift_classifier_mean(v);
  const auto rep = verify_nc(s, 1e-8);
  EXPECT_LE(rep.centering, 1e-12);
  EXPECT_LE(rep.self_duality, 1e-12);
  EXPECT_GT(rep.self_duality_uncentered, 0.1);
  EXPECT_TRUE(rep.passes());
  EXPECT_FALSE(rep.passes_uncentered_nc3());
}

TEST(VerifyNC, RandomStateFails) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  Matrix mu(6, 10), w(6, 10);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 10; ++j) {
      mu(i, j) = n(rng);
      w(i, j) = n(rng);
    }
  const auto rep = verify_nc(NCState::from(mu, w), 1e-8);
  EXPECT_FALSE(rep.passes());
  EXPECT_GT(rep.etf_gram, 0.05);
  EXPECT_GT(rep.self_duality, 0.05);
}

TEST(VerifyNC, WithinClassVariability) {
  const auto s = build_orthogonal_nc_state(3, 4, 1.0, 1.0);
  Matrix feats(6, 4);
  std::vector<int> labels{0, 0, 1, 1, 2, 2};
  for (int i = 0; i < 6; ++i) feats.row(i) = s.class_means.row(labels[i]);
  EXPECT_NEAR(*verify_nc(s, 1e-8, &feats, &labels).within_class, 0.0, 1e-15);
  feats(0, 3) += 0.5;
  EXPECT_FALSE(verify_nc(s, 1e-8, &feats, &labels).passes());
}

TEST(ResidualMass, Examples) {
  EXPECT_NEAR(residual_mass(2.0, 5.0, 10), 9.0 * std::exp(-100.0 / 9.0), 1e-18);
  EXPECT_NEAR(residual_mass(2.0, 5.0, 10), 1.3451e-4, 1e-8);
  EXPECT_EQ(residual_mass(0.0, 3.0, 2), 1.0);
  EXPECT_GT(residual_mass(1.0, 3.0, 4), residual_mass(1.0, 3.1, 4));
}

TEST(ResidualMass, MatchesBruteForceSoftmaxOnConstructedLogits) {
  for (int K = 2; K <= 10; ++K) {
    const auto s = build_orthogonal_nc_state(K, K, 3.0, 6.0, 5u + K);
    const double wn = s.centered_rows.row(0).norm();
    const double mn = s.centered_means.row(0).norm();
    for (int r = 0; r < K; ++r) {
      const Eigen::VectorXd z = s.classifier * s.class_means.row(r).transpose();
      const double mx = z.maxCoeff();
      double sum = 0.0, off = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(z(k) - mx);
      for (int k = 0; k < K; ++k)
        if (k != r) off += std::exp(z(k) - mx) / sum;
      EXPECT_NEAR(residual_mass(wn, mn, K), off, 1e-6 * off) << "K=" << K;
    }
  }
}

TEST(NCStateJson, RoundTrip) {
  const auto s = build_orthogonal_nc_state(3, 5, 1.5, 0.7, 3u);
  const auto back = nc_state_from_json(to_json(s));
  EXPECT_EQ(back.K(), 3);
  EXPECT_EQ(back.d(), 5);
  EXPECT_LE((back.class_means - s.class_means).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_LE((back.classifier - s.classifier).cwiseAbs().maxCoeff(), 0.0);
  nlohmann::json bad = to_json(s);
  bad["classifier"].erase(0);
  try {
    nc_state_from_json(bad);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field, "classifier");
  }
}
