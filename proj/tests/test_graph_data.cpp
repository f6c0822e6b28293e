#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include <Eigen/LU>

#include "stgfsl/graph_data.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace stgfsl;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stgfsl_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_city(const fs::path& dir, int n, const std::string& signals, const std::string& edges = "0,1,1\n") {
  std::ofstream(dir / "meta.json") << R"({"name": "toy", "num_nodes": )" << n
                                   << R"(, "interval_minutes": 5, "feature_dim": 1})";
  std::ofstream(dir / "signals.csv") << signals;
  std::ofstream(dir / "edges.csv") << edges;
}

}  // namespace

TEST(LoadCity, InterpolatesInteriorGap) {
  const auto dir = scratch_dir("interp");
  write_city(dir, 2, "1.0,7\n,7\n3.0,7\n");
  const CityDataset ds = load_city(dir);
  EXPECT_DOUBLE_EQ(ds.series.values(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(ds.series.values(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(ds.series.values(2, 0), 3.0);
  fs::remove_all(dir);
}

TEST(LoadCity, ExtendsEndpointGaps) {
  const auto dir = scratch_dir("endpoint");
  write_city(dir, 2, ",1\n5.0,2\n5.0,\n");
  const CityDataset ds = load_city(dir);
  EXPECT_DOUBLE_EQ(ds.series.values(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(ds.series.values(1, 0), 5.0);
  EXPECT_DOUBLE_EQ(ds.series.values(2, 0), 5.0);
  EXPECT_DOUBLE_EQ(ds.series.values(2, 1), 2.0);
  fs::remove_all(dir);
}

TEST(LoadCity, MissingFileNamesTheFile) {
  const auto dir = scratch_dir("missing");
  write_city(dir, 2, "1,2\n");
  fs::remove(dir / "edges.csv");
  try {
    load_city(dir);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("edges.csv"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(LoadCity, DimensionMismatchIsValidationError) {
  const auto dir = scratch_dir("dims");
  write_city(dir, 3, "1,2\n3,4\n");
  EXPECT_THROW(load_city(dir), ValidationError);
  fs::remove_all(dir);
}

TEST(LoadCity, AllMissingNodeIsValidationError) {
  const auto dir = scratch_dir("allmissing");
  write_city(dir, 2, "1,\n2,\n");
  EXPECT_THROW(load_city(dir), ValidationError);
  fs::remove_all(dir);
}

TEST(LoadCity, DirectedEdgesAreSymmetrizedDownstream) {
  const auto dir = scratch_dir("directed");
  write_city(dir, 3, "1,2,3\n2,3,4\n", "0,1,1\n2,1,0.5\n");
  const CityDataset ds = load_city(dir);
  EXPECT_EQ(ds.graph.adjacency(1, 0), 0.0);
  const MatD a = ds.graph.symmetric_adjacency();
  EXPECT_EQ(a(0, 1), 1.0);
  EXPECT_EQ(a(1, 0), 1.0);
  EXPECT_EQ(a(1, 2), 1.0);
  EXPECT_EQ(a(0, 2), 0.0);
  fs::remove_all(dir);
}

TEST(LoadCity, SaveLoadRoundTripIsBitExact) {
  SynthSpec spec;
  spec.names = {"a", "b"};
  spec.node_counts = {5, 4};
  spec.length = 300;
  spec.missing_rate = 0.05;
  const auto cities = synth_cities(spec, 3);
  const auto dir = scratch_dir("roundtrip");
  save_city(cities[0], dir);
  const CityDataset back = load_city(dir);
  EXPECT_EQ(back.name, "a");
  EXPECT_EQ(back.series.values, cities[0].series.values);
  EXPECT_EQ(back.graph.adjacency, cities[0].graph.adjacency);
  ASSERT_TRUE(back.graph.distances.has_value());
  EXPECT_EQ(*back.graph.distances, *cities[0].graph.distances);
  fs::remove_all(dir);
}

TEST(FillGaps, NeverAltersObservedAndStaysWithinBrackets) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-5.0, 5.0), coin(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    SignalSeries s;
    s.num_nodes = 3;
    s.values.resize(40, 3);
    s.observed.assign(40 * 3, 1);
    for (Eigen::Index k = 0; k < s.values.size(); ++k) s.values.data()[k] = u(rng);
    for (int t = 1; t < 39; ++t)
      for (int i = 0; i < 3; ++i)
        if (coin(rng) < 0.3) s.observed[t * 3 + i] = 0;
    const SignalSeries before = s;
    fill_gaps(s);
    for (int i = 0; i < 3; ++i) {
      int prev = -1;
      for (int t = 0; t < 40; ++t) {
        if (before.is_observed(t, i)) {
          EXPECT_EQ(s.values(t, i), before.values(t, i));
          prev = t;
          continue;
        }
        int next = t;
        while (!before.is_observed(next, i)) ++next;
        const double lo = std::min(before.values(prev, i), before.values(next, i));
        const double hi = std::max(before.values(prev, i), before.values(next, i));
        EXPECT_GE(s.values(t, i), lo - 1e-12);
        EXPECT_LE(s.values(t, i), hi + 1e-12);
      }
    }
  }
}

TEST(ZScore, PopulationStatsOfOneTwoThree) {
  MatD v(3, 1);
  v << 1.0, 2.0, 3.0;
  const NormStats st = fit_zscore(v);
  EXPECT_DOUBLE_EQ(st.mean, 2.0);
  EXPECT_NEAR(st.std, std::sqrt(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(st.std, 0.8165, 5e-5);
}

TEST(ZScore, ConstantSeriesIsDegenerate) {
  EXPECT_THROW(fit_zscore(MatD::Constant(4, 2, 5.0)), DegenerateStatsError);
}

TEST(ZScore, CenteringAndUnitScaling) {
  const NormStats st{3.0, 2.0};
  MatD x(1, 2);
  x << 3.0, 5.0;
  const MatD z = apply_zscore(x, st);
  EXPECT_EQ(z(0, 0), 0.0);
  EXPECT_EQ(z(0, 1), 1.0);
}

TEST(ZScore, RoundTripAndNormalizedMoments) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const MatD x = testing_support::random_matrix(50, 7, rng, 3.0).array() + 40.0;
    const NormStats st = fit_zscore(x);
    const MatD z = apply_zscore(x, st);
    const MatD back = invert_zscore(z, st);
    for (Eigen::Index k = 0; k < x.size(); ++k)
      EXPECT_LE(std::abs(back.data()[k] - x.data()[k]), 1e-9 * std::abs(x.data()[k]));
    EXPECT_NEAR(z.mean(), 0.0, 1e-9);
    EXPECT_NEAR(std::sqrt((z.array() - z.mean()).square().mean()), 1.0, 1e-9);
  }
}

TEST(GaussianKernel, ZeroDistanceKeepsEdge) {
  MatD d(2, 2);
  d << 0.0, 0.0, 0.0, 0.0;
  const auto k = gaussian_adjacency(d, 1.0, 0.5);
  EXPECT_EQ(k.weights(0, 1), 1.0);
  EXPECT_EQ(k.adjacency(0, 1), 1.0);
  EXPECT_EQ(k.adjacency(0, 0), 0.0);
}

TEST(GaussianKernel, ThresholdAtOneSigma) {
  MatD d(2, 2);
  d << 0.0, 2.0, 2.0, 0.0;
  const auto dropped = gaussian_adjacency(d, 2.0, 0.5);
  EXPECT_EQ(dropped.adjacency(0, 1), 0.0);
  const auto kept = gaussian_adjacency(d, 2.0, 0.1);
  EXPECT_EQ(kept.adjacency(0, 1), 1.0);
  EXPECT_NEAR(kept.weights(0, 1), 0.3679, 5e-5);
}

TEST(GaussianKernel, NonPositiveSigmaRejected) {
  EXPECT_THROW(gaussian_adjacency(MatD::Zero(2, 2), 0.0), ParameterError);
  EXPECT_THROW(gaussian_adjacency(MatD::Zero(2, 2), -1.0), ParameterError);
}

TEST(GaussianKernel, DecreasingInDistanceAndKappaZeroKeepsAll) {
  MatD d(4, 4);
  d << 0, 0.5, 1.0, 3.0, 0.5, 0, 0.7, 2.0, 1.0, 0.7, 0, 4.0, 3.0, 2.0, 4.0, 0;
  const auto k = gaussian_adjacency(d, 1.5, 0.0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      if (i == j) continue;
      EXPECT_EQ(k.adjacency(i, j), 1.0);
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b)
          if (a != b && d(a, b) > d(i, j)) {
            EXPECT_LT(k.weights(a, b), k.weights(i, j));
          }
    }
}

TEST(GaussianKernel, DefaultSigmaIsStdOfOffDiagonal) {
  MatD d(2, 2);
  d << 0, 1, 3, 0;
  EXPECT_DOUBLE_EQ(default_kernel_sigma(d), 1.0);
}

TEST(Windows, CountExamples) {
  EXPECT_EQ(make_windows(MatD::Zero(20, 2), 12, 6, 1).size(), 3u);
  EXPECT_EQ(make_windows(MatD::Zero(18, 2), 12, 6, 1).size(), 1u);
  EXPECT_THROW(make_windows(MatD::Zero(17, 2), 12, 6, 1), EmptyDatasetError);
}

TEST(Windows, CountFormulaOverRandomShapes) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> len(1, 120), hist(1, 15), hor(1, 8), stride(1, 7);
  for (int trial = 0; trial < 200; ++trial) {
    const int l = len(rng), t = hist(rng), m = hor(rng), s = stride(rng);
    MatD v(l, 1);
    for (int k = 0; k < l; ++k) v(k, 0) = k;
    if (l < t + m) {
      EXPECT_THROW(make_windows(v, t, m, s), EmptyDatasetError);
      continue;
    }
    const auto w = make_windows(v, t, m, s);
    ASSERT_EQ(w.size(), static_cast<std::size_t>((l - t - m) / s + 1)) << l << " " << t << " " << m << " " << s;
    for (std::size_t k = 0; k < w.size(); ++k) {
      EXPECT_EQ(w[k].t0, static_cast<int>(k) * s);
      // y follows x immediately in the same series
      EXPECT_EQ(w[k].x(t - 1, 0) + 1.0, w[k].y(0, 0));
      EXPECT_EQ(w[k].x(0, 0), w[k].t0);
    }
  }
}

TEST(Windows, AdjacentWindowsShareSteps) {
  MatD v(30, 1);
  for (int k = 0; k < 30; ++k) v(k, 0) = k;
  const auto w = make_windows(v, 5, 3, 1);
  for (std::size_t k = 0; k + 1 < w.size(); ++k) {
    MatD a(8, 1), b(8, 1);
    a << w[k].x, w[k].y;
    b << w[k + 1].x, w[k + 1].y;
    EXPECT_EQ(a.bottomRows(7), b.topRows(7));
  }
}

TEST(SplitTarget, AdaptPortionLengths) {
  EXPECT_EQ(few_shot_steps(3, 5), 864);
  EXPECT_EQ(few_shot_steps(3, 10), 432);
  EXPECT_EQ(few_shot_steps(1, 10), 144);
  const auto split = split_target(MatD::Zero(1000, 2), 5, 3, 12, 6);
  EXPECT_EQ(split.boundary, 864);
  EXPECT_EQ(split.adapt.size(), window_count(864, 12, 6, 1));
  EXPECT_EQ(split.test.size(), window_count(1000 - 864, 12, 6, 1));
}

TEST(SplitTarget, NoWindowCrossesBoundary) {
  const auto split = split_target(MatD::Zero(600, 1), 10, 2, 12, 6);
  for (const auto& w : split.adapt) EXPECT_LE(w.t0 + 18, split.boundary);
  for (const auto& w : split.test) EXPECT_GE(w.t0, split.boundary);
}

TEST(SplitTarget, InsufficientSpanIsValidationError) {
  EXPECT_THROW(split_target(MatD::Zero(288, 1), 5, 1, 12, 6), ValidationError);
  EXPECT_THROW(split_target(MatD::Zero(300, 1), 5, 1, 12, 6), ValidationError);
}

TEST(Synth, NoiseAndRhoZeroGivePureSinusoid) {
  SynthSpec spec;
  spec.names = {"a", "b"};
  spec.node_counts = {6, 4};
  spec.length = 400;
  spec.noise = 0.0;
  spec.rho_min = spec.rho_max = 0.0;
  const auto cities = synth_cities(spec, 9);
  const double period = 288.0;
  for (const auto& c : cities)
    for (int i = 0; i < c.graph.num_nodes; ++i) {
      // s(t) = level + a sin(ωt + φ): fit level/a/φ from three samples, check all
      const auto col = c.series.values.col(i);
      const double w = 6.283185307179586 / period;
      Eigen::Matrix3d A;
      Eigen::Vector3d b;
      for (int r = 0; r < 3; ++r) {
        const int t = r * 37;
        A.row(r) << 1.0, std::sin(w * t), std::cos(w * t);
        b(r) = col(t);
      }
      const Eigen::Vector3d coef = A.partialPivLu().solve(b);
      for (int t = 0; t < spec.length; ++t)
        EXPECT_NEAR(col(t), coef(0) + coef(1) * std::sin(w * t) + coef(2) * std::cos(w * t), 1e-9);
    }
}

TEST(Synth, DeterministicGivenSeed) {
  const SynthSpec spec;
  const auto a = synth_cities(spec, 4), b = synth_cities(spec, 4), c = synth_cities(spec, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].series.values, b[k].series.values);
    EXPECT_EQ(a[k].graph.adjacency, b[k].graph.adjacency);
  }
  EXPECT_NE(a[0].series.values, c[0].series.values);
}

TEST(Synth, DefaultSpecProducesValidCities) {
  const auto cities = synth_cities(SynthSpec{}, 0);
  ASSERT_EQ(cities.size(), 4u);
  const int expected[] = {20, 20, 20, 15};
  for (std::size_t k = 0; k < 4; ++k) {
    const auto& c = cities[k];
    EXPECT_EQ(c.graph.num_nodes, expected[k]);
    EXPECT_EQ(c.series.num_nodes, expected[k]);
    EXPECT_EQ(c.series.length(), 2016);
    EXPECT_EQ(c.series.values.cols(), expected[k]);
    EXPECT_TRUE(c.series.values.allFinite());
    EXPECT_GT(c.stats.std, 0.0);
    const MatD a = c.graph.symmetric_adjacency();
    EXPECT_EQ(a, a.transpose());
    EXPECT_EQ(a.diagonal().sum(), 0.0);
    const double mean_degree = a.sum() / expected[k];
    EXPECT_GT(mean_degree, 2.0);
    EXPECT_LT(mean_degree, 8.0);
  }
}

TEST(Synth, TooFewNodesRejected) {
  SynthSpec spec;
  spec.names = {"a"};
  spec.node_counts = {1};
  EXPECT_THROW(synth_cities(spec, 0), ParameterError);
}
