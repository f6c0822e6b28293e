#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <random>
#include <set>

#include "stgfsl/experiment.hpp"
#include "stgfsl/meta_train.hpp"
#include "support.hpp"

using namespace stgfsl;
using testing_support::random_matrix;
using testing_support::tiny_model;

namespace {

// Source cities over random graphs with windows cut from a random series.
struct Toy {
  std::vector<std::unique_ptr<CityGraph>> graphs;
  std::vector<TrainingCity> cities;

  Toy(const std::vector<int>& nodes, int length, const ModelConfig& mc, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t c = 0; c < nodes.size(); ++c) {
      graphs.push_back(std::make_unique<CityGraph>(testing_support::random_graph(nodes[c], 0.5, rng)));
      const MatD series = random_matrix(length, nodes[c] * mc.feature_dim, rng);
      cities.push_back({"city" + std::to_string(c), graphs.back().get(),
                        make_windows(series, mc.history, mc.horizon, 1)});
    }
  }
};

Params model_params(const ModelConfig& mc, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return testing_support::scrambled(init_params(mc, rng), rng, 0.4);
}

std::set<int> starts(const std::vector<WindowSample>& ws) {
  std::set<int> s;
  for (const auto& w : ws) s.insert(w.t0);
  return s;
}

bool same(const Params& a, const Params& b) {
  if (a.names() != b.names()) return false;
  for (std::size_t i = 0; i < a.num_segments(); ++i)
    if (a.segment(i) != b.segment(i)) return false;
  return true;
}

double max_diff(const Params& a, const Params& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.num_segments(); ++i) m = std::max(m, testing_support::max_abs_diff(a.segment(i), b.segment(i)));
  return m;
}

}  // namespace

TEST(SampleTasks, SingleCity) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 40, mc, 1);
  MetaConfig cfg;
  std::mt19937_64 rng(2);
  for (const Task& t : sample_tasks(toy.cities, cfg, rng)) {
    EXPECT_EQ(t.city_name, "city0");
    EXPECT_EQ(t.support.size(), 4u);
    EXPECT_EQ(t.query.size(), 4u);
  }
}

TEST(SampleTasks, ExhaustiveSplit) {
  const ModelConfig mc = tiny_model();
  Toy toy({3}, mc.history + mc.horizon + 2, mc, 3);
  ASSERT_EQ(toy.cities[0].windows.size(), 3u);
  MetaConfig cfg;
  cfg.k_support = 2;
  cfg.k_query = 1;
  std::mt19937_64 rng(4);
  for (const Task& t : sample_tasks(toy.cities, cfg, rng)) {
    std::set<int> all = starts(t.support);
    for (int s : starts(t.query)) all.insert(s);
    EXPECT_EQ(all, (std::set<int>{0, 1, 2}));
  }
}

TEST(SampleTasks, DeterministicGivenRngState) {
  const ModelConfig mc = tiny_model();
  Toy toy({3, 4, 5}, 60, mc, 5);
  MetaConfig cfg;
  std::mt19937_64 a(9), b(9);
  const auto ta = sample_tasks(toy.cities, cfg, a), tb = sample_tasks(toy.cities, cfg, b);
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t k = 0; k < ta.size(); ++k) {
    EXPECT_EQ(ta[k].city_name, tb[k].city_name);
    EXPECT_EQ(starts(ta[k].support), starts(tb[k].support));
    EXPECT_EQ(starts(ta[k].query), starts(tb[k].query));
  }
}

TEST(SampleTasks, SupportAndQueryDisjoint) {
  const ModelConfig mc = tiny_model();
  Toy toy({3, 4}, 30, mc, 6);
  MetaConfig cfg;
  cfg.task_batch = 50;
  std::mt19937_64 rng(7);
  std::set<std::string> seen;
  for (const Task& t : sample_tasks(toy.cities, cfg, rng)) {
    seen.insert(t.city_name);
    const auto s = starts(t.support), q = starts(t.query);
    EXPECT_EQ(s.size(), 4u);
    EXPECT_EQ(q.size(), 4u);
    for (int x : q) EXPECT_EQ(s.count(x), 0u);
    for (const auto& w : t.support) EXPECT_EQ(w.x.cols(), toy.cities[t.city_index].graph->num_nodes);
  }
  EXPECT_EQ(seen.size(), 2u);
}

TEST(SampleTasks, InsufficientWindowsNamesTheCity) {
  const ModelConfig mc = tiny_model();
  Toy toy({3}, mc.history + mc.horizon + 1, mc, 8);
  toy.cities[0].name = "tiny_town";
  MetaConfig cfg;
  std::mt19937_64 rng(9);
  try {
    sample_tasks(toy.cities, cfg, rng);
    FAIL() << "expected SamplingError";
  } catch (const SamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("tiny_town"), std::string::npos);
  }
  EXPECT_THROW(sample_tasks({}, cfg, rng), SamplingError);
}

TEST(JointLoss, PerfectPredictionWithoutReconIsZero) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 20, mc, 10);
  Params theta = model_params(mc, 11);
  theta["pred.w"].setZero();
  theta["pred.b"].setConstant(0.3);
  std::vector<WindowSample> ws(toy.cities[0].windows.begin(), toy.cities[0].windows.begin() + 3);
  for (auto& w : ws) w.y.setConstant(0.3);
  CityContext ctx("c", *toy.cities[0].graph);
  const LossParts l = joint_loss(theta, ws, ctx, mc, LossSettings{0.0, false});
  EXPECT_EQ(l.le, 0.0);
  EXPECT_EQ(l.total, 0.0);
  EXPECT_GT(l.lg, 0.0);
}

TEST(JointLoss, LambdaScalesReconTermOnly) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 20, mc, 12);
  const Params theta = model_params(mc, 13);
  const std::vector<WindowSample> ws(toy.cities[0].windows.begin(), toy.cities[0].windows.begin() + 3);
  CityContext ctx("c", *toy.cities[0].graph);
  for (bool normalize : {false, true}) {
    const LossParts l0 = joint_loss(theta, ws, ctx, mc, LossSettings{0.0, normalize});
    const LossParts l1 = joint_loss(theta, ws, ctx, mc, LossSettings{1.0, normalize});
    EXPECT_NEAR(l1.total - l0.total, l1.lg, 1e-14);
    EXPECT_EQ(l0.lg, l1.lg);
  }
}

TEST(JointLoss, ReconTermAveragesWindows) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 20, mc, 14);
  const Params theta = model_params(mc, 15);
  const auto& w = toy.cities[0].windows;
  CityContext ctx("c", *toy.cities[0].graph);
  const LossSettings ls{1.0, false};
  const LossParts both = joint_loss(theta, std::vector<WindowSample>{w[0], w[5]}, ctx, mc, ls);
  const LossParts a = joint_loss(theta, std::vector<WindowSample>{w[0]}, ctx, mc, ls);
  const LossParts b = joint_loss(theta, std::vector<WindowSample>{w[5]}, ctx, mc, ls);
  EXPECT_NEAR(both.lg, 0.5 * (a.lg + b.lg), 1e-12);
  EXPECT_NEAR(both.le, 0.5 * (a.le + b.le), 1e-12);
}

TEST(JointLoss, NoReconAblationDropsLambda) {
  ModelConfig mc = tiny_model();
  MetaConfig cfg;
  EXPECT_EQ(effective_lambda(cfg, mc), 1.5);
  mc.ablation = Ablation::m3;
  EXPECT_EQ(effective_lambda(cfg, mc), 0.0);
}

TEST(InnerAdapt, ZeroRateIsIdentity) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 16);
  const Params theta = model_params(mc, 17);
  MetaConfig cfg;
  cfg.alpha = 0.0;
  cfg.inner_steps = 3;
  std::mt19937_64 rng(18);
  const Task task = sample_tasks(toy.cities, cfg, rng)[0];
  CityContext ctx(task.city_name, *toy.cities[0].graph);
  EXPECT_TRUE(same(inner_adapt(theta, task, ctx, mc, cfg).adapted, theta));
}

TEST(InnerAdapt, TwoStepsComposeOneStep) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 19);
  const Params theta = model_params(mc, 20);
  MetaConfig cfg;
  cfg.alpha = 0.05;
  std::mt19937_64 rng(21);
  const Task task = sample_tasks(toy.cities, cfg, rng)[0];
  CityContext ctx(task.city_name, *toy.cities[0].graph);
  const Params once = inner_adapt(theta, task, ctx, mc, cfg).adapted;
  const Params twice_manual = inner_adapt(once, task, ctx, mc, cfg).adapted;
  cfg.inner_steps = 2;
  const InnerResult r = inner_adapt(theta, task, ctx, mc, cfg);
  EXPECT_LE(max_diff(r.adapted, twice_manual), 1e-15);
  ASSERT_EQ(r.trajectory.size(), 2u);
  EXPECT_TRUE(same(r.trajectory[0], theta));
  EXPECT_TRUE(same(r.trajectory[1], once));
}

TEST(InnerAdapt, OneStepIsGradientStep) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 22);
  const Params theta = model_params(mc, 23);
  MetaConfig cfg;
  std::mt19937_64 rng(24);
  const Task task = sample_tasks(toy.cities, cfg, rng)[0];
  CityContext ctx(task.city_name, *toy.cities[0].graph);
  Params want = theta;
  want.axpy(-cfg.alpha, loss_and_grad(theta, task.support, ctx, mc, loss_settings(cfg, mc)).grad);
  EXPECT_TRUE(same(inner_adapt(theta, task, ctx, mc, cfg).adapted, want));
}

TEST(InnerAdapt, DivergenceCarriesEpisode) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 25);
  Params theta = model_params(mc, 26);
  theta["pred.b"].setConstant(1e4);
  MetaConfig cfg;
  std::mt19937_64 rng(27);
  const Task task = sample_tasks(toy.cities, cfg, rng)[0];
  CityContext ctx(task.city_name, *toy.cities[0].graph);
  try {
    inner_adapt(theta, task, ctx, mc, cfg, 7);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.episode(), 7);
  }
  theta["pred.b"](0, 0) = std::nan("");
  EXPECT_THROW(inner_adapt(theta, task, ctx, mc, cfg, 3), DivergenceError);
}

TEST(MetaGradient, ZeroInnerRateIsQueryGradient) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 28);
  const Params theta = model_params(mc, 29);
  MetaConfig cfg;
  cfg.alpha = 0.0;
  std::mt19937_64 rng(30);
  const Task task = sample_tasks(toy.cities, cfg, rng)[0];
  CityContext ctx(task.city_name, *toy.cities[0].graph);
  const Params want = loss_and_grad(theta, task.query, ctx, mc, loss_settings(cfg, mc)).grad;
  for (bool second : {true, false}) {
    cfg.second_order = second;
    EXPECT_TRUE(same(meta_gradient(theta, task, ctx, mc, cfg).grad, want));
  }
}

TEST(MetaGradient, HessianVectorMatchesGradientDifferences) {
  const ModelConfig mc = tiny_model(1, 6, 2, 2, 4);
  Toy toy({3}, 20, mc, 31);
  const Params theta = model_params(mc, 32);
  const std::vector<WindowSample> ws(toy.cities[0].windows.begin(), toy.cities[0].windows.begin() + 2);
  CityContext ctx("c", *toy.cities[0].graph);
  const LossSettings ls{1.5, false};
  std::mt19937_64 rng(33);
  Params v = theta.zeros_like();
  for (std::size_t i = 0; i < v.num_segments(); ++i)
    v.segment(i) = random_matrix(v.segment(i).rows(), v.segment(i).cols(), rng);
  const Params hv = hessian_vector(theta, v, ws, ctx, mc, ls);
  const double h = 1e-5;
  Params plus = theta, minus = theta;
  plus.axpy(h, v);
  minus.axpy(-h, v);
  Params fd = loss_and_grad(plus, ws, ctx, mc, ls).grad;
  fd.axpy(-1.0, loss_and_grad(minus, ws, ctx, mc, ls).grad);
  for (Eigen::Index k = 0; k < theta.total_size(); ++k)
    EXPECT_LE(testing_support::gradient_error(hv.flat(k) * 2.0 * h, fd.flat(k), 1e-4 * 2.0 * h), 1e-4) << k;
}

TEST(MetaGradient, SecondOrderMatchesFiniteDifferences) {
  const ModelConfig mc = tiny_model(1, 6, 2, 2, 4);
  Toy toy({3}, 20, mc, 34);
  const Params theta = model_params(mc, 35);
  MetaConfig cfg;
  cfg.alpha = 0.3;
  cfg.k_support = 1;
  cfg.k_query = 1;
  cfg.inner_steps = 1;
  std::mt19937_64 rng(36);
  const Task task = sample_tasks(toy.cities, cfg, rng)[0];
  CityContext ctx(task.city_name, *toy.cities[0].graph);
  const LossSettings ls = loss_settings(cfg, mc);
  const auto objective = [&](const Params& p) {
    Params adapted = p;
    adapted.axpy(-cfg.alpha, loss_and_grad(p, task.support, ctx, mc, ls).grad);
    return joint_loss(adapted, task.query, ctx, mc, ls).total;
  };
  Params second = meta_gradient(theta, task, ctx, mc, cfg).grad;
  cfg.second_order = false;
  Params first = meta_gradient(theta, task, ctx, mc, cfg).grad;
  double first_worst = 0.0;
  for (Eigen::Index k : testing_support::sample_coordinates(theta.total_size(), 64, rng)) {
    const double fd = testing_support::central_difference(objective, theta, k);
    EXPECT_LE(testing_support::gradient_error(second.flat(k), fd), 1e-4) << "coordinate " << k;
    first_worst = std::max(first_worst, testing_support::gradient_error(first.flat(k), fd));
  }
  // the check must be able to tell the two modes apart
  EXPECT_GT(first_worst, 1e-3);
}

TEST(MetaGradient, SecondOrderTwoInnerSteps) {
  const ModelConfig mc = tiny_model(1, 6, 2, 2, 4);
  Toy toy({3}, 20, mc, 37);
  const Params theta = model_params(mc, 38);
  MetaConfig cfg;
  cfg.alpha = 0.2;
  cfg.k_support = 2;
  cfg.k_query = 1;
  cfg.inner_steps = 2;
  std::mt19937_64 rng(39);
  const Task task = sample_tasks(toy.cities, cfg, rng)[0];
  CityContext ctx(task.city_name, *toy.cities[0].graph);
  const LossSettings ls = loss_settings(cfg, mc);
  const auto objective = [&](const Params& p) {
    Params adapted = p;
    for (int s = 0; s < 2; ++s) adapted.axpy(-cfg.alpha, loss_and_grad(adapted, task.support, ctx, mc, ls).grad);
    return joint_loss(adapted, task.query, ctx, mc, ls).total;
  };
  Params g = meta_gradient(theta, task, ctx, mc, cfg).grad;
  for (Eigen::Index k : testing_support::sample_coordinates(theta.total_size(), 32, rng))
    EXPECT_LE(testing_support::gradient_error(g.flat(k), testing_support::central_difference(objective, theta, k)), 1e-4);
}

TEST(AdamOptimizer, MatchesScalarRecurrence) {
  Params theta;
  theta.add("w", (MatD(1, 2) << 1.0, -2.0).finished());
  Adam opt;
  double m[2] = {0, 0}, v[2] = {0, 0}, w[2] = {1.0, -2.0};
  for (int step = 1; step <= 5; ++step) {
    Params g = theta.zeros_like();
    g["w"] << 2.0 * theta["w"](0, 0), std::sin(theta["w"](0, 1));
    const double gs[2] = {2.0 * w[0], std::sin(w[1])};
    opt.step(theta, g, 0.1);
    for (int k = 0; k < 2; ++k) {
      m[k] = 0.9 * m[k] + 0.1 * gs[k];
      v[k] = 0.999 * v[k] + 0.001 * gs[k] * gs[k];
      const double mh = m[k] / (1.0 - std::pow(0.9, step)), vh = v[k] / (1.0 - std::pow(0.999, step));
      w[k] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(theta["w"](0, k), w[k], 1e-14);
    }
  }
}

TEST(AdamOptimizer, OuterRateDecay) {
  MetaConfig cfg;
  cfg.beta = 0.002;
  EXPECT_EQ(outer_rate(cfg, 0), 0.002);
  EXPECT_EQ(outer_rate(cfg, 99), 0.002);
  EXPECT_DOUBLE_EQ(outer_rate(cfg, 100), 0.002 * 0.99);
  EXPECT_DOUBLE_EQ(outer_rate(cfg, 250), 0.002 * 0.99 * 0.99);
}

TEST(MetaStep, ZeroOuterRateLeavesThetaUnchanged) {
  const ModelConfig mc = tiny_model();
  Toy toy({4, 5}, 30, mc, 40);
  const Params theta0 = model_params(mc, 41);
  Params theta = theta0;
  MetaConfig cfg;
  cfg.beta = 0.0;
  std::mt19937_64 rng(42);
  ContextCache contexts;
  Adam opt;
  const auto rows = meta_step(theta, sample_tasks(toy.cities, cfg, rng), toy.cities, contexts, opt, mc, cfg, 0);
  EXPECT_EQ(rows.size(), 5u);
  EXPECT_TRUE(same(theta, theta0));
}

TEST(MetaStep, NoInnerStepsIsPlainOptimizerStep) {
  const ModelConfig mc = tiny_model();
  Toy toy({4, 5}, 30, mc, 43);
  const Params theta0 = model_params(mc, 44);
  MetaConfig cfg;
  cfg.inner_steps = 0;
  cfg.task_batch = 3;
  std::mt19937_64 rng(45);
  const auto tasks = sample_tasks(toy.cities, cfg, rng);

  Params manual = theta0;
  Params total = theta0.zeros_like();
  for (const Task& t : tasks) {
    CityContext ctx(t.city_name, *toy.cities[t.city_index].graph);
    total.axpy(1.0, loss_and_grad(theta0, t.query, ctx, mc, loss_settings(cfg, mc)).grad);
  }
  Adam manual_opt;
  manual_opt.step(manual, total, cfg.beta);

  Params results[2];
  for (int so = 0; so < 2; ++so) {
    cfg.second_order = so == 1;
    results[so] = theta0;
    ContextCache contexts;
    Adam opt;
    meta_step(results[so], tasks, toy.cities, contexts, opt, mc, cfg, 0);
    EXPECT_LE(max_diff(results[so], manual), 1e-9);
  }
  EXPECT_TRUE(same(results[0], results[1]));
}

TEST(MetaStep, EmptyBatchIsContractError) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 46);
  Params theta = model_params(mc, 47);
  ContextCache contexts;
  Adam opt;
  EXPECT_THROW(meta_step(theta, {}, toy.cities, contexts, opt, mc, MetaConfig{}, 0), ContractError);
}

TEST(Train, ZeroEpisodesReturnsInitialization) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 48);
  const Params init = model_params(mc, 49);
  MetaConfig cfg;
  cfg.max_episodes = 0;
  const TrainResult r = train(toy.cities, mc, cfg, &init);
  EXPECT_TRUE(same(r.theta, init));
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(same(train(toy.cities, mc, cfg).theta, train(toy.cities, mc, cfg).theta));
}

TEST(Train, SameSeedSameLogAndParameters) {
  const ModelConfig mc = tiny_model();
  Toy toy({4, 5}, 30, mc, 50);
  MetaConfig cfg;
  cfg.max_episodes = 4;
  cfg.seed = 3;
  const TrainResult a = train(toy.cities, mc, cfg), b = train(toy.cities, mc, cfg);
  ASSERT_EQ(a.log.size(), 20u);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t k = 0; k < a.log.size(); ++k) {
    EXPECT_EQ(a.log[k].city, b.log[k].city);
    EXPECT_EQ(a.log[k].query_loss, b.log[k].query_loss);
    EXPECT_EQ(a.log[k].support_loss, b.log[k].support_loss);
  }
  EXPECT_TRUE(same(a.theta, b.theta));
  cfg.seed = 4;
  EXPECT_FALSE(same(train(toy.cities, mc, cfg).theta, a.theta));
}

TEST(Train, DivergenceAbortsWithLog) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 51);
  Params init = model_params(mc, 52);
  init["pred.b"].setConstant(1e5);
  MetaConfig cfg;
  cfg.max_episodes = 3;
  try {
    train(toy.cities, mc, cfg, &init);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.episode(), 0);
    EXPECT_TRUE(e.log().empty());
  }
}

TEST(Train, QueryErrorFallsOnDefaultSyntheticCities) {
  ExperimentConfig cfg;
  cfg.meta.max_episodes = 300;
  const auto data = prepare_data(cfg);
  const ModelConfig mc = model_config(cfg, *data);
  const TrainResult r = train(data->train_cities, mc, cfg.meta);
  double first = 0.0, last = 0.0;
  int nf = 0, nl = 0;
  for (const auto& row : r.log) {
    if (row.episode == 0) first += row.le, ++nf;
    if (row.episode == cfg.meta.max_episodes - 1) last += row.le, ++nl;
  }
  ASSERT_GT(nf, 0);
  ASSERT_GT(nl, 0);
  EXPECT_LT(last / nl, first / nf);
}

TEST(AdaptTarget, ZeroStepsReturnsInput) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 53);
  const Params theta = model_params(mc, 54);
  CityContext ctx("c", *toy.cities[0].graph);
  AdaptConfig ac;
  ac.steps = 0;
  const AdaptResult r = adapt_target(theta, toy.cities[0].windows, ctx, mc, LossSettings{}, ac);
  EXPECT_TRUE(same(r.theta, theta));
  EXPECT_EQ(r.final_loss, r.initial_loss);
}

TEST(AdaptTarget, BestLossNeverIncreases) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 60, mc, 55);
  const Params theta = model_params(mc, 56);
  CityContext ctx("c", *toy.cities[0].graph);
  AdaptConfig ac;
  ac.steps = 40;
  ac.eval_every = 5;
  ac.rate = 0.05;
  const LossSettings ls{1.5, false};
  const AdaptResult r = adapt_target(theta, toy.cities[0].windows, ctx, mc, ls, ac);
  ASSERT_EQ(r.log.size(), 40u);
  double prev = r.initial_loss;
  for (const auto& row : r.log) {
    EXPECT_LE(row.best_full_loss, prev);
    prev = row.best_full_loss;
  }
  EXPECT_LE(r.final_loss, r.initial_loss);
  EXPECT_NEAR(dataset_loss(r.theta, toy.cities[0].windows, ctx, mc, ls).total, r.final_loss, 1e-12);
}

TEST(AdaptTarget, EmptyWindowsRejected) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 57);
  CityContext ctx("c", *toy.cities[0].graph);
  EXPECT_THROW(adapt_target(model_params(mc, 58), {}, ctx, mc, LossSettings{}, AdaptConfig{}), EmptyDatasetError);
}

TEST(Evaluate, HandExample) {
  const std::vector<MatD> pred{(MatD(1, 2) << 3, 4).finished()}, truth{MatD::Zero(1, 2)};
  const auto m = horizon_metrics(pred, truth, {1});
  ASSERT_EQ(m.size(), 1u);
  EXPECT_DOUBLE_EQ(m[0].mae, 3.5);
  EXPECT_DOUBLE_EQ(m[0].rmse, std::sqrt(12.5));
  EXPECT_NEAR(m[0].rmse, 3.5355, 5e-5);
}

TEST(Evaluate, PerfectPredictionIsZero) {
  std::mt19937_64 rng(59);
  const std::vector<MatD> y{random_matrix(3, 4, rng), random_matrix(3, 4, rng)};
  for (const auto& m : horizon_metrics(y, y, {1, 2, 3})) {
    EXPECT_EQ(m.mae, 0.0);
    EXPECT_EQ(m.rmse, 0.0);
  }
}

TEST(Evaluate, RmseAtLeastMae) {
  std::mt19937_64 rng(60);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<MatD> p, y;
    for (int k = 0; k < 1 + trial % 4; ++k) {
      p.push_back(random_matrix(3, 5, rng, 2.0));
      y.push_back(random_matrix(3, 5, rng));
    }
    for (const auto& m : horizon_metrics(p, y, {1, 2, 3})) EXPECT_GE(m.rmse, m.mae);
  }
}

TEST(Evaluate, InvertsNormalization) {
  const ModelConfig mc = tiny_model(1, 6, 2);
  Toy toy({4}, 30, mc, 61);
  Params theta = model_params(mc, 62);
  theta["pred.w"].setZero();
  theta["pred.b"].setZero();
  std::vector<WindowSample> ws(toy.cities[0].windows.begin(), toy.cities[0].windows.begin() + 2);
  for (auto& w : ws) w.y.setConstant(1.0);
  CityContext ctx("c", *toy.cities[0].graph);
  // prediction 0 and truth 1 in normalized units differ by one std in raw units
  const auto m = evaluate(theta, ws, ctx, mc, NormStats{50.0, 4.0}, {1, 2});
  for (const auto& h : m) {
    EXPECT_DOUBLE_EQ(h.mae, 4.0);
    EXPECT_DOUBLE_EQ(h.rmse, 4.0);
  }
}

TEST(Evaluate, ErrorsOnEmptySetOrBadHorizon) {
  const ModelConfig mc = tiny_model();
  Toy toy({4}, 30, mc, 63);
  CityContext ctx("c", *toy.cities[0].graph);
  EXPECT_THROW(evaluate(model_params(mc, 64), {}, ctx, mc, NormStats{}, {1}), EvaluationError);
  EXPECT_THROW(horizon_metrics({}, {}, {1}), EvaluationError);
  EXPECT_THROW(horizon_metrics({MatD::Zero(2, 2)}, {MatD::Zero(2, 2)}, {3}), EvaluationError);
}
