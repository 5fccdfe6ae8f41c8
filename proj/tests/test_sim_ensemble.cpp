#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "sim2rec/errors.hpp"
#include "sim2rec/rng.hpp"
#include "sim2rec/sim_ensemble.hpp"

using namespace sim2rec;
using namespace sim2rec::ens;

namespace {

// Synthetic logs with r = 1 + 2a + 0.5 SAT + noise and SAT' = 0.3 + 0.4 SAT.
LoggedDataset linear_logs(int groups, std::size_t users, int steps, double noise, std::uint64_t seed,
                          double slope = 2.0) {
  LoggedDataset d;
  Rng rng(seed);
  for (int g = 0; g < groups; ++g) {
    for (std::size_t u = 0; u < users; ++u) {
      double sat = rng.uniform(0.2, 0.8);
      const double o = rng.uniform(10.0, 18.0);
      for (int t = 0; t < steps; ++t) {
        lts::TrajectoryRow r;
        r.group = g;
        r.user = u;
        r.t = t;
        r.sat = sat;
        r.o = o;
        r.action = rng.uniform(0.0, 1.0);
        r.reward = 1.0 + slope * r.action + 0.5 * sat + noise * rng.normal();
        r.sat_next = 0.3 + 0.4 * sat;
        r.done = t + 1 == steps;
        d.rows.push_back(r);
        sat = r.sat_next;
      }
    }
  }
  return d;
}

Lambda quick_lambda(std::uint64_t seed, int held_out = -1) {
  Lambda l;
  l.seed = seed;
  l.held_out_group = held_out;
  l.user_fraction = 1.0;
  l.steps = 1500;
  l.batch = 128;
  l.lr = 3e-3;
  l.hidden = {16, 16};
  return l;
}

std::vector<std::size_t> all_rows(const LoggedDataset& d) {
  std::vector<std::size_t> rows(d.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return rows;
}

LoggedDataset lts_logs(std::size_t users, int horizon, std::uint64_t seed) {
  lts::TaskSpec task = lts::TaskSpec::preset(lts::TaskId::kLts3);
  task.users_per_group = users;
  task.horizon = horizon;
  const auto te = lts::build_task_ensemble(task, seed, 10);
  return generate_logs(task, te.training, {}, 1, seed);
}

// Zeroing the output layer turns a member into a constant predictor.
LearnedSimulator flat_copy(const LearnedSimulator& sim) {
  LearnedSimulator flat = LearnedSimulator::from_checkpoint(sim.snapshot());
  auto& params = flat.store().params();
  params[params.size() - 1].value.setZero();
  params[params.size() - 2].value.setZero();
  return flat;
}

}  // namespace

TEST_CASE("generated logs are contiguous per user and round-trip through CSV") {
  const LoggedDataset d = lts_logs(6, 12, 3);
  CHECK(d.size() == 9u * 6u * 12u);
  CHECK_NOTHROW(d.validate());
  CHECK(d.groups().size() == 9u);
  for (const auto& r : d.rows) {
    CHECK(r.action >= 0.2);
    CHECK(r.action <= 0.8);
  }
  std::stringstream ss;
  write_logged_csv(ss, d);
  const std::string text = ss.str();
  CHECK(text.rfind("group,user,t,sat,o,a,y,r\n", 0) == 0);
  const LoggedDataset back = read_logged_csv(ss);
  REQUIRE(back.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(back.rows[i].group == d.rows[i].group);
    CHECK(back.rows[i].user == d.rows[i].user);
    CHECK(back.rows[i].t == d.rows[i].t);
    CHECK(back.rows[i].sat == d.rows[i].sat);
    CHECK(back.rows[i].o == d.rows[i].o);
    CHECK(back.rows[i].action == d.rows[i].action);
    CHECK(back.rows[i].sat_next == d.rows[i].sat_next);
    CHECK(back.rows[i].reward == d.rows[i].reward);
    CHECK(back.rows[i].done == d.rows[i].done);
  }
  std::stringstream again;
  write_logged_csv(again, back);
  CHECK(again.str() == text);
}

TEST_CASE("two episodes give distinct user ids and the same logs for the same seed") {
  lts::TaskSpec task = lts::TaskSpec::preset(lts::TaskId::kLts3);
  task.users_per_group = 4;
  task.horizon = 5;
  const auto te = lts::build_task_ensemble(task, 1, 10);
  const LoggedDataset a = generate_logs(task, {te.training[0]}, {}, 2, 7);
  const LoggedDataset b = generate_logs(task, {te.training[0]}, {}, 2, 7);
  CHECK(a.trajectories().size() == 8u);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.rows[i].action == b.rows[i].action);
}

TEST_CASE("logged data validation rejects gaps and bad actions") {
  LoggedDataset d = linear_logs(1, 2, 4, 0.0, 1);
  d.rows[2].t = 5;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = linear_logs(1, 2, 4, 0.0, 1);
  d.rows[1].action = 1.5;
  CHECK_THROWS_AS(d.validate(), ConfigError);
}

TEST_CASE("a learned member recovers a linear-Gaussian user model") {
  const LoggedDataset d = linear_logs(3, 40, 10, 0.1, 11);
  Lambda l = quick_lambda(5);
  l.steps = 3000;
  const LearnedSimulator sim = learn_simulator(d, all_rows(d), l);
  // SAT settles at 0.5 within a few steps, so probe near it.
  Matrix in(5, 3);
  for (int i = 0; i < 5; ++i) in.row(i) << 0.46 + 0.02 * i, 14.0, 0.2 * i + 0.1;
  Matrix mean, sd;
  sim.predict(in, &mean, &sd);
  for (int i = 0; i < 5; ++i) {
    const double r = 1.0 + 2.0 * in(i, 2) + 0.5 * in(i, 0);
    CHECK(std::abs(mean(i, 0) - r) < 0.05);
    CHECK(std::abs(mean(i, 1) - (0.3 + 0.4 * in(i, 0))) < 0.02);
    CHECK(sd(i, 0) > 0.06);
    CHECK(sd(i, 0) < 0.16);
  }
}

TEST_CASE("member training is deterministic for a fixed hyperparameter record") {
  const LoggedDataset d = linear_logs(2, 10, 6, 0.1, 2);
  Lambda l = quick_lambda(9);
  l.steps = 50;
  const LearnedSimulator a = learn_simulator(d, all_rows(d), l);
  const LearnedSimulator b = learn_simulator(d, all_rows(d), l);
  REQUIRE(a.store().size() == b.store().size());
  for (std::size_t i = 0; i < a.store().size(); ++i) {
    CHECK(a.store().at(i).value == b.store().at(i).value);
  }
  l.seed = 10;
  const LearnedSimulator c = learn_simulator(d, all_rows(d), l);
  CHECK(c.store().at(0).value != a.store().at(0).value);
}

TEST_CASE("too few transitions and invalid records are configuration errors") {
  const LoggedDataset d = linear_logs(1, 2, 5, 0.1, 2);
  CHECK_THROWS_AS(learn_simulator(d, all_rows(d), quick_lambda(1)), ConfigError);
  Lambda l = quick_lambda(1);
  l.lr = -1.0;
  CHECK_THROWS_AS(learn_simulator(d, all_rows(d), l, 5), ConfigError);
}

TEST_CASE("a diverging fit reports its hyperparameter record") {
  LoggedDataset d = linear_logs(1, 20, 10, 0.1, 2);
  d.rows[3].reward = std::numeric_limits<double>::infinity();
  Lambda l = quick_lambda(77);
  l.steps = 20;
  try {
    learn_simulator(d, all_rows(d), l);
    FAIL("expected a divergence error");
  } catch (const StageError& e) {
    CHECK(std::string(e.what()).find("\"seed\":77") != std::string::npos);
  }
}

TEST_CASE("training rows leave the held-out group out and subsample users") {
  const LoggedDataset d = linear_logs(3, 10, 4, 0.1, 2);
  Lambda l = quick_lambda(3, 1);
  l.user_fraction = 0.5;
  const auto rows = training_rows(d, l);
  CHECK(rows.size() == 2u * 5u * 4u);
  std::set<UserKey> users;
  for (std::size_t k : rows) {
    CHECK(d.rows[k].group != 1);
    users.insert({d.rows[k].group, d.rows[k].user});
  }
  CHECK(users.size() == 10u);
  CHECK(training_rows(d, l) == rows);
  l.user_fraction = 0.0;
  CHECK_THROWS_AS(training_rows(d, l), ConfigError);
}

TEST_CASE("a member beats the constant predictor on a held-out LTS group") {
  const LoggedDataset d = lts_logs(40, 30, 4);
  const int held = d.groups()[2];
  Lambda l = quick_lambda(21, held);
  l.steps = 2000;
  const LearnedSimulator sim = learn_simulator(d, training_rows(d, l), l);
  std::vector<std::size_t> test;
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (d.rows[k].group == held) test.push_back(k);
  }
  const HeldOutError e = held_out_error(sim, d, test);
  CHECK(e.rows == test.size());
  REQUIRE(e.model_mse.size() == 2u);
  MESSAGE("held-out mse " << e.model_mse[0] << " vs " << e.baseline_mse[0] << ", " << e.model_mse[1]
                          << " vs " << e.baseline_mse[1]);
  CHECK(e.beats_baseline());
}

TEST_CASE("default records give fifteen leave-one-group-out members with distinct seeds") {
  const std::vector<int> groups{0, 1, 2, 3, 4, 5, 6, 7, 8};
  const auto ls = default_lambdas(groups, 15, 1);
  REQUIRE(ls.size() == 15u);
  std::set<std::uint64_t> seeds;
  for (std::size_t j = 0; j < ls.size(); ++j) {
    CHECK(ls[j].held_out_group == groups[j % 9]);
    seeds.insert(ls[j].seed);
  }
  CHECK(seeds.size() == 15u);
  const LoggedDataset d = linear_logs(2, 10, 10, 0.1, 2);
  CHECK_THROWS_AS(build_omega_prime(d, {quick_lambda(1)}), ConfigError);
}

TEST_CASE("uncertainty examples") {
  // Two members one unit either side of their average.
  Matrix a(1, 2), b(1, 2);
  a << 0.0, 0.0;
  b << 2.0, 0.0;
  CHECK(uncertainty_from_means({a, b})[0] == doctest::Approx(1.0));
  CHECK(uncertainty_from_means({a, a, a})[0] == 0.0);
  CHECK_THROWS_AS(uncertainty_from_means({}), ConfigError);
  CHECK_THROWS_AS(uncertainty_from_means({a, Matrix(2, 2)}), ConfigError);
}

TEST_CASE("uncertainty matches a loop oracle and is permutation invariant and scale linear") {
  Rng rng(4);
  std::vector<Matrix> means(6, Matrix(7, 2));
  for (auto& m : means) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  }
  const auto u = uncertainty_from_means(means);
  for (int i = 0; i < 7; ++i) {
    double avg[2] = {0, 0};
    for (const auto& m : means) {
      avg[0] += m(i, 0) / 6.0;
      avg[1] += m(i, 1) / 6.0;
    }
    double oracle = 0;
    for (const auto& m : means) oracle += std::hypot(m(i, 0) - avg[0], m(i, 1) - avg[1]) / 6.0;
    CHECK(std::abs(u[static_cast<std::size_t>(i)] - oracle) < 1e-12);
  }
  auto shuffled = means;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[1], shuffled[4]);
  const auto us = uncertainty_from_means(shuffled);
  auto scaled = means;
  for (auto& m : scaled) m *= 3.0;
  const auto uc = uncertainty_from_means(scaled);
  for (std::size_t i = 0; i < u.size(); ++i) {
    CHECK(std::abs(us[i] - u[i]) < 1e-12);
    CHECK(std::abs(uc[i] - 3.0 * u[i]) < 1e-12);
  }
}

TEST_CASE("duplicate members have zero disagreement") {
  const LoggedDataset d = linear_logs(2, 10, 10, 0.1, 2);
  Lambda l = quick_lambda(3);
  l.steps = 30;
  const LearnedSimulator sim = learn_simulator(d, all_rows(d), l);
  const Ensemble e({sim, LearnedSimulator::from_checkpoint(sim.snapshot())});
  Matrix in(3, 3);
  in << 0.5, 14, 0.1, 0.2, 12, 0.9, 0.9, 17, 0.5;
  for (double u : e.uncertainty(in)) CHECK(u == 0.0);
}

TEST_CASE("ensembles round-trip through a checkpoint directory") {
  const LoggedDataset d = linear_logs(2, 10, 10, 0.1, 2);
  auto ls = default_lambdas({0, 1}, 2, 3);
  for (auto& l : ls) {
    l.steps = 20;
    l.hidden = {8};
  }
  const Ensemble e = build_omega_prime(d, ls, 10);
  const auto dir = std::filesystem::temp_directory_path() / "sim2rec_ens_roundtrip";
  std::filesystem::remove_all(dir);
  e.save(dir);
  const Ensemble back = Ensemble::load(dir);
  REQUIRE(back.size() == 2u);
  Matrix in(2, 3);
  in << 0.5, 14, 0.1, 0.2, 12, 0.9;
  CHECK(back.member(1).predict_mean(in) == e.member(1).predict_mean(in));
  CHECK(back.member(0).lambda().held_out_group == 0);
  CHECK(back.member(1).lambda().seed == ls[1].seed);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(Ensemble::load(dir), ConfigError);
}

TEST_CASE("k-means separates well-separated clusters") {
  Rng rng(6);
  Matrix pts(60, 2);
  for (int i = 0; i < 60; ++i) {
    const double cx = (i % 3) * 10.0;
    pts(i, 0) = cx + 0.1 * rng.normal();
    pts(i, 1) = -cx + 0.1 * rng.normal();
  }
  const KMeansResult r = kmeans(pts, 3, 1);
  for (int i = 0; i < 60; ++i) CHECK(r.labels[static_cast<std::size_t>(i)] == r.labels[static_cast<std::size_t>(i % 3)]);
  std::set<int> distinct(r.labels.begin(), r.labels.end());
  CHECK(distinct.size() == 3u);
  const KMeansResult again = kmeans(pts, 3, 1);
  CHECK(again.labels == r.labels);
  CHECK_THROWS_AS(kmeans(pts, 61, 1), ConfigError);
  CHECK_THROWS_AS(kmeans(pts, 0, 1), ConfigError);
}

TEST_CASE("k-means centers of non-decreasing curves are non-decreasing") {
  Rng rng(8);
  Matrix pts(80, 11);
  for (int i = 0; i < 80; ++i) {
    double v = rng.normal();
    for (int j = 0; j < 11; ++j) {
      v += rng.uniform(0.0, 1.0) * (i % 2 ? 0.1 : 1.0);
      pts(i, j) = v;
    }
  }
  const KMeansResult r = kmeans(pts, 5, 2);
  for (int c = 0; c < 5; ++c) {
    for (int j = 1; j < 11; ++j) CHECK(r.centers(c, j) >= r.centers(c, j - 1) - 1e-12);
  }
}

TEST_CASE("intervention test normalizes centers at the leftmost offset") {
  const LoggedDataset d = linear_logs(2, 20, 6, 0.1, 12);
  auto ls = default_lambdas({0, 1}, 2, 4);
  for (auto& l : ls) {
    l.steps = 400;
    l.hidden = {16};
    l.lr = 3e-3;
  }
  const Ensemble e = build_omega_prime(d, ls, 10);
  const auto grid = default_delta_grid();
  REQUIRE(grid.size() == 11u);
  CHECK(grid.front() == doctest::Approx(-0.5));
  CHECK(grid.back() == doctest::Approx(0.5));
  const InterventionReport rep = intervention_test(e, d, grid, 5, 1);
  REQUIRE(rep.centers.size() == 2u);
  CHECK(rep.users.size() == 40u);
  for (const auto& c : rep.centers) {
    CHECK(c.rows() == 5);
    CHECK(c.cols() == 11);
    for (int k = 0; k < 5; ++k) {
      CHECK(c(k, 0) == 0.0);
      // Data with a strongly increasing response gives rising patterns.
      CHECK(c(k, 10) > 0.5);
    }
  }
  std::stringstream centers, patterns;
  write_intervention_csv(centers, patterns, rep);
  CHECK(centers.str().rfind("member,cluster,d-0.5,", 0) == 0);
  std::string line;
  int lines = 0;
  while (std::getline(patterns, line)) ++lines;
  CHECK(lines == 1 + 2 * 40);
  CHECK_THROWS_AS(intervention_test(e, d, {-0.5, 0.1}, 5, 1), ConfigError);
  CHECK_THROWS_AS(intervention_test(e, d, grid, 41, 1), ConfigError);
}

TEST_CASE("trend filter keeps users with rising responses and is idempotent") {
  const LoggedDataset d = linear_logs(2, 15, 6, 0.1, 13);
  auto ls = default_lambdas({0, 1}, 2, 5);
  for (auto& l : ls) {
    l.steps = 400;
    l.hidden = {16};
    l.lr = 3e-3;
  }
  const Ensemble e = build_omega_prime(d, ls, 10);
  const TrendResult r = f_trend(e, d, default_delta_grid());
  CHECK(r.removed.empty());
  CHECK(r.kept.size() == d.size());
  const TrendResult again = f_trend(e, r.kept, default_delta_grid());
  CHECK(again.removed.empty());

  const Ensemble with_flat({e.member(0), flat_copy(e.member(1))});
  CHECK_THROWS_AS(f_trend(with_flat, d, default_delta_grid()), ConfigError);
}

TEST_CASE("trend filter removes exactly the users a brute-force slope check flags") {
  // Mixed data: half the groups respond negatively to the action.
  LoggedDataset d = linear_logs(1, 20, 8, 0.05, 14, 2.0);
  LoggedDataset neg = linear_logs(1, 20, 8, 0.05, 15, -2.0);
  for (auto& r : neg.rows) r.group = 1;
  d.rows.insert(d.rows.end(), neg.rows.begin(), neg.rows.end());
  auto ls = default_lambdas({0, 1}, 3, 6);
  for (auto& l : ls) {
    l.held_out_group = -1;
    l.steps = 300;
    l.hidden = {16};
    l.lr = 3e-3;
  }
  const Ensemble e = build_omega_prime(d, ls, 10);
  const auto grid = default_delta_grid();
  std::set<UserKey> expected;
  for (std::size_t j = 0; j < e.size(); ++j) {
    std::vector<UserKey> users;
    const Matrix curves = response_curves(e.member(j), d, grid, &users);
    for (Eigen::Index u = 0; u < curves.rows(); ++u) {
      double mx = 0, my = 0;
      for (std::size_t q = 0; q < grid.size(); ++q) {
        mx += grid[q] / static_cast<double>(grid.size());
        my += curves(u, static_cast<Eigen::Index>(q)) / static_cast<double>(grid.size());
      }
      double sxy = 0;
      for (std::size_t q = 0; q < grid.size(); ++q) {
        sxy += (grid[q] - mx) * (curves(u, static_cast<Eigen::Index>(q)) - my);
      }
      if (sxy <= 0) expected.insert(users[static_cast<std::size_t>(u)]);
    }
  }
  const TrendResult r = f_trend(e, d, grid);
  CHECK(std::set<UserKey>(r.removed.begin(), r.removed.end()) == expected);
  CHECK(r.removed.size() == r.reasons.size());
  const double fraction = static_cast<double>(r.removed.size()) / 40.0;
  MESSAGE("removed fraction " << fraction);
  CHECK(fraction > 0.0);
  CHECK(fraction < 1.0);
  for (const auto& row : r.kept.rows) CHECK(!expected.count({row.group, row.user}));
  std::stringstream ss;
  write_removal_csv(ss, r);
  CHECK(ss.str().rfind("group,user,reason\n", 0) == 0);
}

TEST_CASE("executability bounds span the last logged window") {
  LoggedDataset d;
  const double acts[] = {0.9, 0.2, 0.5, 0.4};
  for (int t = 0; t < 4; ++t) {
    lts::TrajectoryRow r;
    r.t = t;
    r.action = acts[t];
    d.rows.push_back(r);
  }
  auto b = f_exec(d, 3);
  CHECK(b.at({0, 0}).first == 0.2);
  CHECK(b.at({0, 0}).second == 0.5);
  b = f_exec(d, 14);
  CHECK(b.at({0, 0}).first == 0.2);
  CHECK(b.at({0, 0}).second == 0.9);
  CHECK(f_exec(d, 1).at({0, 0}) == std::make_pair(0.4, 0.4));
  CHECK_THROWS_AS(f_exec(d, 0), ConfigError);

  const LoggedDataset logs = lts_logs(5, 20, 9);
  const auto narrow = f_exec(logs, 3);
  const auto wide = f_exec(logs, 10);
  for (const auto& [key, range] : narrow) {
    CHECK(wide.at(key).first <= range.first);
    CHECK(wide.at(key).second >= range.second);
    CHECK(range.first <= range.second);
  }
}

TEST_CASE("reward percentile interpolates linearly") {
  LoggedDataset d;
  for (int i = 0; i < 5; ++i) {
    lts::TrajectoryRow r;
    r.t = i;
    r.reward = static_cast<double>(4 - i);
    d.rows.push_back(r);
  }
  CHECK(reward_percentile(d, 0) == 0.0);
  CHECK(reward_percentile(d, 100) == 4.0);
  CHECK(reward_percentile(d, 10) == doctest::Approx(0.4));
  CHECK_THROWS_AS(reward_percentile(d, 101), ConfigError);
}

TEST_CASE("learned environments roll out for the truncated horizon from logged states") {
  const LoggedDataset d = linear_logs(2, 6, 8, 0.1, 16);
  auto ls = default_lambdas({0, 1}, 2, 7);
  for (auto& l : ls) {
    l.steps = 100;
    l.hidden = {8};
  }
  auto e = std::make_shared<const Ensemble>(build_omega_prime(d, ls, 10));
  EnsembleSetConfig cfg;
  cfg.trend_filter = false;
  cfg.exec_window = 3;
  EnsembleSimulatorSet set(e, d, cfg);
  CHECK(set.size() == 4u);
  CHECK(set.removed_users() == 0u);
  agent::SimInstance inst = set.make(3, 42);
  CHECK(inst.horizon == 5);
  REQUIRE(inst.env->num_users() == 6u);
  REQUIRE(inst.bounds.size() == 6u);
  CHECK(inst.removed.empty());
  REQUIRE(inst.penalty);

  std::set<std::pair<double, double>> logged;
  for (const auto& r : d.rows) {
    if (r.group == 1) logged.insert({r.sat, r.o});
  }
  auto obs = inst.env->reset(5);
  for (const auto& o : obs) CHECK(logged.count({o.sat, o.o}) == 1u);
  std::vector<double> acts(6, 0.5);
  std::vector<double> first_rewards;
  for (int t = 0; t < 5; ++t) {
    const auto tr = inst.env->step(acts);
    for (const auto& x : tr) {
      CHECK_FALSE(x.done);
      CHECK(x.sat_next > 0.0);
      CHECK(x.sat_next < 1.0);
      CHECK(x.next_obs.o == x.obs.o);
      if (t == 0) first_rewards.push_back(x.reward);
    }
    obs.clear();
    for (const auto& x : tr) obs.push_back(x.next_obs);
    const auto pen = inst.penalty(obs, acts);
    for (double p : pen) CHECK(p >= 0.0);
  }
  inst.env->reset(5);
  const auto tr = inst.env->step(acts);
  for (std::size_t i = 0; i < 6; ++i) CHECK(tr[i].reward == first_rewards[i]);
  CHECK_THROWS_AS(inst.env->step(std::vector<double>(5, 0.5)), ConfigError);
  CHECK_THROWS_AS(set.make(4, 0), ConfigError);
}
