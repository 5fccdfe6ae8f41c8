#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "sim2rec/errors.hpp"
#include "sim2rec/lts_env.hpp"
#include "sim2rec/rng.hpp"

using namespace sim2rec;
using namespace sim2rec::lts;

namespace {

// Brute-force set definition: integers w, |w| >= alpha, 6 <= 14 + w < 22.
std::vector<int> omega_oracle(int alpha) {
  std::vector<int> out;
  for (int w = -100; w <= 100; ++w) {
    const int mu = 14 + w;
    if (std::abs(w) >= alpha && mu >= 6 && mu < 22) out.push_back(w);
  }
  return out;
}

// Straight-line single-user update written from the model equations.
struct OracleOut {
  double npe, sat, mu, sd;
};
OracleOut oracle_step(double npe_prev, double gamma_n, double h_s, double mu_c, double mu_k,
                      double a) {
  const double npe = gamma_n * npe_prev - 2.0 * (a - 0.5);
  const double sat = 1.0 / (1.0 + std::exp(-(h_s * npe)));
  const double mu = (a * mu_c + (1.0 - a) * mu_k) * sat;
  const double sd = a * 1.0 + (1.0 - a) * 1.0;
  return {npe, sat, mu, sd};
}

TaskSpec small_task(int horizon = 140) {
  TaskSpec t = TaskSpec::preset(TaskId::kLts3);
  t.horizon = horizon;
  return t;
}

}  // namespace

TEST_CASE("enumerate_omega matches the set definition") {
  CHECK(enumerate_omega(TaskSpec::preset(TaskId::kLts3)) ==
        std::vector<int>{-8, -7, -6, -5, -4, 4, 5, 6, 7});
  for (int alpha : {0, 1, 2, 3, 4, 5, 6, 7, 8}) {
    TaskSpec t;
    t.alpha = alpha;
    CHECK(enumerate_omega(t) == omega_oracle(alpha));
  }
  std::vector<int> lts1 = enumerate_omega(TaskSpec::preset(TaskId::kLts1));
  CHECK(lts1.front() == -8);
  CHECK(lts1.back() == 7);
  CHECK(std::find(lts1.begin(), lts1.end(), -1) == lts1.end());
  CHECK(std::find(lts1.begin(), lts1.end(), 2) != lts1.end());
  CHECK(lts1.size() == 13);
  CHECK(enumerate_omega(TaskSpec::preset(TaskId::kLts2)).size() == 11);
  TaskSpec bad;
  bad.alpha = 9;
  CHECK_THROWS_AS(enumerate_omega(bad), ConfigError);
}

TEST_CASE("spawn_group persona and initial state") {
  TaskSpec task = small_task();
  UserGroup g = spawn_group(task, 0.0, {}, 500, 11);
  for (const UserCore& u : g.users()) {
    CHECK(u.mu_c == 14.0);
    CHECK(u.mu_k == 4.0);
    CHECK(u.sigma_c == 1.0);
    CHECK(u.sigma_k == 1.0);
    CHECK(u.h_s >= 0.2);
    CHECK(u.h_s <= 1.0);
    CHECK(u.gamma_n >= 0.8);
    CHECK(u.gamma_n <= 0.99);
    CHECK(u.npe == 0.0);
    CHECK(u.sat == 0.5);
  }
  std::vector<double> wu{1.5};
  UserGroup shifted = spawn_group(task, -4.0, wu, 3, 11);
  for (const UserCore& u : shifted.users()) {
    CHECK(u.mu_c == 10.0);
    CHECK(u.mu_k == 5.5);
  }
  std::vector<double> wrong(2, 0.0);
  CHECK_THROWS_AS(spawn_group(task, 0.0, wrong, 3, 1), ConfigError);
  CHECK_THROWS_AS(spawn_group(task, 0.0, {}, 0, 1), ConfigError);
}

TEST_CASE("observation o ~ N(mu_c, 4) over many users") {
  TaskSpec task = small_task();
  UserGroup g = spawn_group(task, 0.0, {}, 100000, 5);
  double mean = 0.0, sq = 0.0;
  for (const auto& o : g.observations()) {
    mean += o.o;
    sq += o.o * o.o;
  }
  mean /= 1e5;
  const double var = sq / 1e5 - mean * mean;
  CHECK(std::abs(mean - 14.0) < 0.02);
  CHECK(std::abs(var - 4.0) < 0.1);
}

TEST_CASE("step worked examples") {
  TaskSpec task = small_task();
  UserGroup g = spawn_group(task, 0.0, {}, 1, 3);
  UserCore& u = g.users()[0];

  SUBCASE("neutral action keeps NPE and SAT") {
    std::vector<double> a{0.5};
    auto tr = step(g, a);
    CHECK(u.npe == 0.0);
    CHECK(u.sat == 0.5);
    CHECK(tr[0].sat_next == 0.5);
  }
  SUBCASE("NPE update") {
    u.npe = 1.0;
    u.gamma_n = 0.9;
    std::vector<double> a{1.0};
    step(g, a);
    CHECK(u.npe == doctest::Approx(-0.1).epsilon(1e-15));
  }
  SUBCASE("engagement mean at SAT 0.5") {
    // NPE chosen so that the post-update NPE is exactly 0.
    u.gamma_n = 0.5;
    u.npe = 2.0;
    const UserStep s = user_dynamics(u, 1.0, true);
    CHECK(s.npe == 0.0);
    CHECK(s.sat == 0.5);
    CHECK(s.mean == 7.0);
    CHECK(s.stddev == 1.0);
  }
  SUBCASE("actions are clipped and NaN is rejected") {
    std::vector<double> a{1.7};
    auto tr = step(g, a);
    CHECK(tr[0].action == 1.0);
    std::vector<double> nan{std::nan("")};
    CHECK_THROWS_AS(step(g, nan), NumericError);
    std::vector<double> two{0.1, 0.2};
    CHECK_THROWS_AS(step(g, two), ConfigError);
  }
}

TEST_CASE("reset semantics") {
  TaskSpec task = small_task();
  UserGroup g = spawn_group(task, 4.0, {}, 50, 21);
  const auto persona = g.users();
  std::vector<double> a(50, 0.9);
  for (int t = 0; t < 10; ++t) step(g, a);
  auto obs1 = reset_group(g, 99);
  for (const auto& o : obs1) CHECK(o.sat == 0.5);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(g.users()[i].npe == 0.0);
    CHECK(g.users()[i].h_s == persona[i].h_s);
    CHECK(g.users()[i].gamma_n == persona[i].gamma_n);
    CHECK(g.users()[i].mu_c == persona[i].mu_c);
    CHECK(g.users()[i].mu_k == persona[i].mu_k);
  }
  auto obs2 = reset_group(g, 99);
  for (std::size_t i = 0; i < 50; ++i) CHECK(obs1[i].o == obs2[i].o);
  auto obs3 = reset_group(g, 100);
  CHECK(obs3[0].o != obs1[0].o);
  CHECK(g.t() == 0);
}

TEST_CASE("scalar oracle equivalence on random state/action pairs") {
  Rng rng(2024);
  TaskSpec task = small_task();
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    UserCore u;
    u.mu_c = 14.0 + static_cast<double>(rng.index(16)) - 8.0;
    u.mu_k = 4.0 + rng.uniform(-1, 1);
    u.h_s = rng.uniform(0.2, 1.0);
    u.gamma_n = rng.uniform(0.8, 0.99);
    u.npe = rng.uniform(-20, 20);
    u.sat = 1.0 / (1.0 + std::exp(-u.h_s * u.npe));
    u.o = 14.0;
    const double a = rng.uniform();
    UserGroup g(0, 0.0, task.horizon, true, {u}, rng.next_seed());
    std::vector<double> act{a};
    auto tr = step(g, act);
    const OracleOut o = oracle_step(u.npe, u.gamma_n, u.h_s, u.mu_c, u.mu_k, a);
    // Recover the noise draw to compare the full sample.
    SplitMix64 gen(stream_seed(g.noise_seed(), 0, 0));
    const double eps = standard_normal(gen);
    worst = std::max(worst, std::abs(g.users()[0].npe - o.npe));
    worst = std::max(worst, std::abs(g.users()[0].sat - o.sat));
    worst = std::max(worst, std::abs(tr[0].reward - (o.mu + o.sd * eps)));
    const UserStep s = user_dynamics(u, a, true);
    worst = std::max(worst, std::abs(s.mean - o.mu));
    worst = std::max(worst, std::abs(s.stddev - o.sd));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("SAT stays in (0,1) and is monotone in NPE") {
  for (double h : {0.2, 0.5, 1.0}) {
    double prev = 0.0;
    for (double npe = -30; npe <= 30; npe += 0.25) {
      const double s = sigmoid(h * npe);
      CHECK(s > 0.0);
      CHECK(s < 1.0);
      CHECK(s > prev);
      prev = s;
    }
  }
}

TEST_CASE("NPE fixed points under sustained actions") {
  // Under a constant action the update is affine, so after T steps from 0
  // NPE_T = fp * (1 - gamma^T). The distance to fp after 500 steps is
  // |fp| gamma^500, which is below 1e-6 only for gamma <= ~0.96; the default
  // range reaches 0.99, so convergence is checked on a narrower memory range
  // and the exact trajectory on the default one.
  for (double gamma_hi : {0.95, 0.99}) {
    TaskSpec task = small_task(1000);
    task.gamma_n_hi = gamma_hi;
    UserGroup g = spawn_group(task, 0.0, {}, 20, 8);
    for (double a : {1.0, 0.0}) {
      reset_group(g, 1);
      std::vector<double> acts(20, a);
      for (int t = 0; t < 500; ++t) step(g, acts);
      for (const UserCore& u : g.users()) {
        const double fp = (a == 1.0 ? -1.0 : 1.0) / (1.0 - u.gamma_n);
        CHECK(u.npe == doctest::Approx(fp * (1.0 - std::pow(u.gamma_n, 500))).epsilon(1e-12));
        if (gamma_hi <= 0.95) CHECK(std::abs(u.npe - fp) < 1e-6);
        CHECK((a == 1.0 ? u.npe < 0 : u.npe > 0));
      }
    }
  }
}

TEST_CASE("expected engagement is linear in a with slope (mu_c - mu_k) SAT") {
  UserCore u;
  u.mu_c = 17;
  u.mu_k = 4;
  u.h_s = 0.6;
  u.gamma_n = 0.9;
  u.npe = 0.7;
  // Hold SAT fixed by evaluating the pre-update variant.
  u.sat = sigmoid(u.h_s * u.npe);
  const double m0 = user_dynamics(u, 0.0, false).mean;
  for (double a : {0.1, 0.3, 0.77, 1.0}) {
    const double m = user_dynamics(u, a, false).mean;
    CHECK((m - m0) / a == doctest::Approx((u.mu_c - u.mu_k) * u.sat).epsilon(1e-12));
  }
}

TEST_CASE("per-user stepping equals vectorized stepping") {
  TaskSpec task = small_task(30);
  UserGroup a = spawn_group(task, 5.0, {}, 40, 77);
  UserGroup b = spawn_group(task, 5.0, {}, 40, 77);
  Rng rng(1);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> acts(40);
    for (double& x : acts) x = rng.uniform();
    auto va = step(a, acts);
    // Users visited in reverse order, one at a time.
    for (std::size_t k = 40; k-- > 0;) {
      Transition tb = b.step_user(k, acts[k]);
      CHECK(tb.reward == va[k].reward);
      CHECK(tb.next_obs.sat == va[k].next_obs.sat);
      CHECK(tb.done == va[k].done);
    }
    b.advance_clock();
  }
  CHECK(a.t() == 30);
}

TEST_CASE("done flag only at the horizon") {
  TaskSpec task = small_task(5);
  UserGroup g = spawn_group(task, 0.0, {}, 3, 2);
  std::vector<double> acts(3, 0.4);
  for (int t = 0; t < 5; ++t) {
    auto tr = step(g, acts);
    for (const auto& x : tr) CHECK(x.done == (t == 4));
  }
}

TEST_CASE("build_task_ensemble") {
  TaskSpec task = TaskSpec::preset(TaskId::kLts3);
  TaskEnsemble e = build_task_ensemble(task, 3);
  REQUIRE(e.training.size() == 9);
  for (std::size_t k = 0; k < 9; ++k) {
    CHECK(e.training[k].omega_g == omega_oracle(4)[k]);
    CHECK(e.training[k].n_users == 200);
    for (double w : e.training[k].omega_u) CHECK(w == 0.0);
  }
  CHECK(e.target.omega_g == 0.0);
  CHECK(e.target.n_users == 750);
  UserGroup target = instantiate(task, e.target);
  CHECK(target.size() == 750);
  for (const auto& u : target.users()) CHECK(u.mu_c == 14.0);

  TaskSpec beta = TaskSpec::preset(TaskId::kLts3Beta);
  beta.beta = 0.5;
  TaskEnsemble eb = build_task_ensemble(beta, 3);
  REQUIRE(eb.training.size() == 9);
  CHECK(eb.training[0].n_users == 500);
  double lo = 1, hi = -1;
  for (double w : eb.training[0].omega_u) {
    lo = std::min(lo, w);
    hi = std::max(hi, w);
  }
  CHECK(lo >= -0.5);
  CHECK(hi <= 0.5);
  CHECK(hi - lo > 0.8);
  CHECK_FALSE(eb.resample_omega_u);

  TaskSpec bad = TaskSpec::preset(TaskId::kLts3);
  bad.beta = 0.5;
  CHECK_THROWS_AS(build_task_ensemble(bad, 1), ConfigError);

  // Same seed rebuilds identical populations.
  TaskEnsemble e2 = build_task_ensemble(task, 3);
  UserGroup g1 = instantiate(task, e.training[2]);
  UserGroup g2 = instantiate(task, e2.training[2]);
  CHECK(g1.users()[7].h_s == g2.users()[7].h_s);
}

TEST_CASE("resample_omega_u redraws within range") {
  SimulatorSpec s;
  s.id = 4;
  s.n_users = 100;
  resample_omega_u(s, 0.5, 1);
  const auto first = s.omega_u;
  resample_omega_u(s, 0.5, 2);
  CHECK(first != s.omega_u);
  for (double w : s.omega_u) CHECK(std::abs(w) <= 0.5);
}

TEST_CASE("trajectory CSV") {
  std::vector<TrajectoryRow> rows{{0, 1, 2, 0.5, 14.25, 0.3, 4.5, false},
                                  {0, 1, 3, 0.75, 14.25, 1.0, 7.0, true}};
  std::ostringstream os;
  write_trajectory_csv(os, rows);
  CHECK(os.str() ==
        "group,user,t,SAT,o,a,r,done\n0,1,2,0.5,14.25,0.3,4.5,0\n0,1,3,0.75,14.25,1,7,1\n");
  CHECK(parse_task_id("LTS3-beta") == TaskId::kLts3Beta);
  CHECK_THROWS_AS(parse_task_id("LTS9"), ConfigError);
}

TEST_CASE("behavior episode covers every (t, user) once with bounded actions") {
  TaskSpec task = small_task(12);
  UserGroup g = spawn_group(task, -5.0, {}, 7, 4, 3);
  const auto rows = run_behavior_episode(g, BehaviorPolicy{}, 10);
  REQUIRE(rows.size() == 7 * 12);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    CHECK(rows[k].t == static_cast<int>(k / 7));
    CHECK(rows[k].user == k % 7);
    CHECK(rows[k].group == 3);
    CHECK(rows[k].action >= 0.2);
    CHECK(rows[k].action <= 0.8);
    CHECK(rows[k].done == (rows[k].t == 11));
    if (rows[k].t > 0) CHECK(rows[k].sat == rows[k - 7].sat_next);
  }
  const auto again = run_behavior_episode(g, BehaviorPolicy{}, 10);
  CHECK(again.back().reward == rows.back().reward);
  double o[2];
  normalize_obs(Observation{0.75, 19.0}, o);
  CHECK(o[0] == 0.5);
  CHECK(o[1] == 1.0);
}
