#include <cmath>
#include <numbers>

#include "doctest.h"
#include "gradcheck.hpp"
#include "sim2rec/agent.hpp"
#include "sim2rec/errors.hpp"
#include "sim2rec/evalkit.hpp"
#include "sim2rec/rng.hpp"

using namespace sim2rec;
using namespace sim2rec::agent;

namespace {

AgentConfig tiny(Variant v) {
  AgentConfig c;
  c.variant = v;
  c.latent_layers = {6};
  c.recurrent = 4;
  c.policy_hidden = {5};
  c.value_hidden = {5};
  return c;
}

sadae::Sadae tiny_sadae(std::uint64_t seed) {
  sadae::SadaeConfig c;
  c.encoder_hidden = {8};
  c.decoder_hidden = {8};
  return sadae::Sadae(c, seed);
}

LtsVecEnv small_env(std::size_t users, int horizon = 140) {
  lts::TaskSpec task = lts::TaskSpec::preset(lts::TaskId::kLts3);
  task.horizon = horizon;
  return LtsVecEnv(lts::spawn_group(task, 2.0, {}, users, 11, 0));
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("variant names round-trip") {
  for (Variant v : {Variant::kSim2Rec, Variant::kDrOsi, Variant::kDrUni, Variant::kDirect}) {
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK(parse_variant("dr-uni") == Variant::kDrUni);
  CHECK_THROWS_AS(parse_variant("UPPER"), ConfigError);
  CHECK(AgentConfig::desk(Variant::kSim2Rec).recurrent == 32);
  CHECK(AgentConfig::full(Variant::kSim2Rec).latent_layers == std::vector<int>{128, 128, 128, 32});
}

TEST_CASE("mean mode with zero pre-squash mean acts 0.5") {
  Agent a(tiny(Variant::kDrOsi), 1);
  a.store().at("agent/pi/l1/w").value.setZero();
  a.store().at("agent/pi/l1/b").value.setZero();
  Rng rng(2);
  const Matrix obs = random_matrix(3, 2, rng);
  const Matrix z = random_matrix(3, 4, rng);
  const PolicyOutput out = a.act(obs, z, ActMode::kMean, nullptr);
  for (int i = 0; i < 3; ++i) CHECK(out.action(i, 0) == 0.5);
}

TEST_CASE("squashed log-probability matches the change-of-variables oracle") {
  Agent a(tiny(Variant::kDrOsi), 3);
  Rng rng(4);
  const Matrix obs = random_matrix(50, 2, rng);
  const Matrix z = random_matrix(50, 4, rng);
  const Matrix noise = random_matrix(50, 1, rng);
  const PolicyOutput out = a.act(obs, z, ActMode::kSample, &noise);
  const double sd = std::exp(out.log_std);
  for (int i = 0; i < 50; ++i) {
    const double act = out.action(i, 0);
    REQUIRE(act > 0.0);
    REQUIRE(act < 1.0);
    const double u = std::log(act / (1.0 - act));
    const double gauss = std::exp(-0.5 * std::pow((u - out.mean(i, 0)) / sd, 2)) /
                         (sd * std::sqrt(2.0 * std::numbers::pi));
    const double oracle = std::log(gauss / (act * (1.0 - act)));
    CHECK(std::abs(out.log_prob(i, 0) - oracle) < 1e-8);
  }
}

TEST_CASE("squashed density integrates to one over (0,1)") {
  for (double ls : {-1.0, -0.5, 0.3}) {
    const int n = 200000;
    const double da = 1.0 / n;
    double area = 0.0;
    for (int k = 0; k < n; ++k) {
      const double x = (k + 0.5) * da;
      area += std::exp(squashed_log_prob(logit(x), 0.3, ls)) * da;
    }
    CHECK(std::abs(area - 1.0) < 1e-3);
  }
}

TEST_CASE("identical users in mean mode get identical actions") {
  Agent a(tiny(Variant::kDrOsi), 5);
  Matrix obs(2, 2);
  obs << 0.1, -0.4, 0.1, -0.4;
  Matrix z(2, 4);
  z.row(0) << 0.2, 0.1, -0.3, 0.5;
  z.row(1) = z.row(0);
  const PolicyOutput out = a.act(obs, z, ActMode::kMean, nullptr);
  CHECK(out.action(0, 0) == out.action(1, 0));
}

TEST_CASE("constant-context variant ignores every input") {
  Agent a(tiny(Variant::kDrUni), 6);
  Rng rng(7);
  Carry c1 = a.initial_carry(4), c2 = a.initial_carry(4);
  const Matrix z1 = a.extract(random_matrix(4, 2, rng), random_matrix(4, 1, rng), nullptr, c1);
  const Matrix z2 = a.extract(random_matrix(4, 2, rng), random_matrix(4, 1, rng), nullptr, c2);
  CHECK(z1 == z2);
  CHECK(z1.rows() == 4);
  CHECK(z1.cols() == 4);
}

TEST_CASE("extractor without the latent is invariant to it, with the latent is not") {
  Rng rng(8);
  const Matrix obs = random_matrix(3, 2, rng);
  const Matrix prev = random_matrix(3, 1, rng);
  const Matrix u1 = random_matrix(1, 5, rng), u2 = random_matrix(1, 5, rng);

  Agent osi(tiny(Variant::kDrOsi), 9);
  Carry a = osi.initial_carry(3), b = osi.initial_carry(3);
  CHECK(osi.extract(obs, prev, &u1, a) == osi.extract(obs, prev, &u2, b));

  Agent s2r(tiny(Variant::kSim2Rec), 9);
  Carry c = s2r.initial_carry(3), d = s2r.initial_carry(3), e = s2r.initial_carry(3);
  const Matrix za = s2r.extract(obs, prev, &u1, c);
  CHECK(za == s2r.extract(obs, prev, &u1, e));
  CHECK((za - s2r.extract(obs, prev, &u2, d)).norm() > 1e-6);
  Carry f = s2r.initial_carry(3);
  CHECK_THROWS_AS(s2r.extract(obs, prev, nullptr, f), ConfigError);
  Carry wrong = s2r.initial_carry(2);
  CHECK_THROWS_AS(s2r.extract(obs, prev, &u1, wrong), ConfigError);
}

TEST_CASE("carries are isolated per user") {
  Agent a(tiny(Variant::kSim2Rec), 10);
  Rng rng(11);
  const int steps = 6;
  std::vector<Matrix> obs, prev, ups;
  for (int t = 0; t < steps; ++t) {
    obs.push_back(random_matrix(2, 2, rng));
    prev.push_back(random_matrix(2, 1, rng));
    ups.push_back(random_matrix(1, 5, rng));
  }
  // Separately, one user after the other.
  std::vector<Matrix> sep[2];
  for (int u = 0; u < 2; ++u) {
    Carry c = a.initial_carry(1);
    for (int t = 0; t < steps; ++t) {
      sep[u].push_back(a.extract(obs[t].row(u), prev[t].row(u), &ups[t], c));
    }
  }
  // Interleaved step by step.
  Carry c0 = a.initial_carry(1), c1 = a.initial_carry(1);
  Carry both = a.initial_carry(2);
  for (int t = 0; t < steps; ++t) {
    CHECK(a.extract(obs[t].row(0), prev[t].row(0), &ups[t], c0) == sep[0][t]);
    CHECK(a.extract(obs[t].row(1), prev[t].row(1), &ups[t], c1) == sep[1][t]);
    const Matrix zb = a.extract(obs[t], prev[t], &ups[t], both);
    CHECK((zb.row(0) - sep[0][t]).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((zb.row(1) - sep[1][t]).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("gradients through a two-step extract and act pass finite differences") {
  for (Variant v : {Variant::kSim2Rec, Variant::kDrOsi}) {
    Agent a(tiny(v), 12);
    sadae::Sadae sd = tiny_sadae(13);
    LtsVecEnv env = small_env(3);
    RolloutOptions opt;
    opt.horizon = 2;
    opt.seed = 14;
    const Rollout r = rollout_episode(env, a, &sd, opt);
    REQUIRE(r.steps == 2);
    const std::vector<std::size_t> users{0, 2};
    const auto loss = [&](nn::Graph& g) {
      const SequenceOutput o = unroll(g, a, &sd, r, users);
      return nn::sum(nn::square(o.mean)) + nn::sum(nn::tanh(o.value)) + o.log_std;
    };
    const auto ga = testing::grad_check(a.store(), loss);
    CHECK(ga.checked > 50);
    CHECK(ga.max_rel_error <= 1e-4);
    if (v == Variant::kSim2Rec) {
      const auto gs = testing::grad_check(sd.store(), loss);
      CHECK(gs.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("rollout records consistent transitions") {
  Agent a(tiny(Variant::kSim2Rec), 15);
  sadae::Sadae sd = tiny_sadae(16);
  LtsVecEnv env = small_env(7, 12);

  RolloutOptions opt;
  opt.horizon = 0;
  const Rollout empty = rollout_episode(env, a, &sd, opt);
  CHECK(empty.steps == 0);
  CHECK(empty.size() == 0);
  CHECK(empty.trajectories().size() == 7);
  CHECK(empty.trajectories()[0].actions.empty());

  opt.horizon = 12;
  opt.seed = 3;
  const Rollout r = rollout_episode(env, a, &sd, opt);
  CHECK(r.steps == 12);
  CHECK(r.size() == 84);
  CHECK(r.actions.minCoeff() > 0.0);
  CHECK(r.actions.maxCoeff() < 1.0);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(r.done(r.row(11, i), 0) == 1.0);
    CHECK(r.done(r.row(10, i), 0) == 0.0);
  }
  CHECK(r.bootstrap.isZero());
  CHECK(r.upsilon_noise.rows() == 12);

  const Rollout again = rollout_episode(env, a, &sd, opt);
  CHECK(again.actions == r.actions);
  CHECK(again.reward == r.reward);

  // Differentiable replay reproduces the recorded log-probabilities and values.
  std::vector<std::size_t> all(7);
  for (std::size_t i = 0; i < 7; ++i) all[i] = i;
  nn::Graph g;
  const SequenceOutput o = unroll(g, a, &sd, r, all);
  const double ls = o.log_std.scalar();
  for (int t = 0; t < 12; ++t) {
    for (std::size_t i = 0; i < 7; ++i) {
      const auto k = r.row(t, i);
      CHECK(std::abs(o.value.value()(k, 0) - r.value(k, 0)) < 1e-10);
      const double lp = squashed_log_prob(r.pre_squash(k, 0), o.mean.value()(k, 0), ls);
      CHECK(std::abs(lp - r.log_prob(k, 0)) < 1e-10);
    }
  }

  const auto trajs = r.trajectories();
  CHECK(trajs[3].rewards.size() == 12);
  CHECK(trajs[3].actions[5] == r.actions(r.row(5, 3), 0));
}

TEST_CASE("truncated rollouts bootstrap from the reached state") {
  Agent a(tiny(Variant::kDrOsi), 17);
  LtsVecEnv env = small_env(4, 140);
  RolloutOptions opt;
  opt.horizon = 5;
  const Rollout r = rollout_episode(env, a, nullptr, opt);
  CHECK(r.steps == 5);
  CHECK(r.done.isZero());
  CHECK(r.bootstrap.cwiseAbs().minCoeff() > 0.0);
}

TEST_CASE("rollout rejects mismatched components") {
  LtsVecEnv env = small_env(3);
  Agent s2r(tiny(Variant::kSim2Rec), 18);
  RolloutOptions opt;
  opt.horizon = 3;
  CHECK_THROWS_AS(rollout_episode(env, s2r, nullptr, opt), ConfigError);
  sadae::SadaeConfig wide;
  wide.encoder_hidden = {4};
  wide.decoder_hidden = {4};
  wide.latent_dim = 3;
  sadae::Sadae other(wide, 1);
  CHECK_THROWS_AS(rollout_episode(env, s2r, &other, opt), ConfigError);
  AgentConfig bad = tiny(Variant::kDrOsi);
  bad.obs_dim = 3;
  Agent wrong(bad, 1);
  CHECK_THROWS_AS(rollout_episode(env, wrong, nullptr, opt), ConfigError);
}

TEST_CASE("non-finite head parameters are reported") {
  Agent a(tiny(Variant::kDrUni), 19);
  a.store().at("agent/pi/l1/b").value(0, 0) = std::nan("");
  Matrix obs = Matrix::Zero(2, 2);
  Matrix z = Matrix::Zero(2, 4);
  CHECK_THROWS_AS(a.act(obs, z, ActMode::kMean, nullptr), NumericError);
}

TEST_CASE("deterministic evaluation through the policy adapter is reproducible") {
  Agent a(tiny(Variant::kSim2Rec), 20);
  sadae::Sadae sd = tiny_sadae(21);
  lts::TaskSpec task = lts::TaskSpec::preset(lts::TaskId::kLts3);
  task.horizon = 15;
  lts::SimulatorSpec target;
  target.n_users = 20;
  target.persona_seed = 5;
  eval::EvalConfig cfg;
  cfg.seeds = {1, 2};
  AgentPolicy p1(a, &sd), p2(a, &sd);
  const auto r1 = eval::evaluate_policy(p1, task, target, cfg);
  const auto r2 = eval::evaluate_policy(p2, task, target, cfg);
  CHECK(r1.per_seed == r2.per_seed);
  CHECK(std::isfinite(r1.mean));
}
