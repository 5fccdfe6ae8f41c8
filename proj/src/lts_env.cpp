#include "sim2rec/lts_env.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>

#include "sim2rec/csv.hpp"
#include "sim2rec/errors.hpp"
#include "sim2rec/rng.hpp"

namespace sim2rec::lts {

namespace {
constexpr std::uint64_t kTagPersona = 0x7065727321ULL;
constexpr std::uint64_t kTagObs = 0x6f62732121ULL;
constexpr std::uint64_t kTagOmegaU = 0x6f6d65676175ULL;
constexpr std::uint64_t kTagNoise = 0x6e6f697365ULL;
}  // namespace

std::string_view to_string(TaskId id) {
  switch (id) {
    case TaskId::kLts1:
      return "LTS1";
    case TaskId::kLts2:
      return "LTS2";
    case TaskId::kLts3:
      return "LTS3";
    case TaskId::kLts3Beta:
      return "LTS3-beta";
  }
  return "?";
}

TaskId parse_task_id(std::string_view name) {
  if (name == "LTS1") return TaskId::kLts1;
  if (name == "LTS2") return TaskId::kLts2;
  if (name == "LTS3") return TaskId::kLts3;
  if (name == "LTS3-beta" || name == "LTS3-β" || name == "LTS3B") return TaskId::kLts3Beta;
  throw ConfigError("unknown task id: " + std::string(name));
}

TaskSpec TaskSpec::preset(TaskId id) {
  TaskSpec t;
  t.id = id;
  switch (id) {
    case TaskId::kLts1:
      t.alpha = 2;
      break;
    case TaskId::kLts2:
      t.alpha = 3;
      break;
    case TaskId::kLts3:
      t.alpha = 4;
      break;
    case TaskId::kLts3Beta:
      t.alpha = 4;
      t.users_per_group = 500;
      break;
  }
  return t;
}

void TaskSpec::validate() const {
  if (alpha < 0) throw ConfigError("alpha must be non-negative");
  if (beta < 0) throw ConfigError("beta must be non-negative");
  if (id != TaskId::kLts3Beta && beta != 0.0) {
    throw ConfigError("omega_u is fixed to 0 outside LTS3-beta (beta must be 0)");
  }
  if (horizon < 0) throw ConfigError("horizon must be non-negative");
  if (users_per_group < 1) throw ConfigError("users_per_group must be >= 1");
  if (!(hs_lo > 0 && hs_hi >= hs_lo)) throw ConfigError("bad h_s range");
  if (!(gamma_n_lo > 0 && gamma_n_hi < 1 && gamma_n_hi >= gamma_n_lo)) {
    throw ConfigError("bad gamma_n range");
  }
  if (!(sigma_c > 0 && sigma_k > 0 && obs_variance > 0)) {
    throw ConfigError("standard deviations must be positive");
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<int> enumerate_omega(const TaskSpec& task) {
  std::vector<int> out;
  const int ref = static_cast<int>(std::lround(task.mu_c_ref));
  for (int w = task.mu_c_min - ref; w < task.mu_c_max - ref; ++w) {
    if (std::abs(w) >= task.alpha) out.push_back(w);
  }
  if (out.empty()) {
    throw ConfigError("task " + std::string(to_string(task.id)) + " with alpha=" +
                      std::to_string(task.alpha) + " has an empty parameter set");
  }
  return out;
}

UserStep user_dynamics(const UserCore& u, double a, bool sat_after_update) {
  UserStep s;
  s.npe = u.gamma_n * u.npe - 2.0 * (a - 0.5);
  s.sat = sigmoid(u.h_s * s.npe);
  const double sat_for_engagement = sat_after_update ? s.sat : u.sat;
  s.mean = (a * u.mu_c + (1.0 - a) * u.mu_k) * sat_for_engagement;
  s.stddev = a * u.sigma_c + (1.0 - a) * u.sigma_k;
  return s;
}

UserGroup::UserGroup(int group_id, double omega_g, int horizon, bool sat_after_update,
                     std::vector<UserCore> users, std::uint64_t noise_seed)
    : group_id_(group_id),
      omega_g_(omega_g),
      horizon_(horizon),
      sat_after_update_(sat_after_update),
      users_(std::move(users)),
      noise_seed_(noise_seed) {}

std::vector<Observation> UserGroup::observations() const {
  std::vector<Observation> out(users_.size());
  for (std::size_t i = 0; i < users_.size(); ++i) out[i] = {users_[i].sat, users_[i].o};
  return out;
}

std::vector<Observation> UserGroup::reset(std::uint64_t seed) {
  for (std::size_t i = 0; i < users_.size(); ++i) {
    UserCore& u = users_[i];
    u.npe = 0.0;
    u.sat = sigmoid(0.0);
    SplitMix64 gen(stream_seed(seed, kTagObs, i));
    u.o = u.mu_c + obs_stddev_ * standard_normal(gen);
  }
  t_ = 0;
  noise_seed_ = stream_seed(seed, kTagNoise);
  return observations();
}

Transition UserGroup::step_user(std::size_t i, double action) {
  if (std::isnan(action)) {
    throw NumericError("NaN action for user " + std::to_string(i) + " at t=" +
                       std::to_string(t_));
  }
  const double a = std::clamp(action, 0.0, 1.0);
  UserCore& u = users_[i];
  Transition tr;
  tr.obs = {u.sat, u.o};
  tr.action = a;
  const UserStep s = user_dynamics(u, a, sat_after_update_);
  SplitMix64 gen(stream_seed(noise_seed_, i, static_cast<std::uint64_t>(t_)));
  tr.engagement = s.mean + s.stddev * standard_normal(gen);
  tr.reward = tr.engagement;
  u.npe = s.npe;
  u.sat = s.sat;
  tr.sat_next = s.sat;
  tr.next_obs = {u.sat, u.o};
  tr.done = t_ + 1 >= horizon_;
  return tr;
}

std::vector<Transition> UserGroup::step(std::span<const double> actions) {
  if (actions.size() != users_.size()) {
    throw ConfigError("step: expected " + std::to_string(users_.size()) +
                      " actions, got " + std::to_string(actions.size()));
  }
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (std::isnan(actions[i])) {
      throw NumericError("NaN action for user " + std::to_string(i));
    }
  }
  std::vector<Transition> out(users_.size());
  for (std::size_t i = 0; i < users_.size(); ++i) out[i] = step_user(i, actions[i]);
  ++t_;
  return out;
}

UserGroup spawn_group(const TaskSpec& task, double omega_g, std::span<const double> omega_u,
                      std::size_t n_users, std::uint64_t seed, int group_id) {
  if (n_users < 1) throw ConfigError("spawn_group needs at least one user");
  if (omega_u.size() > 1 && omega_u.size() != n_users) {
    throw ConfigError("omega_u must be empty, scalar, or per-user");
  }
  std::vector<UserCore> users(n_users);
  for (std::size_t i = 0; i < n_users; ++i) {
    Rng rng(stream_seed(seed, kTagPersona, i));
    UserCore& u = users[i];
    const double wu = omega_u.empty() ? 0.0 : (omega_u.size() == 1 ? omega_u[0] : omega_u[i]);
    u.mu_c = task.mu_c_ref + omega_g;
    u.mu_k = task.mu_k_ref + wu;
    u.sigma_c = task.sigma_c;
    u.sigma_k = task.sigma_k;
    u.h_s = rng.uniform(task.hs_lo, task.hs_hi);
    u.gamma_n = rng.uniform(task.gamma_n_lo, task.gamma_n_hi);
  }
  UserGroup g(group_id, omega_g, task.horizon, task.sat_after_update, std::move(users),
              stream_seed(seed, kTagNoise));
  g.set_obs_stddev(std::sqrt(task.obs_variance));
  g.reset(seed);
  return g;
}

std::vector<Observation> reset_group(UserGroup& group, std::uint64_t seed) {
  return group.reset(seed);
}

std::vector<Transition> step(UserGroup& group, std::span<const double> actions) {
  return group.step(actions);
}

std::vector<Transition> step(UserGroup& group, std::span<const double> actions,
                             std::uint64_t noise_seed) {
  group.set_noise_seed(noise_seed);
  return group.step(actions);
}

void resample_omega_u(SimulatorSpec& spec, double beta, std::uint64_t seed) {
  spec.omega_u.assign(spec.n_users, 0.0);
  if (beta == 0.0) return;
  Rng rng(stream_seed(seed, kTagOmegaU, static_cast<std::uint64_t>(spec.id)));
  for (double& w : spec.omega_u) w = rng.uniform(-beta, beta);
}

TaskEnsemble build_task_ensemble(const TaskSpec& task, std::uint64_t seed,
                                 std::size_t eval_users) {
  task.validate();
  TaskEnsemble ens;
  ens.resample_omega_u = task.resample_omega_u;
  const auto omegas = enumerate_omega(task);
  for (std::size_t k = 0; k < omegas.size(); ++k) {
    SimulatorSpec s;
    s.id = static_cast<int>(k);
    s.omega_g = omegas[k];
    s.n_users = static_cast<std::size_t>(task.users_per_group);
    s.persona_seed = stream_seed(seed, kTagPersona, k);
    resample_omega_u(s, task.beta, stream_seed(seed, kTagOmegaU));
    ens.training.push_back(std::move(s));
  }
  ens.target.id = -1;
  ens.target.omega_g = 0.0;
  ens.target.n_users = eval_users;
  ens.target.persona_seed = stream_seed(seed, kTagPersona, 0xffffULL);
  ens.target.omega_u.assign(eval_users, 0.0);
  return ens;
}

UserGroup instantiate(const TaskSpec& task, const SimulatorSpec& spec) {
  return spawn_group(task, spec.omega_g, spec.omega_u, spec.n_users, spec.persona_seed,
                     spec.id);
}

void write_trajectory_csv(std::ostream& os, std::span<const TrajectoryRow> rows) {
  CsvWriter w(os, {"group", "user", "t", "SAT", "o", "a", "r", "done"});
  for (const auto& r : rows) {
    w.row(r.group, r.user, r.t, r.sat, r.o, r.action, r.reward, r.done ? 1 : 0);
  }
}

std::vector<TrajectoryRow> run_behavior_episode(UserGroup& group, const BehaviorPolicy& policy,
                                                std::uint64_t seed) {
  if (!(policy.lo >= 0.0 && policy.hi <= 1.0 && policy.lo <= policy.hi)) {
    throw ConfigError("behavior policy range must lie in [0,1]");
  }
  std::vector<Observation> obs = group.reset(seed);
  const std::size_t n = group.size();
  std::vector<TrajectoryRow> rows;
  rows.reserve(n * static_cast<std::size_t>(group.horizon()));
  std::vector<double> actions(n);
  for (int t = 0; t < group.horizon(); ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      SplitMix64 gen(stream_seed(seed, 0x6265686176ULL + i, static_cast<std::uint64_t>(t)));
      actions[i] = std::uniform_real_distribution<double>(policy.lo, policy.hi)(gen);
    }
    const auto trs = group.step(actions);
    for (std::size_t i = 0; i < n; ++i) {
      TrajectoryRow r;
      r.group = group.group_id();
      r.user = i;
      r.t = t;
      r.sat = obs[i].sat;
      r.o = obs[i].o;
      r.action = trs[i].action;
      r.reward = trs[i].reward;
      r.done = trs[i].done;
      r.sat_next = trs[i].sat_next;
      rows.push_back(r);
      obs[i] = trs[i].next_obs;
    }
  }
  return rows;
}

}  // namespace sim2rec::lts
