#pragma once

// Long-term satisfaction (choc/kale) user environment.
//
// Each user carries a hidden persona (engagement means, satisfaction
// sensitivity, exposure memory) and a net-positive-exposure state. The policy
// only observes the current satisfaction and a noisy, per-episode reading of
// the group's clickbait engagement mean.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sim2rec::lts {

enum class TaskId { kLts1, kLts2, kLts3, kLts3Beta };

std::string_view to_string(TaskId id);
TaskId parse_task_id(std::string_view name);

struct TaskSpec {
  TaskId id = TaskId::kLts3;
  int alpha = 4;       // exclusion radius on omega_g
  double beta = 0.0;   // omega_u ~ Uni(-beta, beta)
  double mu_c_ref = 14.0;
  double mu_k_ref = 4.0;
  double sigma_c = 1.0;
  double sigma_k = 1.0;
  int mu_c_min = 6;    // inclusive
  int mu_c_max = 22;   // exclusive
  int horizon = 140;
  int users_per_group = 200;
  double hs_lo = 0.2;
  double hs_hi = 1.0;
  double gamma_n_lo = 0.8;
  double gamma_n_hi = 0.99;
  double obs_variance = 4.0;
  bool sat_after_update = true;    // engagement uses SAT_{t+1}
  bool resample_omega_u = false;   // "unlimited" LTS3-beta mode

  static TaskSpec preset(TaskId id);
  void validate() const;
};

struct EnvParams {
  double omega_u = 0.0;
  double omega_g = 0.0;
};

struct UserCore {
  double mu_c = 0.0;
  double mu_k = 0.0;
  double sigma_c = 1.0;
  double sigma_k = 1.0;
  double h_s = 0.0;
  double gamma_n = 0.0;
  double npe = 0.0;
  double sat = 0.5;
  double o = 0.0;
};

struct Observation {
  double sat = 0.5;
  double o = 0.0;
};

struct Transition {
  Observation obs;
  double action = 0.0;
  double reward = 0.0;
  Observation next_obs;
  bool done = false;
  double engagement = 0.0;
  double sat_next = 0.0;
};

inline constexpr std::size_t kObsDim = 2;

// Fixed affine map of observations into a roughly unit range for networks:
// [2 SAT - 1, (o - 14) / 5]. Constants do not depend on the environment.
inline constexpr double kObsCenter = 14.0;
inline constexpr double kObsScale = 5.0;
inline void normalize_obs(const Observation& o, double* out) {
  out[0] = 2.0 * o.sat - 1.0;
  out[1] = (o.o - kObsCenter) / kObsScale;
}

double sigmoid(double x);

// Integer omega_g values of the task's training set, ascending.
std::vector<int> enumerate_omega(const TaskSpec& task);

// One step of a single user's hidden dynamics, noise excluded.
struct UserStep {
  double npe = 0.0;
  double sat = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
};
UserStep user_dynamics(const UserCore& u, double action, bool sat_after_update);

class UserGroup {
 public:
  UserGroup() = default;
  UserGroup(int group_id, double omega_g, int horizon, bool sat_after_update,
            std::vector<UserCore> users, std::uint64_t noise_seed);

  int group_id() const { return group_id_; }
  double omega_g() const { return omega_g_; }
  int t() const { return t_; }
  int horizon() const { return horizon_; }
  std::size_t size() const { return users_.size(); }
  const std::vector<UserCore>& users() const { return users_; }
  std::vector<UserCore>& users() { return users_; }
  std::vector<Observation> observations() const;

  // NPE <- 0, SAT <- 0.5, fresh o per user drawn from (seed, user). Also
  // selects the episode's engagement noise stream.
  std::vector<Observation> reset(std::uint64_t seed);

  // Engagement noise for user i at step t comes from (noise_seed, i, t), so a
  // serial or per-user loop reproduces the vectorized result exactly.
  std::vector<Transition> step(std::span<const double> actions);
  Transition step_user(std::size_t index, double action);
  void advance_clock() { ++t_; }

  void set_noise_seed(std::uint64_t seed) { noise_seed_ = seed; }
  std::uint64_t noise_seed() const { return noise_seed_; }
  double obs_stddev() const { return obs_stddev_; }
  void set_obs_stddev(double s) { obs_stddev_ = s; }

 private:
  int group_id_ = 0;
  double omega_g_ = 0.0;
  int horizon_ = 0;
  bool sat_after_update_ = true;
  int t_ = 0;
  double obs_stddev_ = 2.0;
  std::vector<UserCore> users_;
  std::uint64_t noise_seed_ = 0;
};

// omega_u may be empty (all zero), a single value, or one value per user.
UserGroup spawn_group(const TaskSpec& task, double omega_g,
                      std::span<const double> omega_u, std::size_t n_users,
                      std::uint64_t seed, int group_id = 0);

std::vector<Observation> reset_group(UserGroup& group, std::uint64_t seed);
std::vector<Transition> step(UserGroup& group, std::span<const double> actions);
// Same, but engagement noise is drawn from an explicit stream.
std::vector<Transition> step(UserGroup& group, std::span<const double> actions,
                             std::uint64_t noise_seed);

// Recipe for a simulator: enough to rebuild its user population exactly.
struct SimulatorSpec {
  int id = 0;
  double omega_g = 0.0;
  std::vector<double> omega_u;  // per user; empty means all zero
  std::size_t n_users = 0;
  std::uint64_t persona_seed = 0;
};

struct TaskEnsemble {
  std::vector<SimulatorSpec> training;
  SimulatorSpec target;
  bool resample_omega_u = false;
};

inline constexpr std::size_t kEvalUsersPerGroup = 750;

TaskEnsemble build_task_ensemble(const TaskSpec& task, std::uint64_t seed,
                                 std::size_t eval_users = kEvalUsersPerGroup);

// Redraws per-user omega_u ~ Uni(-beta, beta) (unlimited mode).
void resample_omega_u(SimulatorSpec& spec, double beta, std::uint64_t seed);

UserGroup instantiate(const TaskSpec& task, const SimulatorSpec& spec);

// Columnar trajectory dump: group,user,t,SAT,o,a,r,done
struct TrajectoryRow {
  int group = 0;
  std::size_t user = 0;
  int t = 0;
  double sat = 0.0;
  double o = 0.0;
  double action = 0.0;
  double reward = 0.0;
  bool done = false;
  double sat_next = 0.0;
};
void write_trajectory_csv(std::ostream& os, std::span<const TrajectoryRow> rows);

// Logging policy: a ~ Uni(lo, hi) per user and step, from (seed, user, t).
struct BehaviorPolicy {
  double lo = 0.2;
  double hi = 0.8;
};

// Resets the group with `seed` and runs one full episode. Rows are ordered by
// (t, user).
std::vector<TrajectoryRow> run_behavior_episode(UserGroup& group, const BehaviorPolicy& policy,
                                                std::uint64_t seed);

}  // namespace sim2rec::lts
