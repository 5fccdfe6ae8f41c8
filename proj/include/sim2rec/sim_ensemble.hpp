#pragma once

// Data-driven simulators: one-step Gaussian user models learned from logged
// trajectories, their ensemble disagreement, the intervention test, and the
// trend and executability filters that guard policy learning against model
// exploitation.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sim2rec/agent.hpp"
#include "sim2rec/diffnet.hpp"
#include "sim2rec/lts_env.hpp"
#include "sim2rec/sadae.hpp"

namespace sim2rec::ens {

using nn::Matrix;

// (group, user) identifies one logged trajectory.
using UserKey = std::pair<int, std::size_t>;

// Logged transitions ordered by (group, user, t). Feedback y is SAT after the
// step; reward is the sampled engagement.
struct LoggedDataset {
  std::string behavior = "logged";
  std::vector<lts::TrajectoryRow> rows;

  // Time-contiguity per (group, user) and actions in [0, 1].
  void validate() const;
  std::vector<int> groups() const;
  // Row indices of every trajectory, each in time order.
  std::map<UserKey, std::vector<std::size_t>> trajectories() const;
  std::size_t size() const { return rows.size(); }
};

// Runs the behavior policy on every simulator for `episodes` episodes. Users of
// episode e get ids e * n_users + i so trajectories stay contiguous.
LoggedDataset generate_logs(const lts::TaskSpec& task, const std::vector<lts::SimulatorSpec>& specs,
                            const lts::BehaviorPolicy& behavior, int episodes, std::uint64_t seed);

// Columns: group,user,t,sat,o,a,y,r
void write_logged_csv(std::ostream& os, const LoggedDataset& data);
LoggedDataset read_logged_csv(std::istream& is, const std::string& behavior = "logged");

// Per-group state batches for SADAE training on logged data.
std::vector<sadae::GroupSeries> group_series(const LoggedDataset& data);

// ---- learned simulators -------------------------------------------------------------

inline constexpr int kFeedbackDim = 2;  // (reward, SAT after the step)

// Training hyperparameters of one member. Everything that shapes the weights
// lives here, so a record reproduces its member exactly.
struct Lambda {
  std::uint64_t seed = 0;
  int held_out_group = -1;       // group excluded from training; -1 keeps all
  double user_fraction = 0.8;    // per-group share of users sampled for training
  double lr = 1e-3;
  int steps = 3000;
  int batch = 256;
  std::vector<int> hidden{64, 64};

  std::string describe() const;
};

class LearnedSimulator {
 public:
  LearnedSimulator() = default;
  LearnedSimulator(const Lambda& lambda, Matrix y_center, Matrix y_scale);

  // Rows of raw (SAT, o, a). Outputs are in raw feedback units.
  void predict(const Matrix& inputs, Matrix* mean, Matrix* stddev) const;
  Matrix predict_mean(const Matrix& inputs) const;

  const Lambda& lambda() const { return lambda_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }
  nn::Var forward(nn::Graph& g, const Matrix& inputs) const;  // standardized (mean, log_std)
  const Matrix& y_center() const { return center_; }
  const Matrix& y_scale() const { return scale_; }

  nn::Checkpoint snapshot() const;
  static LearnedSimulator from_checkpoint(const nn::Checkpoint& ckpt);

 private:
  Lambda lambda_;
  mutable nn::ParamStore store_;
  nn::Mlp net_;
  Matrix center_;
  Matrix scale_;
};

// Network input for raw (SAT, o, a) rows.
Matrix model_input(const Matrix& raw);
// Raw (SAT, o, a) inputs and (r, SAT') targets for the given rows.
void design_matrices(const LoggedDataset& data, const std::vector<std::size_t>& rows, Matrix* inputs,
                     Matrix* targets);

// Row subset a member trains on: every group except the held-out one, with a
// seeded share of users per group.
std::vector<std::size_t> training_rows(const LoggedDataset& data, const Lambda& lambda);

// Maximum-likelihood fit of a Gaussian one-step model. Throws StageError with
// the hyperparameter record when the loss diverges, ConfigError when fewer
// than `min_transitions` rows are available.
LearnedSimulator learn_simulator(const LoggedDataset& data, const std::vector<std::size_t>& rows,
                                 const Lambda& lambda, std::size_t min_transitions = 100);

// Mean squared error of the model mean per feedback component, and the
// variance of each component (the constant-mean predictor's error).
struct HeldOutError {
  std::vector<double> model_mse;
  std::vector<double> baseline_mse;
  std::size_t rows = 0;
  bool beats_baseline() const;
};
HeldOutError held_out_error(const LearnedSimulator& sim, const LoggedDataset& data,
                            const std::vector<std::size_t>& rows);

// ---- ensembles ---------------------------------------------------------------------

// Leave-one-group-out records with varied seeds: member j leaves out
// groups[j % |groups|] and uses seed stream (seed, j).
std::vector<Lambda> default_lambdas(const std::vector<int>& groups, int members, std::uint64_t seed);

class Ensemble {
 public:
  Ensemble() = default;
  explicit Ensemble(std::vector<LearnedSimulator> members);

  std::size_t size() const { return members_.size(); }
  const LearnedSimulator& member(std::size_t j) const { return members_.at(j); }
  const std::vector<LearnedSimulator>& members() const { return members_; }

  // Mean over members of the L2 distance between each member's predicted mean
  // and the member average, per input row.
  std::vector<double> uncertainty(const Matrix& inputs) const;

  void save(const std::filesystem::path& dir) const;
  static Ensemble load(const std::filesystem::path& dir);

 private:
  std::vector<LearnedSimulator> members_;
};

// Same rule from explicit per-member means (rows x feedback each).
std::vector<double> uncertainty_from_means(const std::vector<Matrix>& means);

Ensemble build_omega_prime(const LoggedDataset& data, const std::vector<Lambda>& lambdas,
                           std::size_t min_transitions = 100);

// ---- intervention test and filters ------------------------------------------------------------

struct KMeansResult {
  Matrix centers;
  std::vector<int> labels;
  int iterations = 0;
};
// Lloyd iterations from a seeded k-means++ start.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 100);

// Offsets from -0.5 to 0.5 in steps of 0.1.
std::vector<double> default_delta_grid();

// Predicted reward of every user's last logged state over a + delta (clipped
// to [0, 1]), one row per user.
Matrix response_curves(const LearnedSimulator& sim, const LoggedDataset& data,
                       const std::vector<double>& grid, std::vector<UserKey>* users = nullptr);

struct InterventionReport {
  std::vector<double> grid;
  std::vector<UserKey> users;
  std::vector<Matrix> centers;           // per member, k x |grid|, minus the leftmost value
  std::vector<std::vector<int>> labels;  // per member, cluster of each user
};
InterventionReport intervention_test(const Ensemble& ensemble, const LoggedDataset& data,
                                     const std::vector<double>& grid, int k, std::uint64_t seed);
void write_intervention_csv(std::ostream& centers, std::ostream& patterns,
                            const InterventionReport& report);

struct TrendResult {
  LoggedDataset kept;
  std::vector<UserKey> removed;
  std::vector<std::string> reasons;
};
// Removes users whose least-squares response slope over the grid is <= 0 in
// any member.
TrendResult f_trend(const Ensemble& ensemble, const LoggedDataset& data,
                    const std::vector<double>& grid);
void write_removal_csv(std::ostream& os, const TrendResult& result);

// Min and max of each user's logged actions over its last `window` steps.
std::map<UserKey, std::pair<double, double>> f_exec(const LoggedDataset& data, int window);

// Percentile (0-100) of logged rewards, linear interpolation.
double reward_percentile(const LoggedDataset& data, double percentile);

// ---- learned environments ----------------------------------------------------------------------

// A group of users driven by one ensemble member. Each reset starts every user
// from one of its own logged states.
class LearnedVecEnv : public agent::VecEnv {
 public:
  LearnedVecEnv(std::shared_ptr<const Ensemble> ensemble, std::size_t member,
                std::vector<std::vector<lts::Observation>> start_states, int horizon,
                std::uint64_t noise_seed);
  std::size_t num_users() const override { return starts_.size(); }
  std::vector<lts::Observation> reset(std::uint64_t seed) override;
  std::vector<lts::Transition> step(std::span<const double> actions) override;

 private:
  std::shared_ptr<const Ensemble> ens_;
  std::size_t member_;
  std::vector<std::vector<lts::Observation>> starts_;
  int horizon_;
  std::uint64_t noise_seed_;
  std::uint64_t episode_seed_ = 0;
  std::vector<lts::Observation> state_;
  int t_ = 0;
};

struct EnsembleSetConfig {
  int horizon = 5;                 // truncated rollout length
  bool trend_filter = true;
  bool exec_filter = true;
  int exec_window = 14;
  std::vector<double> grid = default_delta_grid();
};

// Training simulators for the ensemble path: index = member * groups + group.
// Draws come with the group's removal flags, action bounds and the ensemble
// uncertainty penalty.
class EnsembleSimulatorSet : public agent::SimulatorSet {
 public:
  EnsembleSimulatorSet(std::shared_ptr<const Ensemble> ensemble, const LoggedDataset& data,
                       const EnsembleSetConfig& cfg);
  std::size_t size() const override { return ens_->size() * groups_.size(); }
  agent::SimInstance make(std::size_t index, std::uint64_t seed) override;

  const std::vector<int>& groups() const { return groups_; }
  std::size_t removed_users() const;

 private:
  struct GroupData {
    std::vector<UserKey> users;
    std::vector<std::vector<lts::Observation>> states;
    std::vector<std::uint8_t> removed;
    std::vector<std::pair<double, double>> bounds;
  };
  std::shared_ptr<const Ensemble> ens_;
  EnsembleSetConfig cfg_;
  std::vector<int> groups_;
  std::vector<GroupData> data_;
};

}  // namespace sim2rec::ens
