#pragma once

// Policy learning over a set of simulators: draw a simulator, roll out the
// agent, shape and filter the rewards, then run clipped policy-gradient
// updates that also train the SADAE through the latent path plus a weighted
// ELBO term.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sim2rec/agent.hpp"
#include "sim2rec/evalkit.hpp"
#include "sim2rec/lts_env.hpp"
#include "sim2rec/sadae.hpp"

namespace sim2rec::trainer {

using agent::Rollout;
using agent::SimInstance;
using agent::SimulatorSet;
using nn::Matrix;

struct TrainConfig {
  double gamma = 0.99;
  double clip = 0.2;
  double gae_lambda = 0.95;
  int epochs_per_batch = 4;
  int minibatches = 4;          // user-wise splits of each episode
  int batch_size = 30000;       // transitions collected per iteration
  bool mix_simulators = false;  // draw a fresh simulator per episode instead of per iteration
  int iterations = 500;
  double lr_start = 1e-4;
  double lr_end = 1e-6;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double reward_scale = 0.01;  // learning-side reward multiplier; reports stay raw
  double alpha = 0.0;          // uncertainty penalty coefficient
  int truncate = 0;            // rollout length cap; 0 uses the simulator's horizon
  int bptt_window = 0;         // 0 backpropagates through the whole episode
  bool filters = true;         // apply trend/executability filters when a simulator provides them
  double r_min = 0.0;          // minimal reward for the executability penalty
  double elbo_weight = 0.1;
  double sadae_lr = 2e-5;
  bool train_sadae = true;
  int eval_every = 10;         // 0 disables target evaluation
  int eval_episodes = 1;
  int checkpoint_every = 0;    // 0 disables checkpoints
  std::uint64_t seed = 0;

  static TrainConfig desk();
  void validate() const;
};

// Learning rate at `iteration` of `total` (linear decay).
double learning_rate(const TrainConfig& cfg, int iteration);

// ---- simulators -------------------------------------------------------------------

// LTS simulators built from specs, optionally redrawing per-user shifts for
// every draw (unlimited mode).
class LtsSimulatorSet : public SimulatorSet {
 public:
  LtsSimulatorSet(lts::TaskSpec task, std::vector<lts::SimulatorSpec> specs,
                  bool resample_omega_u = false);
  std::size_t size() const override { return specs_.size(); }
  SimInstance make(std::size_t index, std::uint64_t seed) override;
  const std::vector<lts::SimulatorSpec>& specs() const { return specs_; }

 private:
  lts::TaskSpec task_;
  std::vector<lts::SimulatorSpec> specs_;
  bool resample_;
};

// Uniform draw over the training set.
std::size_t sample_simulator(const SimulatorSet& set, Rng& rng);

// ---- buffer ------------------------------------------------------------------------

struct Episode {
  Rollout roll;
  std::size_t simulator = 0;
  Matrix raw_reward;     // as simulated
  Matrix reward;         // shaped and filtered, used for learning
  Matrix penalty;        // U(s,a) per transition
  Matrix mask;           // 1 where the transition takes part in learning
  Matrix advantage;
  Matrix returns;
  std::size_t size() const { return roll.size(); }
};

struct RolloutBuffer {
  std::vector<Episode> episodes;
  bool advantages_ready = false;
  std::size_t transitions() const;
  std::size_t active() const;  // masked-in transitions
};

Episode make_episode(Rollout roll, std::size_t simulator);

// r <- r - alpha * U(s, a). No penalty function means U = 0.
void shape_rewards(Episode& ep, const agent::PenaltyFn& penalty, double alpha);

// Trend-removed users are masked out entirely. An action outside its user's
// executable range ends that user's episode with reward r_min / (1 - gamma);
// later steps of the user are masked out.
void apply_filters(Episode& ep, const std::vector<std::uint8_t>& removed,
                   const std::vector<std::pair<double, double>>& bounds, double r_min,
                   double gamma);

// Generalized advantage estimates and lambda-returns per user (rewards are
// multiplied by `reward_scale` first, values are in scaled units), then
// normalization of advantages over every masked-in transition of the buffer.
void compute_advantages(RolloutBuffer& buf, double gamma, double lambda, bool normalize = true,
                        double reward_scale = 1.0);
void compute_advantages(Episode& ep, double gamma, double lambda, double reward_scale = 1.0);

// ---- update --------------------------------------------------------------------------

struct LossTerms {
  nn::Var policy;
  nn::Var value;
  nn::Var entropy;
  nn::Var elbo;  // per-sample negated ELBO (invalid when unused)
  nn::Var total;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

// Loss of one minibatch of users of an episode. `elbo_noise` (1 x d) and
// `elbo_step` select the auxiliary SADAE term; pass elbo_step < 0 to skip it.
LossTerms minibatch_loss(nn::Graph& g, const agent::Agent& agent, const sadae::Sadae* sadae,
                         const Episode& ep, const std::vector<std::size_t>& users,
                         const TrainConfig& cfg, int elbo_step, const Matrix& elbo_noise);

struct UpdateMetrics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double elbo = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  int steps = 0;
  int skipped = 0;
};

// Mutable learner state kept across iterations.
struct LearnerState {
  double lr_factor = 1.0;  // halved once after the first non-finite loss
  bool halved = false;
};

UpdateMetrics update(RolloutBuffer& buf, agent::Agent& agent, sadae::Sadae* sadae,
                     const TrainConfig& cfg, double lr, LearnerState& state, Rng& rng);

// ---- training loop ------------------------------------------------------------------

struct EvalTarget {
  lts::TaskSpec task;
  lts::SimulatorSpec spec;
  std::vector<std::uint64_t> seeds{0};
};

struct MetricsRow {
  int iteration = 0;
  std::size_t simulator = 0;
  double lr = 0.0;
  double train_return = 0.0;   // mean raw discounted return per user on the drawn simulators
  double target_return = 0.0;  // NaN when not evaluated this iteration
  double shaped_reward = 0.0;  // mean learning reward (before scaling)
  double raw_reward = 0.0;
  double mean_penalty = 0.0;
  double masked_fraction = 0.0;
  UpdateMetrics update;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::vector<std::filesystem::path> checkpoints;
  double final_target_return = 0.0;
};

using IterationHook = std::function<void(const MetricsRow&)>;

// `sadae` may be null for variants without the latent path. Checkpoints go to
// run_dir/ckpt_<iter>/ when run_dir is set and checkpoint_every > 0.
TrainResult train(SimulatorSet& set, const std::optional<EvalTarget>& target, agent::Agent& agent,
                  sadae::Sadae* sadae, const TrainConfig& cfg,
                  const std::filesystem::path& run_dir = {}, const IterationHook& hook = {});

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);

// Writes agent.ckpt (and sadae.ckpt when present) into `dir`.
void save_checkpoint(const std::filesystem::path& dir, const agent::Agent& agent,
                     const sadae::Sadae* sadae, int iteration);

}  // namespace sim2rec::trainer
