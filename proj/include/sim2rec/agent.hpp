#pragma once

// Recurrent environment-parameter extractor and context-aware policy.
//
// The extractor folds (state, previous action, group latent features) into a
// recurrent representation z; the policy and the critic both read (s, z).
// Actions are a sigmoid squash of a Gaussian pre-action, so they live in (0,1)
// and log-probabilities carry the change-of-variables term.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sim2rec/diffnet.hpp"
#include "sim2rec/evalkit.hpp"
#include "sim2rec/lts_env.hpp"
#include "sim2rec/sadae.hpp"

namespace sim2rec::agent {

using nn::Graph;
using nn::Matrix;
using nn::Var;

// SIM2REC: extractor sees the SADAE latent; DR_OSI: extractor without it;
// DR_UNI and DIRECT: z is a constant (DIRECT also trains on one simulator).
enum class Variant { kSim2Rec, kDrOsi, kDrUni, kDirect };

std::string to_string(Variant v);
Variant parse_variant(std::string_view name);

struct AgentConfig {
  Variant variant = Variant::kSim2Rec;
  int obs_dim = lts::kObsDim;
  int latent_dim = 5;
  std::vector<int> latent_layers{128, 128, 128, 32};  // dense stack on the latent
  int recurrent = 64;
  std::vector<int> policy_hidden{128, 64};
  std::vector<int> value_hidden{128, 64};
  nn::Activation activation = nn::Activation::kTanh;
  double init_log_std = -0.5;
  double log_std_min = -5.0;
  double log_std_max = 2.0;

  static AgentConfig full(Variant v);
  static AgentConfig desk(Variant v);

  bool recurrent_extractor() const { return variant == Variant::kSim2Rec || variant == Variant::kDrOsi; }
  bool uses_latent() const { return variant == Variant::kSim2Rec; }
  int feature_dim() const { return latent_layers.empty() ? latent_dim : latent_layers.back(); }
  int extractor_input() const { return obs_dim + 1 + (uses_latent() ? feature_dim() : 0); }
  void validate() const;
};

// Per-user recurrent state, one row per user.
struct Carry {
  Matrix h;
  Matrix c;
  Eigen::Index rows() const { return h.rows(); }
};

enum class ActMode { kSample, kMean };

struct PolicyOutput {
  Matrix action;      // N x 1 in (0,1)
  Matrix pre_squash;  // N x 1
  Matrix log_prob;    // N x 1, includes the squash Jacobian
  Matrix value;       // N x 1
  Matrix mean;        // N x 1 pre-squash mean
  double log_std = 0.0;
};

// log N(u; mean, std) - log(sigmoid(u) (1 - sigmoid(u))), the density of
// a = sigmoid(u).
double squashed_log_prob(double pre_squash, double mean, double log_std);
double logit(double a);

class Agent {
 public:
  Agent() = default;
  Agent(const AgentConfig& cfg, std::uint64_t seed);

  const AgentConfig& config() const { return cfg_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

  // ---- graph level --------------------------------------------------------
  // Dense stack on latent samples: S x d -> S x feature_dim.
  Var latent_features(Graph& g, const Var& upsilon) const;
  // One recurrent step. `features` is required iff the variant uses the latent.
  nn::LstmCell::State extract(Graph& g, const Var& obs, const Var& prev_action,
                              const Var* features, const nn::LstmCell::State& prev) const;
  Var constant_z(Graph& g, Eigen::Index rows) const;
  Var policy_mean(Graph& g, const Var& obs, const Var& z) const;
  Var log_std(Graph& g) const;  // 1 x 1, clamped
  Var value(Graph& g, const Var& obs, const Var& z) const;

  // ---- value level -----------------------------------------------------------
  Carry initial_carry(Eigen::Index users) const;
  // z_t and the new carry. `upsilon` is 1 x d (broadcast) or N x d.
  Matrix extract(const Matrix& obs, const Matrix& prev_action, const Matrix* upsilon,
                 Carry& carry) const;
  // `noise` (N x 1 standard normals) is used in sample mode.
  PolicyOutput act(const Matrix& obs, const Matrix& z, ActMode mode, const Matrix* noise) const;

  int z_dim() const { return cfg_.recurrent; }
  nn::Checkpoint snapshot(const std::string& metadata) const;
  void restore(const nn::Checkpoint& ckpt) { nn::restore(store_, ckpt); }

 private:
  AgentConfig cfg_;
  mutable nn::ParamStore store_;
  nn::Mlp features_;
  nn::LstmCell cell_;
  nn::Mlp policy_;
  nn::Mlp value_;
  std::size_t log_std_ = 0;
};

// ---- rollouts -------------------------------------------------------------------

// A group of users stepped together.
class VecEnv {
 public:
  virtual ~VecEnv() = default;
  virtual std::size_t num_users() const = 0;
  virtual std::vector<lts::Observation> reset(std::uint64_t seed) = 0;
  virtual std::vector<lts::Transition> step(std::span<const double> actions) = 0;
};

// Per-transition reward penalty for N (state, action) pairs.
using PenaltyFn =
    std::function<std::vector<double>(std::span<const lts::Observation>, std::span<const double>)>;

// One simulator drawn for training, with the side information the trainer's
// shaping and filtering steps consume. Empty vectors / functions mean "off".
struct SimInstance {
  std::unique_ptr<VecEnv> env;
  std::size_t index = 0;
  int horizon = 140;
  std::vector<std::uint8_t> removed;               // per user, trend-filtered
  std::vector<std::pair<double, double>> bounds;    // per user executable action range
  PenaltyFn penalty;
};

class SimulatorSet {
 public:
  virtual ~SimulatorSet() = default;
  virtual std::size_t size() const = 0;
  // `seed` drives any per-draw randomness (e.g. resampled user shifts).
  virtual SimInstance make(std::size_t index, std::uint64_t seed) = 0;
};

class LtsVecEnv : public VecEnv {
 public:
  explicit LtsVecEnv(lts::UserGroup group) : group_(std::move(group)) {}
  std::size_t num_users() const override { return group_.size(); }
  std::vector<lts::Observation> reset(std::uint64_t seed) override;
  std::vector<lts::Transition> step(std::span<const double> actions) override;
  lts::UserGroup& group() { return group_; }

 private:
  lts::UserGroup group_;
};

struct Trajectory {
  std::vector<lts::Observation> states;
  std::vector<double> actions, rewards, log_probs, values;
  std::vector<bool> dones;
};

// Transitions of one group rollout, stored step-major: row t * N + i.
struct Rollout {
  std::size_t n_users = 0;
  int steps = 0;
  int group = 0;
  std::vector<lts::Observation> raw_obs;
  Matrix obs;         // normalized states
  Matrix actions;
  Matrix pre_squash;
  Matrix log_prob;
  Matrix value;
  Matrix reward;
  Matrix done;        // 0/1
  Matrix z;
  Matrix upsilon_noise;  // steps x d, SIM2REC only
  Matrix bootstrap;      // N x 1 value after the last step (0 once done)

  std::size_t size() const { return n_users * static_cast<std::size_t>(steps); }
  Eigen::Index row(int t, std::size_t user) const {
    return static_cast<Eigen::Index>(static_cast<std::size_t>(t) * n_users + user);
  }
  std::vector<Trajectory> trajectories() const;
};

struct RolloutOptions {
  int horizon = 140;
  std::uint64_t seed = 0;
  bool deterministic = false;  // mean actions and the posterior-mean latent
  int group = 0;
};

// Normalized observation rows for a group.
Matrix observation_matrix(std::span<const lts::Observation> obs);

Rollout rollout_episode(VecEnv& env, const Agent& agent, const sadae::Sadae* sadae,
                        const RolloutOptions& opt);

// Differentiable re-evaluation of a recorded rollout for a subset of users
// (full backpropagation through time unless `bptt_window` > 0, which cuts the
// recurrent gradient every that many steps). Outputs are step-major over `users`.
struct SequenceOutput {
  Var mean;     // (steps * |users|) x 1
  Var log_std;  // 1 x 1
  Var value;    // (steps * |users|) x 1
};
SequenceOutput unroll(Graph& g, const Agent& agent, const sadae::Sadae* sadae, const Rollout& r,
                      const std::vector<std::size_t>& users, int bptt_window = 0);

// Adapter for evalkit: latent recomputed from the live group each step.
class AgentPolicy : public eval::GroupPolicy {
 public:
  AgentPolicy(const Agent& agent, const sadae::Sadae* sadae, bool deterministic = true,
              std::uint64_t seed = 0);
  void begin_episode(std::size_t n_users) override;
  std::vector<double> act(std::span<const lts::Observation> obs, int t) override;

 private:
  const Agent& agent_;
  const sadae::Sadae* sadae_;
  bool deterministic_;
  std::uint64_t seed_;
  std::uint64_t episode_ = 0;
  Carry carry_;
  Matrix prev_action_;
};

}  // namespace sim2rec::agent
