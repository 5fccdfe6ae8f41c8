#pragma once

// Set-distribution variational autoencoder.
//
// Each sample of a group's set X yields a diagonal Gaussian factor over the
// latent code; the set posterior is the normalized product of those factors
// and a unit Gaussian prior factor. The decoder maps a latent code to the
// parameters of the per-sample state distribution (Gaussian for continuous
// features, categorical for discrete ones) and, in state-action mode, to an
// action distribution conditioned on (latent, state).

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "sim2rec/diffnet.hpp"
#include "sim2rec/lts_env.hpp"

namespace sim2rec::sadae {

using nn::Graph;
using nn::Matrix;
using nn::Var;

// Samples of one group at one step.
struct GroupBatch {
  Matrix states;      // N x continuous state dims
  Matrix categories;  // N x discrete state features, integer codes (may be N x 0)
  Matrix actions;     // N x action dims (N x 0 in state-only mode)
  bool state_only = true;
  int group = 0;
  int t = 0;

  Eigen::Index size() const { return states.rows(); }
  void validate() const;
};

struct SadaeConfig {
  int state_dim = 2;
  std::vector<int> category_sizes;  // one entry per discrete state feature
  int action_dim = 0;               // 0 means state-only
  int latent_dim = 5;
  std::vector<int> encoder_hidden{512, 512};
  std::vector<int> decoder_hidden{512, 512};
  nn::Activation activation = nn::Activation::kTanh;
  double log_std_min = -5.0;
  double log_std_max = 2.0;
  double l2_weight = 0.1;
  int elbo_samples = 1;  // reparameterized samples per loss evaluation

  int one_hot_width() const;
  int encoder_input() const { return state_dim + one_hot_width() + action_dim; }
};

struct Posterior {
  Var mean;     // S x d
  Var log_std;  // S x d
};

struct Decoded {
  Var state_mean;     // B x state_dim
  Var state_log_std;  // B x state_dim
  std::vector<Var> category_logits;  // per feature, B x size
  Var action_mean;    // B x action_dim (invalid in state-only mode)
  Var action_log_std;
};

struct ElboTerms {
  Var loss;  // negated ELBO plus L2
  double reconstruction = 0.0;  // summed log-likelihood (positive is better)
  double kl = 0.0;
  double l2 = 0.0;
};

// Closed-form normalized product of diagonal Gaussians. Rows of `means`,
// `stds` are factors; a unit prior factor is included when requested.
struct GaussianParams {
  std::vector<double> mean;
  std::vector<double> stddev;
};
GaussianParams product_of_gaussians(const Matrix& means, const Matrix& stds, bool with_prior);

// KL(N(mean, exp(log_std)^2) || N(0, I)) summed over all entries: 1 x 1.
Var kl_to_standard_normal(const Var& mean, const Var& log_std);

// Sets are order-free, floating-point sums are not: batches are put in a
// canonical (lexicographic) row order before encoding so that any permutation
// of the samples gives bit-identical results.
GroupBatch canonical(const GroupBatch& batch);
// Same for a stacked input of consecutive segments of `group_size` rows.
Matrix canonical_rows(const Matrix& x, Eigen::Index group_size);

class Sadae {
 public:
  Sadae() = default;
  Sadae(const SadaeConfig& cfg, std::uint64_t seed);

  const SadaeConfig& config() const { return cfg_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

  // Encoder input rows for a batch: [states, one-hot categories, actions].
  Matrix encoder_input(const GroupBatch& batch) const;

  // Per-sample factor parameters for R input rows.
  void factors(Graph& g, const Var& input, Var* mean, Var* log_std) const;

  // Posterior for S groups of `group_size` consecutive rows each.
  Posterior encode_segments(Graph& g, const Var& input, Eigen::Index group_size) const;
  Posterior encode(Graph& g, const GroupBatch& batch) const;

  // mean + std * noise, noise S x d.
  Var sample(Graph& g, const Posterior& post, const Matrix& noise) const;

  // `state` rows (continuous + one-hot) are required only for the action head.
  Decoded decode(Graph& g, const Var& upsilon, const Var* state = nullptr) const;

  // One-sample (or cfg.elbo_samples) reparameterized estimate; `noise` has
  // elbo_samples rows of latent_dim standard normals.
  ElboTerms elbo_loss(Graph& g, const GroupBatch& batch, const Matrix& noise) const;

  // Posterior values without recording gradients.
  GaussianParams posterior(const GroupBatch& batch) const;

  // Fresh reparameterized draw; noise all-zero returns the posterior mean.
  std::vector<double> embed_stream(const GroupBatch& batch, const Matrix& noise) const;

  std::vector<std::size_t> weight_indices() const;

  nn::Checkpoint snapshot(const std::string& metadata) const;
  void restore(const nn::Checkpoint& ckpt) { nn::restore(store_, ckpt); }

 private:
  SadaeConfig cfg_;
  mutable nn::ParamStore store_;  // graphs link gradient slots even from const paths
  nn::Mlp encoder_;
  nn::Mlp state_decoder_;
  nn::Mlp action_decoder_;
};

// ---- LTS data ---------------------------------------------------------------

// Step-indexed state sets of one simulator, states normalized for networks.
struct GroupSeries {
  int group = 0;
  double omega_g = 0.0;
  double mu_c = 0.0;
  std::vector<GroupBatch> steps;
};

// One behavior-policy episode of `spec` turned into per-step state batches.
GroupSeries collect_series(const lts::TaskSpec& task, const lts::SimulatorSpec& spec,
                           const lts::BehaviorPolicy& behavior, std::uint64_t seed);

// Builds a state-only batch from observations (normalized).
GroupBatch batch_from_observations(const std::vector<lts::Observation>& obs, int group, int t);

// Reconstruction divergence of the observation feature o: closed-form
// KL(p(o | posterior mean) || N(mu_c, obs_variance)), in raw units, averaged
// over `eval_steps` of the series.
double reconstruction_kld(const Sadae& model, const GroupSeries& series, double obs_variance,
                          const std::vector<int>& eval_steps);

// ---- training -----------------------------------------------------------------

struct TrainConfig {
  int epochs = 8000;  // one gradient step on one GroupBatch per epoch
  double lr = 2e-5;
  int eval_every = 100;
  std::vector<int> eval_steps{0, 35, 70, 105, 139};
  double obs_variance = 4.0;
  std::uint64_t seed = 0;
  int start_epoch = 0;  // for resumed runs
};

struct HistoryRow {
  int epoch = 0;
  double train_elbo = 0.0;  // mean per-sample ELBO over the last window
  double test_kld = 0.0;
  double train_kld = 0.0;
};

struct TrainHistory {
  std::vector<HistoryRow> rows;
  bool aborted = false;
  std::string abort_reason;
  int epochs_done = 0;
};

using EvalHook = std::function<void(int epoch, const Sadae& model)>;

TrainHistory train_sadae(Sadae& model, const std::vector<GroupSeries>& train,
                         const std::vector<GroupSeries>& test, const TrainConfig& cfg,
                         const EvalHook& hook = {});

void write_history_csv(std::ostream& os, const TrainHistory& h);

}  // namespace sim2rec::sadae
