#pragma once

// Evaluation tools: density-based divergences, policy scoring on a target
// population, latent-space PCA and the pairwise-divergence probe.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sim2rec/diffnet.hpp"
#include "sim2rec/lts_env.hpp"

namespace sim2rec::eval {

using nn::Matrix;

// ---- densities ------------------------------------------------------------

inline constexpr double kDensityFloor = 1e-300;

// Product-Gaussian-kernel density estimate over the rows of `samples`.
class DensityEstimate {
 public:
  DensityEstimate(Matrix samples, std::vector<double> bandwidth);
  // Per-column Scott's rule: sd_d * n^(-1/(d+4)). Zero-variance columns get
  // a tiny positive bandwidth so the estimate stays proper.
  static std::vector<double> scott_bandwidth(const Matrix& samples);
  static DensityEstimate fit_scott(const Matrix& samples);

  double log_density(const double* x) const;
  double density(const double* x) const;
  const std::vector<double>& bandwidth() const { return bandwidth_; }
  Eigen::Index dims() const { return samples_.cols(); }

 private:
  Matrix samples_;
  std::vector<double> bandwidth_;
  double log_norm_ = 0.0;
};

struct KdeKld {
  double value = 0.0;
  bool floored = false;  // some density hit the floor; excluded from acceptance
  std::size_t n_a = 0;
  std::size_t n_b = 0;
};

// (1/|D_a|) sum_{x in D_a} log(f_a(x) / f_b(x)) with Scott-rule KDEs.
KdeKld kde_kld(const Matrix& d_a, const Matrix& d_b, double floor = kDensityFloor);

// Closed-form KL(N(mu1, s1^2) || N(mu2, s2^2)), summed over dimensions.
double gaussian_kld(double mu1, double s1, double mu2, double s2);
double gaussian_kld(std::span<const double> mu1, std::span<const double> s1,
                    std::span<const double> mu2, std::span<const double> s2);

// ---- policy evaluation ----------------------------------------------------

// Anything that maps a group's observations to one action per user.
class GroupPolicy {
 public:
  virtual ~GroupPolicy() = default;
  virtual void begin_episode(std::size_t n_users) = 0;
  virtual std::vector<double> act(std::span<const lts::Observation> obs, int t) = 0;
};

struct EvalConfig {
  double gamma = 0.99;
  int episodes = 1;
  std::vector<std::uint64_t> seeds{0};
  int horizon = -1;  // < 0: use the group's horizon
};

struct EvalResult {
  std::vector<double> per_seed;  // mean over users and episodes of sum gamma^t r_t
  double mean = 0.0;
  double stderr_ = 0.0;
  double mean_undiscounted = 0.0;
};

EvalResult evaluate_policy(GroupPolicy& policy, const lts::TaskSpec& task,
                           const lts::SimulatorSpec& target, const EvalConfig& cfg);

struct Summary {
  double mean = 0.0;
  double stderr_ = 0.0;  // sample sd / sqrt(n); 0 when n < 2
  double min = 0.0;
  double max = 0.0;
  std::size_t n = 0;
};
Summary summarize(std::span<const double> values);

// ---- PCA ------------------------------------------------------------------

struct PcaReport {
  std::vector<double> eigenvalues;   // descending
  std::vector<double> energy_ratio;  // cumulative, ends at 1
  Matrix components;                 // d x d, column k is the k-th axis
  Matrix projection;                 // n x 2
  std::vector<double> labels;
  double spearman_first = 0.0;  // rank correlation of PC1 with labels
  bool zero_variance = false;
};

PcaReport pca_report(const Matrix& latents, std::span<const double> labels);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);
std::vector<double> average_ranks(std::span<const double> v);

// ---- embedding probe --------------------------------------------------------

struct ProbeConfig {
  int hidden = 32;
  int epochs = 300;
  double lr = 1e-2;
  double holdout_fraction = 0.25;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double train_mae = 0.0;
  double test_mae = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

// Regresses target divergences from concatenated embedding pairs with a
// fresh one-hidden-layer tanh network; reports held-out mean absolute error.
ProbeResult embedding_probe(const Matrix& emb_i, const Matrix& emb_j,
                            std::span<const double> targets, const ProbeConfig& cfg);

}  // namespace sim2rec::eval
