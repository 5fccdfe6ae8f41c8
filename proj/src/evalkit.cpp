#include "sim2rec/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sim2rec/errors.hpp"
#include "sim2rec/rng.hpp"

namespace sim2rec::eval {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

DensityEstimate::DensityEstimate(Matrix samples, std::vector<double> bandwidth)
    : samples_(std::move(samples)), bandwidth_(std::move(bandwidth)) {
  if (samples_.rows() < 1) throw ConfigError("density estimate needs at least one sample");
  if (static_cast<Eigen::Index>(bandwidth_.size()) != samples_.cols()) {
    throw ConfigError("bandwidth size does not match sample dimension");
  }
  log_norm_ = -std::log(static_cast<double>(samples_.rows()));
  for (double h : bandwidth_) {
    if (!(h > 0.0)) throw ConfigError("KDE bandwidths must be positive");
    log_norm_ -= 0.5 * kLog2Pi + std::log(h);
  }
}

std::vector<double> DensityEstimate::scott_bandwidth(const Matrix& samples) {
  const double n = static_cast<double>(samples.rows());
  const double d = static_cast<double>(samples.cols());
  const double factor = std::pow(n, -1.0 / (d + 4.0));
  std::vector<double> h(static_cast<std::size_t>(samples.cols()));
  for (Eigen::Index c = 0; c < samples.cols(); ++c) {
    const double mean = samples.col(c).mean();
    double var = 0.0;
    for (Eigen::Index r = 0; r < samples.rows(); ++r) {
      const double dv = samples(r, c) - mean;
      var += dv * dv;
    }
    var = samples.rows() > 1 ? var / (n - 1.0) : 0.0;
    const double sd = std::sqrt(var);
    h[c] = sd > 0.0 ? sd * factor : 1e-6;
  }
  return h;
}

DensityEstimate DensityEstimate::fit_scott(const Matrix& samples) {
  return DensityEstimate(samples, scott_bandwidth(samples));
}

double DensityEstimate::log_density(const double* x) const {
  const Eigen::Index n = samples_.rows();
  const Eigen::Index d = samples_.cols();
  std::vector<double> terms(static_cast<std::size_t>(n));
  double top = -std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < n; ++r) {
    double q = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
      const double z = (x[c] - samples_(r, c)) / bandwidth_[c];
      q += z * z;
    }
    terms[r] = -0.5 * q;
    top = std::max(top, terms[r]);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - top);
  return log_norm_ + top + std::log(acc);
}

double DensityEstimate::density(const double* x) const { return std::exp(log_density(x)); }

KdeKld kde_kld(const Matrix& d_a, const Matrix& d_b, double floor) {
  if (d_a.rows() < 1 || d_b.rows() < 1) throw ConfigError("kde_kld needs non-empty datasets");
  if (d_a.cols() != d_b.cols()) throw ConfigError("kde_kld datasets differ in dimension");
  const DensityEstimate fa = DensityEstimate::fit_scott(d_a);
  const DensityEstimate fb = DensityEstimate::fit_scott(d_b);
  const double log_floor = std::log(floor);
  KdeKld out;
  out.n_a = static_cast<std::size_t>(d_a.rows());
  out.n_b = static_cast<std::size_t>(d_b.rows());
  double acc = 0.0;
  for (Eigen::Index r = 0; r < d_a.rows(); ++r) {
    const double* x = d_a.row(r).data();
    double la = fa.log_density(x);
    double lb = fb.log_density(x);
    if (!(la >= log_floor)) {
      la = log_floor;
      out.floored = true;
    }
    if (!(lb >= log_floor)) {
      lb = log_floor;
      out.floored = true;
    }
    acc += la - lb;
  }
  out.value = acc / static_cast<double>(d_a.rows());
  return out;
}

double gaussian_kld(double mu1, double s1, double mu2, double s2) {
  if (!(s1 > 0.0) || !(s2 > 0.0)) throw ConfigError("gaussian_kld needs positive stddevs");
  return std::log(s2 / s1) + (s1 * s1 + (mu1 - mu2) * (mu1 - mu2)) / (2.0 * s2 * s2) - 0.5;
}

double gaussian_kld(std::span<const double> mu1, std::span<const double> s1,
                    std::span<const double> mu2, std::span<const double> s2) {
  if (mu1.size() != s1.size() || mu1.size() != mu2.size() || mu1.size() != s2.size()) {
    throw ConfigError("gaussian_kld dimension mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < mu1.size(); ++i) acc += gaussian_kld(mu1[i], s1[i], mu2[i], s2[i]);
  return acc;
}

Summary summarize(std::span<const double> v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stderr_ = std::sqrt(ss / static_cast<double>(v.size() - 1)) /
                std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

EvalResult evaluate_policy(GroupPolicy& policy, const lts::TaskSpec& task,
                           const lts::SimulatorSpec& target, const EvalConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("evaluate_policy needs at least one seed");
  if (cfg.episodes < 1) throw ConfigError("evaluate_policy needs at least one episode");
  lts::UserGroup group = lts::instantiate(task, target);
  const int horizon = cfg.horizon >= 0 ? cfg.horizon : group.horizon();
  const std::size_t n = group.size();
  EvalResult res;
  double undiscounted = 0.0;
  for (std::uint64_t seed : cfg.seeds) {
    double total = 0.0;
    for (int ep = 0; ep < cfg.episodes; ++ep) {
      std::vector<lts::Observation> obs =
          group.reset(stream_seed(seed, 0x6576616cULL, static_cast<std::uint64_t>(ep)));
      policy.begin_episode(n);
      double disc = 1.0;
      for (int t = 0; t < horizon; ++t) {
        const std::vector<double> actions = policy.act(obs, t);
        const auto trs = group.step(actions);
        for (std::size_t i = 0; i < n; ++i) {
          total += disc * trs[i].reward;
          undiscounted += trs[i].reward;
          obs[i] = trs[i].next_obs;
        }
        disc *= cfg.gamma;
      }
    }
    res.per_seed.push_back(total / static_cast<double>(n * cfg.episodes));
  }
  const Summary s = summarize(res.per_seed);
  res.mean = s.mean;
  res.stderr_ = s.stderr_;
  res.mean_undiscounted =
      undiscounted / static_cast<double>(n * cfg.episodes * cfg.seeds.size());
  return res;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman needs paired samples");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

PcaReport pca_report(const Matrix& latents, std::span<const double> labels) {
  if (latents.rows() < 2) throw ConfigError("pca_report needs at least 2 simulators");
  if (latents.cols() < 2) throw ConfigError("pca_report needs at least 2 latent dimensions");
  if (static_cast<Eigen::Index>(labels.size()) != latents.rows()) {
    throw ConfigError("pca_report: one label per latent row required");
  }
  const Eigen::Index n = latents.rows();
  const Eigen::Index d = latents.cols();
  Matrix centered = latents.rowwise() - latents.colwise().mean();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  PcaReport rep;
  rep.labels.assign(labels.begin(), labels.end());
  rep.components.resize(d, d);
  // Eigen returns ascending order.
  for (Eigen::Index k = 0; k < d; ++k) {
    const Eigen::Index src = d - 1 - k;
    rep.eigenvalues.push_back(std::max(0.0, solver.eigenvalues()(src)));
    rep.components.col(k) = solver.eigenvectors().col(src);
  }
  const double total = std::accumulate(rep.eigenvalues.begin(), rep.eigenvalues.end(), 0.0);
  rep.zero_variance = !(total > 0.0);
  double run = 0.0;
  for (double e : rep.eigenvalues) {
    run += e;
    rep.energy_ratio.push_back(rep.zero_variance ? 0.0 : run / total);
  }
  if (!rep.zero_variance) rep.energy_ratio.back() = 1.0;
  rep.projection = centered * rep.components.leftCols(2);
  if (!rep.zero_variance) {
    std::vector<double> pc1(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) pc1[i] = rep.projection(i, 0);
    rep.spearman_first = spearman(pc1, labels);
  }
  return rep;
}

ProbeResult embedding_probe(const Matrix& emb_i, const Matrix& emb_j,
                            std::span<const double> targets, const ProbeConfig& cfg) {
  const Eigen::Index n = emb_i.rows();
  if (n < 10) throw ConfigError("embedding probe needs at least 10 pairs");
  if (emb_j.rows() != n || static_cast<Eigen::Index>(targets.size()) != n ||
      emb_i.cols() != emb_j.cols()) {
    throw ConfigError("embedding probe inputs have inconsistent shapes");
  }
  Rng rng(stream_seed(cfg.seed, 0x70726f6265ULL));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  Eigen::Index n_test = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(std::lround(cfg.holdout_fraction * static_cast<double>(n))));
  n_test = std::min(n_test, n - 1);
  const Eigen::Index n_train = n - n_test;

  const Eigen::Index d = emb_i.cols() * 2;
  Matrix x(n, d), y(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::Index src = order[r];
    x.row(r) << emb_i.row(src), emb_j.row(src);
    y(r, 0) = targets[src];
  }
  // Standardize with training statistics.
  Matrix xtr = x.topRows(n_train);
  Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().sum() /
                           static_cast<double>(n_train))
                              .sqrt();
  for (Eigen::Index c = 0; c < d; ++c) sd(c) = sd(c) > 1e-12 ? sd(c) : 1.0;
  Matrix xs = (x.rowwise() - mu).array().rowwise() / sd.array();
  const double ymu = y.topRows(n_train).mean();
  double ysd = std::sqrt((y.topRows(n_train).array() - ymu).square().mean());
  if (!(ysd > 1e-12)) ysd = 1.0;
  Matrix ys = (y.array() - ymu) / ysd;

  nn::ParamStore store;
  nn::Mlp net(store, "probe", {static_cast<int>(d), cfg.hidden, 1}, nn::Activation::kTanh, rng);
  const Matrix xs_train = xs.topRows(n_train);
  const Matrix ys_train = ys.topRows(n_train);
  for (int e = 0; e < cfg.epochs; ++e) {
    nn::Graph g;
    nn::Var pred = net.forward(g, store, g.constant(xs_train));
    nn::Var loss = nn::mean(nn::square(nn::sub(pred, g.constant(ys_train))));
    g.backward(loss);
    nn::adam_step(store, cfg.lr);
  }
  const Matrix pred = net.evaluate(store, xs);
  ProbeResult res;
  res.n_train = static_cast<std::size_t>(n_train);
  res.n_test = static_cast<std::size_t>(n_test);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double err = std::abs(pred(r, 0) * ysd + ymu - y(r, 0));
    (r < n_train ? res.train_mae : res.test_mae) += err;
  }
  res.train_mae /= static_cast<double>(n_train);
  res.test_mae /= static_cast<double>(n_test);
  return res;
}

}  // namespace sim2rec::eval
