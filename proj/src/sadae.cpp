#include "sim2rec/sadae.hpp"

#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "sim2rec/csv.hpp"
#include "sim2rec/errors.hpp"
#include "sim2rec/evalkit.hpp"
#include "sim2rec/rng.hpp"

namespace sim2rec::sadae {

namespace {

std::vector<int> with_ends(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> sizes{in};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(out);
  return sizes;
}

// Row-wise log-softmax; the row max is subtracted as a constant.
Var log_softmax(Graph& g, const Var& logits) {
  const Matrix& v = logits.value();
  Matrix shift = v.rowwise().maxCoeff();
  Var shifted = nn::sub(logits, g.constant(shift));
  Var lse = nn::log(nn::sum_cols(nn::exp(shifted)));
  return nn::sub(shifted, lse);
}

}  // namespace

void GroupBatch::validate() const {
  if (states.rows() < 1) throw ConfigError("GroupBatch must hold at least one sample");
  if (categories.cols() > 0 && categories.rows() != states.rows()) {
    throw ConfigError("GroupBatch categories row count differs from states");
  }
  if (!state_only && actions.rows() != states.rows()) {
    throw ConfigError("GroupBatch actions row count differs from states");
  }
  if (state_only && actions.cols() > 0) {
    throw ConfigError("state-only GroupBatch carries actions");
  }
}

int SadaeConfig::one_hot_width() const {
  return std::accumulate(category_sizes.begin(), category_sizes.end(), 0);
}

GaussianParams product_of_gaussians(const Matrix& means, const Matrix& stds, bool with_prior) {
  if (means.rows() != stds.rows() || means.cols() != stds.cols()) {
    throw ConfigError("product_of_gaussians: shape mismatch");
  }
  const Eigen::Index d = means.cols();
  GaussianParams out;
  out.mean.assign(static_cast<std::size_t>(d), 0.0);
  out.stddev.assign(static_cast<std::size_t>(d), 0.0);
  for (Eigen::Index c = 0; c < d; ++c) {
    double prec = with_prior ? 1.0 : 0.0;
    double weighted = 0.0;
    for (Eigen::Index r = 0; r < means.rows(); ++r) {
      const double p = 1.0 / (stds(r, c) * stds(r, c));
      prec += p;
      weighted += p * means(r, c);
    }
    if (!(prec > 0.0)) throw ConfigError("product_of_gaussians: no factors");
    out.mean[c] = weighted / prec;
    out.stddev[c] = 1.0 / std::sqrt(prec);
  }
  return out;
}

Var kl_to_standard_normal(const Var& mean, const Var& log_std) {
  // 0.5 sum(s^2 + m^2 - 1 - 2 log s)
  Var two_ls = nn::scale(log_std, 2.0);
  return nn::scale(
      nn::sum(nn::sub(nn::add(nn::exp(two_ls), nn::square(mean)), nn::add_scalar(two_ls, 1.0))),
      0.5);
}

namespace {

std::vector<Eigen::Index> lexicographic_order(const Matrix& x, Eigen::Index begin,
                                              Eigen::Index count) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(count));
  std::iota(idx.begin(), idx.end(), begin);
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (x(a, c) < x(b, c)) return true;
      if (x(b, c) < x(a, c)) return false;
    }
    return false;
  });
  return idx;
}

}  // namespace

Matrix canonical_rows(const Matrix& x, Eigen::Index group_size) {
  if (group_size < 1 || x.rows() % group_size != 0) {
    throw ConfigError("canonical_rows: rows must be a multiple of the group size");
  }
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index s = 0; s < x.rows(); s += group_size) {
    const auto order = lexicographic_order(x, s, group_size);
    for (Eigen::Index k = 0; k < group_size; ++k) out.row(s + k) = x.row(order[k]);
  }
  return out;
}

GroupBatch canonical(const GroupBatch& batch) {
  const Eigen::Index n = batch.states.rows();
  const Eigen::Index sc = batch.states.cols();
  const Eigen::Index cc = batch.categories.cols();
  const Eigen::Index ac = batch.actions.cols();
  Matrix keys(n, sc + cc + ac);
  keys.leftCols(sc) = batch.states;
  if (cc > 0) keys.middleCols(sc, cc) = batch.categories;
  if (ac > 0) keys.rightCols(ac) = batch.actions;
  const auto order = lexicographic_order(keys, 0, n);
  GroupBatch out = batch;
  for (Eigen::Index k = 0; k < n; ++k) {
    out.states.row(k) = batch.states.row(order[k]);
    if (batch.categories.cols() > 0) out.categories.row(k) = batch.categories.row(order[k]);
    if (batch.actions.cols() > 0) out.actions.row(k) = batch.actions.row(order[k]);
  }
  return out;
}

Sadae::Sadae(const SadaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.state_dim < 1 && cfg_.category_sizes.empty()) {
    throw ConfigError("SADAE needs at least one state feature");
  }
  if (cfg_.latent_dim < 1) throw ConfigError("SADAE latent dimension must be positive");
  for (int k : cfg_.category_sizes) {
    if (k < 2) throw ConfigError("categorical features need at least 2 classes");
  }
  Rng rng(stream_seed(seed, 0x7361646165ULL));
  encoder_ = nn::Mlp(store_, "sadae/enc",
                     with_ends(cfg_.encoder_input(), cfg_.encoder_hidden, 2 * cfg_.latent_dim),
                     cfg_.activation, rng);
  state_decoder_ =
      nn::Mlp(store_, "sadae/dec_s",
              with_ends(cfg_.latent_dim, cfg_.decoder_hidden,
                        2 * cfg_.state_dim + cfg_.one_hot_width()),
              cfg_.activation, rng);
  if (cfg_.action_dim > 0) {
    action_decoder_ =
        nn::Mlp(store_, "sadae/dec_a",
                with_ends(cfg_.latent_dim + cfg_.state_dim + cfg_.one_hot_width(),
                          cfg_.decoder_hidden, 2 * cfg_.action_dim),
                cfg_.activation, rng);
  }
}

Matrix Sadae::encoder_input(const GroupBatch& batch) const {
  batch.validate();
  if (batch.states.cols() != cfg_.state_dim) {
    throw ConfigError("GroupBatch state width " + std::to_string(batch.states.cols()) +
                      " does not match SADAE state_dim " + std::to_string(cfg_.state_dim));
  }
  if (batch.categories.cols() != static_cast<Eigen::Index>(cfg_.category_sizes.size())) {
    throw ConfigError("GroupBatch discrete feature count does not match SADAE config");
  }
  if (batch.state_only != (cfg_.action_dim == 0)) {
    throw ConfigError("GroupBatch mode (state-only or state-action) does not match SADAE config");
  }
  if (!batch.state_only && batch.actions.cols() != cfg_.action_dim) {
    throw ConfigError("GroupBatch action width does not match SADAE config");
  }
  const Eigen::Index n = batch.size();
  Matrix x = Matrix::Zero(n, cfg_.encoder_input());
  x.leftCols(cfg_.state_dim) = batch.states;
  Eigen::Index col = cfg_.state_dim;
  for (std::size_t f = 0; f < cfg_.category_sizes.size(); ++f) {
    const int k = cfg_.category_sizes[f];
    for (Eigen::Index r = 0; r < n; ++r) {
      const double code = batch.categories(r, static_cast<Eigen::Index>(f));
      const int c = static_cast<int>(code);
      if (c < 0 || c >= k || c != code) {
        throw ConfigError("category code out of range at sample " + std::to_string(r));
      }
      x(r, col + c) = 1.0;
    }
    col += k;
  }
  if (cfg_.action_dim > 0) x.rightCols(cfg_.action_dim) = batch.actions;
  return x;
}

void Sadae::factors(Graph& g, const Var& input, Var* mean, Var* log_std) const {
  Var out = encoder_.forward(g, store_, input);
  const Matrix& v = out.value();
  if (!v.allFinite()) {
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      if (!v.row(r).allFinite()) {
        throw NumericError("SADAE encoder produced non-finite factor parameters at sample " +
                           std::to_string(r));
      }
    }
  }
  *mean = nn::slice_cols(out, 0, cfg_.latent_dim);
  *log_std = nn::clamp(nn::slice_cols(out, cfg_.latent_dim, cfg_.latent_dim), cfg_.log_std_min,
                       cfg_.log_std_max);
}

Posterior Sadae::encode_segments(Graph& g, const Var& input, Eigen::Index group_size) const {
  if (group_size < 1 || input.rows() % group_size != 0) {
    throw ConfigError("encode_segments: rows must be a multiple of the group size");
  }
  Var m, ls;
  factors(g, input, &m, &ls);
  Var prec = nn::exp(nn::scale(ls, -2.0));
  // Unit prior factor contributes precision 1 and mean 0.
  Var total_prec = nn::add_scalar(nn::segment_sum_rows(prec, group_size), 1.0);
  Var weighted = nn::segment_sum_rows(nn::mul(prec, m), group_size);
  Posterior p;
  p.mean = nn::div(weighted, total_prec);
  p.log_std = nn::scale(nn::log(total_prec), -0.5);
  return p;
}

Posterior Sadae::encode(Graph& g, const GroupBatch& batch) const {
  const Matrix x = encoder_input(canonical(batch));
  return encode_segments(g, g.constant(x), x.rows());
}

Var Sadae::sample(Graph& g, const Posterior& post, const Matrix& noise) const {
  return nn::reparam_sample(post.mean, post.log_std, g.constant(noise));
}

Decoded Sadae::decode(Graph& g, const Var& upsilon, const Var* state) const {
  if (upsilon.cols() != cfg_.latent_dim) {
    throw ConfigError("decode: latent width " + std::to_string(upsilon.cols()) +
                      " does not match " + std::to_string(cfg_.latent_dim));
  }
  Decoded d;
  Var out = state_decoder_.forward(g, store_, upsilon);
  d.state_mean = nn::slice_cols(out, 0, cfg_.state_dim);
  d.state_log_std = nn::clamp(nn::slice_cols(out, cfg_.state_dim, cfg_.state_dim),
                              cfg_.log_std_min, cfg_.log_std_max);
  Eigen::Index col = 2 * cfg_.state_dim;
  for (int k : cfg_.category_sizes) {
    d.category_logits.push_back(nn::slice_cols(out, col, k));
    col += k;
  }
  if (state != nullptr) {
    if (cfg_.action_dim == 0) {
      throw UsageError("decode: state-only model cannot produce an action distribution");
    }
    if (state->rows() != upsilon.rows()) {
      throw ConfigError("decode: latent and state row counts differ");
    }
    Var a = action_decoder_.forward(g, store_, nn::concat_cols({upsilon, *state}));
    d.action_mean = nn::slice_cols(a, 0, cfg_.action_dim);
    d.action_log_std = nn::clamp(nn::slice_cols(a, cfg_.action_dim, cfg_.action_dim),
                                 cfg_.log_std_min, cfg_.log_std_max);
  }
  return d;
}

ElboTerms Sadae::elbo_loss(Graph& g, const GroupBatch& raw, const Matrix& noise) const {
  const GroupBatch batch = canonical(raw);
  const Matrix x = encoder_input(batch);
  const Eigen::Index n = x.rows();
  if (noise.rows() < 1 || noise.cols() != cfg_.latent_dim) {
    throw ConfigError("elbo_loss: noise must be K x latent_dim with K >= 1");
  }
  Var input = g.constant(x);
  Posterior post = encode_segments(g, input, n);
  Var state_feats = g.constant(x.leftCols(cfg_.state_dim + cfg_.one_hot_width()));
  Var states = g.constant(batch.states);

  // Per-feature class counts turn the categorical log-likelihood into a dot
  // product with the log-probabilities.
  std::vector<Matrix> counts;
  for (std::size_t f = 0; f < cfg_.category_sizes.size(); ++f) {
    Matrix c = Matrix::Zero(1, cfg_.category_sizes[f]);
    for (Eigen::Index r = 0; r < n; ++r) {
      c(0, static_cast<Eigen::Index>(batch.categories(r, static_cast<Eigen::Index>(f)))) += 1.0;
    }
    counts.push_back(std::move(c));
  }

  const Eigen::Index k_samples = noise.rows();
  Var recon;
  for (Eigen::Index k = 0; k < k_samples; ++k) {
    Var ups = sample(g, Posterior{post.mean, post.log_std}, noise.row(k));
    Decoded dec = decode(g, ups);
    Var ll = nn::sum(nn::gaussian_log_prob(nn::repeat_rows(dec.state_mean, n),
                                           nn::repeat_rows(dec.state_log_std, n), states));
    for (std::size_t f = 0; f < counts.size(); ++f) {
      ll = nn::add(ll, nn::sum(nn::mul(g.constant(counts[f]),
                                       log_softmax(g, dec.category_logits[f]))));
    }
    if (!batch.state_only) {
      Var ups_rows = nn::repeat_rows(ups, n);
      Var sf = state_feats;
      Decoded da = decode(g, ups_rows, &sf);
      ll = nn::add(ll, nn::sum(nn::gaussian_log_prob(da.action_mean, da.action_log_std,
                                                     g.constant(batch.actions))));
    }
    recon = recon.valid() ? nn::add(recon, ll) : ll;
  }
  recon = nn::scale(recon, 1.0 / static_cast<double>(k_samples));

  Var kl = kl_to_standard_normal(post.mean, post.log_std);
  ElboTerms t;
  t.reconstruction = recon.scalar();
  t.kl = kl.scalar();
  Var loss = nn::sub(kl, recon);
  if (cfg_.l2_weight > 0.0) {
    Var l2 = nn::l2_penalty(g, store_, weight_indices(), cfg_.l2_weight);
    t.l2 = l2.scalar();
    loss = nn::add(loss, l2);
  }
  t.loss = loss;
  if (!std::isfinite(loss.scalar())) {
    std::ostringstream os;
    os << "SADAE loss is not finite (group " << batch.group << ", t " << batch.t
       << ", reconstruction " << t.reconstruction << ", kl " << t.kl << ")";
    throw NumericError(os.str());
  }
  return t;
}

GaussianParams Sadae::posterior(const GroupBatch& batch) const {
  Graph g;
  Posterior p = encode(g, batch);
  GaussianParams out;
  for (Eigen::Index c = 0; c < p.mean.cols(); ++c) {
    out.mean.push_back(p.mean.value()(0, c));
    out.stddev.push_back(std::exp(p.log_std.value()(0, c)));
  }
  return out;
}

std::vector<double> Sadae::embed_stream(const GroupBatch& batch, const Matrix& noise) const {
  if (noise.rows() != 1 || noise.cols() != cfg_.latent_dim) {
    throw ConfigError("embed_stream: noise must be 1 x latent_dim");
  }
  const GaussianParams p = posterior(batch);
  std::vector<double> out(p.mean.size());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = p.mean[c] + p.stddev[c] * noise(0, c);
  return out;
}

std::vector<std::size_t> Sadae::weight_indices() const {
  std::vector<std::size_t> idx = encoder_.weight_indices();
  for (auto i : state_decoder_.weight_indices()) idx.push_back(i);
  if (cfg_.action_dim > 0) {
    for (auto i : action_decoder_.weight_indices()) idx.push_back(i);
  }
  return idx;
}

nn::Checkpoint Sadae::snapshot(const std::string& metadata) const {
  return nn::snapshot(store_, metadata, true);
}

// ---- LTS data -----------------------------------------------------------------

GroupBatch batch_from_observations(const std::vector<lts::Observation>& obs, int group, int t) {
  GroupBatch b;
  b.states.resize(static_cast<Eigen::Index>(obs.size()), 2);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    lts::normalize_obs(obs[i], b.states.row(static_cast<Eigen::Index>(i)).data());
  }
  b.categories.resize(b.states.rows(), 0);
  b.actions.resize(b.states.rows(), 0);
  b.state_only = true;
  b.group = group;
  b.t = t;
  return b;
}

GroupSeries collect_series(const lts::TaskSpec& task, const lts::SimulatorSpec& spec,
                           const lts::BehaviorPolicy& behavior, std::uint64_t seed) {
  lts::UserGroup group = lts::instantiate(task, spec);
  const auto rows = lts::run_behavior_episode(group, behavior, seed);
  GroupSeries s;
  s.group = spec.id;
  s.omega_g = spec.omega_g;
  s.mu_c = task.mu_c_ref + spec.omega_g;
  const std::size_t n = group.size();
  for (int t = 0; t < group.horizon(); ++t) {
    std::vector<lts::Observation> obs(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = rows[static_cast<std::size_t>(t) * n + i];
      obs[i] = {r.sat, r.o};
    }
    s.steps.push_back(batch_from_observations(obs, spec.id, t));
  }
  return s;
}

double reconstruction_kld(const Sadae& model, const GroupSeries& series, double obs_variance,
                          const std::vector<int>& eval_steps) {
  if (series.steps.empty()) throw ConfigError("reconstruction_kld: empty series");
  double acc = 0.0;
  int used = 0;
  for (int t : eval_steps) {
    if (t < 0 || t >= static_cast<int>(series.steps.size())) continue;
    Graph g;
    Posterior p = model.encode(g, series.steps[static_cast<std::size_t>(t)]);
    Decoded d = model.decode(g, p.mean);
    const double m = lts::kObsCenter + lts::kObsScale * d.state_mean.value()(0, 1);
    const double s = lts::kObsScale * std::exp(d.state_log_std.value()(0, 1));
    acc += eval::gaussian_kld(m, s, series.mu_c, std::sqrt(obs_variance));
    ++used;
  }
  if (used == 0) throw ConfigError("reconstruction_kld: no valid evaluation steps");
  return acc / used;
}

// ---- training -------------------------------------------------------------------

TrainHistory train_sadae(Sadae& model, const std::vector<GroupSeries>& train,
                         const std::vector<GroupSeries>& test, const TrainConfig& cfg,
                         const EvalHook& hook) {
  if (train.empty()) throw ConfigError("train_sadae needs at least one training group");
  for (const auto& s : train) {
    if (s.steps.empty()) throw ConfigError("train_sadae: empty training series");
  }
  if (cfg.eval_every < 1) throw ConfigError("eval_every must be positive");
  TrainHistory h;
  double window_elbo = 0.0;
  int window_n = 0;

  auto evaluate = [&](int epoch) {
    HistoryRow row;
    row.epoch = epoch;
    row.train_elbo = window_n > 0 ? window_elbo / window_n : std::nan("");
    double tk = 0.0;
    for (const auto& s : test) tk += reconstruction_kld(model, s, cfg.obs_variance, cfg.eval_steps);
    row.test_kld = test.empty() ? std::nan("") : tk / static_cast<double>(test.size());
    double trk = 0.0;
    for (const auto& s : train) {
      trk += reconstruction_kld(model, s, cfg.obs_variance, cfg.eval_steps);
    }
    row.train_kld = trk / static_cast<double>(train.size());
    h.rows.push_back(row);
    window_elbo = 0.0;
    window_n = 0;
    if (hook) hook(epoch, model);
  };

  const int latent = model.config().latent_dim;
  const int samples = std::max(1, model.config().elbo_samples);
  const int end = cfg.start_epoch + cfg.epochs;
  int epoch = cfg.start_epoch;
  try {
    if (cfg.start_epoch % cfg.eval_every == 0) evaluate(cfg.start_epoch);
    for (; epoch < end; ++epoch) {
      Rng rng(stream_seed(cfg.seed, 0x65706f6368ULL, static_cast<std::uint64_t>(epoch)));
      const GroupSeries& s = train[rng.index(train.size())];
      const GroupBatch& batch = s.steps[rng.index(s.steps.size())];
      Matrix noise(samples, latent);
      for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = rng.normal();
      Graph g;
      ElboTerms terms = model.elbo_loss(g, batch, noise);
      g.backward(terms.loss);
      nn::adam_step(model.store(), cfg.lr);
      window_elbo += (terms.reconstruction - terms.kl) / static_cast<double>(batch.size());
      ++window_n;
      if ((epoch + 1) % cfg.eval_every == 0) evaluate(epoch + 1);
    }
  } catch (const NumericError& e) {
    h.aborted = true;
    h.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
    h.epochs_done = epoch - cfg.start_epoch;
    return h;
  }
  h.epochs_done = cfg.epochs;
  return h;
}

void write_history_csv(std::ostream& os, const TrainHistory& h) {
  CsvWriter w(os, {"epoch", "train_elbo", "test_kld", "train_kld"});
  for (const auto& r : h.rows) w.row(r.epoch, r.train_elbo, r.test_kld, r.train_kld);
}

}  // namespace sim2rec::sadae
