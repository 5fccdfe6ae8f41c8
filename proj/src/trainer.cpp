#include "sim2rec/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "sim2rec/csv.hpp"
#include "sim2rec/errors.hpp"
#include "sim2rec/rng.hpp"

namespace sim2rec::trainer {

namespace {

constexpr std::uint64_t kTagTrain = 0x747261696eULL;
constexpr std::uint64_t kTagDraw = 0x64726177ULL;
constexpr std::uint64_t kTagRoll = 0x726f6c6cULL;
constexpr std::uint64_t kTagUpdate = 0x757064ULL;
constexpr std::uint64_t kTagEval = 0x6576616c706fULL;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

bool uses_latent(const agent::Agent& a) { return a.config().uses_latent(); }

}  // namespace

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 28000;  // one 200-user, 140-step episode
  c.minibatches = 1;
  c.iterations = 150;
  c.lr_start = 3e-4;
  return c;
}

void TrainConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("trainer: gamma must lie in (0, 1]");
  if (!(clip > 0.0)) throw ConfigError("trainer: clip ratio must be positive");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("trainer: GAE lambda must lie in [0, 1]");
  if (epochs_per_batch < 1 || minibatches < 1 || batch_size < 1) {
    throw ConfigError("trainer: epochs, minibatches and batch size must be positive");
  }
  if (iterations < 0) throw ConfigError("trainer: negative iteration count");
  if (!(lr_start > 0.0 && lr_end > 0.0 && sadae_lr > 0.0)) throw ConfigError("trainer: learning rates must be positive");
  if (alpha < 0.0 || elbo_weight < 0.0 || entropy_coef < 0.0 || value_coef < 0.0) {
    throw ConfigError("trainer: coefficients must be non-negative");
  }
  if (!(reward_scale > 0.0) || !(max_grad_norm > 0.0)) throw ConfigError("trainer: scales must be positive");
  if (truncate < 0 || bptt_window < 0 || eval_every < 0 || checkpoint_every < 0 || eval_episodes < 1) {
    throw ConfigError("trainer: negative cadence or truncation");
  }
}

double learning_rate(const TrainConfig& cfg, int iteration) {
  if (cfg.iterations <= 1) return cfg.lr_start;
  const double frac = std::clamp(static_cast<double>(iteration) / (cfg.iterations - 1), 0.0, 1.0);
  return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac;
}

// ---- simulators -------------------------------------------------------------------

LtsSimulatorSet::LtsSimulatorSet(lts::TaskSpec task, std::vector<lts::SimulatorSpec> specs,
                                 bool resample_omega_u)
    : task_(std::move(task)), specs_(std::move(specs)), resample_(resample_omega_u) {
  task_.validate();
  if (specs_.empty()) throw ConfigError("simulator set is empty");
}

SimInstance LtsSimulatorSet::make(std::size_t index, std::uint64_t seed) {
  lts::SimulatorSpec spec = specs_.at(index);
  if (resample_) lts::resample_omega_u(spec, task_.beta, seed);
  SimInstance inst;
  inst.env = std::make_unique<agent::LtsVecEnv>(lts::instantiate(task_, spec));
  inst.index = index;
  inst.horizon = task_.horizon;
  return inst;
}

std::size_t sample_simulator(const SimulatorSet& set, Rng& rng) {
  if (set.size() == 0) throw ConfigError("sample_simulator: empty training set");
  return rng.index(set.size());
}

// ---- buffer ------------------------------------------------------------------------

std::size_t RolloutBuffer::transitions() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.size();
  return n;
}

std::size_t RolloutBuffer::active() const {
  double n = 0;
  for (const auto& e : episodes) n += e.mask.sum();
  return static_cast<std::size_t>(n);
}

Episode make_episode(Rollout roll, std::size_t simulator) {
  Episode ep;
  const auto n = static_cast<Eigen::Index>(roll.size());
  ep.raw_reward = roll.reward;
  ep.reward = roll.reward;
  ep.penalty = Matrix::Zero(n, 1);
  ep.mask = Matrix::Ones(n, 1);
  ep.advantage = Matrix::Zero(n, 1);
  ep.returns = Matrix::Zero(n, 1);
  ep.simulator = simulator;
  ep.roll = std::move(roll);
  return ep;
}

void shape_rewards(Episode& ep, const agent::PenaltyFn& penalty, double alpha) {
  if (alpha < 0.0) throw ConfigError("shape_rewards: alpha must be non-negative");
  const Rollout& r = ep.roll;
  if (penalty) {
    std::vector<double> acts(r.n_users);
    for (int t = 0; t < r.steps; ++t) {
      const Eigen::Index base = r.row(t, 0);
      for (std::size_t i = 0; i < r.n_users; ++i) acts[i] = r.actions(base + static_cast<Eigen::Index>(i), 0);
      const std::span<const lts::Observation> obs(r.raw_obs.data() + base, r.n_users);
      const std::vector<double> u = penalty(obs, acts);
      if (u.size() != r.n_users) throw ConfigError("shape_rewards: penalty returned the wrong size");
      for (std::size_t i = 0; i < r.n_users; ++i) ep.penalty(base + static_cast<Eigen::Index>(i), 0) = u[i];
    }
  }
  ep.reward = ep.raw_reward - alpha * ep.penalty;
}

void apply_filters(Episode& ep, const std::vector<std::uint8_t>& removed,
                   const std::vector<std::pair<double, double>>& bounds, double r_min, double gamma) {
  Rollout& r = ep.roll;
  if (!removed.empty() && removed.size() != r.n_users) throw ConfigError("apply_filters: removal list size");
  if (!bounds.empty() && bounds.size() != r.n_users) throw ConfigError("apply_filters: bounds size");
  const double terminal = r_min / (1.0 - gamma);
  for (std::size_t i = 0; i < r.n_users; ++i) {
    if (!removed.empty() && removed[i]) {
      for (int t = 0; t < r.steps; ++t) ep.mask(r.row(t, i), 0) = 0.0;
      continue;
    }
    if (bounds.empty()) continue;
    const auto [lo, hi] = bounds[i];
    bool ended = false;
    for (int t = 0; t < r.steps; ++t) {
      const Eigen::Index k = r.row(t, i);
      if (ended) {
        ep.mask(k, 0) = 0.0;
        continue;
      }
      if (ep.mask(k, 0) == 0.0) continue;
      const double a = r.actions(k, 0);
      if (a < lo || a > hi) {
        r.done(k, 0) = 1.0;
        ep.reward(k, 0) = terminal;
        ended = true;
      }
    }
  }
}

void compute_advantages(Episode& ep, double gamma, double lambda, double reward_scale) {
  const Rollout& r = ep.roll;
  if (r.steps > 0 && r.bootstrap.rows() != static_cast<Eigen::Index>(r.n_users)) {
    throw ConfigError("compute_advantages: missing terminal bootstrap values");
  }
  for (std::size_t i = 0; i < r.n_users; ++i) {
    double gae = 0.0;
    for (int t = r.steps - 1; t >= 0; --t) {
      const Eigen::Index k = r.row(t, i);
      if (ep.mask(k, 0) == 0.0) {
        ep.advantage(k, 0) = 0.0;
        ep.returns(k, 0) = 0.0;
        gae = 0.0;
        continue;
      }
      const double nonterminal = 1.0 - r.done(k, 0);
      const double next_v = t + 1 < r.steps ? r.value(r.row(t + 1, i), 0) : r.bootstrap(static_cast<Eigen::Index>(i), 0);
      const double delta = reward_scale * ep.reward(k, 0) + gamma * next_v * nonterminal - r.value(k, 0);
      gae = delta + gamma * lambda * nonterminal * gae;
      ep.advantage(k, 0) = gae;
      ep.returns(k, 0) = gae + r.value(k, 0);
    }
  }
}

void compute_advantages(RolloutBuffer& buf, double gamma, double lambda, bool normalize,
                        double reward_scale) {
  for (auto& ep : buf.episodes) compute_advantages(ep, gamma, lambda, reward_scale);
  if (normalize) {
    double n = 0, sum = 0, sq = 0;
    for (const auto& ep : buf.episodes) {
      n += ep.mask.sum();
      sum += ep.advantage.cwiseProduct(ep.mask).sum();
    }
    if (n > 0) {
      const double mean = sum / n;
      for (const auto& ep : buf.episodes) {
        sq += ((ep.advantage.array() - mean).square() * ep.mask.array()).sum();
      }
      const double sd = std::sqrt(sq / n);
      for (auto& ep : buf.episodes) {
        ep.advantage = (((ep.advantage.array() - mean) / (sd + 1e-8)) * ep.mask.array()).matrix();
      }
    }
  }
  buf.advantages_ready = true;
}

// ---- update --------------------------------------------------------------------------

LossTerms minibatch_loss(nn::Graph& g, const agent::Agent& ag, const sadae::Sadae* sd,
                         const Episode& ep, const std::vector<std::size_t>& users,
                         const TrainConfig& cfg, int elbo_step, const Matrix& elbo_noise) {
  const Rollout& r = ep.roll;
  const agent::SequenceOutput o = agent::unroll(g, ag, uses_latent(ag) ? sd : nullptr, r, users, cfg.bptt_window);
  const auto m = static_cast<Eigen::Index>(users.size());
  const Eigen::Index rows = r.steps * m;
  Matrix u(rows, 1), old_lp(rows, 1), adv(rows, 1), ret(rows, 1), mask(rows, 1), jac(rows, 1);
  for (int t = 0; t < r.steps; ++t) {
    for (Eigen::Index j = 0; j < m; ++j) {
      const Eigen::Index k = r.row(t, users[static_cast<std::size_t>(j)]);
      const Eigen::Index q = t * m + j;
      u(q, 0) = r.pre_squash(k, 0);
      old_lp(q, 0) = r.log_prob(k, 0);
      adv(q, 0) = ep.advantage(k, 0);
      ret(q, 0) = ep.returns(k, 0);
      mask(q, 0) = ep.mask(k, 0);
      jac(q, 0) = softplus(u(q, 0)) + softplus(-u(q, 0));
    }
  }
  const double count = std::max(mask.sum(), 1.0);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);

  const nn::Var ls = o.log_std;
  const nn::Var zs = nn::mul(nn::sub(g.constant(u), o.mean), nn::exp(nn::neg(ls)));
  nn::Var lp = nn::sub(nn::scale(nn::square(zs), -0.5), ls);
  lp = nn::add(nn::add_scalar(lp, -half_log_2pi), g.constant(jac));
  const nn::Var ratio = nn::exp(nn::sub(lp, g.constant(old_lp)));
  const nn::Var a = g.constant(adv);
  const nn::Var surr = nn::minimum(nn::mul(ratio, a), nn::mul(nn::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), a));
  const nn::Var mk = g.constant(mask);

  LossTerms L;
  L.policy = nn::scale(nn::sum(nn::mul(surr, mk)), -1.0 / count);
  L.value = nn::scale(nn::sum(nn::mul(nn::square(nn::sub(o.value, g.constant(ret))), mk)), 0.5 / count);
  L.entropy = nn::add_scalar(ls, 0.5 + half_log_2pi);
  L.total = nn::add(L.policy, nn::sub(nn::scale(L.value, cfg.value_coef), nn::scale(L.entropy, cfg.entropy_coef)));

  if (elbo_step >= 0 && sd != nullptr && uses_latent(ag) && cfg.elbo_weight > 0.0) {
    if (elbo_step >= r.steps) throw ConfigError("minibatch_loss: ELBO step out of range");
    sadae::GroupBatch b;
    const auto n = static_cast<Eigen::Index>(r.n_users);
    b.states = r.obs.middleRows(r.row(elbo_step, 0), n);
    b.categories.resize(n, 0);
    b.actions.resize(n, 0);
    b.group = r.group;
    b.t = elbo_step;
    const sadae::ElboTerms e = sd->elbo_loss(g, b, elbo_noise);
    L.elbo = nn::scale(e.loss, 1.0 / static_cast<double>(n));
    L.total = nn::add(L.total, nn::scale(L.elbo, cfg.elbo_weight));
  }

  const Matrix& lpv = lp.value();
  const Matrix& rv = ratio.value();
  double kl = 0.0, clipped = 0.0;
  for (Eigen::Index q = 0; q < rows; ++q) {
    if (mask(q, 0) == 0.0) continue;
    kl += old_lp(q, 0) - lpv(q, 0);
    if (std::abs(rv(q, 0) - 1.0) > cfg.clip) clipped += 1.0;
  }
  L.approx_kl = kl / count;
  L.clip_fraction = clipped / count;
  return L;
}

UpdateMetrics update(RolloutBuffer& buf, agent::Agent& ag, sadae::Sadae* sd, const TrainConfig& cfg,
                     double lr, LearnerState& state, Rng& rng) {
  if (!buf.advantages_ready) throw UsageError("update: advantages have not been computed");
  const bool latent = uses_latent(ag);
  if (latent && sd == nullptr) throw ConfigError("update: SIM2REC agent needs a SADAE");
  const bool learn_sadae = latent && cfg.train_sadae;
  UpdateMetrics met;
  std::vector<std::size_t> order(buf.episodes.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t e : order) {
      const Episode& ep = buf.episodes[e];
      if (ep.size() == 0) continue;
      std::vector<std::size_t> users(ep.roll.n_users);
      std::iota(users.begin(), users.end(), 0);
      std::shuffle(users.begin(), users.end(), rng.engine());
      const std::size_t parts = std::min<std::size_t>(static_cast<std::size_t>(cfg.minibatches), users.size());
      for (std::size_t p = 0; p < parts; ++p) {
        const std::size_t lo = p * users.size() / parts, hi = (p + 1) * users.size() / parts;
        std::vector<std::size_t> mb(users.begin() + static_cast<std::ptrdiff_t>(lo),
                                    users.begin() + static_cast<std::ptrdiff_t>(hi));
        std::sort(mb.begin(), mb.end());
        int elbo_step = -1;
        Matrix noise;
        if (learn_sadae && cfg.elbo_weight > 0.0) {
          elbo_step = static_cast<int>(rng.index(static_cast<std::size_t>(ep.roll.steps)));
          noise.resize(sd->config().elbo_samples, sd->config().latent_dim);
          for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = rng.normal();
        }
        ag.store().zero_grad();
        if (sd) sd->store().zero_grad();
        bool ok = true;
        LossTerms L;
        try {
          nn::Graph g;
          L = minibatch_loss(g, ag, sd, ep, mb, cfg, elbo_step, noise);
          if (!std::isfinite(L.total.scalar())) {
            ok = false;
          } else {
            g.backward(L.total);
            met.policy_loss += L.policy.scalar();
            met.value_loss += L.value.scalar();
            met.entropy += L.entropy.scalar();
            if (L.elbo.valid()) met.elbo += L.elbo.scalar();
            met.approx_kl += L.approx_kl;
            met.clip_fraction += L.clip_fraction;
          }
          if (ok) {
            nn::clip_grad_norm(ag.store(), cfg.max_grad_norm);
            nn::adam_step(ag.store(), lr * state.lr_factor);
            if (learn_sadae) {
              nn::clip_grad_norm(sd->store(), cfg.max_grad_norm);
              nn::adam_step(sd->store(), cfg.sadae_lr * state.lr_factor);
            }
          }
        } catch (const NumericError&) {
          ok = false;
        }
        if (!ok) {
          ++met.skipped;
          if (!state.halved) {
            state.lr_factor *= 0.5;
            state.halved = true;
          }
          continue;
        }
        ++met.steps;
      }
    }
  }
  ag.store().zero_grad();
  if (sd) sd->store().zero_grad();
  if (met.steps > 0) {
    const double k = met.steps;
    met.policy_loss /= k;
    met.value_loss /= k;
    met.entropy /= k;
    met.elbo /= k;
    met.approx_kl /= k;
    met.clip_fraction /= k;
  }
  return met;
}

// ---- training loop ------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const agent::Agent& ag, const sadae::Sadae* sd,
                     int iteration) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["kind"] = "agent";
  meta["variant"] = agent::to_string(ag.config().variant);
  meta["iteration"] = iteration;
  meta["recurrent"] = ag.config().recurrent;
  nn::write_checkpoint(dir / "agent.ckpt", ag.snapshot(meta.dump()));
  if (sd != nullptr) {
    nlohmann::json sm;
    sm["kind"] = "sadae";
    sm["iteration"] = iteration;
    sm["latent_dim"] = sd->config().latent_dim;
    nn::write_checkpoint(dir / "sadae.ckpt", sd->snapshot(sm.dump()));
  }
}

TrainResult train(SimulatorSet& set, const std::optional<EvalTarget>& target, agent::Agent& ag,
                  sadae::Sadae* sd, const TrainConfig& cfg, const std::filesystem::path& run_dir,
                  const IterationHook& hook) {
  cfg.validate();
  if (set.size() == 0) throw ConfigError("train: empty simulator set");
  const bool latent = uses_latent(ag);
  if (latent && sd == nullptr) throw ConfigError("train: SIM2REC agent needs a SADAE");
  sadae::Sadae* model = latent ? sd : nullptr;

  Rng draw_rng(stream_seed(cfg.seed, kTagTrain));
  const bool single = ag.config().variant == agent::Variant::kDirect;
  const std::size_t fixed = single ? sample_simulator(set, draw_rng) : 0;
  LearnerState state;
  TrainResult result;
  result.final_target_return = std::nan("");

  for (int it = 0; it < cfg.iterations; ++it) {
    try {
      const double lr = learning_rate(cfg, it);
      RolloutBuffer buf;
      std::size_t sim = single ? fixed : sample_simulator(set, draw_rng);
      std::size_t collected = 0;
      double disc_return = 0.0;
      std::size_t user_episodes = 0;
      for (std::uint64_t k = 0; collected < static_cast<std::size_t>(cfg.batch_size); ++k) {
        if (k > 0 && cfg.mix_simulators && !single) sim = sample_simulator(set, draw_rng);
        SimInstance inst = set.make(sim, stream_seed(cfg.seed, kTagDraw, static_cast<std::uint64_t>(it), k));
        agent::RolloutOptions opt;
        opt.horizon = cfg.truncate > 0 ? std::min(cfg.truncate, inst.horizon) : inst.horizon;
        opt.seed = stream_seed(cfg.seed, kTagRoll, static_cast<std::uint64_t>(it), k);
        opt.group = static_cast<int>(sim);
        Episode ep = make_episode(agent::rollout_episode(*inst.env, ag, model, opt), sim);
        if (ep.size() == 0) throw StageError("simulator produced an empty rollout");
        shape_rewards(ep, inst.penalty, cfg.alpha);
        if (cfg.filters) apply_filters(ep, inst.removed, inst.bounds, cfg.r_min, cfg.gamma);
        for (std::size_t i = 0; i < ep.roll.n_users; ++i) {
          double g = 1.0;
          for (int t = 0; t < ep.roll.steps; ++t) {
            disc_return += g * ep.raw_reward(ep.roll.row(t, i), 0);
            g *= cfg.gamma;
          }
        }
        user_episodes += ep.roll.n_users;
        collected += ep.size();
        buf.episodes.push_back(std::move(ep));
      }
      compute_advantages(buf, cfg.gamma, cfg.gae_lambda, true, cfg.reward_scale);

      MetricsRow row;
      row.iteration = it;
      row.simulator = sim;
      row.lr = lr;
      row.train_return = disc_return / static_cast<double>(user_episodes);
      double n = 0, shaped = 0, raw = 0, pen = 0, active = 0;
      for (const auto& ep : buf.episodes) {
        n += static_cast<double>(ep.size());
        shaped += ep.reward.cwiseProduct(ep.mask).sum();
        active += ep.mask.sum();
        raw += ep.raw_reward.sum();
        pen += ep.penalty.sum();
      }
      row.shaped_reward = active > 0 ? shaped / active : 0.0;
      row.raw_reward = raw / n;
      row.mean_penalty = pen / n;
      row.masked_fraction = 1.0 - active / n;

      Rng up_rng(stream_seed(cfg.seed, kTagUpdate, static_cast<std::uint64_t>(it)));
      row.update = update(buf, ag, model, cfg, lr, state, up_rng);

      row.target_return = std::nan("");
      const bool last = it + 1 == cfg.iterations;
      if (target && cfg.eval_every > 0 && (it % cfg.eval_every == 0 || last)) {
        agent::AgentPolicy pol(ag, model, true, stream_seed(cfg.seed, kTagEval));
        eval::EvalConfig ec;
        ec.gamma = cfg.gamma;
        ec.episodes = cfg.eval_episodes;
        ec.seeds = target->seeds;
        row.target_return = eval::evaluate_policy(pol, target->task, target->spec, ec).mean;
        result.final_target_return = row.target_return;
      }
      if (!run_dir.empty() && cfg.checkpoint_every > 0 && ((it + 1) % cfg.checkpoint_every == 0 || last)) {
        const auto dir = run_dir / ("ckpt_" + std::to_string(it + 1));
        save_checkpoint(dir, ag, model, it + 1);
        result.checkpoints.push_back(dir);
      }
      result.rows.push_back(row);
      if (hook) hook(row);
    } catch (const ConfigError& e) {
      throw StageError("iteration " + std::to_string(it) + ": " + e.what());
    } catch (const NumericError& e) {
      throw StageError("iteration " + std::to_string(it) + ": " + e.what());
    } catch (const StageError& e) {
      throw StageError("iteration " + std::to_string(it) + ": " + e.what());
    }
  }
  return result;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  CsvWriter w(os, {"iteration", "simulator", "lr", "train_return", "target_return", "shaped_reward",
                   "raw_reward", "mean_penalty", "masked_fraction", "policy_loss", "value_loss",
                   "entropy", "elbo", "approx_kl", "clip_fraction", "skipped"});
  for (const auto& r : rows) {
    w.row(r.iteration, r.simulator, r.lr, r.train_return, r.target_return, r.shaped_reward,
          r.raw_reward, r.mean_penalty, r.masked_fraction, r.update.policy_loss, r.update.value_loss,
          r.update.entropy, r.update.elbo, r.update.approx_kl, r.update.clip_fraction, r.update.skipped);
  }
}

}  // namespace sim2rec::trainer
