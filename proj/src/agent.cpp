#include "sim2rec/agent.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "sim2rec/errors.hpp"
#include "sim2rec/rng.hpp"

namespace sim2rec::agent {

namespace {

constexpr std::uint64_t kTagReset = 0x7265736574ULL;
constexpr std::uint64_t kTagAction = 0x616374ULL;
constexpr std::uint64_t kTagLatent = 0x6c6174656e74ULL;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void check_sizes(const std::vector<int>& sizes, const char* what) {
  for (int s : sizes) {
    if (s <= 0) throw ConfigError(std::string("agent: non-positive layer size in ") + what);
  }
}

Matrix standard_normals(std::uint64_t seed, Eigen::Index cols) {
  SplitMix64 gen(seed);
  Matrix m(1, cols);
  for (Eigen::Index c = 0; c < cols; ++c) m(0, c) = standard_normal(gen);
  return m;
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kSim2Rec: return "SIM2REC";
    case Variant::kDrOsi: return "DR_OSI";
    case Variant::kDrUni: return "DR_UNI";
    case Variant::kDirect: return "DIRECT";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  std::string key;
  for (char ch : name) key.push_back(ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  if (key == "SIM2REC") return Variant::kSim2Rec;
  if (key == "DR_OSI") return Variant::kDrOsi;
  if (key == "DR_UNI") return Variant::kDrUni;
  if (key == "DIRECT") return Variant::kDirect;
  throw ConfigError("unknown agent variant '" + std::string(name) + "'");
}

AgentConfig AgentConfig::full(Variant v) {
  AgentConfig c;
  c.variant = v;
  return c;
}

AgentConfig AgentConfig::desk(Variant v) {
  AgentConfig c;
  c.variant = v;
  c.latent_layers = {64, 64};
  c.recurrent = 32;
  c.policy_hidden = {64, 32};
  c.value_hidden = {64, 32};
  return c;
}

void AgentConfig::validate() const {
  if (obs_dim <= 0 || latent_dim <= 0 || recurrent <= 0) {
    throw ConfigError("agent: dimensions must be positive");
  }
  check_sizes(latent_layers, "latent_layers");
  check_sizes(policy_hidden, "policy_hidden");
  check_sizes(value_hidden, "value_hidden");
  if (!(log_std_min < log_std_max)) throw ConfigError("agent: log_std_min must be below log_std_max");
  if (!(init_log_std >= log_std_min && init_log_std <= log_std_max)) {
    throw ConfigError("agent: init_log_std outside the clamp range");
  }
}

double logit(double a) { return std::log(a) - std::log1p(-a); }

double squashed_log_prob(double u, double mean, double log_std) {
  const double z = (u - mean) * std::exp(-log_std);
  const double gauss = -0.5 * z * z - log_std - 0.5 * std::log(2.0 * std::numbers::pi);
  // -log(sigmoid(u)) - log(1 - sigmoid(u)) = softplus(-u) + softplus(u)
  return gauss + softplus(u) + softplus(-u);
}

// ---- Agent ------------------------------------------------------------------

Agent::Agent(const AgentConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  if (cfg_.uses_latent() && !cfg_.latent_layers.empty()) {
    std::vector<int> sizes{cfg_.latent_dim};
    sizes.insert(sizes.end(), cfg_.latent_layers.begin(), cfg_.latent_layers.end());
    features_ = nn::Mlp(store_, "agent/f", sizes, cfg_.activation, rng);
  }
  if (cfg_.recurrent_extractor()) {
    cell_ = nn::LstmCell(store_, "agent/lstm", cfg_.extractor_input(), cfg_.recurrent, rng);
  }
  const int head_in = cfg_.obs_dim + cfg_.recurrent;
  std::vector<int> pi{head_in};
  pi.insert(pi.end(), cfg_.policy_hidden.begin(), cfg_.policy_hidden.end());
  pi.push_back(1);
  policy_ = nn::Mlp(store_, "agent/pi", pi, cfg_.activation, rng, 0.01);
  std::vector<int> v{head_in};
  v.insert(v.end(), cfg_.value_hidden.begin(), cfg_.value_hidden.end());
  v.push_back(1);
  value_ = nn::Mlp(store_, "agent/v", v, cfg_.activation, rng);
  log_std_ = store_.add("agent/log_std", Matrix::Constant(1, 1, cfg_.init_log_std));
}

Var Agent::latent_features(Graph& g, const Var& upsilon) const {
  if (upsilon.cols() != cfg_.latent_dim) {
    throw ConfigError("agent: latent width " + std::to_string(upsilon.cols()) + " != " +
                      std::to_string(cfg_.latent_dim));
  }
  if (cfg_.latent_layers.empty()) return upsilon;
  return nn::activate(features_.forward(g, store_, upsilon), cfg_.activation);
}

nn::LstmCell::State Agent::extract(Graph& g, const Var& obs, const Var& prev_action,
                                   const Var* features, const nn::LstmCell::State& prev) const {
  const Eigen::Index n = obs.rows();
  if (prev.h.rows() != n || prev_action.rows() != n) {
    throw ConfigError("agent: carry holds " + std::to_string(prev.h.rows()) + " users, input has " +
                      std::to_string(n));
  }
  if (obs.cols() != cfg_.obs_dim) throw ConfigError("agent: observation width mismatch");
  if (!cfg_.recurrent_extractor()) {
    Var z = constant_z(g, n);
    return {z, z};
  }
  std::vector<Var> parts{obs, prev_action};
  if (cfg_.uses_latent()) {
    if (features == nullptr) throw ConfigError("agent: SIM2REC extractor needs latent features");
    parts.push_back(features->rows() == n ? *features : nn::repeat_rows(*features, n));
  }
  return cell_.step(g, store_, nn::concat_cols(parts), prev);
}

Var Agent::constant_z(Graph& g, Eigen::Index rows) const {
  return g.constant(Matrix::Zero(rows, cfg_.recurrent));
}

Var Agent::policy_mean(Graph& g, const Var& obs, const Var& z) const {
  return policy_.forward(g, store_, nn::concat_cols({obs, z}));
}

Var Agent::log_std(Graph& g) const {
  return nn::clamp(g.param(store_, log_std_), cfg_.log_std_min, cfg_.log_std_max);
}

Var Agent::value(Graph& g, const Var& obs, const Var& z) const {
  return value_.forward(g, store_, nn::concat_cols({obs, z}));
}

Carry Agent::initial_carry(Eigen::Index users) const {
  return {Matrix::Zero(users, cfg_.recurrent), Matrix::Zero(users, cfg_.recurrent)};
}

Matrix Agent::extract(const Matrix& obs, const Matrix& prev_action, const Matrix* upsilon,
                      Carry& carry) const {
  if (carry.rows() != obs.rows()) {
    throw ConfigError("agent: carry holds " + std::to_string(carry.rows()) + " users, input has " +
                      std::to_string(obs.rows()));
  }
  Graph g;
  Var feats;
  if (cfg_.uses_latent()) {
    if (upsilon == nullptr) throw ConfigError("agent: SIM2REC extractor needs a latent code");
    feats = latent_features(g, g.constant(*upsilon));
  }
  nn::LstmCell::State prev{g.constant(carry.h), g.constant(carry.c)};
  const auto next = extract(g, g.constant(obs), g.constant(prev_action),
                            cfg_.uses_latent() ? &feats : nullptr, prev);
  if (cfg_.recurrent_extractor()) {
    carry.h = next.h.value();
    carry.c = next.c.value();
  }
  return next.h.value();
}

PolicyOutput Agent::act(const Matrix& obs, const Matrix& z, ActMode mode, const Matrix* noise) const {
  const Eigen::Index n = obs.rows();
  if (z.rows() != n || z.cols() != cfg_.recurrent) throw ConfigError("agent: z shape mismatch");
  if (mode == ActMode::kSample && (noise == nullptr || noise->rows() != n || noise->cols() != 1)) {
    throw ConfigError("agent: sample mode needs N x 1 noise");
  }
  Graph g;
  const Var zo = g.constant(z);
  const Var so = g.constant(obs);
  PolicyOutput out;
  out.mean = policy_mean(g, so, zo).value();
  out.log_std = log_std(g).scalar();
  out.value = value(g, so, zo).value();
  if (!out.mean.allFinite() || !std::isfinite(out.log_std) || !out.value.allFinite()) {
    throw NumericError("agent: non-finite policy or value head output");
  }
  const double sd = std::exp(out.log_std);
  out.pre_squash = out.mean;
  if (mode == ActMode::kSample) out.pre_squash += sd * *noise;
  out.action.resize(n, 1);
  out.log_prob.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = out.pre_squash(i, 0);
    out.action(i, 0) = lts::sigmoid(u);
    out.log_prob(i, 0) = squashed_log_prob(u, out.mean(i, 0), out.log_std);
  }
  return out;
}

nn::Checkpoint Agent::snapshot(const std::string& metadata) const {
  return nn::snapshot(store_, metadata, true);
}

// ---- rollouts -------------------------------------------------------------------

std::vector<lts::Observation> LtsVecEnv::reset(std::uint64_t seed) { return group_.reset(seed); }

std::vector<lts::Transition> LtsVecEnv::step(std::span<const double> actions) {
  return group_.step(actions);
}

Matrix observation_matrix(std::span<const lts::Observation> obs) {
  Matrix m(static_cast<Eigen::Index>(obs.size()), lts::kObsDim);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    lts::normalize_obs(obs[i], m.row(static_cast<Eigen::Index>(i)).data());
  }
  return m;
}

std::vector<Trajectory> Rollout::trajectories() const {
  std::vector<Trajectory> out(n_users);
  for (std::size_t i = 0; i < n_users; ++i) {
    Trajectory& tr = out[i];
    for (int t = 0; t < steps; ++t) {
      const Eigen::Index k = row(t, i);
      tr.states.push_back(raw_obs[static_cast<std::size_t>(k)]);
      tr.actions.push_back(actions(k, 0));
      tr.rewards.push_back(reward(k, 0));
      tr.log_probs.push_back(log_prob(k, 0));
      tr.values.push_back(value(k, 0));
      tr.dones.push_back(done(k, 0) != 0.0);
    }
  }
  return out;
}

namespace {

void check_compat(const Agent& agent, const sadae::Sadae* sadae) {
  const AgentConfig& cfg = agent.config();
  if (cfg.obs_dim != lts::kObsDim) {
    throw ConfigError("agent observation width " + std::to_string(cfg.obs_dim) +
                      " does not match the simulator's " + std::to_string(lts::kObsDim));
  }
  if (!cfg.uses_latent()) return;
  if (sadae == nullptr) throw ConfigError("SIM2REC agent needs a SADAE");
  if (sadae->config().latent_dim != cfg.latent_dim) throw ConfigError("SADAE latent width mismatch");
  if (sadae->config().encoder_input() != cfg.obs_dim) {
    throw ConfigError("SADAE encoder input does not match the observation width");
  }
}

}  // namespace

Rollout rollout_episode(VecEnv& env, const Agent& agent, const sadae::Sadae* sadae,
                        const RolloutOptions& opt) {
  check_compat(agent, sadae);
  if (opt.horizon < 0) throw ConfigError("rollout: negative horizon");
  const AgentConfig& cfg = agent.config();
  const std::size_t n = env.num_users();
  const auto rows = static_cast<Eigen::Index>(n * static_cast<std::size_t>(opt.horizon));

  Rollout r;
  r.n_users = n;
  r.group = opt.group;
  r.obs.resize(rows, cfg.obs_dim);
  r.actions.resize(rows, 1);
  r.pre_squash.resize(rows, 1);
  r.log_prob.resize(rows, 1);
  r.value.resize(rows, 1);
  r.reward.resize(rows, 1);
  r.done.resize(rows, 1);
  r.z.resize(rows, agent.z_dim());
  if (cfg.uses_latent()) r.upsilon_noise.resize(opt.horizon, cfg.latent_dim);
  r.raw_obs.reserve(static_cast<std::size_t>(rows));
  r.bootstrap = Matrix::Zero(static_cast<Eigen::Index>(n), 1);
  if (opt.horizon == 0) return r;

  std::vector<lts::Observation> obs = env.reset(stream_seed(opt.seed, kTagReset));
  Carry carry = agent.initial_carry(static_cast<Eigen::Index>(n));
  Matrix prev = Matrix::Zero(static_cast<Eigen::Index>(n), 1);
  const auto latent_for = [&](const std::vector<lts::Observation>& o, int t, Matrix* noise_out) {
    Matrix noise = opt.deterministic ? Matrix::Zero(1, cfg.latent_dim)
                                     : standard_normals(stream_seed(opt.seed, kTagLatent, t), cfg.latent_dim);
    if (noise_out) *noise_out = noise;
    const auto v = sadae->embed_stream(sadae::batch_from_observations(o, opt.group, t), noise);
    return Matrix(Eigen::Map<const Matrix>(v.data(), 1, cfg.latent_dim));
  };

  std::vector<double> acts(n);
  Matrix noise(static_cast<Eigen::Index>(n), 1);
  Matrix last_done = Matrix::Zero(static_cast<Eigen::Index>(n), 1);
  int t = 0;
  for (; t < opt.horizon; ++t) {
    const Matrix o = observation_matrix(obs);
    Matrix ups;
    if (cfg.uses_latent()) {
      Matrix eps;
      ups = latent_for(obs, t, &eps);
      r.upsilon_noise.row(t) = eps;
    }
    const Matrix z = agent.extract(o, prev, cfg.uses_latent() ? &ups : nullptr, carry);
    for (std::size_t i = 0; i < n; ++i) {
      SplitMix64 gen(stream_seed(opt.seed, kTagAction, i, static_cast<std::uint64_t>(t)));
      noise(static_cast<Eigen::Index>(i), 0) = standard_normal(gen);
    }
    const PolicyOutput out =
        agent.act(o, z, opt.deterministic ? ActMode::kMean : ActMode::kSample, &noise);
    for (std::size_t i = 0; i < n; ++i) acts[i] = out.action(static_cast<Eigen::Index>(i), 0);
    const auto tr = env.step(acts);
    if (tr.size() != n) throw ConfigError("rollout: simulator returned the wrong number of users");

    const Eigen::Index base = r.row(t, 0);
    const auto nu = static_cast<Eigen::Index>(n);
    r.obs.middleRows(base, nu) = o;
    r.actions.middleRows(base, nu) = out.action;
    r.pre_squash.middleRows(base, nu) = out.pre_squash;
    r.log_prob.middleRows(base, nu) = out.log_prob;
    r.value.middleRows(base, nu) = out.value;
    r.z.middleRows(base, nu) = z;
    bool all_done = true;
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = base + static_cast<Eigen::Index>(i);
      r.raw_obs.push_back(obs[i]);
      r.reward(k, 0) = tr[i].reward;
      r.done(k, 0) = tr[i].done ? 1.0 : 0.0;
      last_done(static_cast<Eigen::Index>(i), 0) = r.done(k, 0);
      all_done = all_done && tr[i].done;
      obs[i] = tr[i].next_obs;
    }
    prev = out.action;
    if (all_done) {
      ++t;
      break;
    }
  }
  r.steps = t;
  const auto used = static_cast<Eigen::Index>(n * static_cast<std::size_t>(t));
  for (Matrix* m : {&r.obs, &r.actions, &r.pre_squash, &r.log_prob, &r.value, &r.reward, &r.done, &r.z}) {
    m->conservativeResize(used, m->cols());
  }
  if (cfg.uses_latent()) r.upsilon_noise.conservativeResize(t, cfg.latent_dim);

  // Truncated episodes bootstrap from the value of the state reached.
  if (last_done.minCoeff() == 0.0) {
    const Matrix o = observation_matrix(obs);
    Matrix ups;
    if (cfg.uses_latent()) ups = latent_for(obs, t, nullptr);
    const Matrix z = agent.extract(o, prev, cfg.uses_latent() ? &ups : nullptr, carry);
    const PolicyOutput out = agent.act(o, z, ActMode::kMean, nullptr);
    r.bootstrap = (1.0 - last_done.array()).matrix().cwiseProduct(out.value);
  }
  return r;
}

SequenceOutput unroll(Graph& g, const Agent& agent, const sadae::Sadae* sadae, const Rollout& r,
                      const std::vector<std::size_t>& users, int bptt_window) {
  check_compat(agent, sadae);
  const AgentConfig& cfg = agent.config();
  if (r.steps <= 0 || users.empty()) throw UsageError("unroll: empty rollout or user subset");
  const auto m = static_cast<Eigen::Index>(users.size());
  for (std::size_t u : users) {
    if (u >= r.n_users) throw ConfigError("unroll: user index out of range");
  }

  Var feats;
  if (cfg.uses_latent()) {
    const auto group = static_cast<Eigen::Index>(r.n_users);
    const Var input = g.constant(sadae::canonical_rows(r.obs, group));
    const sadae::Posterior post = sadae->encode_segments(g, input, group);
    feats = agent.latent_features(g, sadae->sample(g, post, r.upsilon_noise));
  }

  Matrix states(r.steps * m, cfg.obs_dim);
  for (int t = 0; t < r.steps; ++t) {
    for (Eigen::Index k = 0; k < m; ++k) {
      states.row(t * m + k) = r.obs.row(r.row(t, users[static_cast<std::size_t>(k)]));
    }
  }

  Var z_all;
  if (cfg.recurrent_extractor()) {
    nn::LstmCell::State st{g.constant(Matrix::Zero(m, cfg.recurrent)),
                           g.constant(Matrix::Zero(m, cfg.recurrent))};
    std::vector<Var> zs;
    zs.reserve(static_cast<std::size_t>(r.steps));
    Matrix prev = Matrix::Zero(m, 1);
    for (int t = 0; t < r.steps; ++t) {
      if (bptt_window > 0 && t > 0 && t % bptt_window == 0) {
        st = {g.constant(st.h.value()), g.constant(st.c.value())};
      }
      Var f;
      if (cfg.uses_latent()) f = nn::slice_rows(feats, t, 1);
      st = agent.extract(g, g.constant(states.middleRows(t * m, m)), g.constant(prev),
                         cfg.uses_latent() ? &f : nullptr, st);
      zs.push_back(st.h);
      for (Eigen::Index k = 0; k < m; ++k) prev(k, 0) = r.actions(r.row(t, users[static_cast<std::size_t>(k)]), 0);
    }
    z_all = nn::concat_rows(zs);
  } else {
    z_all = agent.constant_z(g, r.steps * m);
  }

  const Var s_all = g.constant(std::move(states));
  SequenceOutput out;
  out.mean = agent.policy_mean(g, s_all, z_all);
  out.log_std = agent.log_std(g);
  out.value = agent.value(g, s_all, z_all);
  return out;
}

// ---- evaluation adapter -------------------------------------------------------------

AgentPolicy::AgentPolicy(const Agent& agent, const sadae::Sadae* sadae, bool deterministic,
                         std::uint64_t seed)
    : agent_(agent), sadae_(sadae), deterministic_(deterministic), seed_(seed) {
  check_compat(agent_, sadae_);
}

void AgentPolicy::begin_episode(std::size_t n_users) {
  carry_ = agent_.initial_carry(static_cast<Eigen::Index>(n_users));
  prev_action_ = Matrix::Zero(static_cast<Eigen::Index>(n_users), 1);
  ++episode_;
}

std::vector<double> AgentPolicy::act(std::span<const lts::Observation> obs, int t) {
  const AgentConfig& cfg = agent_.config();
  const Matrix o = observation_matrix(obs);
  Matrix ups;
  if (cfg.uses_latent()) {
    const Matrix noise = deterministic_ ? Matrix::Zero(1, cfg.latent_dim)
                                        : standard_normals(stream_seed(seed_, kTagLatent, episode_, t),
                                                           cfg.latent_dim);
    const std::vector<lts::Observation> v(obs.begin(), obs.end());
    const auto e = sadae_->embed_stream(sadae::batch_from_observations(v, 0, t), noise);
    ups = Eigen::Map<const Matrix>(e.data(), 1, cfg.latent_dim);
  }
  const Matrix z = agent_.extract(o, prev_action_, cfg.uses_latent() ? &ups : nullptr, carry_);
  Matrix noise(o.rows(), 1);
  for (Eigen::Index i = 0; i < o.rows(); ++i) {
    SplitMix64 gen(stream_seed(seed_, kTagAction, episode_, static_cast<std::uint64_t>(t) * 1000003ULL + static_cast<std::uint64_t>(i)));
    noise(i, 0) = standard_normal(gen);
  }
  const PolicyOutput out =
      agent_.act(o, z, deterministic_ ? ActMode::kMean : ActMode::kSample, &noise);
  prev_action_ = out.action;
  return std::vector<double>(out.action.data(), out.action.data() + out.action.rows());
}

}  // namespace sim2rec::agent
