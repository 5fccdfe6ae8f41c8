#include "cli.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "sim2rec/csv.hpp"
#include "sim2rec/errors.hpp"
#include "sim2rec/evalkit.hpp"
#include "sim2rec/rng.hpp"

#ifndef SIM2REC_CODE_VERSION
#define SIM2REC_CODE_VERSION "unknown"
#endif

namespace sim2rec::cli {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTagAgent = 0x6167656e74ULL;
constexpr std::uint64_t kTagSadae = 0x7361646165ULL;
constexpr std::uint64_t kTagSeries = 0x736572696573ULL;
constexpr std::uint64_t kTagEval = 0x6576616cULL;

// ---- strict JSON reading --------------------------------------------------------------

// Reads the keys it is asked for and rejects any others.
class Block {
 public:
  Block(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }
  ~Block() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + name_ + "." + k + "'");
    }
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for '" + name_ + "." + key + "': " + e.what());
    }
  }
  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

std::string now_iso() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw StageError("cannot write " + p.string());
  out << text;
  if (!out) throw StageError("write failed for " + p.string());
}

template <class F>
void write_file(const fs::path& p, F&& fill) {
  std::ostringstream ss;
  fill(ss);
  write_text(p, ss.str());
}

void refuse_existing(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) {
    throw ConfigError(p.string() + " already exists; pass --force to overwrite");
  }
}

json agent_json(const agent::AgentConfig& a) {
  return {{"latent_layers", a.latent_layers}, {"recurrent", a.recurrent},
          {"policy_hidden", a.policy_hidden}, {"value_hidden", a.value_hidden},
          {"init_log_std", a.init_log_std}};
}

void read_agent(const json& j, agent::AgentConfig& a) {
  Block b(j, "agent");
  b.get("latent_layers", a.latent_layers);
  b.get("recurrent", a.recurrent);
  b.get("policy_hidden", a.policy_hidden);
  b.get("value_hidden", a.value_hidden);
  b.get("init_log_std", a.init_log_std);
}

json sadae_model_json(const sadae::SadaeConfig& m) {
  return {{"encoder_hidden", m.encoder_hidden}, {"decoder_hidden", m.decoder_hidden},
          {"latent_dim", m.latent_dim},         {"l2_weight", m.l2_weight}};
}

sadae::SadaeConfig sadae_model_from(const json& j) {
  sadae::SadaeConfig m;
  m.encoder_hidden = j.at("encoder_hidden").get<std::vector<int>>();
  m.decoder_hidden = j.at("decoder_hidden").get<std::vector<int>>();
  m.latent_dim = j.at("latent_dim").get<int>();
  m.l2_weight = j.at("l2_weight").get<double>();
  return m;
}

std::vector<fs::path> seed_dirs(const fs::path& root, const std::string& variant) {
  std::vector<fs::path> out;
  const fs::path base = root / "policy" / variant;
  if (!fs::is_directory(base)) return out;
  for (const auto& e : fs::directory_iterator(base)) {
    if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> policy_variants(const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::is_directory(root / "policy")) return out;
  for (const auto& e : fs::directory_iterator(root / "policy")) {
    if (e.is_directory()) out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Highest-numbered ckpt_N under a seed directory.
std::optional<fs::path> latest_checkpoint(const fs::path& seed_dir) {
  std::optional<fs::path> best;
  long best_n = -1;
  for (const auto& e : fs::directory_iterator(seed_dir)) {
    const std::string name = e.path().filename().string();
    if (!e.is_directory() || name.rfind("ckpt_", 0) != 0) continue;
    const long n = std::strtol(name.c_str() + 5, nullptr, 10);
    if (n > best_n) {
      best_n = n;
      best = e.path();
    }
  }
  return best;
}

struct MetricsTable {
  std::vector<int> iteration;
  std::vector<double> target;
  std::vector<double> train;
};

MetricsTable read_metrics(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read " + p.string());
  const CsvTable t = read_csv(in);
  const auto ci = t.column("iteration"), ct = t.column("target_return"), cr = t.column("train_return");
  MetricsTable m;
  for (const auto& row : t.rows) {
    m.iteration.push_back(static_cast<int>(parse_int(row[ci])));
    m.target.push_back(parse_double(row[ct]));
    m.train.push_back(parse_double(row[cr]));
  }
  return m;
}

// Long-format curve rows (metric, iteration, mean, stderr, min, max, n) over
// the seed metrics files of one variant.
void write_curves(CsvWriter& w, const std::string& variant, const std::vector<fs::path>& dirs) {
  std::vector<MetricsTable> tables;
  for (const auto& d : dirs) {
    if (fs::exists(d / "metrics.csv")) tables.push_back(read_metrics(d / "metrics.csv"));
  }
  if (tables.empty()) return;
  for (const char* metric : {"target_return", "train_return"}) {
    const bool target = std::string(metric) == "target_return";
    std::map<int, std::vector<double>> by_iter;
    for (const auto& t : tables) {
      for (std::size_t i = 0; i < t.iteration.size(); ++i) {
        const double v = target ? t.target[i] : t.train[i];
        if (std::isfinite(v)) by_iter[t.iteration[i]].push_back(v);
      }
    }
    for (const auto& [it, vals] : by_iter) {
      const eval::Summary s = eval::summarize(vals);
      w.row(variant, std::string(metric), it, s.mean, s.stderr_, s.min, s.max, s.n);
    }
  }
}

ens::LoggedDataset load_logs(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("missing logged data " + p.string() + "; run gen-logs first");
  return ens::read_logged_csv(in);
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

// Unreadable artifacts of an earlier stage fail this stage.
ens::Ensemble load_ensemble(const fs::path& dir) {
  try {
    return ens::Ensemble::load(dir);
  } catch (const ConfigError& e) {
    throw StageError(std::string("cannot load the ensemble: ") + e.what());
  }
}

}  // namespace

// ---- configuration -------------------------------------------------------------------

RunConfig RunConfig::full() {
  RunConfig c;
  c.desk = false;
  c.agent = agent::AgentConfig::full(agent::Variant::kSim2Rec);
  c.train = trainer::TrainConfig{};
  c.sadae.model = sadae::SadaeConfig{};
  c.sadae.train = sadae::TrainConfig{};
  c.agent.latent_dim = c.sadae.model.latent_dim;
  return c;
}

RunConfig RunConfig::desk_scale() {
  RunConfig c = full();
  c.desk = true;
  c.agent = agent::AgentConfig::desk(agent::Variant::kSim2Rec);
  c.train = trainer::TrainConfig::desk();
  c.sadae.model.encoder_hidden = {64, 64};
  c.sadae.model.decoder_hidden = {64, 64};
  c.agent.latent_dim = c.sadae.model.latent_dim;
  return c;
}

agent::Variant RunConfig::agent_variant() const {
  return is_upper() ? agent::Variant::kSim2Rec : agent::parse_variant(variant);
}

void RunConfig::validate() const {
  task.spec.validate();
  (void)agent_variant();
  agent::AgentConfig a = agent;
  a.variant = agent_variant();
  a.validate();
  train.validate();
  if (seeds.empty()) throw ConfigError("config: at least one seed is required");
  if (logs.episodes < 0) throw ConfigError("config: logs.episodes must be non-negative");
  if (!(logs.behavior_lo >= 0.0 && logs.behavior_lo <= logs.behavior_hi && logs.behavior_hi <= 1.0)) {
    throw ConfigError("config: behavior policy range must satisfy 0 <= lo <= hi <= 1");
  }
  if (sadae.users_per_group < 1) throw ConfigError("config: sadae.users_per_group must be positive");
  if (sadae.source != "task" && sadae.source != "logs") throw ConfigError("config: sadae.source must be task or logs");
  if (policy.source != "task" && policy.source != "ensemble") {
    throw ConfigError("config: policy.source must be task or ensemble");
  }
  if (ensemble.members < 2) throw ConfigError("config: an ensemble needs at least 2 members");
  if (ensemble.horizon < 1 || ensemble.exec_window < 1 || ensemble.clusters < 2) {
    throw ConfigError("config: ensemble horizon, window and cluster count must be positive");
  }
  if (sadae.probe_every < 1 || sadae.probe_steps < 1) throw ConfigError("config: probe cadence must be positive");
  if (eval.seeds.empty() || eval.episodes < 1) throw ConfigError("config: evaluation needs seeds and episodes");
  if (is_upper() && policy.upper_users > task.eval_users) {
    throw ConfigError("config: policy.upper_users exceeds the target population");
  }
}

json to_json(const RunConfig& c) {
  const auto& t = c.train;
  json j;
  j["output_dir"] = c.output_dir.string();
  j["variant"] = c.variant;
  j["desk"] = c.desk;
  j["seeds"] = c.seeds;
  j["task"] = {{"id", std::string(lts::to_string(c.task.spec.id))},
               {"users_per_group", c.task.spec.users_per_group},
               {"horizon", c.task.spec.horizon},
               {"beta", c.task.spec.beta},
               {"resample_omega_u", c.task.spec.resample_omega_u},
               {"seed", c.task.seed},
               {"eval_users", c.task.eval_users}};
  j["agent"] = agent_json(c.agent);
  j["train"] = {{"gamma", t.gamma},
                {"clip", t.clip},
                {"gae_lambda", t.gae_lambda},
                {"epochs_per_batch", t.epochs_per_batch},
                {"minibatches", t.minibatches},
                {"batch_size", t.batch_size},
                {"mix_simulators", t.mix_simulators},
                {"iterations", t.iterations},
                {"lr_start", t.lr_start},
                {"lr_end", t.lr_end},
                {"entropy_coef", t.entropy_coef},
                {"value_coef", t.value_coef},
                {"max_grad_norm", t.max_grad_norm},
                {"reward_scale", t.reward_scale},
                {"bptt_window", t.bptt_window},
                {"elbo_weight", t.elbo_weight},
                {"sadae_lr", t.sadae_lr},
                {"train_sadae", t.train_sadae},
                {"eval_every", t.eval_every},
                {"checkpoint_every", t.checkpoint_every}};
  json s = sadae_model_json(c.sadae.model);
  s["epochs"] = c.sadae.train.epochs;
  s["lr"] = c.sadae.train.lr;
  s["eval_every"] = c.sadae.train.eval_every;
  s["users_per_group"] = c.sadae.users_per_group;
  s["source"] = c.sadae.source;
  s["seed"] = c.sadae.seed;
  s["probe_every"] = c.sadae.probe_every;
  s["probe_steps"] = c.sadae.probe_steps;
  j["sadae"] = s;
  j["logs"] = {{"episodes", c.logs.episodes},
               {"behavior_lo", c.logs.behavior_lo},
               {"behavior_hi", c.logs.behavior_hi},
               {"seed", c.logs.seed}};
  const auto& e = c.ensemble;
  j["ensemble"] = {{"members", e.members},
                   {"seed", e.seed},
                   {"user_fraction", e.base.user_fraction},
                   {"lr", e.base.lr},
                   {"steps", e.base.steps},
                   {"batch", e.base.batch},
                   {"hidden", e.base.hidden},
                   {"horizon", e.horizon},
                   {"alpha", e.alpha},
                   {"trend_filter", e.trend_filter},
                   {"exec_filter", e.exec_filter},
                   {"exec_window", e.exec_window},
                   {"clusters", e.clusters},
                   {"r_min_percentile", e.r_min_percentile}};
  j["policy"] = {{"source", c.policy.source},
                 {"joint_from_scratch", c.policy.joint_from_scratch},
                 {"upper_users", c.policy.upper_users}};
  j["eval"] = {{"seeds", c.eval.seeds}, {"episodes", c.eval.episodes}};
  return j;
}

RunConfig from_json(const json& j, const RunConfig& base) {
  RunConfig c = base;
  Block top(j, "config");
  std::string out = c.output_dir.string();
  top.get("output_dir", out);
  c.output_dir = out;
  top.get("variant", c.variant);
  top.get("desk", c.desk);
  top.get("seeds", c.seeds);
  if (const json* t = top.sub("task")) {
    Block b(*t, "task");
    std::string id;
    b.get("id", id);
    if (!id.empty() && lts::parse_task_id(id) != c.task.spec.id) {
      c.task.spec = lts::TaskSpec::preset(lts::parse_task_id(id));
    }
    b.get("users_per_group", c.task.spec.users_per_group);
    b.get("horizon", c.task.spec.horizon);
    b.get("beta", c.task.spec.beta);
    b.get("resample_omega_u", c.task.spec.resample_omega_u);
    b.get("seed", c.task.seed);
    b.get("eval_users", c.task.eval_users);
  }
  if (const json* a = top.sub("agent")) read_agent(*a, c.agent);
  if (const json* t = top.sub("train")) {
    Block b(*t, "train");
    auto& tc = c.train;
    b.get("gamma", tc.gamma);
    b.get("clip", tc.clip);
    b.get("gae_lambda", tc.gae_lambda);
    b.get("epochs_per_batch", tc.epochs_per_batch);
    b.get("minibatches", tc.minibatches);
    b.get("batch_size", tc.batch_size);
    b.get("mix_simulators", tc.mix_simulators);
    b.get("iterations", tc.iterations);
    b.get("lr_start", tc.lr_start);
    b.get("lr_end", tc.lr_end);
    b.get("entropy_coef", tc.entropy_coef);
    b.get("value_coef", tc.value_coef);
    b.get("max_grad_norm", tc.max_grad_norm);
    b.get("reward_scale", tc.reward_scale);
    b.get("bptt_window", tc.bptt_window);
    b.get("elbo_weight", tc.elbo_weight);
    b.get("sadae_lr", tc.sadae_lr);
    b.get("train_sadae", tc.train_sadae);
    b.get("eval_every", tc.eval_every);
    b.get("checkpoint_every", tc.checkpoint_every);
  }
  if (const json* s = top.sub("sadae")) {
    Block b(*s, "sadae");
    b.get("encoder_hidden", c.sadae.model.encoder_hidden);
    b.get("decoder_hidden", c.sadae.model.decoder_hidden);
    b.get("latent_dim", c.sadae.model.latent_dim);
    b.get("l2_weight", c.sadae.model.l2_weight);
    b.get("epochs", c.sadae.train.epochs);
    b.get("lr", c.sadae.train.lr);
    b.get("eval_every", c.sadae.train.eval_every);
    b.get("users_per_group", c.sadae.users_per_group);
    b.get("source", c.sadae.source);
    b.get("seed", c.sadae.seed);
    b.get("probe_every", c.sadae.probe_every);
    b.get("probe_steps", c.sadae.probe_steps);
  }
  if (const json* l = top.sub("logs")) {
    Block b(*l, "logs");
    b.get("episodes", c.logs.episodes);
    b.get("behavior_lo", c.logs.behavior_lo);
    b.get("behavior_hi", c.logs.behavior_hi);
    b.get("seed", c.logs.seed);
  }
  if (const json* e = top.sub("ensemble")) {
    Block b(*e, "ensemble");
    auto& en = c.ensemble;
    b.get("members", en.members);
    b.get("seed", en.seed);
    b.get("user_fraction", en.base.user_fraction);
    b.get("lr", en.base.lr);
    b.get("steps", en.base.steps);
    b.get("batch", en.base.batch);
    b.get("hidden", en.base.hidden);
    b.get("horizon", en.horizon);
    b.get("alpha", en.alpha);
    b.get("trend_filter", en.trend_filter);
    b.get("exec_filter", en.exec_filter);
    b.get("exec_window", en.exec_window);
    b.get("clusters", en.clusters);
    b.get("r_min_percentile", en.r_min_percentile);
  }
  if (const json* p = top.sub("policy")) {
    Block b(*p, "policy");
    b.get("source", c.policy.source);
    b.get("joint_from_scratch", c.policy.joint_from_scratch);
    b.get("upper_users", c.policy.upper_users);
  }
  if (const json* e = top.sub("eval")) {
    Block b(*e, "eval");
    b.get("seeds", c.eval.seeds);
    b.get("episodes", c.eval.episodes);
  }
  c.agent.latent_dim = c.sadae.model.latent_dim;
  return c;
}

std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string code_version() { return SIM2REC_CODE_VERSION; }

// ---- run directory -----------------------------------------------------------------

RunDir::RunDir(const fs::path& root, const std::string& config_text)
    : root_(root), config_hash_(content_hash(config_text)) {
  fs::create_directories(root_);
  const fs::path lock = root_ / kLockFile;
  for (int attempt = 0; attempt < 2 && !locked_; ++attempt) {
    const int fd = ::open(lock.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      if (::write(fd, pid.data(), pid.size()) < 0) {
        ::close(fd);
        throw StageError("cannot write lock file " + lock.string());
      }
      ::close(fd);
      locked_ = true;
      break;
    }
    if (errno != EEXIST) throw StageError("cannot create lock file " + lock.string());
    // A lock left by a process that no longer exists is stale.
    long owner = 0;
    {
      std::ifstream in(lock);
      in >> owner;
    }
    if (owner > 0 && ::kill(static_cast<pid_t>(owner), 0) == 0) {
      throw ConfigError("run directory " + root_.string() + " is locked by process " + std::to_string(owner));
    }
    fs::remove(lock);
  }
  if (!locked_) throw ConfigError("could not lock run directory " + root_.string());
  write_text(root_ / kConfigFile, config_text);
}

RunDir::~RunDir() {
  if (locked_) {
    std::error_code ec;
    fs::remove(root_ / kLockFile, ec);
  }
}

void RunDir::record(const std::string& stage, double wall_seconds, const std::vector<fs::path>& artifacts) {
  json line;
  line["stage"] = stage;
  line["config_hash"] = config_hash_;
  line["code_version"] = code_version();
  line["wall_seconds"] = wall_seconds;
  line["finished"] = now_iso();
  std::vector<std::string> rel;
  for (const auto& a : artifacts) rel.push_back(fs::relative(a, root_).string());
  line["artifacts"] = rel;
  std::ofstream out(root_ / kManifestFile, std::ios::app);
  if (!out) throw StageError("cannot append to the manifest");
  out << line.dump() << '\n';
}

// ---- shared helpers ------------------------------------------------------------------

lts::TaskEnsemble task_ensemble(const RunConfig& cfg) {
  return lts::build_task_ensemble(cfg.task.spec, cfg.task.seed, cfg.task.eval_users);
}

sadae::Sadae make_sadae(const RunConfig& cfg) {
  return sadae::Sadae(cfg.sadae.model, stream_seed(cfg.sadae.seed, kTagSadae));
}

std::vector<sadae::GroupSeries> sadae_training_series(const RunConfig& cfg) {
  lts::TaskSpec task = cfg.task.spec;
  task.users_per_group = cfg.sadae.users_per_group;
  const auto te = lts::build_task_ensemble(task, cfg.task.seed, cfg.task.eval_users);
  std::vector<sadae::GroupSeries> out;
  const lts::BehaviorPolicy behavior{cfg.logs.behavior_lo, cfg.logs.behavior_hi};
  for (std::size_t i = 0; i < te.training.size(); ++i) {
    out.push_back(sadae::collect_series(task, te.training[i], behavior, stream_seed(cfg.sadae.seed, kTagSeries, i)));
  }
  return out;
}

sadae::GroupSeries sadae_test_series(const RunConfig& cfg) {
  const auto te = task_ensemble(cfg);
  const lts::BehaviorPolicy behavior{cfg.logs.behavior_lo, cfg.logs.behavior_hi};
  return sadae::collect_series(cfg.task.spec, te.target, behavior, stream_seed(cfg.sadae.seed, kTagSeries, 999));
}

nn::Matrix latent_means(const sadae::Sadae& model, const std::vector<sadae::GroupSeries>& series) {
  const int d = model.config().latent_dim;
  nn::Matrix out = nn::Matrix::Zero(static_cast<Eigen::Index>(series.size()), d);
  for (std::size_t s = 0; s < series.size(); ++s) {
    if (series[s].steps.empty()) throw ConfigError("latent_means: empty series");
    for (const auto& b : series[s].steps) {
      const auto post = model.posterior(b);
      for (int k = 0; k < d; ++k) out(static_cast<Eigen::Index>(s), k) += post.mean[static_cast<std::size_t>(k)];
    }
    out.row(static_cast<Eigen::Index>(s)) /= static_cast<double>(series[s].steps.size());
  }
  return out;
}

fs::path policy_dir(const fs::path& root, const std::string& variant, std::uint64_t seed) {
  return root / "policy" / variant / ("seed_" + std::to_string(seed));
}

PolicyRun train_policy_seed(const RunConfig& cfg, std::uint64_t seed, const fs::path& dir,
                            const std::optional<fs::path>& sadae_ckpt,
                            const std::optional<fs::path>& ensemble_dir,
                            const std::optional<fs::path>& logs_csv) {
  cfg.validate();
  const agent::Variant v = cfg.agent_variant();
  agent::AgentConfig ac = cfg.agent;
  ac.variant = v;
  ac.latent_dim = cfg.sadae.model.latent_dim;
  agent::Agent ag(ac, stream_seed(seed, kTagAgent));

  std::optional<sadae::Sadae> model;
  if (ac.uses_latent()) {
    model = make_sadae(cfg);
    if (sadae_ckpt && fs::exists(*sadae_ckpt)) {
      model->restore(nn::read_checkpoint(*sadae_ckpt));
    } else if (!cfg.policy.joint_from_scratch) {
      throw ConfigError(cfg.variant + " needs a SADAE checkpoint (run train-sadae) or policy.joint_from_scratch");
    }
  }

  trainer::TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.eval_episodes = cfg.eval.episodes;
  if (tc.checkpoint_every == 0) tc.checkpoint_every = std::max(1, tc.iterations);

  const auto te = task_ensemble(cfg);
  std::unique_ptr<agent::SimulatorSet> set;
  if (cfg.policy.source == "ensemble") {
    if (cfg.is_upper()) throw ConfigError("UPPER trains on the target population, not on learned simulators");
    if (!ensemble_dir || !logs_csv) throw ConfigError("ensemble training needs the ensemble and the logged data");
    const ens::LoggedDataset logs = load_logs(*logs_csv);
    auto e = std::make_shared<const ens::Ensemble>(load_ensemble(*ensemble_dir));
    ens::EnsembleSetConfig ec;
    ec.horizon = cfg.ensemble.horizon;
    ec.trend_filter = cfg.ensemble.trend_filter;
    ec.exec_filter = cfg.ensemble.exec_filter;
    ec.exec_window = cfg.ensemble.exec_window;
    try {
      set = std::make_unique<ens::EnsembleSimulatorSet>(e, logs, ec);
    } catch (const ConfigError& err) {
      throw StageError(std::string("building the learned simulator set: ") + err.what());
    }
    tc.alpha = cfg.ensemble.alpha;
    tc.r_min = ens::reward_percentile(logs, cfg.ensemble.r_min_percentile);
    tc.filters = cfg.ensemble.trend_filter || cfg.ensemble.exec_filter;
  } else if (cfg.is_upper()) {
    lts::SimulatorSpec t = te.target;
    t.n_users = cfg.policy.upper_users;
    if (t.omega_u.size() > t.n_users) t.omega_u.resize(t.n_users);
    set = std::make_unique<trainer::LtsSimulatorSet>(cfg.task.spec, std::vector<lts::SimulatorSpec>{t});
  } else {
    set = std::make_unique<trainer::LtsSimulatorSet>(cfg.task.spec, te.training, cfg.task.spec.resample_omega_u);
  }

  fs::create_directories(dir);
  json meta;
  meta["variant"] = cfg.variant;
  meta["agent_variant"] = agent::to_string(v);
  meta["agent"] = agent_json(ac);
  meta["latent_dim"] = ac.latent_dim;
  meta["sadae"] = sadae_model_json(cfg.sadae.model);
  meta["seed"] = seed;
  meta["source"] = cfg.policy.source;
  write_text(dir / "policy.json", meta.dump(2) + "\n");

  const trainer::EvalTarget target{cfg.task.spec, te.target, cfg.eval.seeds};
  const std::string tag = cfg.variant + " seed " + std::to_string(seed);
  PolicyRun run;
  run.dir = dir;
  run.result = trainer::train(*set, target, ag, model ? &*model : nullptr, tc, dir,
                              [&](const trainer::MetricsRow& r) {
                                if (std::isfinite(r.target_return)) {
                                  std::ostringstream ss;
                                  ss << tag << " iteration " << r.iteration << " train " << r.train_return
                                     << " target " << r.target_return;
                                  log_line(ss.str());
                                }
                              });
  write_file(dir / "metrics.csv", [&](std::ostream& os) { trainer::write_metrics_csv(os, run.result.rows); });
  return run;
}

LoadedPolicy load_policy(const fs::path& ckpt_dir) {
  const fs::path meta_path = ckpt_dir.parent_path() / "policy.json";
  if (!fs::exists(ckpt_dir / "agent.ckpt")) throw ConfigError("no agent checkpoint in " + ckpt_dir.string());
  if (!fs::exists(meta_path)) throw ConfigError("missing " + meta_path.string());
  const json meta = json::parse(read_text(meta_path));
  agent::AgentConfig ac;
  read_agent(meta.at("agent"), ac);
  ac.variant = agent::parse_variant(meta.at("agent_variant").get<std::string>());
  ac.latent_dim = meta.at("latent_dim").get<int>();
  LoadedPolicy out{agent::Agent(ac, 0), std::nullopt, meta.at("variant").get<std::string>()};
  out.agent.restore(nn::read_checkpoint(ckpt_dir / "agent.ckpt"));
  if (ac.uses_latent()) {
    if (!fs::exists(ckpt_dir / "sadae.ckpt")) throw ConfigError("no SADAE checkpoint in " + ckpt_dir.string());
    out.sadae.emplace(sadae_model_from(meta.at("sadae")), 0);
    out.sadae->restore(nn::read_checkpoint(ckpt_dir / "sadae.ckpt"));
  }
  return out;
}

// ---- commands ---------------------------------------------------------------------------

std::vector<fs::path> cmd_gen_logs(RunDir& run, const RunConfig& cfg, const CommandOptions& opt) {
  const fs::path out = run.path("logs.csv");
  refuse_existing(out, opt.force);
  const auto te = task_ensemble(cfg);
  const ens::LoggedDataset d = ens::generate_logs(cfg.task.spec, te.training,
                                                  {cfg.logs.behavior_lo, cfg.logs.behavior_hi},
                                                  cfg.logs.episodes, cfg.logs.seed);
  write_file(out, [&](std::ostream& os) { ens::write_logged_csv(os, d); });
  log_line("wrote " + std::to_string(d.size()) + " logged transitions to " + out.string());
  return {out};
}

std::vector<fs::path> cmd_train_sadae(RunDir& run, const RunConfig& cfg, const CommandOptions& opt) {
  const fs::path ckpt = run.path("sadae.ckpt");
  const fs::path hist = run.path("sadae_history.csv");
  sadae::Sadae model = make_sadae(cfg);
  sadae::TrainConfig tc = cfg.sadae.train;
  tc.seed = cfg.sadae.seed;
  tc.obs_variance = cfg.task.spec.obs_variance;
  std::vector<sadae::HistoryRow> previous;
  if (fs::exists(ckpt) && !opt.force) {
    const nn::Checkpoint c = nn::read_checkpoint(ckpt);
    model.restore(c);
    tc.start_epoch = json::parse(c.metadata).at("epoch").get<int>();
    if (fs::exists(hist)) {
      std::ifstream in(hist);
      const CsvTable t = read_csv(in);
      for (const auto& row : t.rows) {
        sadae::HistoryRow r;
        r.epoch = static_cast<int>(parse_int(row[t.column("epoch")]));
        r.train_elbo = parse_double(row[t.column("train_elbo")]);
        r.test_kld = parse_double(row[t.column("test_kld")]);
        r.train_kld = parse_double(row[t.column("train_kld")]);
        previous.push_back(r);
      }
    }
    tc.epochs = std::max(0, cfg.sadae.train.epochs - tc.start_epoch);
    log_line("resuming SADAE training at epoch " + std::to_string(tc.start_epoch));
    if (tc.epochs == 0) return {ckpt, hist};
  }
  std::vector<sadae::GroupSeries> train;
  if (cfg.sadae.source == "logs") {
    train = ens::group_series(load_logs(run.path("logs.csv")));
  } else {
    train = sadae_training_series(cfg);
  }
  const std::vector<sadae::GroupSeries> test{sadae_test_series(cfg)};
  sadae::TrainHistory h = sadae::train_sadae(model, train, test, tc, [&](int epoch, const sadae::Sadae&) {
    if (epoch % (10 * tc.eval_every) == 0) log_line("SADAE epoch " + std::to_string(epoch));
  });
  if (h.aborted) throw StageError("SADAE training aborted: " + h.abort_reason);
  sadae::TrainHistory all;
  all.rows = previous;
  for (const auto& r : h.rows) {
    if (previous.empty() || r.epoch > previous.back().epoch) all.rows.push_back(r);
  }
  json meta;
  meta["kind"] = "sadae";
  meta["epoch"] = tc.start_epoch + h.epochs_done;
  meta["model"] = sadae_model_json(cfg.sadae.model);
  nn::write_checkpoint(ckpt, model.snapshot(meta.dump()));
  write_file(hist, [&](std::ostream& os) { sadae::write_history_csv(os, all); });
  if (!all.rows.empty()) {
    std::ostringstream ss;
    ss << "SADAE held-out KLD " << all.rows.back().test_kld << " at epoch " << all.rows.back().epoch;
    log_line(ss.str());
  }
  return {ckpt, hist};
}

std::vector<fs::path> cmd_train_policy(RunDir& run, const RunConfig& cfg, const CommandOptions& opt) {
  std::vector<fs::path> out;
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path dir = policy_dir(run.root(), cfg.variant, seed);
    refuse_existing(dir / "metrics.csv", opt.force);
    if (opt.force) fs::remove_all(dir);
  }
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path dir = policy_dir(run.root(), cfg.variant, seed);
    PolicyRun r = train_policy_seed(cfg, seed, dir, run.path("sadae.ckpt"), run.path("ensemble"),
                                    run.path("logs.csv"));
    out.push_back(dir / "metrics.csv");
    for (const auto& c : r.result.checkpoints) out.push_back(c);
  }
  const fs::path agg = run.path("policy/" + cfg.variant + "/aggregate.csv");
  write_file(agg, [&](std::ostream& os) {
    CsvWriter w(os, {"variant", "metric", "iteration", "mean", "stderr", "min", "max", "n"});
    write_curves(w, cfg.variant, seed_dirs(run.root(), cfg.variant));
  });
  out.push_back(agg);
  return out;
}

std::vector<fs::path> cmd_train_ensemble(RunDir& run, const RunConfig& cfg, const CommandOptions& opt) {
  const fs::path dir = run.path("ensemble");
  const fs::path report = run.path("ensemble_heldout.csv");
  refuse_existing(dir, opt.force);
  if (opt.force) fs::remove_all(dir);
  const ens::LoggedDataset logs = load_logs(run.path("logs.csv"));
  std::vector<ens::Lambda> lambdas = ens::default_lambdas(logs.groups(), cfg.ensemble.members, cfg.ensemble.seed);
  for (auto& l : lambdas) {
    const ens::Lambda base = cfg.ensemble.base;
    l.user_fraction = base.user_fraction;
    l.lr = base.lr;
    l.steps = base.steps;
    l.batch = base.batch;
    l.hidden = base.hidden;
  }
  const ens::Ensemble e = ens::build_omega_prime(logs, lambdas);
  e.save(dir);
  json records = json::array();
  for (const auto& l : lambdas) records.push_back(json::parse(l.describe()));
  write_text(dir / "lambdas.json", records.dump(2) + "\n");
  write_file(report, [&](std::ostream& os) {
    CsvWriter w(os, {"member", "held_out_group", "rows", "mse_reward", "baseline_reward", "mse_sat",
                     "baseline_sat", "beats_baseline"});
    for (std::size_t j = 0; j < e.size(); ++j) {
      std::vector<std::size_t> rows;
      for (std::size_t k = 0; k < logs.size(); ++k) {
        if (logs.rows[k].group == lambdas[j].held_out_group) rows.push_back(k);
      }
      const ens::HeldOutError h = ens::held_out_error(e.member(j), logs, rows);
      w.row(j, lambdas[j].held_out_group, h.rows, h.model_mse[0], h.baseline_mse[0], h.model_mse[1],
            h.baseline_mse[1], h.beats_baseline());
    }
  });
  return {dir, report};
}

std::vector<fs::path> cmd_evaluate(RunDir& run, const RunConfig& cfg, const CommandOptions& opt) {
  std::vector<fs::path> ckpts = opt.checkpoints;
  if (ckpts.empty()) {
    for (const auto& v : policy_variants(run.root())) {
      for (const auto& d : seed_dirs(run.root(), v)) {
        if (auto c = latest_checkpoint(d)) ckpts.push_back(*c);
      }
    }
  }
  if (ckpts.empty()) throw ConfigError("evaluate: no checkpoints given or found under " + run.root().string());
  const auto te = task_ensemble(cfg);
  eval::EvalConfig ec;
  ec.gamma = cfg.train.gamma;
  ec.episodes = cfg.eval.episodes;
  ec.seeds = cfg.eval.seeds;

  std::map<std::string, std::vector<double>> by_variant;
  const fs::path table = run.path("evaluation.csv");
  write_file(table, [&](std::ostream& os) {
    CsvWriter w(os, {"variant", "seed", "checkpoint", "status", "return", "stderr", "undiscounted"});
    for (const auto& c : ckpts) {
      const std::string seed_name = c.parent_path().filename().string();
      const std::string seed = seed_name.rfind("seed_", 0) == 0 ? seed_name.substr(5) : "";
      if (!fs::exists(c / "agent.ckpt")) {
        const double nan = std::nan("");
        w.row(c.parent_path().parent_path().filename().string(), seed, c.string(), std::string("absent"), nan, nan, nan);
        continue;
      }
      LoadedPolicy p = load_policy(c);
      agent::AgentPolicy pol(p.agent, p.sadae ? &*p.sadae : nullptr, true, stream_seed(0, kTagEval));
      const eval::EvalResult r = eval::evaluate_policy(pol, cfg.task.spec, te.target, ec);
      by_variant[p.variant].push_back(r.mean);
      w.row(p.variant, seed, c.string(), std::string("ok"), r.mean, r.stderr_, r.mean_undiscounted);
    }
  });
  const fs::path summary = run.path("evaluation_summary.csv");
  write_file(summary, [&](std::ostream& os) {
    CsvWriter w(os, {"variant", "mean", "stderr", "min", "max", "n"});
    for (const auto& [v, vals] : by_variant) {
      const eval::Summary s = eval::summarize(vals);
      w.row(v, s.mean, s.stderr_, s.min, s.max, s.n);
    }
  });
  const fs::path curves = run.path("curves.csv");
  write_file(curves, [&](std::ostream& os) {
    CsvWriter w(os, {"variant", "metric", "iteration", "mean", "stderr", "min", "max", "n"});
    for (const auto& v : policy_variants(run.root())) write_curves(w, v, seed_dirs(run.root(), v));
  });
  return {table, summary, curves};
}

std::vector<fs::path> cmd_intervention(RunDir& run, const RunConfig& cfg, const CommandOptions& opt) {
  std::vector<std::string> missing;
  if (!fs::exists(run.path("logs.csv"))) missing.push_back("logs.csv (run gen-logs)");
  if (!fs::exists(run.path("ensemble/member_0.ckpt"))) missing.push_back("ensemble/ (run train-ensemble)");
  if (!missing.empty()) {
    std::string msg = "intervention: missing inputs:";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }
  const fs::path centers = run.path("intervention_centers.csv");
  const fs::path patterns = run.path("intervention_patterns.csv");
  const fs::path removed = run.path("trend_removed.csv");
  refuse_existing(centers, opt.force);
  const ens::LoggedDataset logs = load_logs(run.path("logs.csv"));
  const ens::Ensemble e = load_ensemble(run.path("ensemble"));
  const auto grid = ens::default_delta_grid();
  const ens::InterventionReport rep = ens::intervention_test(e, logs, grid, cfg.ensemble.clusters, cfg.ensemble.seed);
  std::ostringstream cs, ps;
  ens::write_intervention_csv(cs, ps, rep);
  write_text(centers, cs.str());
  write_text(patterns, ps.str());
  try {
    const ens::TrendResult tr = ens::f_trend(e, logs, grid);
    write_file(removed, [&](std::ostream& os) { ens::write_removal_csv(os, tr); });
    log_line("trend filter removes " + std::to_string(tr.removed.size()) + " users");
  } catch (const ConfigError& err) {
    throw StageError(err.what());
  }
  return {centers, patterns, removed};
}

std::vector<fs::path> cmd_pca(RunDir& run, const RunConfig& cfg, const CommandOptions& opt) {
  const fs::path ckpt = run.path("sadae.ckpt");
  if (!fs::exists(ckpt)) throw ConfigError("pca: missing inputs: sadae.ckpt (run train-sadae)");
  const fs::path proj = run.path("pca.csv");
  const fs::path energy = run.path("pca_energy.csv");
  refuse_existing(proj, opt.force);
  sadae::Sadae model = make_sadae(cfg);
  model.restore(nn::read_checkpoint(ckpt));
  const auto series = sadae_training_series(cfg);
  std::vector<double> labels;
  for (const auto& s : series) labels.push_back(s.omega_g);
  const eval::PcaReport rep = eval::pca_report(latent_means(model, series), labels);
  write_file(proj, [&](std::ostream& os) {
    CsvWriter w(os, {"simulator", "omega_g", "pc1", "pc2"});
    for (std::size_t i = 0; i < series.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      w.row(series[i].group, labels[i], rep.projection(r, 0), rep.projection(r, 1));
    }
  });
  write_file(energy, [&](std::ostream& os) {
    CsvWriter w(os, {"component", "eigenvalue", "cumulative_energy", "spearman_pc1"});
    for (std::size_t k = 0; k < rep.eigenvalues.size(); ++k) {
      w.row(k + 1, rep.eigenvalues[k], rep.energy_ratio[k], rep.spearman_first);
    }
  });
  std::ostringstream ss;
  ss << "PC1 energy " << (rep.energy_ratio.empty() ? 0.0 : rep.energy_ratio[0]) << ", Spearman "
     << rep.spearman_first;
  log_line(ss.str());
  return {proj, energy};
}

std::vector<fs::path> cmd_probe(RunDir& run, const RunConfig& cfg, const CommandOptions& opt) {
  const fs::path out = run.path("probe.csv");
  refuse_existing(out, opt.force);
  const auto series = sadae_training_series(cfg);
  // Probe items: a few evenly spaced steps of every simulator.
  struct Item {
    std::size_t series;
    std::size_t step;
  };
  std::vector<Item> items;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const std::size_t n = series[s].steps.size();
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(cfg.sadae.probe_steps), n);
    for (std::size_t q = 0; q < k; ++q) items.push_back({s, q * (n - 1) / std::max<std::size_t>(1, k - 1)});
  }
  constexpr Eigen::Index kKdeRows = 200;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> targets;
  for (std::size_t a = 0; a < items.size(); ++a) {
    for (std::size_t b = a + 1; b < items.size(); ++b) {
      const auto& xa = series[items[a].series].steps[items[a].step].states;
      const auto& xb = series[items[b].series].steps[items[b].step].states;
      const eval::KdeKld k = eval::kde_kld(xa.topRows(std::min(kKdeRows, xa.rows())),
                                           xb.topRows(std::min(kKdeRows, xb.rows())));
      if (k.floored) continue;
      pairs.emplace_back(a, b);
      targets.push_back(k.value);
    }
  }
  if (pairs.size() < 8) throw StageError("probe: too few valid divergence pairs");

  sadae::Sadae model = make_sadae(cfg);
  sadae::TrainConfig tc = cfg.sadae.train;
  tc.seed = cfg.sadae.seed;
  tc.eval_every = cfg.sadae.probe_every;
  tc.obs_variance = cfg.task.spec.obs_variance;
  std::vector<std::vector<double>> rows;
  eval::ProbeConfig pc;
  pc.seed = cfg.sadae.seed;
  const auto probe = [&](int epoch, const sadae::Sadae& m) {
    const int d = m.config().latent_dim;
    nn::Matrix emb(static_cast<Eigen::Index>(items.size()), d);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto post = m.posterior(series[items[i].series].steps[items[i].step]);
      for (int k = 0; k < d; ++k) emb(static_cast<Eigen::Index>(i), k) = post.mean[static_cast<std::size_t>(k)];
    }
    nn::Matrix ei(static_cast<Eigen::Index>(pairs.size()), d), ej(static_cast<Eigen::Index>(pairs.size()), d);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      ei.row(static_cast<Eigen::Index>(p)) = emb.row(static_cast<Eigen::Index>(pairs[p].first));
      ej.row(static_cast<Eigen::Index>(p)) = emb.row(static_cast<Eigen::Index>(pairs[p].second));
    }
    const eval::ProbeResult r = eval::embedding_probe(ei, ej, targets, pc);
    rows.push_back({static_cast<double>(epoch), r.train_mae, r.test_mae});
  };
  const std::vector<sadae::GroupSeries> test{sadae_test_series(cfg)};
  const sadae::TrainHistory h = sadae::train_sadae(model, series, test, tc, probe);
  if (h.aborted) throw StageError("probe: SADAE training aborted: " + h.abort_reason);
  write_file(out, [&](std::ostream& os) {
    CsvWriter w(os, {"epoch", "train_mae", "test_mae"});
    for (const auto& r : rows) w.row(static_cast<int>(r[0]), r[1], r[2]);
  });
  return {out};
}

std::vector<std::string> audit_run(const fs::path& root) {
  std::vector<std::string> problems;
  if (!fs::is_directory(root)) return {"run directory " + root.string() + " does not exist"};
  if (!fs::exists(root / kConfigFile)) problems.push_back("config copy " + std::string(kConfigFile) + " is missing");
  if (!fs::exists(root / kManifestFile)) {
    problems.push_back("manifest " + std::string(kManifestFile) + " is missing");
  } else {
    std::ifstream in(root / kManifestFile);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception&) {
        problems.push_back("manifest line " + std::to_string(n) + " is not valid JSON");
        continue;
      }
      for (const auto& a : j.value("artifacts", std::vector<std::string>{})) {
        if (!fs::exists(root / a)) problems.push_back("artifact " + a + " listed in the manifest is missing");
      }
    }
    if (n == 0) problems.push_back("manifest is empty");
  }
  bool metrics = false, checkpoints = false;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    const std::string name = e.path().filename().string();
    if (name == "metrics.csv" || name == "sadae_history.csv" || name == "ensemble_heldout.csv") metrics = true;
    if (e.path().extension() == ".ckpt") checkpoints = true;
  }
  if (!metrics) problems.push_back("no metrics or history CSV");
  if (!checkpoints) problems.push_back("no checkpoints");
  if (fs::exists(root / kLockFile)) {
    long owner = 0;
    std::ifstream in(root / kLockFile);
    in >> owner;
    if (owner > 0 && ::kill(static_cast<pid_t>(owner), 0) != 0) problems.push_back("stale lock file");
  }
  return problems;
}

}  // namespace sim2rec::cli
