#pragma once

// Experiment orchestration: run configuration, run directories and one entry
// point per pipeline stage. main.cpp only parses flags and maps errors to exit
// codes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sim2rec/agent.hpp"
#include "sim2rec/lts_env.hpp"
#include "sim2rec/sadae.hpp"
#include "sim2rec/sim_ensemble.hpp"
#include "sim2rec/trainer.hpp"

namespace sim2rec::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStage = 3;

struct TaskBlock {
  lts::TaskSpec spec = lts::TaskSpec::preset(lts::TaskId::kLts3);
  std::uint64_t seed = 1;          // simulator construction
  std::size_t eval_users = 750;    // target population size
};

struct LogsBlock {
  int episodes = 1;
  double behavior_lo = 0.2;
  double behavior_hi = 0.8;
  std::uint64_t seed = 7;
};

struct SadaeBlock {
  sadae::SadaeConfig model;
  sadae::TrainConfig train;
  std::size_t users_per_group = 1000;
  std::string source = "task";  // "task" or "logs"
  std::uint64_t seed = 3;
  int probe_every = 100;
  int probe_steps = 5;          // time steps per simulator in the probe set
};

struct EnsembleBlock {
  int members = 15;
  ens::Lambda base;             // seed and held-out group are set per member
  std::uint64_t seed = 11;
  int horizon = 5;
  double alpha = 0.01;
  bool trend_filter = true;
  bool exec_filter = true;
  int exec_window = 14;
  int clusters = 5;
  double r_min_percentile = 0.0;
};

struct PolicyBlock {
  std::string source = "task";    // "task" (LTS simulators) or "ensemble"
  bool joint_from_scratch = false;  // SIM2REC without a pretrained SADAE
  std::size_t upper_users = 200;  // target users UPPER trains on
};

struct EvalBlock {
  std::vector<std::uint64_t> seeds{0};
  int episodes = 1;
};

struct RunConfig {
  TaskBlock task;
  std::string variant = "SIM2REC";  // SIM2REC, DR_OSI, DR_UNI, DIRECT or UPPER
  bool desk = false;
  agent::AgentConfig agent;  // variant field is filled from `variant`
  trainer::TrainConfig train;
  SadaeBlock sadae;
  LogsBlock logs;
  EnsembleBlock ensemble;
  PolicyBlock policy;
  EvalBlock eval;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  fs::path output_dir = "run";

  // Full network sizes, or the reduced preset.
  static RunConfig full();
  static RunConfig desk_scale();

  void validate() const;
  agent::Variant agent_variant() const;  // UPPER maps to SIM2REC
  bool is_upper() const { return variant == "UPPER"; }
};

nlohmann::json to_json(const RunConfig& c);
// Missing keys keep the values of `base`; unknown keys are configuration errors.
RunConfig from_json(const nlohmann::json& j, const RunConfig& base);

// 64-bit FNV-1a over the bytes, as 16 hex digits.
std::string content_hash(const std::string& bytes);
std::string code_version();

// A run directory owned by one process through an exclusive lock file. The
// config text is copied verbatim; the manifest is append-only JSON lines.
class RunDir {
 public:
  RunDir(const fs::path& root, const std::string& config_text);
  ~RunDir();
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const fs::path& root() const { return root_; }
  fs::path path(const std::string& rel) const { return root_ / rel; }
  void record(const std::string& stage, double wall_seconds, const std::vector<fs::path>& artifacts);

 private:
  fs::path root_;
  std::string config_hash_;
  bool locked_ = false;
};

inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kManifestFile = "manifest.jsonl";
inline constexpr const char* kLockFile = "run.lock";

struct CommandOptions {
  bool force = false;
  std::vector<fs::path> checkpoints;  // evaluate
};

// Each returns the artifacts written. Outputs that already exist are refused
// unless options.force is set (train-sadae resumes instead).
std::vector<fs::path> cmd_gen_logs(RunDir& run, const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_train_sadae(RunDir& run, const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_train_policy(RunDir& run, const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_train_ensemble(RunDir& run, const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_evaluate(RunDir& run, const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_intervention(RunDir& run, const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_pca(RunDir& run, const RunConfig& cfg, const CommandOptions& opt);
std::vector<fs::path> cmd_probe(RunDir& run, const RunConfig& cfg, const CommandOptions& opt);

// Lists what a complete run directory lacks; empty means the audit passed.
std::vector<std::string> audit_run(const fs::path& root);

// Helpers shared with the acceptance suite.
lts::TaskEnsemble task_ensemble(const RunConfig& cfg);
sadae::Sadae make_sadae(const RunConfig& cfg);
std::vector<sadae::GroupSeries> sadae_training_series(const RunConfig& cfg);
sadae::GroupSeries sadae_test_series(const RunConfig& cfg);
// Per-simulator latent means: posterior means averaged over the series steps.
nn::Matrix latent_means(const sadae::Sadae& model, const std::vector<sadae::GroupSeries>& series);
// Policy seed directory under the run: policy/<VARIANT>/seed_<s>.
fs::path policy_dir(const fs::path& root, const std::string& variant, std::uint64_t seed);

struct PolicyRun {
  trainer::TrainResult result;
  fs::path dir;
};
// Trains one seed of the configured variant; SADAE weights come from
// `sadae_ckpt` when given.
PolicyRun train_policy_seed(const RunConfig& cfg, std::uint64_t seed, const fs::path& dir,
                            const std::optional<fs::path>& sadae_ckpt,
                            const std::optional<fs::path>& ensemble_dir = std::nullopt,
                            const std::optional<fs::path>& logs_csv = std::nullopt);

struct LoadedPolicy {
  agent::Agent agent;
  std::optional<sadae::Sadae> sadae;
  std::string variant;
};
// Reads a checkpoint directory written by the trainer; the seed directory
// above it holds the network shapes.
LoadedPolicy load_policy(const fs::path& ckpt_dir);

}  // namespace sim2rec::cli
