#include "sim2rec/sim_ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "sim2rec/csv.hpp"
#include "sim2rec/errors.hpp"
#include "sim2rec/rng.hpp"

namespace sim2rec::ens {

namespace {

constexpr std::uint64_t kTagLogs = 0x6c6f6773ULL;
constexpr std::uint64_t kTagMember = 0x6d656d626572ULL;
constexpr std::uint64_t kTagSubset = 0x737562ULL;
constexpr std::uint64_t kTagBatch = 0x6261746368ULL;
constexpr std::uint64_t kTagStart = 0x7374617274ULL;
constexpr std::uint64_t kTagStep = 0x73746570ULL;
constexpr std::uint64_t kTagKmeans = 0x6b6d65616e73ULL;

constexpr double kSatFloor = 1e-4;

std::vector<int> sizes_with_ends(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> s{in};
  s.insert(s.end(), hidden.begin(), hidden.end());
  s.push_back(out);
  return s;
}

// Last logged row of every trajectory.
std::vector<std::pair<UserKey, std::size_t>> last_rows(const LoggedDataset& data) {
  std::vector<std::pair<UserKey, std::size_t>> out;
  for (const auto& [key, idx] : data.trajectories()) out.emplace_back(key, idx.back());
  return out;
}

double ols_slope(const std::vector<double>& x, const double* y, std::size_t n) {
  // Responses are taken relative to the first one so a flat curve gives an exact zero.
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i] - y[0];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - y[0] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0 ? sxy / sxx : 0.0;
}

}  // namespace

// ---- logged data ---------------------------------------------------------------------

void LoggedDataset::validate() const {
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k];
    if (!(r.action >= 0.0 && r.action <= 1.0)) {
      throw ConfigError("logged action outside [0,1] at row " + std::to_string(k));
    }
    if (k > 0) {
      const auto& p = rows[k - 1];
      const bool same = p.group == r.group && p.user == r.user;
      if (same && r.t != p.t + 1) {
        throw ConfigError("logged trajectory of group " + std::to_string(r.group) + " user " +
                          std::to_string(r.user) + " is not time-contiguous");
      }
      if (!same && std::make_pair(p.group, p.user) > std::make_pair(r.group, r.user)) {
        throw ConfigError("logged rows must be ordered by (group, user, t)");
      }
    }
  }
}

std::vector<int> LoggedDataset::groups() const {
  std::set<int> s;
  for (const auto& r : rows) s.insert(r.group);
  return {s.begin(), s.end()};
}

std::map<UserKey, std::vector<std::size_t>> LoggedDataset::trajectories() const {
  std::map<UserKey, std::vector<std::size_t>> out;
  for (std::size_t k = 0; k < rows.size(); ++k) out[{rows[k].group, rows[k].user}].push_back(k);
  return out;
}

LoggedDataset generate_logs(const lts::TaskSpec& task, const std::vector<lts::SimulatorSpec>& specs,
                            const lts::BehaviorPolicy& behavior, int episodes, std::uint64_t seed) {
  if (episodes < 0) throw ConfigError("generate_logs: negative episode count");
  LoggedDataset data;
  std::ostringstream tag;
  tag << "uniform(" << behavior.lo << "," << behavior.hi << ")";
  data.behavior = tag.str();
  for (const auto& spec : specs) {
    lts::UserGroup group = lts::instantiate(task, spec);
    const std::size_t n = group.size();
    std::vector<lts::TrajectoryRow> all;
    for (int e = 0; e < episodes; ++e) {
      auto rows = lts::run_behavior_episode(
          group, behavior, stream_seed(seed, kTagLogs, static_cast<std::uint64_t>(spec.id),
                                       static_cast<std::uint64_t>(e)));
      for (auto& r : rows) r.user += static_cast<std::size_t>(e) * n;
      all.insert(all.end(), rows.begin(), rows.end());
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return std::tie(a.user, a.t) < std::tie(b.user, b.t);
    });
    data.rows.insert(data.rows.end(), all.begin(), all.end());
  }
  std::stable_sort(data.rows.begin(), data.rows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.group, a.user, a.t) < std::tie(b.group, b.user, b.t);
  });
  return data;
}

void write_logged_csv(std::ostream& os, const LoggedDataset& data) {
  CsvWriter w(os, {"group", "user", "t", "sat", "o", "a", "y", "r"});
  for (const auto& r : data.rows) w.row(r.group, r.user, r.t, r.sat, r.o, r.action, r.sat_next, r.reward);
}

LoggedDataset read_logged_csv(std::istream& is, const std::string& behavior) {
  const CsvTable t = read_csv(is);
  const std::size_t cg = t.column("group"), cu = t.column("user"), ct = t.column("t"),
                    cs = t.column("sat"), co = t.column("o"), ca = t.column("a"),
                    cy = t.column("y"), cr = t.column("r");
  LoggedDataset d;
  d.behavior = behavior;
  d.rows.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    lts::TrajectoryRow r;
    r.group = static_cast<int>(parse_int(row[cg]));
    r.user = static_cast<std::size_t>(parse_int(row[cu]));
    r.t = static_cast<int>(parse_int(row[ct]));
    r.sat = parse_double(row[cs]);
    r.o = parse_double(row[co]);
    r.action = parse_double(row[ca]);
    r.sat_next = parse_double(row[cy]);
    r.reward = parse_double(row[cr]);
    d.rows.push_back(r);
  }
  // The last logged step of each trajectory ends its episode.
  for (std::size_t k = 0; k < d.rows.size(); ++k) {
    d.rows[k].done = k + 1 == d.rows.size() || d.rows[k + 1].group != d.rows[k].group ||
                     d.rows[k + 1].user != d.rows[k].user;
  }
  d.validate();
  return d;
}

std::vector<sadae::GroupSeries> group_series(const LoggedDataset& data) {
  std::map<int, std::map<int, std::vector<lts::Observation>>> by_group;
  for (const auto& r : data.rows) by_group[r.group][r.t].push_back({r.sat, r.o});
  std::vector<sadae::GroupSeries> out;
  for (const auto& [g, steps] : by_group) {
    sadae::GroupSeries s;
    s.group = g;
    s.omega_g = std::nan("");
    s.mu_c = std::nan("");
    for (const auto& [t, obs] : steps) s.steps.push_back(sadae::batch_from_observations(obs, g, t));
    out.push_back(std::move(s));
  }
  return out;
}

// ---- learned simulators -------------------------------------------------------------

std::string Lambda::describe() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["held_out_group"] = held_out_group;
  j["user_fraction"] = user_fraction;
  j["lr"] = lr;
  j["steps"] = steps;
  j["batch"] = batch;
  j["hidden"] = hidden;
  return j.dump();
}

namespace {

Lambda lambda_from_json(const nlohmann::json& j) {
  Lambda l;
  l.seed = j.at("seed").get<std::uint64_t>();
  l.held_out_group = j.at("held_out_group").get<int>();
  l.user_fraction = j.at("user_fraction").get<double>();
  l.lr = j.at("lr").get<double>();
  l.steps = j.at("steps").get<int>();
  l.batch = j.at("batch").get<int>();
  l.hidden = j.at("hidden").get<std::vector<int>>();
  return l;
}

}  // namespace

LearnedSimulator::LearnedSimulator(const Lambda& lambda, Matrix y_center, Matrix y_scale)
    : lambda_(lambda), center_(std::move(y_center)), scale_(std::move(y_scale)) {
  if (center_.cols() != kFeedbackDim || scale_.cols() != kFeedbackDim) {
    throw ConfigError("learned simulator: feedback normalization must have two columns");
  }
  Rng rng(stream_seed(lambda.seed, kTagMember));
  net_ = nn::Mlp(store_, "sim", sizes_with_ends(3, lambda.hidden, 2 * kFeedbackDim),
                 nn::Activation::kTanh, rng);
}

Matrix model_input(const Matrix& raw) {
  if (raw.cols() != 3) throw ConfigError("model_input: expected (SAT, o, a) rows");
  Matrix x(raw.rows(), 3);
  x.col(0) = (2.0 * raw.col(0).array() - 1.0).matrix();
  x.col(1) = ((raw.col(1).array() - lts::kObsCenter) / lts::kObsScale).matrix();
  x.col(2) = (2.0 * raw.col(2).array() - 1.0).matrix();
  return x;
}

nn::Var LearnedSimulator::forward(nn::Graph& g, const Matrix& inputs) const {
  return net_.forward(g, store_, g.constant(model_input(inputs)));
}

void LearnedSimulator::predict(const Matrix& inputs, Matrix* mean, Matrix* stddev) const {
  nn::Graph g;
  const Matrix out = forward(g, inputs).value();
  if (mean) {
    *mean = (out.leftCols(kFeedbackDim).array().rowwise() * scale_.row(0).array()).matrix();
    mean->rowwise() += center_.row(0);
  }
  if (stddev) {
    *stddev = (out.rightCols(kFeedbackDim).array().max(-5.0).min(2.0).exp().rowwise() *
               scale_.row(0).array())
                  .matrix();
  }
}

Matrix LearnedSimulator::predict_mean(const Matrix& inputs) const {
  Matrix m;
  predict(inputs, &m, nullptr);
  return m;
}

nn::Checkpoint LearnedSimulator::snapshot() const {
  nlohmann::json meta;
  meta["kind"] = "learned_simulator";
  meta["lambda"] = nlohmann::json::parse(lambda_.describe());
  nn::Checkpoint c = nn::snapshot(store_, meta.dump());
  c.arrays.push_back({"y_center", center_});
  c.arrays.push_back({"y_scale", scale_});
  return c;
}

LearnedSimulator LearnedSimulator::from_checkpoint(const nn::Checkpoint& ckpt) {
  const auto meta = nlohmann::json::parse(ckpt.metadata);
  if (meta.value("kind", "") != "learned_simulator") {
    throw ConfigError("checkpoint does not hold a learned simulator");
  }
  Matrix center, scale;
  nn::Checkpoint weights;
  weights.metadata = ckpt.metadata;
  for (const auto& a : ckpt.arrays) {
    if (a.name == "y_center") center = a.value;
    else if (a.name == "y_scale") scale = a.value;
    else weights.arrays.push_back(a);
  }
  LearnedSimulator sim(lambda_from_json(meta.at("lambda")), center, scale);
  nn::restore(sim.store_, weights);
  return sim;
}

void design_matrices(const LoggedDataset& data, const std::vector<std::size_t>& rows, Matrix* inputs,
                     Matrix* targets) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  inputs->resize(n, 3);
  targets->resize(n, kFeedbackDim);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& r = data.rows.at(rows[static_cast<std::size_t>(k)]);
    (*inputs)(k, 0) = r.sat;
    (*inputs)(k, 1) = r.o;
    (*inputs)(k, 2) = r.action;
    (*targets)(k, 0) = r.reward;
    (*targets)(k, 1) = r.sat_next;
  }
}

std::vector<std::size_t> training_rows(const LoggedDataset& data, const Lambda& lambda) {
  if (!(lambda.user_fraction > 0.0 && lambda.user_fraction <= 1.0)) {
    throw ConfigError("training_rows: user fraction must lie in (0, 1]");
  }
  std::map<int, std::vector<const std::vector<std::size_t>*>> by_group;
  const auto traj = data.trajectories();
  for (const auto& [key, idx] : traj) {
    if (key.first == lambda.held_out_group) continue;
    by_group[key.first].push_back(&idx);
  }
  std::vector<std::size_t> out;
  for (auto& [g, users] : by_group) {
    Rng rng(stream_seed(lambda.seed, kTagSubset, static_cast<std::uint64_t>(g)));
    std::vector<std::size_t> order(users.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    const auto take = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(lambda.user_fraction * static_cast<double>(users.size()))));
    order.resize(std::min(take, order.size()));
    std::sort(order.begin(), order.end());
    for (std::size_t u : order) out.insert(out.end(), users[u]->begin(), users[u]->end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

LearnedSimulator learn_simulator(const LoggedDataset& data, const std::vector<std::size_t>& rows,
                                 const Lambda& lambda, std::size_t min_transitions) {
  if (rows.size() < std::max<std::size_t>(min_transitions, 2)) {
    throw ConfigError("learn_simulator: " + std::to_string(rows.size()) +
                      " transitions, fewer than the required " + std::to_string(min_transitions));
  }
  if (lambda.steps < 0 || lambda.batch < 1 || !(lambda.lr > 0.0)) {
    throw ConfigError("learn_simulator: invalid hyperparameters " + lambda.describe());
  }
  Matrix x, y;
  design_matrices(data, rows, &x, &y);
  Matrix center = y.colwise().mean();
  Matrix scale = ((y.rowwise() - center.row(0)).array().square().colwise().mean().sqrt()).matrix();
  for (Eigen::Index c = 0; c < scale.cols(); ++c) scale(0, c) = std::max(scale(0, c), 1e-6);
  const Matrix yn = ((y.rowwise() - center.row(0)).array().rowwise() / scale.row(0).array()).matrix();

  LearnedSimulator sim(lambda, center, scale);
  Rng rng(stream_seed(lambda.seed, kTagBatch));
  const auto n = static_cast<std::size_t>(x.rows());
  const auto b = static_cast<Eigen::Index>(std::min<std::size_t>(static_cast<std::size_t>(lambda.batch), n));
  Matrix xb(b, 3), yb(b, kFeedbackDim);
  for (int step = 0; step < lambda.steps; ++step) {
    for (Eigen::Index k = 0; k < b; ++k) {
      const auto i = static_cast<Eigen::Index>(rng.index(n));
      xb.row(k) = x.row(i);
      yb.row(k) = yn.row(i);
    }
    nn::Graph g;
    const nn::Var out = sim.forward(g, xb);
    const nn::Var mean = nn::slice_cols(out, 0, kFeedbackDim);
    const nn::Var ls = nn::clamp(nn::slice_cols(out, kFeedbackDim, kFeedbackDim), -5.0, 2.0);
    const nn::Var loss =
        nn::scale(nn::sum(nn::gaussian_log_prob(mean, ls, g.constant(yb))), -1.0 / static_cast<double>(b));
    if (!std::isfinite(loss.scalar())) {
      throw StageError("learned simulator diverged at step " + std::to_string(step) + " with " +
                       lambda.describe());
    }
    sim.store().zero_grad();
    g.backward(loss);
    try {
      nn::adam_step(sim.store(), lambda.lr);
    } catch (const NumericError& e) {
      throw StageError(std::string("learned simulator diverged: ") + e.what() + " with " +
                       lambda.describe());
    }
  }
  sim.store().zero_grad();
  return sim;
}

bool HeldOutError::beats_baseline() const {
  if (model_mse.empty()) return false;
  for (std::size_t c = 0; c < model_mse.size(); ++c) {
    if (!(model_mse[c] < baseline_mse[c])) return false;
  }
  return true;
}

HeldOutError held_out_error(const LearnedSimulator& sim, const LoggedDataset& data,
                            const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw ConfigError("held_out_error: no rows");
  Matrix x, y;
  design_matrices(data, rows, &x, &y);
  const Matrix pred = sim.predict_mean(x);
  HeldOutError e;
  e.rows = rows.size();
  const Matrix mean = y.colwise().mean();
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    e.model_mse.push_back((pred.col(c) - y.col(c)).squaredNorm() / static_cast<double>(y.rows()));
    e.baseline_mse.push_back((y.col(c).array() - mean(0, c)).square().mean());
  }
  return e;
}

// ---- ensembles ---------------------------------------------------------------------

std::vector<Lambda> default_lambdas(const std::vector<int>& groups, int members, std::uint64_t seed) {
  if (groups.empty()) throw ConfigError("default_lambdas: no groups");
  std::vector<Lambda> out;
  for (int j = 0; j < members; ++j) {
    Lambda l;
    l.seed = stream_seed(seed, kTagMember, static_cast<std::uint64_t>(j));
    l.held_out_group = groups[static_cast<std::size_t>(j) % groups.size()];
    out.push_back(l);
  }
  return out;
}

Ensemble::Ensemble(std::vector<LearnedSimulator> members) : members_(std::move(members)) {}

std::vector<double> uncertainty_from_means(const std::vector<Matrix>& means) {
  if (means.empty()) throw ConfigError("uncertainty: empty ensemble");
  const Matrix& first = means.front();
  Matrix avg = Matrix::Zero(first.rows(), first.cols());
  for (const auto& m : means) {
    if (m.rows() != first.rows() || m.cols() != first.cols()) {
      throw ConfigError("uncertainty: member predictions differ in shape");
    }
    avg += m;
  }
  avg /= static_cast<double>(means.size());
  Eigen::VectorXd u = Eigen::VectorXd::Zero(first.rows());
  for (const auto& m : means) u += (m - avg).rowwise().norm();
  u /= static_cast<double>(means.size());
  return {u.data(), u.data() + u.size()};
}

std::vector<double> Ensemble::uncertainty(const Matrix& inputs) const {
  std::vector<Matrix> means;
  means.reserve(members_.size());
  for (const auto& m : members_) means.push_back(m.predict_mean(inputs));
  return uncertainty_from_means(means);
}

void Ensemble::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (std::size_t j = 0; j < members_.size(); ++j) {
    nn::write_checkpoint(dir / ("member_" + std::to_string(j) + ".ckpt"), members_[j].snapshot());
  }
}

Ensemble Ensemble::load(const std::filesystem::path& dir) {
  std::vector<LearnedSimulator> members;
  for (std::size_t j = 0;; ++j) {
    const auto p = dir / ("member_" + std::to_string(j) + ".ckpt");
    if (!std::filesystem::exists(p)) break;
    members.push_back(LearnedSimulator::from_checkpoint(nn::read_checkpoint(p)));
  }
  if (members.empty()) throw ConfigError("no ensemble members under " + dir.string());
  return Ensemble(std::move(members));
}

Ensemble build_omega_prime(const LoggedDataset& data, const std::vector<Lambda>& lambdas,
                           std::size_t min_transitions) {
  if (lambdas.size() < 2) throw ConfigError("build_omega_prime: an ensemble needs at least 2 members");
  std::vector<LearnedSimulator> members;
  for (std::size_t j = 0; j < lambdas.size(); ++j) {
    try {
      members.push_back(learn_simulator(data, training_rows(data, lambdas[j]), lambdas[j], min_transitions));
    } catch (const ConfigError& e) {
      throw ConfigError("ensemble member " + std::to_string(j) + ": " + e.what());
    } catch (const StageError& e) {
      throw StageError("ensemble member " + std::to_string(j) + ": " + e.what());
    }
  }
  return Ensemble(std::move(members));
}

// ---- intervention test and filters ------------------------------------------------------------

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter) {
  const Eigen::Index n = points.rows();
  if (k < 1 || k > n) throw ConfigError("kmeans: cluster count must lie in [1, number of points]");
  Rng rng(stream_seed(seed, kTagKmeans));
  KMeansResult res;
  res.centers.resize(k, points.cols());
  // k-means++ seeding.
  res.centers.row(0) = points.row(static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n))));
  Eigen::VectorXd d2 = (points.rowwise() - res.centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      double u = rng.uniform(0.0, total);
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2(pick);
        if (u < 0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
    }
    res.centers.row(c) = points.row(pick);
    d2 = d2.cwiseMin((points.rowwise() - res.centers.row(c)).rowwise().squaredNorm());
  }
  res.labels.assign(static_cast<std::size_t>(n), -1);
  for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (res.centers.rowwise() - points.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (res.labels[static_cast<std::size_t>(i)] != static_cast<int>(best)) {
        res.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(res.labels[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(res.labels[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) res.centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
  }
  return res;
}

std::vector<double> default_delta_grid() {
  std::vector<double> g;
  for (int i = -5; i <= 5; ++i) g.push_back(i / 10.0);
  return g;
}

Matrix response_curves(const LearnedSimulator& sim, const LoggedDataset& data,
                       const std::vector<double>& grid, std::vector<UserKey>* users) {
  const auto last = last_rows(data);
  const auto n = static_cast<Eigen::Index>(last.size());
  const auto m = static_cast<Eigen::Index>(grid.size());
  Matrix in(n * m, 3);
  for (Eigen::Index u = 0; u < n; ++u) {
    const auto& r = data.rows[last[static_cast<std::size_t>(u)].second];
    for (Eigen::Index j = 0; j < m; ++j) {
      in(u * m + j, 0) = r.sat;
      in(u * m + j, 1) = r.o;
      in(u * m + j, 2) = std::clamp(r.action + grid[static_cast<std::size_t>(j)], 0.0, 1.0);
    }
  }
  const Matrix mean = sim.predict_mean(in);
  Matrix curves(n, m);
  for (Eigen::Index u = 0; u < n; ++u) {
    for (Eigen::Index j = 0; j < m; ++j) curves(u, j) = mean(u * m + j, 0);
  }
  if (users) {
    users->clear();
    for (const auto& [key, row] : last) users->push_back(key);
  }
  return curves;
}

InterventionReport intervention_test(const Ensemble& ensemble, const LoggedDataset& data,
                                     const std::vector<double>& grid, int k, std::uint64_t seed) {
  if (ensemble.size() == 0) throw ConfigError("intervention_test: empty ensemble");
  if (k < 2) throw ConfigError("intervention_test: need at least 2 clusters");
  if (grid.size() < 2) throw ConfigError("intervention_test: offset grid needs at least 2 points");
  std::vector<double> sorted = grid;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (std::abs(sorted[i] + sorted[sorted.size() - 1 - i]) > 1e-12) {
      throw ConfigError("intervention_test: offset grid must be symmetric around 0");
    }
  }
  InterventionReport rep;
  rep.grid = sorted;
  for (std::size_t j = 0; j < ensemble.size(); ++j) {
    std::vector<UserKey> users;
    const Matrix curves = response_curves(ensemble.member(j), data, rep.grid, &users);
    if (static_cast<Eigen::Index>(k) > curves.rows()) {
      throw ConfigError("intervention_test: " + std::to_string(k) + " clusters for " +
                        std::to_string(curves.rows()) + " users");
    }
    KMeansResult km = kmeans(curves, k, stream_seed(seed, j));
    const Eigen::VectorXd left = km.centers.col(0);
    km.centers.colwise() -= left;
    rep.centers.push_back(std::move(km.centers));
    rep.labels.push_back(std::move(km.labels));
    rep.users = std::move(users);
  }
  return rep;
}

void write_intervention_csv(std::ostream& centers, std::ostream& patterns,
                            const InterventionReport& report) {
  std::vector<std::string> header{"member", "cluster"};
  for (double d : report.grid) header.push_back("d" + format_number(d));
  CsvWriter cw(centers, header);
  for (std::size_t j = 0; j < report.centers.size(); ++j) {
    const Matrix& c = report.centers[j];
    for (Eigen::Index r = 0; r < c.rows(); ++r) {
      std::vector<double> vals{static_cast<double>(j), static_cast<double>(r)};
      for (Eigen::Index q = 0; q < c.cols(); ++q) vals.push_back(c(r, q));
      cw.row_values(vals);
    }
  }
  CsvWriter pw(patterns, {"member", "group", "user", "cluster"});
  for (std::size_t j = 0; j < report.labels.size(); ++j) {
    for (std::size_t u = 0; u < report.users.size(); ++u) {
      pw.row(j, report.users[u].first, report.users[u].second, report.labels[j][u]);
    }
  }
}

TrendResult f_trend(const Ensemble& ensemble, const LoggedDataset& data, const std::vector<double>& grid) {
  if (ensemble.size() == 0) throw ConfigError("f_trend: empty ensemble");
  if (grid.size() < 2) throw ConfigError("f_trend: offset grid needs at least 2 points");
  std::vector<UserKey> users;
  std::map<UserKey, std::string> removed;
  for (std::size_t j = 0; j < ensemble.size(); ++j) {
    const Matrix curves = response_curves(ensemble.member(j), data, grid, &users);
    for (Eigen::Index u = 0; u < curves.rows(); ++u) {
      std::vector<double> y(curves.cols());
      for (Eigen::Index q = 0; q < curves.cols(); ++q) y[static_cast<std::size_t>(q)] = curves(u, q);
      const double slope = ols_slope(grid, y.data(), y.size());
      const UserKey key = users[static_cast<std::size_t>(u)];
      if (slope <= 0.0 && !removed.count(key)) {
        removed[key] = "non-positive response slope " + format_number(slope) + " in member " +
                       std::to_string(j);
      }
    }
  }
  if (!users.empty() && removed.size() == users.size()) {
    throw ConfigError("f_trend removed every user; the monotone prior does not fit this data");
  }
  TrendResult res;
  for (const auto& [key, why] : removed) {
    res.removed.push_back(key);
    res.reasons.push_back(why);
  }
  res.kept.behavior = data.behavior;
  for (const auto& r : data.rows) {
    if (!removed.count({r.group, r.user})) res.kept.rows.push_back(r);
  }
  return res;
}

void write_removal_csv(std::ostream& os, const TrendResult& result) {
  CsvWriter w(os, {"group", "user", "reason"});
  for (std::size_t i = 0; i < result.removed.size(); ++i) {
    w.row(result.removed[i].first, result.removed[i].second, result.reasons[i]);
  }
}

std::map<UserKey, std::pair<double, double>> f_exec(const LoggedDataset& data, int window) {
  if (window < 1) throw ConfigError("f_exec: window must be at least one step");
  std::map<UserKey, std::pair<double, double>> out;
  for (const auto& [key, idx] : data.trajectories()) {
    if (idx.empty()) continue;
    const int last_t = data.rows[idx.back()].t;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t k : idx) {
      const auto& r = data.rows[k];
      if (r.t <= last_t - window) continue;
      lo = std::min(lo, r.action);
      hi = std::max(hi, r.action);
    }
    out[key] = {lo, hi};
  }
  return out;
}

double reward_percentile(const LoggedDataset& data, double percentile) {
  if (data.rows.empty()) throw ConfigError("reward_percentile: empty dataset");
  if (!(percentile >= 0.0 && percentile <= 100.0)) throw ConfigError("reward_percentile: percentile outside [0, 100]");
  std::vector<double> r;
  r.reserve(data.rows.size());
  for (const auto& row : data.rows) r.push_back(row.reward);
  std::sort(r.begin(), r.end());
  const double pos = percentile / 100.0 * static_cast<double>(r.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, r.size() - 1);
  return r[lo] + (pos - static_cast<double>(lo)) * (r[hi] - r[lo]);
}

// ---- learned environments ----------------------------------------------------------------------

LearnedVecEnv::LearnedVecEnv(std::shared_ptr<const Ensemble> ensemble, std::size_t member,
                             std::vector<std::vector<lts::Observation>> start_states, int horizon,
                             std::uint64_t noise_seed)
    : ens_(std::move(ensemble)),
      member_(member),
      starts_(std::move(start_states)),
      horizon_(horizon),
      noise_seed_(noise_seed) {
  if (!ens_ || member_ >= ens_->size()) throw ConfigError("LearnedVecEnv: member out of range");
  if (horizon_ < 1) throw ConfigError("LearnedVecEnv: horizon must be positive");
  for (const auto& s : starts_) {
    if (s.empty()) throw ConfigError("LearnedVecEnv: a user has no logged start state");
  }
}

std::vector<lts::Observation> LearnedVecEnv::reset(std::uint64_t seed) {
  episode_seed_ = stream_seed(noise_seed_, seed);
  state_.resize(starts_.size());
  for (std::size_t i = 0; i < starts_.size(); ++i) {
    SplitMix64 gen(stream_seed(episode_seed_, kTagStart, i));
    const auto pick = std::uniform_int_distribution<std::size_t>(0, starts_[i].size() - 1)(gen);
    state_[i] = starts_[i][pick];
  }
  t_ = 0;
  return state_;
}

std::vector<lts::Transition> LearnedVecEnv::step(std::span<const double> actions) {
  if (actions.size() != state_.size()) {
    throw ConfigError("LearnedVecEnv: expected " + std::to_string(state_.size()) + " actions, got " +
                      std::to_string(actions.size()));
  }
  const auto n = static_cast<Eigen::Index>(state_.size());
  Matrix in(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = actions[static_cast<std::size_t>(i)];
    if (std::isnan(a)) throw NumericError("NaN action for user " + std::to_string(i));
    in(i, 0) = state_[static_cast<std::size_t>(i)].sat;
    in(i, 1) = state_[static_cast<std::size_t>(i)].o;
    in(i, 2) = std::clamp(a, 0.0, 1.0);
  }
  Matrix mean, sd;
  ens_->member(member_).predict(in, &mean, &sd);
  std::vector<lts::Transition> out(state_.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    SplitMix64 gen(stream_seed(episode_seed_, kTagStep, u, static_cast<std::uint64_t>(t_)));
    const double r = mean(i, 0) + sd(i, 0) * standard_normal(gen);
    const double s = std::clamp(mean(i, 1) + sd(i, 1) * standard_normal(gen), kSatFloor, 1.0 - kSatFloor);
    lts::Transition& tr = out[u];
    tr.obs = state_[u];
    tr.action = in(i, 2);
    tr.engagement = r;
    tr.reward = r;
    tr.sat_next = s;
    tr.next_obs = {s, state_[u].o};
    // The T_c cap is a truncation, not a terminal state: the rollout stops at
    // horizon_ and bootstraps from the value of the state reached.
    tr.done = false;
    state_[u] = tr.next_obs;
  }
  ++t_;
  return out;
}

EnsembleSimulatorSet::EnsembleSimulatorSet(std::shared_ptr<const Ensemble> ensemble,
                                           const LoggedDataset& data, const EnsembleSetConfig& cfg)
    : ens_(std::move(ensemble)), cfg_(cfg) {
  if (!ens_ || ens_->size() == 0) throw ConfigError("ensemble simulator set: empty ensemble");
  if (cfg_.horizon < 1) throw ConfigError("ensemble simulator set: horizon must be positive");
  data.validate();
  groups_ = data.groups();
  if (groups_.empty()) throw ConfigError("ensemble simulator set: no logged groups");

  std::set<UserKey> removed;
  if (cfg_.trend_filter) {
    for (const auto& key : f_trend(*ens_, data, cfg_.grid).removed) removed.insert(key);
  }
  std::map<UserKey, std::pair<double, double>> bounds;
  if (cfg_.exec_filter) bounds = f_exec(data, cfg_.exec_window);

  std::map<int, std::size_t> slot;
  for (std::size_t g = 0; g < groups_.size(); ++g) slot[groups_[g]] = g;
  data_.resize(groups_.size());
  for (const auto& [key, idx] : data.trajectories()) {
    GroupData& gd = data_[slot.at(key.first)];
    gd.users.push_back(key);
    std::vector<lts::Observation> states;
    for (std::size_t k : idx) states.push_back({data.rows[k].sat, data.rows[k].o});
    gd.states.push_back(std::move(states));
    gd.removed.push_back(removed.count(key) ? 1 : 0);
    if (cfg_.exec_filter) gd.bounds.push_back(bounds.at(key));
  }
}

std::size_t EnsembleSimulatorSet::removed_users() const {
  std::size_t n = 0;
  for (const auto& g : data_) n += static_cast<std::size_t>(std::count(g.removed.begin(), g.removed.end(), 1));
  return n;
}

agent::SimInstance EnsembleSimulatorSet::make(std::size_t index, std::uint64_t seed) {
  if (index >= size()) throw ConfigError("ensemble simulator index out of range");
  const std::size_t member = index / groups_.size();
  const std::size_t g = index % groups_.size();
  const GroupData& gd = data_[g];
  agent::SimInstance inst;
  inst.env = std::make_unique<LearnedVecEnv>(ens_, member, gd.states, cfg_.horizon, seed);
  inst.index = index;
  inst.horizon = cfg_.horizon;
  if (cfg_.trend_filter) inst.removed = gd.removed;
  if (cfg_.exec_filter) inst.bounds = gd.bounds;
  std::shared_ptr<const Ensemble> ens = ens_;
  inst.penalty = [ens](std::span<const lts::Observation> obs, std::span<const double> acts) {
    Matrix in(static_cast<Eigen::Index>(obs.size()), 3);
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      in(k, 0) = obs[i].sat;
      in(k, 1) = obs[i].o;
      in(k, 2) = std::clamp(acts[i], 0.0, 1.0);
    }
    return ens->uncertainty(in);
  };
  return inst;
}

}  // namespace sim2rec::ens
